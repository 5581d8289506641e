//! In-context-learning sample construction: demo blocks from trajectory
//! pairs, (K demos + query) token matrices, timestamp dropout, the prompt
//! embedding stub, and the dataset generation protocol.

pub mod shard;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::{simulate_pair, NoiseStream, SimOptions, TrajectoryPair};
use crate::rng::{mix64, substream, RngStream, StreamRole};
use crate::sde::{SdeSystem, SystemId};

pub use shard::{read_shard, write_shard, NormStats, ShardData, ShardManifest, TrajectoryRecord};

/// Raw per-token feature vector: [t, noise(3), value(3), dim mask(3), dropout flag].
pub const FEATURE_DIM: usize = 11;
/// Predicted error components (padded to 3 dims).
pub const OUT_DIM: usize = 3;
/// Default prompt token count produced by the embedding stub.
pub const DEFAULT_PROMPT_TOKENS: usize = 8;

// ── Demo ─────────────────────────────────────────────────────────────────────

/// One trajectory's (time, noise, coarse value, error) block, padded to three
/// dimensions. Column `n` carries the aggregated increment of window
/// `[t_n, t_{n+1})`; the final column has no forward window and carries zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Demo {
    pub times: Vec<f64>,
    pub noise: Vec<[f64; 3]>,
    pub values: Vec<[f64; 3]>,
    pub err: Vec<[f64; 3]>,
    pub dim_mask: [bool; 3],
    pub state_dim: usize,
    /// Distinguishes parameter groups when known; demos mixed across groups
    /// are rejected at assembly time.
    pub params_fingerprint: Option<u64>,
}

impl Demo {
    pub fn n_cols(&self) -> usize {
        self.times.len()
    }
}

/// Map raw noise channels onto the (at most three) per-dimension demo rows.
/// Identity for every system except the predator-prey variant, whose
/// auxiliary reproduction channel is not tied to a single state dimension.
pub fn demo_channel_map(id: SystemId, noise_dim: usize) -> Vec<usize> {
    match id {
        SystemId::PredatorPreyVariant => vec![0, 1, 3],
        _ => (0..noise_dim.min(3)).collect(),
    }
}

/// Build the demo block of a simulated pair.
pub fn build_demo(pair: &TrajectoryPair) -> Result<Demo> {
    let sys = crate::sde::get(pair.system);
    let d = sys.state_dim;
    if d > 3 {
        return Err(Error::Dim(format!("demo supports at most 3 dims, got {d}")));
    }
    let n = pair.n_coarse();
    let h = pair.coarse_dt();
    let channels = demo_channel_map(pair.system, sys.noise_dim);

    let times: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let mut noise = vec![[0.0; 3]; n + 1];
    for i in 0..n {
        for (row, &ch) in channels.iter().enumerate() {
            noise[i][row] = pair.agg_noise[i][ch];
        }
    }
    let pad = |cols: &[Vec<f64>]| -> Vec<[f64; 3]> {
        cols.iter()
            .map(|c| {
                let mut out = [0.0; 3];
                out[..d].copy_from_slice(&c[..d]);
                out
            })
            .collect()
    };
    let mut dim_mask = [false; 3];
    for m in dim_mask.iter_mut().take(d) {
        *m = true;
    }
    Ok(Demo {
        times,
        noise,
        values: pad(&pair.coarse),
        err: pad(&pair.err),
        dim_mask,
        state_dim: d,
        params_fingerprint: None,
    })
}

/// CSV rendering of one demo: `n, t, dW1.., X1.., err1..` over valid dims.
pub fn demo_to_csv(demo: &Demo) -> String {
    let d = demo.state_dim;
    let mut out = String::from("n,t");
    for i in 0..d {
        out.push_str(&format!(",dW{}", i + 1));
    }
    for i in 0..d {
        out.push_str(&format!(",X{}", i + 1));
    }
    for i in 0..d {
        out.push_str(&format!(",err{}", i + 1));
    }
    out.push('\n');
    for n in 0..demo.n_cols() {
        out.push_str(&format!("{},{:e}", n, demo.times[n]));
        for i in 0..d {
            out.push_str(&format!(",{:e}", demo.noise[n][i]));
        }
        for i in 0..d {
            out.push_str(&format!(",{:e}", demo.values[n][i]));
        }
        for i in 0..d {
            out.push_str(&format!(",{:e}", demo.err[n][i]));
        }
        out.push('\n');
    }
    out
}

// ── ICL sample ───────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenCategory {
    Prompt,
    Cond,
    Err,
}

#[derive(Clone, Copy, Debug)]
pub struct TokenInfo {
    pub category: TokenCategory,
    /// Example index 0..=K (query = K). Zero for prompt tokens.
    pub example: usize,
    /// Column within the block (timestamp index), or prompt position.
    pub col: usize,
}

/// Assembled (K demos + query) token matrix with normalized features.
///
/// Token order: [prompt? | ex0 cond | ex0 err | ex1 cond | ex1 err | ...].
/// The query's err block is stored here like any other block, but the
/// attention mask never lets any scored position see it.
#[derive(Clone, Debug)]
pub struct IclSample {
    pub layout: Vec<TokenInfo>,
    /// Features per non-prompt token, in layout order.
    pub numeric: Vec<[f64; FEATURE_DIM]>,
    /// Embedded prompt vectors (P x d_model), when present.
    pub prompt: Option<Vec<Vec<f64>>>,
    /// Normalized err target per cond token, in cond-token order.
    pub cond_targets: Vec<[f64; OUT_DIM]>,
    /// Which cond tokens are scored by the loss.
    pub loss_mask: Vec<bool>,
    pub dim_mask: [bool; 3],
    pub k_demos: usize,
    pub n_cols: usize,
}

impl IclSample {
    pub fn token_count(&self) -> usize {
        self.layout.len()
    }

    /// Layout indices of cond tokens, in cond-token order.
    pub fn cond_token_indices(&self) -> Vec<usize> {
        self.layout
            .iter()
            .enumerate()
            .filter(|(_, t)| t.category == TokenCategory::Cond)
            .map(|(i, _)| i)
            .collect()
    }

    /// Cond-token index of `(example, col)`.
    pub fn cond_index(&self, example: usize, col: usize) -> usize {
        example * self.n_cols + col
    }
}

fn normalized_features(
    demo: &Demo,
    col: usize,
    category: TokenCategory,
    norm: &NormStats,
) -> [f64; FEATURE_DIM] {
    let mut f = [0.0; FEATURE_DIM];
    f[0] = demo.times[col] / norm.t_scale;
    for d in 0..3 {
        if demo.dim_mask[d] {
            f[1 + d] = demo.noise[col][d] / norm.noise_std[d];
            f[4 + d] = match category {
                TokenCategory::Cond => (demo.values[col][d] - norm.value_mean[d]) / norm.value_std[d],
                TokenCategory::Err => (demo.err[col][d] - norm.err_mean[d]) / norm.err_std[d],
                TokenCategory::Prompt => 0.0,
            };
            f[7 + d] = 1.0;
        }
    }
    f
}

/// Assemble K demos plus one query into a token matrix. The loss covers cond
/// positions of the second example onward; with a prompt attached, the first
/// example is scored too (zero-shot term).
pub fn assemble_icl_sample(
    demos: &[Demo],
    query: &Demo,
    prompt: Option<Vec<Vec<f64>>>,
    norm: &NormStats,
) -> Result<IclSample> {
    let n_cols = query.n_cols();
    let mut fingerprint: Option<u64> = query.params_fingerprint;
    for d in demos {
        if d.n_cols() != n_cols {
            return Err(Error::Dim(format!(
                "demo has {} columns, query has {n_cols}",
                d.n_cols()
            )));
        }
        if d.dim_mask != query.dim_mask {
            return Err(Error::Dim("demo/query dim masks differ".into()));
        }
        match (fingerprint, d.params_fingerprint) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::InvalidArg(
                    "demos drawn from different parameter groups".into(),
                ))
            }
            (None, Some(b)) => fingerprint = Some(b),
            _ => {}
        }
    }

    let k = demos.len();
    let mut layout = Vec::new();
    let mut numeric = Vec::new();
    let mut cond_targets = Vec::new();
    let mut loss_mask = Vec::new();

    if let Some(p) = &prompt {
        for col in 0..p.len() {
            layout.push(TokenInfo {
                category: TokenCategory::Prompt,
                example: 0,
                col,
            });
        }
    }

    let all: Vec<&Demo> = demos.iter().chain(std::iter::once(query)).collect();
    for (e, demo) in all.iter().enumerate() {
        for col in 0..n_cols {
            layout.push(TokenInfo {
                category: TokenCategory::Cond,
                example: e,
                col,
            });
            numeric.push(normalized_features(demo, col, TokenCategory::Cond, norm));
            let mut tgt = [0.0; OUT_DIM];
            for d in 0..3 {
                if demo.dim_mask[d] {
                    tgt[d] = (demo.err[col][d] - norm.err_mean[d]) / norm.err_std[d];
                }
            }
            cond_targets.push(tgt);
            loss_mask.push(e >= 1 || prompt.is_some());
        }
        for col in 0..n_cols {
            layout.push(TokenInfo {
                category: TokenCategory::Err,
                example: e,
                col,
            });
            numeric.push(normalized_features(demo, col, TokenCategory::Err, norm));
        }
    }

    Ok(IclSample {
        layout,
        numeric,
        prompt,
        cond_targets,
        loss_mask,
        dim_mask: query.dim_mask,
        k_demos: k,
        n_cols,
    })
}

/// Blank out the noise and value rows of randomly chosen cond columns (never
/// the query's first column), flag them, and drop them from the loss.
pub fn apply_timestamp_dropout(
    mut sample: IclSample,
    fraction: f64,
    rng: &mut RngStream,
) -> Result<IclSample> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArg(format!(
            "dropout fraction must be in [0, 1), got {fraction}"
        )));
    }
    if fraction == 0.0 {
        return Ok(sample);
    }
    let prompt_offset = sample.prompt.as_ref().map_or(0, |p| p.len());
    let query_example = sample.k_demos;
    let mut cond_seen = 0usize;
    for (i, tok) in sample.layout.iter().enumerate() {
        if tok.category != TokenCategory::Cond {
            continue;
        }
        let cond_idx = cond_seen;
        cond_seen += 1;
        if tok.example == query_example && tok.col == 0 {
            continue;
        }
        if rng.uniform01() < fraction {
            let feat = &mut sample.numeric[i - prompt_offset];
            for v in feat[1..7].iter_mut() {
                *v = 0.0;
            }
            feat[10] = 1.0;
            sample.loss_mask[cond_idx] = false;
        }
    }
    Ok(sample)
}

// ── Prompt embedding stub ────────────────────────────────────────────────────

/// Deterministic stand-in for a pretrained text encoder: hashes the text into
/// a substream and emits `count` vectors of size `dim`. The empty string maps
/// to all-zero vectors.
pub fn embed_prompt_stub(text: &str, count: usize, dim: usize) -> Vec<Vec<f64>> {
    if text.is_empty() {
        return vec![vec![0.0; dim]; count];
    }
    let mut h: u64 = 0x6a09_e667_f3bc_c908;
    for chunk in text.as_bytes().chunks(8) {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        h = mix64(h ^ u64::from_le_bytes(word));
    }
    let mut stream = substream(h, 0, StreamRole::PromptEmbed, text.len() as u64, 0, 0);
    let scale = 1.0 / (dim as f64).sqrt();
    (0..count)
        .map(|_| (0..dim).map(|_| stream.gauss() * scale).collect())
        .collect()
}

/// Short bundled description per system, used when training with prompts.
pub fn bundled_prompt(id: SystemId) -> &'static str {
    match id {
        SystemId::Gbm => {
            "One-dimensional growth process with multiplicative noise; the drift rate mu sets the trend and sigma the relative fluctuation strength. Paths stay positive and spread multiplicatively."
        }
        SystemId::Mueller => {
            "Overdamped particle in a two-dimensional four-term exponential potential landscape with isotropic thermal noise; beta is the inverse temperature. The state hops between metastable wells."
        }
        SystemId::PeriodicOscillator => {
            "Planar oscillator whose radial growth is modulated periodically in time; a single multiplicative noise channel scales with the state. Behavior ranges from tight cycles to large excursions."
        }
        SystemId::StochasticLorenz => {
            "Three-dimensional convection equations with additive noise on each coordinate; rho controls the transition from fixed points to chaotic cycling between two lobes."
        }
        SystemId::Ou => {
            "Linear mean-reverting process: theta pulls the state toward level mu at constant volatility sigma. Relaxation is exponential with rate theta."
        }
        SystemId::InhomogeneousOu => {
            "Mean-reverting process driven toward a sinusoidal target; the response oscillates at the forcing frequency omega with amplitude set by a and damping theta."
        }
        SystemId::DoubleWell => {
            "Overdamped diffusion in a symmetric quartic double well along the first coordinate with a harmonic second coordinate; beta sets how rarely the state crosses the barrier."
        }
        SystemId::CoupledDoubleWell => {
            "Overdamped diffusion in a quartic double well with a bilinear coupling term tilting the landscape; crossings correlate the two coordinates."
        }
        SystemId::Duffing => {
            "Second-order bistable oscillator with cubic stiffness, periodic forcing of amplitude gamma, and noise on the momentum only. Regimes include single-well motion, resonance, and chaos."
        }
        SystemId::PerturbedLimitCycle => {
            "Planar system with an attracting unit limit cycle, time-rescaled by the period; state-dependent noise acts through the products x1 x2 and x2 squared."
        }
        SystemId::PredatorPrey => {
            "Three-species population model (prey, juvenile and adult predators) with geometric noise on each species; s and g set role reversal and predation pressure."
        }
        SystemId::PredatorPreyVariant => {
            "Population model with role reversal plus an extra stochastic reproduction channel proportional to prey times adult predators; trajectories are noticeably rougher."
        }
        SystemId::Fluxgate => {
            "Ring of three magnetic cores, each relaxing toward a saturating response of its own field plus its neighbor's, driven by colored-noise states; c sets the nonlinearity gain."
        }
    }
}

// ── Dataset protocol ─────────────────────────────────────────────────────────

/// Scale of one generated dataset: parameters x initial conditions x noise
/// realizations, as in the evaluation protocol.
#[derive(Clone, Debug)]
pub struct ProtocolConfig {
    pub n_params: usize,
    pub n_ics: usize,
    pub n_noises: usize,
    /// Coarse steps per trajectory; system default if None.
    pub n_coarse: Option<usize>,
    /// Coarse stride; system default if None.
    pub stride_k: Option<usize>,
    pub base_seed: u64,
    pub max_retries: u32,
    pub parallel: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_params: 20,
            n_ics: 10,
            n_noises: 40,
            n_coarse: None,
            stride_k: None,
            base_seed: 0,
            max_retries: 20,
            parallel: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedSet {
    pub system: SystemId,
    pub records: Vec<TrajectoryRecord>,
    pub rejections: u64,
    pub n_coarse: usize,
    pub stride_k: usize,
    pub dt_fine: f64,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub param_names: Vec<String>,
    pub base_seed: u64,
    pub counts: (usize, usize, usize),
}

fn simulate_record(
    sys: &SdeSystem,
    cfg: &ProtocolConfig,
    n: usize,
    k: usize,
    p_idx: usize,
    i_idx: usize,
    w_idx: usize,
) -> Result<(TrajectoryRecord, u64)> {
    let params = sys.sample_params(&mut substream(
        cfg.base_seed,
        sys.id.tag(),
        StreamRole::Params,
        p_idx as u64,
        0,
        0,
    ));
    let x0 = sys.sample_initial(&mut substream(
        cfg.base_seed,
        sys.id.tag(),
        StreamRole::InitialCondition,
        p_idx as u64,
        i_idx as u64,
        0,
    ));
    let opts = SimOptions::default();
    let mut rejections = 0u64;
    for attempt in 0..=cfg.max_retries {
        // Resampling after a blow-up shifts to a fresh substream.
        let noise_key = w_idx as u64 + ((attempt as u64) << 32);
        let mut noise = NoiseStream::for_trajectory(
            cfg.base_seed,
            sys.id,
            sys.dt_fine,
            sys.noise_dim,
            p_idx as u64,
            i_idx as u64,
            noise_key,
        );
        match simulate_pair(sys, &params, &x0, &mut noise, n, k, &opts) {
            Ok(pair) => {
                let d = sys.state_dim;
                let q = sys.noise_dim;
                let flat_states = |cols: &[Vec<f64>]| -> Vec<f32> {
                    cols.iter().flat_map(|c| c.iter().map(|&v| v as f32)).collect()
                };
                let agg: Vec<f32> = pair
                    .agg_noise
                    .iter()
                    .flat_map(|c| c.iter().map(|&v| v as f32))
                    .collect();
                debug_assert_eq!(agg.len(), n * q);
                let rec = TrajectoryRecord {
                    param_idx: p_idx as u32,
                    ic_idx: i_idx as u32,
                    noise_idx: w_idx as u32,
                    params: params.values_sorted().iter().map(|&v| v as f32).collect(),
                    coarse: flat_states(&pair.coarse),
                    err: flat_states(&pair.err),
                    agg_noise: agg,
                };
                debug_assert_eq!(rec.coarse.len(), (n + 1) * d);
                return Ok((rec, rejections));
            }
            Err(Error::BlowUp { .. }) => {
                rejections += 1;
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidArg(format!(
        "{}: trajectory (param {p_idx}, ic {i_idx}, noise {w_idx}) rejected {} times",
        sys.id,
        cfg.max_retries + 1
    )))
}

/// Generate `params x ics x noises` trajectory records. Every trajectory owns
/// its substream, so parallel output equals serial output element-wise.
pub fn generate_dataset(sys: &SdeSystem, cfg: &ProtocolConfig) -> Result<GeneratedSet> {
    let n = cfg.n_coarse.unwrap_or(sys.horizon_steps_coarse);
    let k = cfg.stride_k.unwrap_or(sys.stride_k);
    let triples: Vec<(usize, usize, usize)> = (0..cfg.n_params)
        .flat_map(|p| (0..cfg.n_ics).flat_map(move |i| (0..cfg.n_noises).map(move |w| (p, i, w))))
        .collect();

    let results: Vec<Result<(TrajectoryRecord, u64)>> = if cfg.parallel {
        triples
            .par_iter()
            .map(|&(p, i, w)| simulate_record(sys, cfg, n, k, p, i, w))
            .collect()
    } else {
        triples
            .iter()
            .map(|&(p, i, w)| simulate_record(sys, cfg, n, k, p, i, w))
            .collect()
    };

    let mut records = Vec::with_capacity(triples.len());
    let mut rejections = 0u64;
    for r in results {
        let (rec, rej) = r?;
        rejections += rej;
        records.push(rec);
    }
    Ok(GeneratedSet {
        system: sys.id,
        records,
        rejections,
        n_coarse: n,
        stride_k: k,
        dt_fine: sys.dt_fine,
        state_dim: sys.state_dim,
        noise_dim: sys.noise_dim,
        param_names: sys.param_spec.iter().map(|r| r.name.clone()).collect(),
        base_seed: cfg.base_seed,
        counts: (cfg.n_params, cfg.n_ics, cfg.n_noises),
    })
}

/// Rebuild a demo block from a stored record.
pub fn demo_from_record(rec: &TrajectoryRecord, manifest: &ShardManifest) -> Demo {
    let d = manifest.state_dim;
    let q = manifest.noise_dim;
    let n = manifest.n_coarse;
    let h = manifest.stride_k as f64 * manifest.dt_fine;
    let channels = demo_channel_map(manifest.system, q);

    let times: Vec<f64> = (0..=n).map(|i| i as f64 * h).collect();
    let unflatten = |flat: &[f32]| -> Vec<[f64; 3]> {
        (0..=n)
            .map(|i| {
                let mut out = [0.0; 3];
                for dd in 0..d {
                    out[dd] = flat[i * d + dd] as f64;
                }
                out
            })
            .collect()
    };
    let mut noise = vec![[0.0; 3]; n + 1];
    for i in 0..n {
        for (row, &ch) in channels.iter().enumerate() {
            noise[i][row] = rec.agg_noise[i * q + ch] as f64;
        }
    }
    let mut dim_mask = [false; 3];
    for m in dim_mask.iter_mut().take(d) {
        *m = true;
    }
    Demo {
        times,
        noise,
        values: unflatten(&rec.coarse),
        err: unflatten(&rec.err),
        dim_mask,
        state_dim: d,
        params_fingerprint: Some(rec.param_idx as u64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::{self, ParamVector};

    fn tiny_pair() -> TrajectoryPair {
        let sys = sde::get(SystemId::Gbm);
        let p = ParamVector::from_pairs(&[("mu", 0.1), ("sigma", 0.2)]);
        let mut ns = NoiseStream::for_trajectory(21, sys.id, sys.dt_fine, 1, 0, 0, 0);
        simulate_pair(sys, &p, &[70.0], &mut ns, 2, 5, &SimOptions::default()).unwrap()
    }

    #[test]
    fn build_demo_transcribes_columns() {
        let pair = tiny_pair();
        let demo = build_demo(&pair).unwrap();
        assert_eq!(demo.n_cols(), 3);
        let h = pair.coarse_dt();
        assert_eq!(demo.times, vec![0.0, h, 2.0 * h]);
        // Column n carries the forward aggregated increment; the last column
        // has no forward window.
        assert_eq!(demo.noise[0][0], pair.agg_noise[0][0]);
        assert_eq!(demo.noise[1][0], pair.agg_noise[1][0]);
        assert_eq!(demo.noise[2], [0.0; 3]);
        for n in 0..3 {
            assert_eq!(demo.values[n][0], pair.coarse[n][0]);
            assert_eq!(demo.err[n][0], pair.err[n][0]);
            // Padded dims stay zero with mask off.
            assert_eq!(demo.values[n][1], 0.0);
            assert_eq!(demo.values[n][2], 0.0);
        }
        assert_eq!(demo.dim_mask, [true, false, false]);
        assert_eq!(demo.err[0], [0.0; 3]);
    }

    #[test]
    fn two_dim_demo_masks_third_dim() {
        let sys = sde::get(SystemId::DoubleWell);
        let p = ParamVector::from_pairs(&[("alpha", 0.3), ("beta", 10.0)]);
        let mut ns = NoiseStream::for_trajectory(22, sys.id, sys.dt_fine, 2, 0, 0, 0);
        let pair = simulate_pair(sys, &p, &[0.5, -0.5], &mut ns, 4, 10, &SimOptions::default()).unwrap();
        let demo = build_demo(&pair).unwrap();
        assert_eq!(demo.dim_mask, [true, true, false]);
        for col in &demo.noise {
            assert_eq!(col[2], 0.0);
        }
    }

    #[test]
    fn assemble_counts_tokens_and_masks() {
        let demo = build_demo(&tiny_pair()).unwrap();
        let norm = NormStats::identity(1.0);
        // K = 4 demos + query, N = 2 -> 5 * 2 * 3 = 30 tokens.
        let demos = vec![demo.clone(); 4];
        let s = assemble_icl_sample(&demos, &demo, None, &norm).unwrap();
        assert_eq!(s.token_count(), 30);
        assert_eq!(s.cond_targets.len(), 15);
        // First example unscored without a prompt.
        assert!(!s.loss_mask[0]);
        assert!(s.loss_mask[3]);

        // With a prompt the first example is scored (zero-shot term).
        let p = embed_prompt_stub("test prompt", 8, 16);
        let s = assemble_icl_sample(&[], &demo, Some(p), &norm).unwrap();
        assert_eq!(s.token_count(), 8 + 6);
        assert!(s.loss_mask.iter().all(|&b| b));

        // K = 0 without prompt: nothing scored.
        let s = assemble_icl_sample(&[], &demo, None, &norm).unwrap();
        assert!(s.loss_mask.iter().all(|&b| !b));
    }

    #[test]
    fn assemble_rejects_mixed_param_groups() {
        let mut a = build_demo(&tiny_pair()).unwrap();
        let mut b = a.clone();
        a.params_fingerprint = Some(1);
        b.params_fingerprint = Some(2);
        let norm = NormStats::identity(1.0);
        assert!(assemble_icl_sample(&[a], &b, None, &norm).is_err());
    }

    #[test]
    fn token_count_formula_holds_across_shapes() {
        let demo = build_demo(&tiny_pair()).unwrap();
        let norm = NormStats::identity(1.0);
        for k in 0..=4 {
            for prompt in [false, true] {
                let p = prompt.then(|| embed_prompt_stub("x", DEFAULT_PROMPT_TOKENS, 8));
                let demos = vec![demo.clone(); k];
                let s = assemble_icl_sample(&demos, &demo, p, &norm).unwrap();
                let expect =
                    (k + 1) * 2 * demo.n_cols() + if prompt { DEFAULT_PROMPT_TOKENS } else { 0 };
                assert_eq!(s.token_count(), expect);
            }
        }
    }

    #[test]
    fn dropout_zero_is_identity_and_dropout_is_deterministic() {
        let demo = build_demo(&tiny_pair()).unwrap();
        let norm = NormStats::identity(1.0);
        let demos = vec![demo.clone(); 4];
        let s = assemble_icl_sample(&demos, &demo, None, &norm).unwrap();

        let mut rng = substream(1, 0, StreamRole::Dropout, 0, 0, 0);
        let same = apply_timestamp_dropout(s.clone(), 0.0, &mut rng).unwrap();
        assert_eq!(same.numeric, s.numeric);
        assert_eq!(same.loss_mask, s.loss_mask);

        let mut r1 = substream(2, 0, StreamRole::Dropout, 7, 0, 0);
        let mut r2 = substream(2, 0, StreamRole::Dropout, 7, 0, 0);
        let d1 = apply_timestamp_dropout(s.clone(), 0.4, &mut r1).unwrap();
        let d2 = apply_timestamp_dropout(s.clone(), 0.4, &mut r2).unwrap();
        assert_eq!(d1.numeric, d2.numeric);
        assert_eq!(d1.loss_mask, d2.loss_mask);

        // Query's first column is never dropped.
        let qc = d1.cond_index(4, 0);
        let tok_idx = d1.cond_token_indices()[qc];
        assert_eq!(d1.numeric[tok_idx][10], 0.0);

        // Flagged columns have zeroed noise/value rows and are unscored.
        let mut flagged = 0;
        for (ci, &tok) in d1.cond_token_indices().iter().enumerate() {
            if d1.numeric[tok][10] == 1.0 {
                flagged += 1;
                assert!(d1.numeric[tok][1..7].iter().all(|&v| v == 0.0));
                assert!(!d1.loss_mask[ci]);
            }
        }
        assert!(flagged > 0);
    }

    #[test]
    fn dropout_expected_count_at_default_fraction() {
        // K = 4, N = 50: 255 cond columns, 254 candidates, expectation ~12.7.
        let sys = sde::get(SystemId::Ou);
        let p = ParamVector::from_pairs(&[("theta", 0.3), ("mu", 2.0), ("sigma", 0.2)]);
        let mut ns = NoiseStream::for_trajectory(31, sys.id, sys.dt_fine, 1, 0, 0, 0);
        let pair = simulate_pair(sys, &p, &[60.0], &mut ns, 50, 100, &SimOptions::default()).unwrap();
        let demo = build_demo(&pair).unwrap();
        let norm = NormStats::identity(5.0);
        let demos = vec![demo.clone(); 4];
        let s = assemble_icl_sample(&demos, &demo, None, &norm).unwrap();
        let mut total = 0usize;
        let reps = 40;
        for rep in 0..reps {
            let mut rng = substream(3, 0, StreamRole::Dropout, rep, 0, 0);
            let d = apply_timestamp_dropout(s.clone(), 0.05, &mut rng).unwrap();
            total += d
                .cond_token_indices()
                .iter()
                .filter(|&&tok| d.numeric[tok][10] == 1.0)
                .count();
        }
        let mean = total as f64 / reps as f64;
        assert!((8.0..18.0).contains(&mean), "mean flagged {mean}");
    }

    #[test]
    fn prompt_stub_is_deterministic_and_discriminating() {
        let a = embed_prompt_stub("", 8, 32);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|v| v.iter().all(|&x| x == 0.0)));

        let b1 = embed_prompt_stub(bundled_prompt(SystemId::Ou), 8, 32);
        let b2 = embed_prompt_stub(bundled_prompt(SystemId::Ou), 8, 32);
        assert_eq!(b1, b2);

        // Pairwise cosine similarity across the bundled corpus stays well below 1.
        let texts: Vec<&str> = crate::sde::ALL_SYSTEMS
            .iter()
            .map(|&id| bundled_prompt(id))
            .collect();
        for i in 0..texts.len() {
            for j in (i + 1)..texts.len() {
                let u = embed_prompt_stub(texts[i], 1, 64);
                let v = embed_prompt_stub(texts[j], 1, 64);
                let dot: f64 = u[0].iter().zip(&v[0]).map(|(a, b)| a * b).sum();
                let nu: f64 = u[0].iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv: f64 = v[0].iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(dot / (nu * nv) < 0.99, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn protocol_counts_and_parallel_serial_equality() {
        let sys = sde::get(SystemId::Ou);
        let cfg = ProtocolConfig {
            n_params: 3,
            n_ics: 2,
            n_noises: 4,
            n_coarse: Some(10),
            base_seed: 5,
            ..Default::default()
        };
        let par = generate_dataset(sys, &cfg).unwrap();
        assert_eq!(par.records.len(), 24);
        let serial = generate_dataset(
            sys,
            &ProtocolConfig {
                parallel: false,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(par.records, serial.records);
        assert_eq!(par.rejections, serial.rejections);
    }

    #[test]
    fn demo_csv_has_expected_header() {
        let demo = build_demo(&tiny_pair()).unwrap();
        let csv = demo_to_csv(&demo);
        assert!(csv.starts_with("n,t,dW1,X1,err1\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
