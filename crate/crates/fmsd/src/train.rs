//! AdamW with a warmup-cosine schedule and the in-context training loop.
//!
//! Every batch is derived from `(seed, step, slot)` substreams, so training is
//! bit-reproducible for a fixed seed and identical across worker counts: the
//! per-sample gradients are reduced in batch-slot order regardless of which
//! thread produced them.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::dataset::{
    apply_timestamp_dropout, assemble_icl_sample, bundled_prompt, demo_from_record,
    embed_prompt_stub, IclSample, ShardData, TokenCategory, TokenInfo, DEFAULT_PROMPT_TOKENS,
};
use crate::error::{Error, Result};
use crate::model::{
    build_attention_mask, forward, msd_loss_node, AttentionMask, CheckpointMeta, ModelParams,
};
use crate::rng::{substream, StreamRole};

// ── Learning-rate schedule ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Schedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

/// Linear warmup from zero to the peak, then cosine decay to zero. Steps past
/// the end clamp to the final value.
pub fn lr_at(step: u64, s: &Schedule) -> f64 {
    if s.total_steps == 0 {
        return 0.0;
    }
    let step = step.min(s.total_steps);
    if step < s.warmup_steps {
        return s.peak_lr * step as f64 / s.warmup_steps as f64;
    }
    let decay_len = (s.total_steps - s.warmup_steps).max(1);
    let progress = (step - s.warmup_steps) as f64 / decay_len as f64;
    s.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

// ── AdamW ────────────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct OptimState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub names: Vec<String>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<S: Scalar> OptimState<S> {
    pub fn new(params: &ModelParams<S>, weight_decay: f64) -> Self {
        let mut m = Vec::new();
        let mut v = Vec::new();
        let mut names = Vec::new();
        params.visit(|name, t| {
            m.push(Tensor::zeros(&t.shape));
            v.push(Tensor::zeros(&t.shape));
            names.push(name);
        });
        OptimState {
            m,
            v,
            names,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Decoupled-weight-decay Adam update of one tensor, with bias-corrected
/// moments. `t` is the post-increment step counter (1 on the first update).
#[allow(clippy::too_many_arguments)]
pub fn adamw_update_slice<S: Scalar>(
    p: &mut [S],
    g: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
) {
    let b1 = S::from_f64(beta1);
    let b2 = S::from_f64(beta2);
    let one_m_b1 = S::from_f64(1.0 - beta1);
    let one_m_b2 = S::from_f64(1.0 - beta2);
    let corr1 = S::from_f64(1.0 / (1.0 - beta1.powi(t as i32)));
    let corr2 = S::from_f64(1.0 / (1.0 - beta2.powi(t as i32)));
    let lr_s = S::from_f64(lr);
    let eps_s = S::from_f64(eps);
    let wd = S::from_f64(lr * weight_decay);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + one_m_b1 * g[i];
        v[i] = b2 * v[i] + one_m_b2 * g[i] * g[i];
        let mhat = m[i] * corr1;
        let vhat = v[i] * corr2;
        p[i] = p[i] - lr_s * (mhat / (vhat.sqrt() + eps_s)) - wd * p[i];
    }
}

/// Apply one AdamW step over all model tensors. Gradients are given in
/// canonical visit order; a non-finite gradient aborts with the tensor name.
pub fn adamw_step<S: Scalar>(
    params: &mut ModelParams<S>,
    grads: &[Vec<S>],
    opt: &mut OptimState<S>,
    lr: f64,
) -> Result<()> {
    if grads.len() != opt.m.len() {
        return Err(Error::Dim(format!(
            "{} gradients for {} tensors",
            grads.len(),
            opt.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite_s()) {
            return Err(Error::NonFiniteGrad(opt.names[i].clone()));
        }
    }
    opt.step += 1;
    let t = opt.step;
    let (beta1, beta2, eps, wd) = (opt.beta1, opt.beta2, opt.eps, opt.weight_decay);
    let mut idx = 0;
    let m = &mut opt.m;
    let v = &mut opt.v;
    params.visit_mut(|_, tensor| {
        adamw_update_slice(
            &mut tensor.data,
            &grads[idx],
            &mut m[idx].data,
            &mut v[idx].data,
            t,
            lr,
            beta1,
            beta2,
            eps,
            wd,
        );
        idx += 1;
    });
    Ok(())
}

/// Scale gradients down to a global L2 norm bound (no-op when under it).
pub fn clip_global_norm<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let mut total = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let x = v.to_f64();
            total += x * x;
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

// ── Training configuration ───────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub k_demos: usize,
    /// Fraction of samples carrying an embedded text prompt.
    pub prompt_probability: f64,
    pub seed: u64,
    pub dropout_fraction: f64,
    pub peak_lr: f64,
    /// Warmup length as a fraction of total steps.
    pub warmup_frac: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// 1 runs strictly serial (the determinism reference); more uses the
    /// thread pool with order-preserving reduction.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            steps_per_epoch: 2000,
            batch_size: 8,
            k_demos: 4,
            prompt_probability: 0.0,
            seed: 0,
            dropout_fraction: 0.05,
            peak_lr: 1e-4,
            warmup_frac: 0.05,
            weight_decay: 1e-4,
            clip_norm: 1.0,
            workers: 2,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }

    pub fn schedule(&self) -> Schedule {
        let total = self.total_steps();
        Schedule {
            peak_lr: self.peak_lr,
            warmup_steps: ((total as f64 * self.warmup_frac).round() as u64).max(1),
            total_steps: total,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps_per_epoch == 0 && self.epochs > 0 {
            return Err(Error::InvalidArg("batch size and steps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt_probability) {
            return Err(Error::InvalidArg(format!(
                "prompt probability {} outside [0, 1]",
                self.prompt_probability
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    pub msd: f64,
}

pub fn loss_curve_to_csv(points: &[LossPoint]) -> String {
    let mut out = String::from("step,lr,msd\n");
    for p in points {
        out.push_str(&format!("{},{:e},{:e}\n", p.step, p.lr, p.msd));
    }
    out
}

#[derive(Debug, Default)]
pub struct TrainOutput {
    pub loss_curve: Vec<LossPoint>,
}

// ── Batch sampling ───────────────────────────────────────────────────────────

/// Token layout for `(K, n_cols, prompt_len)` without building a sample.
pub fn layout_for(k_demos: usize, n_cols: usize, prompt_len: usize) -> Vec<TokenInfo> {
    let mut layout = Vec::new();
    for col in 0..prompt_len {
        layout.push(TokenInfo {
            category: TokenCategory::Prompt,
            example: 0,
            col,
        });
    }
    for e in 0..=k_demos {
        for col in 0..n_cols {
            layout.push(TokenInfo {
                category: TokenCategory::Cond,
                example: e,
                col,
            });
        }
        for col in 0..n_cols {
            layout.push(TokenInfo {
                category: TokenCategory::Err,
                example: e,
                col,
            });
        }
    }
    layout
}

struct ShardIndex<'a> {
    shard: &'a ShardData,
    groups: Vec<(u32, Vec<usize>)>,
}

fn index_shards<'a>(shards: &[&'a ShardData], k_demos: usize) -> Result<Vec<ShardIndex<'a>>> {
    let mut out = Vec::new();
    for &shard in shards {
        let groups: Vec<(u32, Vec<usize>)> = shard
            .param_groups()
            .into_iter()
            .filter(|(_, members)| members.len() >= k_demos + 1)
            .collect();
        if !groups.is_empty() {
            out.push(ShardIndex { shard, groups });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidArg(format!(
            "no parameter group holds {} trajectories",
            k_demos + 1
        )));
    }
    Ok(out)
}

fn build_training_sample(
    indexes: &[ShardIndex<'_>],
    cfg: &TrainConfig,
    d_model: usize,
    step: u64,
    slot: u64,
) -> Result<IclSample> {
    let mut rng = substream(cfg.seed, 0, StreamRole::TrainBatch, step, slot, 0);
    let si = (rng.next_u64() % indexes.len() as u64) as usize;
    let index = &indexes[si];
    let gi = (rng.next_u64() % index.groups.len() as u64) as usize;
    let members = &index.groups[gi].1;

    // Partial Fisher-Yates for k+1 distinct members.
    let mut pool: Vec<usize> = members.clone();
    let take = cfg.k_demos + 1;
    for i in 0..take {
        let j = i + (rng.next_u64() % (pool.len() - i) as u64) as usize;
        pool.swap(i, j);
    }
    let manifest = &index.shard.manifest;
    let demos: Vec<_> = pool[..cfg.k_demos]
        .iter()
        .map(|&ri| demo_from_record(&index.shard.records[ri], manifest))
        .collect();
    let query = demo_from_record(&index.shard.records[pool[cfg.k_demos]], manifest);

    let prompt = if rng.uniform01() < cfg.prompt_probability {
        Some(embed_prompt_stub(
            bundled_prompt(manifest.system),
            DEFAULT_PROMPT_TOKENS,
            d_model,
        ))
    } else {
        None
    };
    let sample = assemble_icl_sample(&demos, &query, prompt, &manifest.norm)?;
    let mut drop_rng = substream(cfg.seed, 0, StreamRole::Dropout, step, slot, 0);
    apply_timestamp_dropout(sample, cfg.dropout_fraction, &mut drop_rng)
}

// ── Training loop ────────────────────────────────────────────────────────────

fn masks_for(
    cfg: &TrainConfig,
    n_cols: usize,
) -> (AttentionMask, AttentionMask) {
    let plain = build_attention_mask(&layout_for(cfg.k_demos, n_cols, 0));
    let prompted = build_attention_mask(&layout_for(cfg.k_demos, n_cols, DEFAULT_PROMPT_TOKENS));
    (plain, prompted)
}

fn forward_backward(
    params: &ModelParams<f32>,
    sample: &IclSample,
    plain: &AttentionMask,
    prompted: &AttentionMask,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let mask = if sample.prompt.is_some() { prompted } else { plain };
    let mut pass = forward(params, sample, mask, true)?;
    let loss = msd_loss_node(&mut pass.tape, pass.predictions, sample)?;
    let loss_val = pass.tape.value(loss).data[0] as f64;
    pass.tape.backward(loss)?;
    let grads: Vec<Vec<f32>> = pass
        .param_leaves
        .iter()
        .map(|(_, id)| pass.tape.grad(*id).map(|g| g.to_vec()).unwrap_or_default())
        .collect();
    Ok((loss_val, grads))
}

/// Run optimization steps `start_step..end_step` (defaulting to the full
/// configured run); the warmup-cosine schedule always spans
/// `cfg.total_steps()`, so a run split across checkpoints matches an
/// uninterrupted one. The epoch hook fires at each epoch boundary. Loss
/// values are accumulated in f64.
pub fn train_loop(
    params: &mut ModelParams<f32>,
    opt: &mut OptimState<f32>,
    shards: &[&ShardData],
    cfg: &TrainConfig,
    start_step: u64,
    end_step: Option<u64>,
    mut epoch_hook: Option<&mut dyn FnMut(usize, &ModelParams<f32>, &OptimState<f32>) -> Result<()>>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if shards.is_empty() {
        return Err(Error::InvalidArg("no shards given".into()));
    }
    let indexes = index_shards(shards, cfg.k_demos)?;
    let n_cols = indexes[0].shard.manifest.n_coarse + 1;
    for idx in &indexes {
        if idx.shard.manifest.n_coarse + 1 != n_cols {
            return Err(Error::Dim("shards disagree on trajectory length".into()));
        }
    }
    let (plain, prompted) = masks_for(cfg, n_cols);
    let schedule = cfg.schedule();
    let d_model = params.config.d_model;

    let end = end_step.unwrap_or_else(|| cfg.total_steps()).min(cfg.total_steps());
    let mut output = TrainOutput::default();
    for step in start_step..end {
        let slots: Vec<u64> = (0..cfg.batch_size as u64).collect();
        let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = if cfg.workers <= 1 {
            slots
                .iter()
                .map(|&slot| {
                    let sample = build_training_sample(&indexes, cfg, d_model, step, slot)?;
                    forward_backward(params, &sample, &plain, &prompted)
                })
                .collect()
        } else {
            slots
                .par_iter()
                .map(|&slot| {
                    let sample = build_training_sample(&indexes, cfg, d_model, step, slot)?;
                    forward_backward(params, &sample, &plain, &prompted)
                })
                .collect()
        };

        // Reduce in slot order: identical result for any worker count.
        let mut mean_loss = 0.0f64;
        let mut grads: Option<Vec<Vec<f32>>> = None;
        for r in results {
            let (loss, g) = r?;
            mean_loss += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        for (x, &y) in a.iter_mut().zip(gi) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv_b = 1.0 / cfg.batch_size as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv_b;
            }
        }
        mean_loss /= cfg.batch_size as f64;

        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(step, &schedule);
        adamw_step(params, &grads, opt, lr)?;
        output.loss_curve.push(LossPoint {
            step,
            lr,
            msd: mean_loss,
        });

        let done = step + 1;
        if done % cfg.steps_per_epoch as u64 == 0 {
            if let Some(hook) = epoch_hook.as_mut() {
                hook((done / cfg.steps_per_epoch as u64) as usize, params, opt)?;
            }
        }
    }
    Ok(output)
}

/// Continue training a checkpointed model on a small dataset for a fixed
/// number of optimizer steps. `eval_hook` fires every 100 iterations and at
/// the end.
pub fn finetune(
    params: &mut ModelParams<f32>,
    shard: &ShardData,
    iters: u64,
    cfg: &TrainConfig,
    mut eval_hook: Option<&mut dyn FnMut(u64, &ModelParams<f32>) -> Result<()>>,
) -> Result<TrainOutput> {
    if iters == 0 {
        return Ok(TrainOutput::default());
    }
    let mut ft_cfg = cfg.clone();
    ft_cfg.epochs = 1;
    ft_cfg.steps_per_epoch = iters as usize;
    let mut opt = OptimState::new(params, ft_cfg.weight_decay);

    let indexes = index_shards(&[shard], ft_cfg.k_demos)?;
    let n_cols = indexes[0].shard.manifest.n_coarse + 1;
    let (plain, prompted) = masks_for(&ft_cfg, n_cols);
    let schedule = ft_cfg.schedule();
    let d_model = params.config.d_model;

    let mut output = TrainOutput::default();
    for step in 0..iters {
        let slots: Vec<u64> = (0..ft_cfg.batch_size as u64).collect();
        let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = slots
            .par_iter()
            .map(|&slot| {
                let sample = build_training_sample(&indexes, &ft_cfg, d_model, step, slot)?;
                forward_backward(params, &sample, &plain, &prompted)
            })
            .collect();
        let mut mean_loss = 0.0f64;
        let mut grads: Option<Vec<Vec<f32>>> = None;
        for r in results {
            let (loss, g) = r?;
            mean_loss += loss;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, gi) in acc.iter_mut().zip(&g) {
                        for (x, &y) in a.iter_mut().zip(gi) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv_b = 1.0 / ft_cfg.batch_size as f32;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= inv_b;
            }
        }
        mean_loss /= ft_cfg.batch_size as f64;
        clip_global_norm(&mut grads, ft_cfg.clip_norm);
        adamw_step(params, &grads, &mut opt, lr_at(step, &schedule))?;
        output.loss_curve.push(LossPoint {
            step,
            lr: lr_at(step, &schedule),
            msd: mean_loss,
        });
        if let Some(hook) = eval_hook.as_mut() {
            if (step + 1) % 100 == 0 || step + 1 == iters {
                hook(step + 1, params)?;
            }
        }
    }
    Ok(output)
}

// ── Checkpoint helpers (model + optimizer state) ────────────────────────────

/// Save model weights plus optimizer moments for exact resume.
pub fn save_train_checkpoint(
    path: &std::path::Path,
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
    opt: Option<&OptimState<f32>>,
) -> Result<()> {
    let mut extra: Vec<(String, &Tensor<f32>)> = Vec::new();
    if let Some(opt) = opt {
        for (i, name) in opt.names.iter().enumerate() {
            extra.push((format!("opt.m.{name}"), &opt.m[i]));
            extra.push((format!("opt.v.{name}"), &opt.v[i]));
        }
    }
    crate::model::save_checkpoint(path, params, meta, &extra)
}

/// Load a checkpoint and reconstruct optimizer state when moments are stored.
pub fn load_train_checkpoint(
    path: &std::path::Path,
    weight_decay: f64,
) -> Result<(ModelParams<f32>, CheckpointMeta, Option<OptimState<f32>>)> {
    let (params, meta, extra) = crate::model::load_checkpoint(path)?;
    if extra.is_empty() {
        return Ok((params, meta, None));
    }
    let mut opt = OptimState::new(&params, weight_decay);
    opt.step = meta.train_step;
    let mut found = 0;
    for (name, tensor) in extra {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            if let Some(i) = opt.names.iter().position(|n| n == rest) {
                opt.m[i] = tensor;
                found += 1;
            }
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            if let Some(i) = opt.names.iter().position(|n| n == rest) {
                opt.v[i] = tensor;
                found += 1;
            }
        }
    }
    if found != 2 * opt.names.len() {
        return Err(Error::Format(format!(
            "checkpoint optimizer state incomplete: {found} of {}",
            2 * opt.names.len()
        )));
    }
    Ok((params, meta, Some(opt)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_dataset, write_shard, ProtocolConfig};
    use crate::model::ModelConfig;
    use crate::sde::{self, SystemId};

    fn ou_shard(n_coarse: usize, n_params: usize, n_ics: usize, n_noises: usize) -> ShardData {
        let sys = sde::get(SystemId::Ou);
        let set = generate_dataset(
            sys,
            &ProtocolConfig {
                n_params,
                n_ics,
                n_noises,
                n_coarse: Some(n_coarse),
                base_seed: 41,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ou.fmsd");
        write_shard(&path, &set).unwrap();
        crate::dataset::read_shard(&path).unwrap()
    }

    fn micro_model(seed: u64) -> (ModelParams<f32>, ModelConfig) {
        let cfg = ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 16,
            d_ff: 32,
            max_examples: 3,
            max_prompt_tokens: 8,
            feature_dim: crate::dataset::FEATURE_DIM,
            out_dim: crate::dataset::OUT_DIM,
        };
        (ModelParams::<f32>::init(&cfg, seed).unwrap(), cfg)
    }

    #[test]
    fn schedule_endpoints_and_continuity() {
        let s = Schedule {
            peak_lr: 1e-4,
            warmup_steps: 100,
            total_steps: 1000,
        };
        assert_eq!(lr_at(0, &s), 0.0);
        assert!((lr_at(100, &s) - 1e-4).abs() < 1e-18);
        // Continuity at the boundary.
        let before = lr_at(99, &s);
        let at = lr_at(100, &s);
        assert!((at - before) < 2e-6 * s.peak_lr + 1e-6 * 1e-4 + 2e-6);
        // Midpoint of decay is half the peak.
        let mid = lr_at(100 + 450, &s);
        assert!((mid - 0.5e-4).abs() < 1e-9, "{mid}");
        // End and beyond clamp to zero.
        assert!(lr_at(1000, &s).abs() < 1e-20);
        assert!(lr_at(5000, &s).abs() < 1e-20);
    }

    #[test]
    fn adamw_hand_cases() {
        // Fresh state, g = 1: bias-corrected ratio is 1, so w drops by lr.
        let mut p = [1.0f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        adamw_update_slice(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0);
        assert!((p[0] - 0.9).abs() < 1e-7, "{}", p[0]);

        // Zero grad, zero decay: unchanged.
        let mut p = [0.5f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        adamw_update_slice(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8, 0.0);
        assert_eq!(p[0], 0.5);

        // Zero grad with decay: pure shrink by lr * wd * w.
        let mut p = [2.0f64];
        let mut m = [0.0f64];
        let mut v = [0.0f64];
        adamw_update_slice(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, 0.9, 0.999, 1e-8, 1e-4);
        assert!((p[0] - (2.0 - 0.1 * 1e-4 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn adamw_matches_scalar_reference() {
        // Independent reference implementation of decoupled-weight-decay Adam.
        let mut rng = substream(71, 0, StreamRole::Generic, 0, 0, 0);
        for traj in 0..100 {
            let lr = rng.uniform(1e-4, 1e-2);
            let wd = rng.uniform(0.0, 1e-2);
            let mut w = rng.uniform(-2.0, 2.0);
            let mut m = 0.0f64;
            let mut v = 0.0f64;
            let mut w2 = [w];
            let mut m2 = [0.0f64];
            let mut v2 = [0.0f64];
            for t in 1..=20u64 {
                let g: f64 = rng.uniform(-1.0, 1.0);
                // Reference update.
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mhat = m / (1.0 - 0.9f64.powi(t as i32));
                let vhat = v / (1.0 - 0.999f64.powi(t as i32));
                w = w - lr * mhat / (vhat.sqrt() + 1e-8) - lr * wd * w;

                adamw_update_slice(&mut w2, &[g], &mut m2, &mut v2, t, lr, 0.9, 0.999, 1e-8, wd);
                let rel = (w - w2[0]).abs() / (w.abs() + 1e-12);
                assert!(rel < 1e-10, "traj {traj} t {t}: {w} vs {}", w2[0]);
            }
        }
    }

    #[test]
    fn nan_gradient_reports_tensor_name() {
        let (mut params, _) = micro_model(1);
        let mut opt = OptimState::new(&params, 1e-4);
        let mut grads: Vec<Vec<f32>> = Vec::new();
        params.visit(|_, t| grads.push(vec![0.0; t.numel()]));
        grads[2][0] = f32::NAN; // "pos"
        match adamw_step(&mut params, &grads, &mut opt, 1e-4) {
            Err(Error::NonFiniteGrad(name)) => assert_eq!(name, "pos"),
            other => panic!("expected NonFiniteGrad, got {other:?}"),
        }
    }

    #[test]
    fn clip_rescales_only_above_bound() {
        let mut grads = vec![vec![3.0f64, 4.0]];
        let norm = clip_global_norm(&mut grads, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(grads[0], vec![3.0, 4.0]);
        let _ = clip_global_norm(&mut grads, 1.0);
        let new_norm: f64 = grads[0].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((new_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn training_is_reproducible_across_runs_and_workers() {
        let shard = ou_shard(6, 2, 2, 3);
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 4,
            batch_size: 2,
            k_demos: 2,
            seed: 9,
            workers: 1,
            ..Default::default()
        };
        let run = |workers: usize| -> Vec<u32> {
            let (mut params, _) = micro_model(2);
            let mut opt = OptimState::new(&params, cfg.weight_decay);
            let mut c = cfg.clone();
            c.workers = workers;
            train_loop(&mut params, &mut opt, &[&shard], &c, 0, None, None).unwrap();
            let mut bits = Vec::new();
            params.visit(|_, t| bits.extend(t.data.iter().map(|v| v.to_bits())));
            bits
        };
        let serial = run(1);
        let serial2 = run(1);
        let parallel = run(2);
        assert_eq!(serial, serial2);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let shard = ou_shard(6, 2, 2, 3);
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 6,
            batch_size: 2,
            k_demos: 2,
            seed: 13,
            workers: 1,
            ..Default::default()
        };

        // Uninterrupted.
        let (mut p_full, model_cfg) = micro_model(3);
        let mut opt_full = OptimState::new(&p_full, cfg.weight_decay);
        let full = train_loop(&mut p_full, &mut opt_full, &[&shard], &cfg, 0, None, None).unwrap();

        // Three steps, checkpoint, reload, three more.
        let (mut p_half, _) = micro_model(3);
        let mut opt_half = OptimState::new(&p_half, cfg.weight_decay);
        let first = train_loop(&mut p_half, &mut opt_half, &[&shard], &cfg, 0, Some(3), None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resume.fmck");
        let mut meta = CheckpointMeta::new(model_cfg);
        meta.train_step = 3;
        save_train_checkpoint(&path, &p_half, &meta, Some(&opt_half)).unwrap();
        let (mut p_res, meta2, opt_res) = load_train_checkpoint(&path, cfg.weight_decay).unwrap();
        let mut opt_res = opt_res.unwrap();
        assert_eq!(meta2.train_step, 3);
        let rest = train_loop(&mut p_res, &mut opt_res, &[&shard], &cfg, 3, None, None).unwrap();

        // Loss curves agree step for step.
        let stitched: Vec<LossPoint> = first
            .loss_curve
            .iter()
            .chain(rest.loss_curve.iter())
            .copied()
            .collect();
        assert_eq!(stitched.len(), full.loss_curve.len());
        for (a, b) in stitched.iter().zip(&full.loss_curve) {
            assert_eq!(a.msd.to_bits(), b.msd.to_bits(), "step {}", b.step);
        }
        // Final weights agree bit for bit.
        let mut bits_a = Vec::new();
        p_res.visit(|_, t| bits_a.extend(t.data.iter().map(|v| v.to_bits())));
        let mut bits_b = Vec::new();
        p_full.visit(|_, t| bits_b.extend(t.data.iter().map(|v| v.to_bits())));
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn finetune_zero_iters_is_identity_and_counts_steps() {
        let shard = ou_shard(6, 2, 2, 3);
        let (mut params, _) = micro_model(4);
        let before: Vec<u32> = {
            let mut bits = Vec::new();
            params.visit(|_, t| bits.extend(t.data.iter().map(|v| v.to_bits())));
            bits
        };
        let cfg = TrainConfig {
            batch_size: 2,
            k_demos: 2,
            seed: 5,
            ..Default::default()
        };
        let out = finetune(&mut params, &shard, 0, &cfg, None).unwrap();
        assert!(out.loss_curve.is_empty());
        let after: Vec<u32> = {
            let mut bits = Vec::new();
            params.visit(|_, t| bits.extend(t.data.iter().map(|v| v.to_bits())));
            bits
        };
        assert_eq!(before, after);

        let mut evals = Vec::new();
        let mut hook = |step: u64, _: &ModelParams<f32>| {
            evals.push(step);
            Ok(())
        };
        let out = finetune(&mut params, &shard, 205, &cfg, Some(&mut hook)).unwrap();
        assert_eq!(out.loss_curve.len(), 205);
        assert_eq!(evals, vec![100, 200, 205]);
    }

    #[test]
    fn tiny_smoke_training_reduces_loss() {
        let shard = ou_shard(10, 3, 3, 6);
        let (mut params, _) = micro_model(6);
        let cfg = TrainConfig {
            epochs: 1,
            steps_per_epoch: 150,
            batch_size: 4,
            k_demos: 2,
            seed: 3,
            peak_lr: 3e-3,
            dropout_fraction: 0.0,
            workers: 2,
            ..Default::default()
        };
        let mut opt = OptimState::new(&params, cfg.weight_decay);
        let out = train_loop(&mut params, &mut opt, &[&shard], &cfg, 0, None, None).unwrap();
        let head: f64 =
            out.loss_curve[..20].iter().map(|p| p.msd).sum::<f64>() / 20.0;
        let tail: f64 = out.loss_curve[out.loss_curve.len() - 20..]
            .iter()
            .map(|p| p.msd)
            .sum::<f64>()
            / 20.0;
        assert!(
            tail < 0.6 * head,
            "training did not reduce loss: head {head:.4} tail {tail:.4}"
        );
    }

    #[test]
    fn loss_curve_csv_shape() {
        let csv = loss_curve_to_csv(&[LossPoint {
            step: 0,
            lr: 1e-4,
            msd: 0.5,
        }]);
        assert!(csv.starts_with("step,lr,msd\n0,"));
    }
}
