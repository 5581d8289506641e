//! Evaluation suite: averaged-maximum and maximum-averaged differences, MAE,
//! RMSE, error histograms, and normalized runtime accounting over batches of
//! trajectories indexed by (equation, noise realization, timestamp, dim).

use std::time::Instant;

use rayon::prelude::*;

use crate::correct::{correct_block, Corrector, QueryCond};
use crate::dataset::{demo_from_record, Demo, ShardData};
use crate::error::{Error, Result};
use crate::integrate::{simulate_path, NoiseStream, SimOptions};
use crate::rng::{substream, StreamRole};
use crate::sde::{ParamVector, SdeSystem, SystemId};

// ── Trajectory batches ───────────────────────────────────────────────────────

/// Dense `(n_eq, m, n_time, dim)` array of trajectory values.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajBatch {
    pub n_eq: usize,
    pub m: usize,
    pub n_time: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TrajBatch {
    pub fn zeros(n_eq: usize, m: usize, n_time: usize, dim: usize) -> Self {
        TrajBatch {
            n_eq,
            m,
            n_time,
            dim,
            data: vec![0.0; n_eq * m * n_time * dim],
        }
    }

    #[inline]
    fn idx(&self, i: usize, w: usize, j: usize, d: usize) -> usize {
        ((i * self.m + w) * self.n_time + j) * self.dim + d
    }

    #[inline]
    pub fn at(&self, i: usize, w: usize, j: usize, d: usize) -> f64 {
        self.data[self.idx(i, w, j, d)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, w: usize, j: usize, d: usize, v: f64) {
        let idx = self.idx(i, w, j, d);
        self.data[idx] = v;
    }

    fn same_shape(&self, other: &TrajBatch, op: &'static str) -> Result<()> {
        if (self.n_eq, self.m, self.n_time, self.dim)
            != (other.n_eq, other.m, other.n_time, other.dim)
        {
            return Err(Error::Shape {
                op,
                lhs: vec![self.n_eq, self.m, self.n_time, self.dim],
                rhs: vec![other.n_eq, other.m, other.n_time, other.dim],
            });
        }
        if self.n_eq == 0 || self.m == 0 {
            return Err(Error::InvalidArg("empty batch".into()));
        }
        Ok(())
    }
}

/// How per-timestamp multi-dim differences collapse to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Euclidean norm over dims (default).
    Euclid,
    /// Max of absolute per-dim values.
    PerDimMax,
}

fn collapse(norm: NormKind, v: &[f64]) -> f64 {
    match norm {
        NormKind::Euclid => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        NormKind::PerDimMax => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
    }
}

// ── The four metrics ─────────────────────────────────────────────────────────

/// Averaged maximum difference: per trajectory, the worst per-timestamp
/// difference; averaged over realizations, then over equations.
pub fn amd(pred: &TrajBatch, reference: &TrajBatch, norm: NormKind) -> Result<f64> {
    pred.same_shape(reference, "amd")?;
    let mut acc_eq = 0.0;
    let mut diff = vec![0.0; pred.dim];
    for i in 0..pred.n_eq {
        let mut acc_w = 0.0;
        for w in 0..pred.m {
            let mut worst = 0.0f64;
            for j in 0..pred.n_time {
                for d in 0..pred.dim {
                    diff[d] = pred.at(i, w, j, d) - reference.at(i, w, j, d);
                }
                worst = worst.max(collapse(norm, &diff));
            }
            acc_w += worst;
        }
        acc_eq += acc_w / pred.m as f64;
    }
    Ok(acc_eq / pred.n_eq as f64)
}

/// Maximum averaged difference: realization means first, per-dim; their
/// difference collapsed per timestamp, averaged over equations, worst
/// timestamp taken last.
pub fn mad(pred: &TrajBatch, reference: &TrajBatch, norm: NormKind) -> Result<f64> {
    pred.same_shape(reference, "mad")?;
    let mut worst = 0.0f64;
    let mut diff = vec![0.0; pred.dim];
    for j in 0..pred.n_time {
        let mut acc_eq = 0.0;
        for i in 0..pred.n_eq {
            for d in 0..pred.dim {
                let mut mp = 0.0;
                let mut mr = 0.0;
                for w in 0..pred.m {
                    mp += pred.at(i, w, j, d);
                    mr += reference.at(i, w, j, d);
                }
                diff[d] = (mp - mr) / pred.m as f64;
            }
            acc_eq += collapse(norm, &diff);
        }
        worst = worst.max(acc_eq / pred.n_eq as f64);
    }
    Ok(worst)
}

/// Mean absolute error: Euclidean norm over the flattened (time, dim) axes of
/// each trajectory, averaged over realizations and equations.
pub fn mae(pred: &TrajBatch, reference: &TrajBatch) -> Result<f64> {
    pred.same_shape(reference, "mae")?;
    let mut acc = 0.0;
    for i in 0..pred.n_eq {
        for w in 0..pred.m {
            let mut sq = 0.0;
            for j in 0..pred.n_time {
                for d in 0..pred.dim {
                    let e = pred.at(i, w, j, d) - reference.at(i, w, j, d);
                    sq += e * e;
                }
            }
            acc += sq.sqrt();
        }
    }
    Ok(acc / (pred.n_eq * pred.m) as f64)
}

/// Root mean squared error: root of the mean of squared flattened norms.
pub fn rmse(pred: &TrajBatch, reference: &TrajBatch) -> Result<f64> {
    pred.same_shape(reference, "rmse")?;
    let mut acc = 0.0;
    for i in 0..pred.n_eq {
        for w in 0..pred.m {
            let mut sq = 0.0;
            for j in 0..pred.n_time {
                for d in 0..pred.dim {
                    let e = pred.at(i, w, j, d) - reference.at(i, w, j, d);
                    sq += e * e;
                }
            }
            acc += sq;
        }
    }
    Ok((acc / (pred.n_eq * pred.m) as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub amd: f64,
    pub mad: f64,
}

pub fn metric_set(pred: &TrajBatch, reference: &TrajBatch, norm: NormKind) -> Result<MetricSet> {
    Ok(MetricSet {
        mae: mae(pred, reference)?,
        rmse: rmse(pred, reference)?,
        amd: amd(pred, reference, norm)?,
        mad: mad(pred, reference, norm)?,
    })
}

/// CSV rows `system,method,mae,rmse,amd,mad`.
pub fn metrics_csv(rows: &[(SystemId, &str, MetricSet)]) -> String {
    let mut out = String::from("system,method,mae,rmse,amd,mad\n");
    for (system, method, m) in rows {
        out.push_str(&format!(
            "{},{},{:e},{:e},{:e},{:e}\n",
            system, method, m.mae, m.rmse, m.amd, m.mad
        ));
    }
    out
}

// ── Histograms ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + b as f64 * width, self.lo + (b + 1) as f64 * width)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        for b in 0..self.counts.len() {
            let (lo, hi) = self.bin_edges(b);
            out.push_str(&format!("{lo:e},{hi:e},{}\n", self.counts[b]));
        }
        out
    }
}

/// Bin the signed per-dim differences of two batches.
pub fn error_histogram(pred: &TrajBatch, reference: &TrajBatch, bins: usize) -> Result<Histogram> {
    pred.same_shape(reference, "histogram")?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let diffs: Vec<f64> = pred
        .data
        .iter()
        .zip(&reference.data)
        .map(|(p, r)| p - r)
        .collect();
    for &d in &diffs {
        lo = lo.min(d);
        hi = hi.max(d);
    }
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::NonFinite("histogram input".into()));
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    for &d in &diffs {
        let b = (((d - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}

// ── Shard evaluation ─────────────────────────────────────────────────────────

/// Coarse-vs-fine and corrected-vs-fine metrics over a test shard.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub system: SystemId,
    pub n_eq: usize,
    pub m: usize,
    pub n_time: usize,
    pub coarse: MetricSet,
    pub corrected: MetricSet,
    pub histogram_coarse: Histogram,
    pub histogram_corrected: Histogram,
}

/// Evaluate a corrector on every trajectory of a shard, holding out the first
/// initial condition of each parameter group as the demo pool. Equations are
/// (param, ic) pairs; realizations are noise indices.
pub fn evaluate_correction(
    shard: &ShardData,
    corrector: &dyn Corrector,
    k_demos: usize,
) -> Result<EvalReport> {
    let man = &shard.manifest;
    let d = man.state_dim;
    let n_time = man.n_coarse + 1;

    // Demo pool: ic 0 of each param group, by noise index.
    let mut demo_pool: std::collections::BTreeMap<u32, Vec<Demo>> = Default::default();
    for rec in &shard.records {
        if rec.ic_idx == 0 {
            let pool = demo_pool.entry(rec.param_idx).or_default();
            if pool.len() < k_demos {
                pool.push(demo_from_record(rec, man));
            }
        }
    }
    for (p, pool) in &demo_pool {
        if pool.len() < k_demos {
            return Err(Error::InvalidArg(format!(
                "param group {p}: demo pool holds {} trajectories, need {k_demos}",
                pool.len()
            )));
        }
    }

    // Queries: everything with ic >= 1, grouped into (param, ic) equations.
    let mut equations: std::collections::BTreeMap<(u32, u32), Vec<usize>> = Default::default();
    for (ri, rec) in shard.records.iter().enumerate() {
        if rec.ic_idx >= 1 {
            equations.entry((rec.param_idx, rec.ic_idx)).or_default().push(ri);
        }
    }
    if equations.is_empty() {
        return Err(Error::InvalidArg(
            "shard has no queries beyond the demo pool (needs >= 2 initial conditions)".into(),
        ));
    }
    let m = equations.values().next().unwrap().len();
    for ((p, ic), members) in &equations {
        if members.len() != m {
            return Err(Error::Dim(format!(
                "equation ({p}, {ic}) has {} realizations, expected {m}",
                members.len()
            )));
        }
    }
    let n_eq = equations.len();

    let jobs: Vec<(usize, usize, usize)> = equations
        .values()
        .enumerate()
        .flat_map(|(i, members)| {
            members
                .iter()
                .enumerate()
                .map(move |(w, &ri)| (i, w, ri))
        })
        .collect();

    let results: Vec<Result<(usize, usize, Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<[f64; 3]>)>> = jobs
        .par_iter()
        .map(|&(i, w, ri)| {
            let rec = &shard.records[ri];
            let demo_block = demo_from_record(rec, man);
            let query = QueryCond::from_demo(&demo_block);
            let demos = &demo_pool[&rec.param_idx];
            let result = correct_block(corrector, demos, &query)?;
            // Fine reference: coarse + true err.
            let fine: Vec<[f64; 3]> = (0..n_time)
                .map(|j| {
                    let mut row = [0.0; 3];
                    for dd in 0..d {
                        row[dd] = demo_block.values[j][dd] + demo_block.err[j][dd];
                    }
                    row
                })
                .collect();
            Ok((i, w, demo_block.values.clone(), result.corrected, fine))
        })
        .collect();

    let mut coarse_b = TrajBatch::zeros(n_eq, m, n_time, d);
    let mut corrected_b = TrajBatch::zeros(n_eq, m, n_time, d);
    let mut fine_b = TrajBatch::zeros(n_eq, m, n_time, d);
    for r in results {
        let (i, w, coarse, corrected, fine) = r?;
        for j in 0..n_time {
            for dd in 0..d {
                coarse_b.set(i, w, j, dd, coarse[j][dd]);
                corrected_b.set(i, w, j, dd, corrected[j][dd]);
                fine_b.set(i, w, j, dd, fine[j][dd]);
            }
        }
    }

    Ok(EvalReport {
        system: man.system,
        n_eq,
        m,
        n_time,
        coarse: metric_set(&coarse_b, &fine_b, NormKind::Euclid)?,
        corrected: metric_set(&corrected_b, &fine_b, NormKind::Euclid)?,
        histogram_coarse: error_histogram(&coarse_b, &fine_b, 41)?,
        histogram_corrected: error_histogram(&corrected_b, &fine_b, 41)?,
    })
}

// ── Runtime accounting ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct RuntimeReport {
    pub fine_seconds: f64,
    pub coarse_seconds: f64,
    pub corrected_seconds: f64,
    pub n_trajectories: usize,
}

impl RuntimeReport {
    /// (fine, coarse, coarse+correction) with the coarse column at exactly 1.
    pub fn normalized(&self) -> (f64, f64, f64) {
        (
            self.fine_seconds / self.coarse_seconds,
            1.0,
            self.corrected_seconds / self.coarse_seconds,
        )
    }

    pub fn to_csv(&self) -> String {
        let (f, c, x) = self.normalized();
        let mut out = String::from("method,seconds,normalized\n");
        out.push_str(&format!("fine,{:e},{f:e}\n", self.fine_seconds));
        out.push_str(&format!("coarse,{:e},{c:e}\n", self.coarse_seconds));
        out.push_str(&format!("coarse_plus_correction,{:e},{x:e}\n", self.corrected_seconds));
        out
    }
}

/// Wall-clock comparison of fine simulation, coarse simulation, and coarse
/// simulation followed by correction, over `ics x noises` trajectories of one
/// system. Demos are prepared outside the timed region.
#[allow(clippy::too_many_arguments)]
pub fn runtime_report(
    sys: &SdeSystem,
    params: &ParamVector,
    n_ics: usize,
    m_noises: usize,
    n_coarse: usize,
    stride_k: usize,
    corrector: &dyn Corrector,
    demos: &[Demo],
    seed: u64,
) -> Result<RuntimeReport> {
    let opts = SimOptions::default();
    let h = stride_k as f64 * sys.dt_fine;
    let ics: Vec<Vec<f64>> = (0..n_ics)
        .map(|i| {
            sys.sample_initial(&mut substream(
                seed,
                sys.id.tag(),
                StreamRole::InitialCondition,
                0,
                i as u64,
                0,
            ))
        })
        .collect();

    // Fine generation.
    let t0 = Instant::now();
    for (i, x0) in ics.iter().enumerate() {
        for w in 0..m_noises {
            let mut ns = NoiseStream::for_trajectory(
                seed,
                sys.id,
                sys.dt_fine,
                sys.noise_dim,
                1,
                i as u64,
                w as u64,
            );
            simulate_path(sys, params, x0, &mut ns, n_coarse * stride_k, &opts)?;
        }
    }
    let fine_seconds = t0.elapsed().as_secs_f64();

    // Coarse generation (fresh increments at the coarse step).
    let t1 = Instant::now();
    for (i, x0) in ics.iter().enumerate() {
        for w in 0..m_noises {
            let mut ns = NoiseStream::new(
                substream(seed, sys.id.tag(), StreamRole::Noise, 2, i as u64, w as u64),
                h,
                sys.noise_dim,
            );
            simulate_path(sys, params, x0, &mut ns, n_coarse, &opts)?;
        }
    }
    let coarse_seconds = t1.elapsed().as_secs_f64();

    // Coarse generation plus correction.
    let channel_map = crate::dataset::demo_channel_map(sys.id, sys.noise_dim);
    let t2 = Instant::now();
    for (i, x0) in ics.iter().enumerate() {
        for w in 0..m_noises {
            let mut ns = NoiseStream::new(
                substream(seed, sys.id.tag(), StreamRole::Noise, 2, i as u64, w as u64),
                h,
                sys.noise_dim,
            );
            let (path, incr) = simulate_path(sys, params, x0, &mut ns, n_coarse, &opts)?;
            let mut dim_mask = [false; 3];
            for mm in dim_mask.iter_mut().take(sys.state_dim) {
                *mm = true;
            }
            let mut noise = vec![[0.0; 3]; n_coarse + 1];
            for (j, row) in incr.iter().enumerate() {
                for (slot, &ch) in channel_map.iter().enumerate() {
                    noise[j][slot] = row[ch];
                }
            }
            let values: Vec<[f64; 3]> = path
                .iter()
                .map(|p| {
                    let mut v = [0.0; 3];
                    v[..sys.state_dim].copy_from_slice(&p[..sys.state_dim]);
                    v
                })
                .collect();
            let query = QueryCond {
                times: (0..=n_coarse).map(|j| j as f64 * h).collect(),
                noise,
                values,
                dim_mask,
                state_dim: sys.state_dim,
            };
            correct_block(corrector, demos, &query)?;
        }
    }
    let corrected_seconds = t2.elapsed().as_secs_f64();

    Ok(RuntimeReport {
        fine_seconds,
        coarse_seconds,
        corrected_seconds,
        n_trajectories: n_ics * m_noises,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correct::ZeroCorrector;
    use crate::dataset::{generate_dataset, write_shard, ProtocolConfig};
    use crate::rng::RngStream;
    use crate::sde;

    fn rand_batch(rng: &mut RngStream, n_eq: usize, m: usize, j: usize, d: usize) -> TrajBatch {
        let mut b = TrajBatch::zeros(n_eq, m, j, d);
        for v in b.data.iter_mut() {
            *v = rng.uniform(-2.0, 2.0);
        }
        b
    }

    // Independent brute-force implementations used as oracles.
    fn amd_brute(p: &TrajBatch, r: &TrajBatch) -> f64 {
        let mut total = 0.0;
        for i in 0..p.n_eq {
            let mut per_w = 0.0;
            for w in 0..p.m {
                let mut worst: f64 = 0.0;
                for j in 0..p.n_time {
                    let mut sq = 0.0;
                    for d in 0..p.dim {
                        let e = p.at(i, w, j, d) - r.at(i, w, j, d);
                        sq += e * e;
                    }
                    worst = worst.max(sq.sqrt());
                }
                per_w += worst;
            }
            total += per_w / p.m as f64;
        }
        total / p.n_eq as f64
    }

    fn mad_brute(p: &TrajBatch, r: &TrajBatch) -> f64 {
        let mut worst: f64 = 0.0;
        for j in 0..p.n_time {
            let mut total = 0.0;
            for i in 0..p.n_eq {
                let mut sq = 0.0;
                for d in 0..p.dim {
                    let mut mp = 0.0;
                    let mut mr = 0.0;
                    for w in 0..p.m {
                        mp += p.at(i, w, j, d) / p.m as f64;
                        mr += r.at(i, w, j, d) / p.m as f64;
                    }
                    sq += (mp - mr) * (mp - mr);
                }
                total += sq.sqrt();
            }
            worst = worst.max(total / p.n_eq as f64);
        }
        worst
    }

    fn mae_brute(p: &TrajBatch, r: &TrajBatch) -> f64 {
        let mut total = 0.0;
        for i in 0..p.n_eq {
            for w in 0..p.m {
                let mut sq = 0.0;
                for j in 0..p.n_time {
                    for d in 0..p.dim {
                        let e = p.at(i, w, j, d) - r.at(i, w, j, d);
                        sq += e * e;
                    }
                }
                total += sq.sqrt();
            }
        }
        total / (p.n_eq * p.m) as f64
    }

    fn rmse_brute(p: &TrajBatch, r: &TrajBatch) -> f64 {
        let mut total = 0.0;
        for i in 0..p.n_eq {
            for w in 0..p.m {
                let mut sq = 0.0;
                for j in 0..p.n_time {
                    for d in 0..p.dim {
                        let e = p.at(i, w, j, d) - r.at(i, w, j, d);
                        sq += e * e;
                    }
                }
                total += sq;
            }
        }
        (total / (p.n_eq * p.m) as f64).sqrt()
    }

    #[test]
    fn amd_and_mad_hand_case() {
        // Single trajectory, 1D: X_hat = [1,2,3], X = [1,1,1].
        let mut pred = TrajBatch::zeros(1, 1, 3, 1);
        let mut refr = TrajBatch::zeros(1, 1, 3, 1);
        for (j, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            pred.set(0, 0, j, 0, *v);
            refr.set(0, 0, j, 0, 1.0);
        }
        assert_eq!(amd(&pred, &refr, NormKind::Euclid).unwrap(), 2.0);
        assert_eq!(mad(&pred, &refr, NormKind::Euclid).unwrap(), 2.0);
        assert_eq!(amd(&pred, &pred, NormKind::Euclid).unwrap(), 0.0);
        assert_eq!(mad(&pred, &pred, NormKind::Euclid).unwrap(), 0.0);
    }

    #[test]
    fn opposite_errors_cancel_in_mad_but_not_amd() {
        // Two realizations with errors +e and -e at every stamp.
        let e = 0.75;
        let mut pred = TrajBatch::zeros(1, 2, 4, 1);
        let refr = TrajBatch::zeros(1, 2, 4, 1);
        for j in 0..4 {
            pred.set(0, 0, j, 0, e);
            pred.set(0, 1, j, 0, -e);
        }
        assert!((amd(&pred, &refr, NormKind::Euclid).unwrap() - e).abs() < 1e-15);
        assert!(mad(&pred, &refr, NormKind::Euclid).unwrap().abs() < 1e-15);
    }

    #[test]
    fn mae_rmse_hand_case() {
        // One trajectory whose flattened difference vector is (3, 4).
        let mut pred = TrajBatch::zeros(1, 1, 2, 1);
        let refr = TrajBatch::zeros(1, 1, 2, 1);
        pred.set(0, 0, 0, 0, 3.0);
        pred.set(0, 0, 1, 0, 4.0);
        assert_eq!(mae(&pred, &refr).unwrap(), 5.0);
        assert_eq!(rmse(&pred, &refr).unwrap(), 5.0);
        assert_eq!(mae(&pred, &pred).unwrap(), 0.0);
        assert_eq!(rmse(&pred, &pred).unwrap(), 0.0);
    }

    #[test]
    fn metrics_match_brute_force_oracles() {
        let mut rng = substream(91, 0, StreamRole::Generic, 0, 0, 0);
        for _ in 0..50 {
            let pred = rand_batch(&mut rng, 3, 4, 5, 2);
            let refr = rand_batch(&mut rng, 3, 4, 5, 2);
            assert!((amd(&pred, &refr, NormKind::Euclid).unwrap() - amd_brute(&pred, &refr)).abs() < 1e-12);
            assert!((mad(&pred, &refr, NormKind::Euclid).unwrap() - mad_brute(&pred, &refr)).abs() < 1e-12);
            assert!((mae(&pred, &refr).unwrap() - mae_brute(&pred, &refr)).abs() < 1e-12);
            assert!((rmse(&pred, &refr).unwrap() - rmse_brute(&pred, &refr)).abs() < 1e-12);
        }
    }

    #[test]
    fn rmse_dominates_mae_and_metrics_scale_linearly() {
        let mut rng = substream(92, 0, StreamRole::Generic, 0, 0, 0);
        for _ in 0..100 {
            let refr = rand_batch(&mut rng, 2, 3, 4, 2);
            let pred = rand_batch(&mut rng, 2, 3, 4, 2);
            assert!(rmse(&pred, &refr).unwrap() >= mae(&pred, &refr).unwrap() - 1e-12);
        }
        // metric(ref + c*diff, ref) = c * metric(ref + diff, ref).
        let refr = rand_batch(&mut rng, 2, 2, 3, 2);
        let diff = rand_batch(&mut rng, 2, 2, 3, 2);
        let c = 3.7;
        let mut p1 = refr.clone();
        let mut pc = refr.clone();
        for idx in 0..p1.data.len() {
            p1.data[idx] += diff.data[idx];
            pc.data[idx] += c * diff.data[idx];
        }
        for norm in [NormKind::Euclid, NormKind::PerDimMax] {
            let a1 = amd(&p1, &refr, norm).unwrap();
            let ac = amd(&pc, &refr, norm).unwrap();
            assert!((ac - c * a1).abs() < 1e-10 * ac.abs().max(1.0));
            let m1 = mad(&p1, &refr, norm).unwrap();
            let mc = mad(&pc, &refr, norm).unwrap();
            assert!((mc - c * m1).abs() < 1e-10 * mc.abs().max(1.0));
        }
        assert!((mae(&pc, &refr).unwrap() - c * mae(&p1, &refr).unwrap()).abs() < 1e-10);
        assert!((rmse(&pc, &refr).unwrap() - c * rmse(&p1, &refr).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = TrajBatch::zeros(1, 1, 3, 1);
        let b = TrajBatch::zeros(1, 1, 4, 1);
        assert!(matches!(amd(&a, &b, NormKind::Euclid), Err(Error::Shape { .. })));
        assert!(matches!(mae(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn histogram_counts_everything_once() {
        let mut rng = substream(93, 0, StreamRole::Generic, 0, 0, 0);
        let pred = rand_batch(&mut rng, 2, 2, 3, 2);
        let refr = rand_batch(&mut rng, 2, 2, 3, 2);
        let h = error_histogram(&pred, &refr, 11).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), pred.data.len() as u64);
        let csv = h.to_csv();
        assert!(csv.starts_with("bin_lo,bin_hi,count\n"));
        assert_eq!(csv.lines().count(), 12);

        // Degenerate all-equal input still yields a valid histogram.
        let h = error_histogram(&pred, &pred, 5).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), pred.data.len() as u64);
    }

    #[test]
    fn zero_corrector_evaluation_has_equal_columns() {
        let sys = sde::get(SystemId::Ou);
        let set = generate_dataset(
            sys,
            &ProtocolConfig {
                n_params: 2,
                n_ics: 3, // ic 0 reserved for demos
                n_noises: 4,
                n_coarse: Some(8),
                base_seed: 33,
                ..Default::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ou.fmsd");
        write_shard(&path, &set).unwrap();
        let shard = crate::dataset::read_shard(&path).unwrap();

        let report = evaluate_correction(&shard, &ZeroCorrector, 2).unwrap();
        assert_eq!(report.n_eq, 4); // 2 params x 2 eval ics
        assert_eq!(report.m, 4);
        // Zero correction: corrected metrics equal coarse metrics.
        assert_eq!(report.coarse.amd, report.corrected.amd);
        assert_eq!(report.coarse.mae, report.corrected.mae);
        assert!(report.coarse.amd > 0.0);
        let csv = metrics_csv(&[
            (report.system, "coarse", report.coarse),
            (report.system, "corrected", report.corrected),
        ]);
        assert!(csv.starts_with("system,method,mae,rmse,amd,mad\n"));
        assert!(csv.contains("ou,coarse"));
    }

    #[test]
    fn runtime_report_normalizes_coarse_to_one() {
        let sys = sde::get(SystemId::StochasticLorenz);
        let params = sys.presets()[0].1.clone();
        let report = runtime_report(sys, &params, 2, 2, 10, 20, &ZeroCorrector, &[], 3).unwrap();
        let (fine, coarse, corrected) = report.normalized();
        assert_eq!(coarse, 1.0);
        assert!(fine > 1.0, "fine {fine}");
        assert!(corrected >= 1.0, "corrected {corrected}");
        assert_eq!(report.n_trajectories, 4);
        assert!(report.to_csv().contains("coarse_plus_correction"));
    }
}
