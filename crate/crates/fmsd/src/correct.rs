//! Inference-time error correction: single-block correction and the
//! block-wise roll-out scheme for horizons longer than the model window.
//!
//! Roll-out alignment is additive: each block's coarse values are shifted by
//! the accumulated predicted error at the block boundary, the block's first
//! column is anchored to the previous block's corrected endpoint, and the
//! predicted error at column zero is forced to zero. Boundaries are therefore
//! continuous by construction.

use crate::dataset::{
    assemble_icl_sample, demo_from_record, Demo, NormStats, ShardData, TokenCategory,
    TrajectoryRecord, OUT_DIM,
};
use crate::error::{Error, Result};
use crate::integrate::TrajectoryPair;
use crate::model::{build_attention_mask, predict, ModelParams};

// ── Query and results ────────────────────────────────────────────────────────

/// The conditions of one correction request: coarse values, aggregated noise,
/// and timestamps (no error series).
#[derive(Clone, Debug)]
pub struct QueryCond {
    pub times: Vec<f64>,
    pub noise: Vec<[f64; 3]>,
    pub values: Vec<[f64; 3]>,
    pub dim_mask: [bool; 3],
    pub state_dim: usize,
}

impl QueryCond {
    pub fn n_cols(&self) -> usize {
        self.times.len()
    }

    /// Raw coarse conditions of a simulated pair.
    pub fn from_pair(pair: &TrajectoryPair) -> Self {
        let demo = crate::dataset::build_demo(pair).expect("pair dims <= 3");
        QueryCond {
            times: demo.times,
            noise: demo.noise,
            values: demo.values,
            dim_mask: demo.dim_mask,
            state_dim: demo.state_dim,
        }
    }

    pub fn from_demo(demo: &Demo) -> Self {
        QueryCond {
            times: demo.times.clone(),
            noise: demo.noise.clone(),
            values: demo.values.clone(),
            dim_mask: demo.dim_mask,
            state_dim: demo.state_dim,
        }
    }
}

/// Alignment bookkeeping of one roll-out.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPlan {
    pub block_len: usize,
    pub total_blocks: usize,
    /// Per-block additive shift applied to the coarse values.
    pub shifts: Vec<[f64; 3]>,
}

#[derive(Clone, Debug)]
pub struct CorrectionResult {
    pub times: Vec<f64>,
    /// Unshifted coarse path the request started from.
    pub coarse: Vec<[f64; 3]>,
    pub predicted_err: Vec<[f64; 3]>,
    /// `coarse + shift + predicted_err`, anchored at block boundaries.
    pub corrected: Vec<[f64; 3]>,
    pub dim_mask: [bool; 3],
    pub state_dim: usize,
    pub plan: Option<RolloutPlan>,
}

/// CSV rows: `n, t, coarse.., predicted_err.., corrected.., [fine..]`.
pub fn correction_to_csv(result: &CorrectionResult, fine: Option<&[[f64; 3]]>) -> String {
    let d = result.state_dim;
    let mut out = String::from("n,t");
    for label in ["coarse", "predicted_err", "corrected"] {
        for i in 0..d {
            out.push_str(&format!(",{label}{}", i + 1));
        }
    }
    if fine.is_some() {
        for i in 0..d {
            out.push_str(&format!(",fine{}", i + 1));
        }
    }
    out.push('\n');
    for n in 0..result.times.len() {
        out.push_str(&format!("{},{:e}", n, result.times[n]));
        for i in 0..d {
            out.push_str(&format!(",{:e}", result.coarse[n][i]));
        }
        for i in 0..d {
            out.push_str(&format!(",{:e}", result.predicted_err[n][i]));
        }
        for i in 0..d {
            out.push_str(&format!(",{:e}", result.corrected[n][i]));
        }
        if let Some(f) = fine {
            for i in 0..d {
                out.push_str(&format!(",{:e}", f[n][i]));
            }
        }
        out.push('\n');
    }
    out
}

// ── Correctors ───────────────────────────────────────────────────────────────

/// Produces predicted error series for a (possibly shifted) query block.
/// `block_start` is the query's first global coarse index, zero outside
/// roll-outs.
pub trait Corrector: Send + Sync {
    fn predict_err(
        &self,
        demos: &[Demo],
        query: &QueryCond,
        block_start: usize,
    ) -> Result<Vec<[f64; 3]>>;

    fn name(&self) -> &'static str;
}

/// Test double returning the true error against a known fine path.
pub struct OracleCorrector {
    /// Fine states at every global coarse timestamp, padded to 3 dims.
    pub fine: Vec<[f64; 3]>,
}

impl OracleCorrector {
    pub fn from_pair(pair: &TrajectoryPair) -> Self {
        let d = pair.fine[0].len();
        let k = pair.stride_k;
        let fine = (0..pair.coarse.len())
            .map(|n| {
                let mut row = [0.0; 3];
                row[..d].copy_from_slice(&pair.fine[n * k][..d]);
                row
            })
            .collect();
        OracleCorrector { fine }
    }
}

impl Corrector for OracleCorrector {
    fn predict_err(
        &self,
        _demos: &[Demo],
        query: &QueryCond,
        block_start: usize,
    ) -> Result<Vec<[f64; 3]>> {
        if block_start + query.n_cols() > self.fine.len() {
            return Err(Error::Dim(format!(
                "oracle covers {} stamps, block needs {}..{}",
                self.fine.len(),
                block_start,
                block_start + query.n_cols()
            )));
        }
        Ok((0..query.n_cols())
            .map(|n| {
                let mut e = [0.0; 3];
                for dd in 0..query.state_dim {
                    e[dd] = self.fine[block_start + n][dd] - query.values[n][dd];
                }
                e
            })
            .collect())
    }

    fn name(&self) -> &'static str {
        "oracle"
    }
}

/// Predicts zero error; corrected output equals the coarse input.
pub struct ZeroCorrector;

impl Corrector for ZeroCorrector {
    fn predict_err(
        &self,
        _demos: &[Demo],
        query: &QueryCond,
        _block_start: usize,
    ) -> Result<Vec<[f64; 3]>> {
        Ok(vec![[0.0; 3]; query.n_cols()])
    }

    fn name(&self) -> &'static str {
        "zero"
    }
}

/// The trained transformer behind the corrector interface, with the training
/// shard's normalization statistics inverted on the way out.
pub struct ModelCorrector {
    pub params: ModelParams<f32>,
    pub norm: NormStats,
}

impl ModelCorrector {
    pub fn new(params: ModelParams<f32>, norm: NormStats) -> Self {
        ModelCorrector { params, norm }
    }
}

impl Corrector for ModelCorrector {
    fn predict_err(
        &self,
        demos: &[Demo],
        query: &QueryCond,
        _block_start: usize,
    ) -> Result<Vec<[f64; 3]>> {
        if demos.is_empty() {
            return Err(Error::InvalidArg(
                "model corrector needs at least one demo".into(),
            ));
        }
        let n_cols = demos[0].n_cols();
        let q_cols = query.n_cols();
        if q_cols > n_cols {
            return Err(Error::Dim(format!(
                "query block has {q_cols} columns, demos have {n_cols}"
            )));
        }

        // Model input: a full-length query demo with an all-zero (unknown)
        // err block. A short final roll-out block is padded with columns
        // marked exactly like timestamp dropout, which the model was trained
        // to tolerate; their predictions are discarded.
        let h = if query.times.len() > 1 {
            query.times[1] - query.times[0]
        } else {
            demos[0].times[1] - demos[0].times[0]
        };
        let mut times = query.times.clone();
        let mut noise = query.noise.clone();
        let mut values = query.values.clone();
        while times.len() < n_cols {
            times.push(times.len() as f64 * h);
            noise.push([0.0; 3]);
            values.push([0.0; 3]);
        }
        let query_demo = Demo {
            times,
            noise,
            values,
            err: vec![[0.0; 3]; n_cols],
            dim_mask: query.dim_mask,
            state_dim: query.state_dim,
            params_fingerprint: None,
        };
        let mut sample = assemble_icl_sample(demos, &query_demo, None, &self.norm)?;
        if q_cols < n_cols {
            let query_example = sample.k_demos;
            let prompt_offset = 0;
            for (i, tok) in sample.layout.clone().iter().enumerate() {
                if tok.category == TokenCategory::Cond
                    && tok.example == query_example
                    && tok.col >= q_cols
                {
                    let feat = &mut sample.numeric[i - prompt_offset];
                    for v in feat[1..7].iter_mut() {
                        *v = 0.0;
                    }
                    feat[10] = 1.0;
                }
            }
        }
        let mask = build_attention_mask(&sample.layout);
        let pred = predict(&self.params, &sample, &mask)?;

        let mut out = Vec::with_capacity(q_cols);
        for col in 0..q_cols {
            let p = pred[sample.cond_index(sample.k_demos, col)];
            let mut e = [0.0; 3];
            for dd in 0..OUT_DIM {
                if query.dim_mask[dd] {
                    e[dd] = p[dd] * self.norm.err_std[dd] + self.norm.err_mean[dd];
                }
            }
            out.push(e);
        }
        Ok(out)
    }

    fn name(&self) -> &'static str {
        "model"
    }
}

/// Demos for inference: the first `k` records of a parameter group in a shard.
pub fn demos_from_shard(shard: &ShardData, param_idx: u32, k: usize) -> Result<Vec<Demo>> {
    let members: Vec<&TrajectoryRecord> = shard
        .records
        .iter()
        .filter(|r| r.param_idx == param_idx)
        .take(k)
        .collect();
    if members.len() < k {
        return Err(Error::InvalidArg(format!(
            "group {param_idx} holds {} records, need {k}",
            members.len()
        )));
    }
    Ok(members
        .iter()
        .map(|r| demo_from_record(r, &shard.manifest))
        .collect())
}

// ── Correction drivers ───────────────────────────────────────────────────────

/// Correct one block: predicted error added onto the coarse values, with the
/// first column's error forced to zero (the initial condition is exact).
pub fn correct_block(
    corrector: &dyn Corrector,
    demos: &[Demo],
    query: &QueryCond,
) -> Result<CorrectionResult> {
    let mut err = corrector.predict_err(demos, query, 0)?;
    if err.len() != query.n_cols() {
        return Err(Error::Dim(format!(
            "corrector returned {} errors for {} columns",
            err.len(),
            query.n_cols()
        )));
    }
    err[0] = [0.0; 3];
    let corrected = query
        .values
        .iter()
        .zip(&err)
        .map(|(v, e)| {
            let mut c = [0.0; 3];
            for dd in 0..query.state_dim {
                c[dd] = v[dd] + e[dd];
            }
            c
        })
        .collect();
    Ok(CorrectionResult {
        times: query.times.clone(),
        coarse: query.values.clone(),
        predicted_err: err,
        corrected,
        dim_mask: query.dim_mask,
        state_dim: query.state_dim,
        plan: None,
    })
}

/// Block roll-out over a long coarse path. Each block's coarse values are
/// shifted by the accumulated boundary error before correction; demos are
/// reused across blocks.
pub fn rollout(
    corrector: &dyn Corrector,
    demos: &[Demo],
    long: &QueryCond,
    block_len: usize,
) -> Result<CorrectionResult> {
    if block_len == 0 {
        return Err(Error::InvalidArg("block length must be positive".into()));
    }
    let total = long.n_cols() - 1;
    if total == 0 {
        return Err(Error::InvalidArg("roll-out needs at least one step".into()));
    }
    let h = long.times[1] - long.times[0];
    let n_blocks = total.div_ceil(block_len);

    let mut corrected = vec![[0.0; 3]; total + 1];
    let mut predicted = vec![[0.0; 3]; total + 1];
    let mut shifts = Vec::with_capacity(n_blocks);
    let mut anchor = long.values[0];

    for b in 0..n_blocks {
        let start = b * block_len;
        let len = block_len.min(total - start);
        // Per-dim shift of this block (zero for the first).
        let mut shift = [0.0; 3];
        for dd in 0..long.state_dim {
            shift[dd] = anchor[dd] - long.values[start][dd];
        }
        shifts.push(shift);

        let mut values = Vec::with_capacity(len + 1);
        values.push(anchor);
        for j in 1..=len {
            let mut v = [0.0; 3];
            for dd in 0..long.state_dim {
                v[dd] = long.values[start + j][dd] + shift[dd];
            }
            values.push(v);
        }
        let mut noise: Vec<[f64; 3]> = (0..len)
            .map(|j| long.noise[start + j])
            .collect();
        noise.push([0.0; 3]);
        let block_query = QueryCond {
            times: (0..=len).map(|j| j as f64 * h).collect(),
            noise,
            values: values.clone(),
            dim_mask: long.dim_mask,
            state_dim: long.state_dim,
        };

        let mut err = corrector
            .predict_err(demos, &block_query, start)
            .map_err(|e| Error::InvalidArg(format!("block {b}: {e}")))?;
        if err.len() != len + 1 {
            return Err(Error::Dim(format!(
                "block {b}: corrector returned {} errors for {} columns",
                err.len(),
                len + 1
            )));
        }
        err[0] = [0.0; 3];

        for j in 0..=len {
            let mut c = [0.0; 3];
            for dd in 0..long.state_dim {
                c[dd] = values[j][dd] + err[j][dd];
            }
            corrected[start + j] = c;
            predicted[start + j] = err[j];
        }
        anchor = corrected[start + len];
    }

    Ok(CorrectionResult {
        times: long.times.clone(),
        coarse: long.values.clone(),
        predicted_err: predicted,
        corrected,
        dim_mask: long.dim_mask,
        state_dim: long.state_dim,
        plan: Some(RolloutPlan {
            block_len,
            total_blocks: n_blocks,
            shifts,
        }),
    })
}
