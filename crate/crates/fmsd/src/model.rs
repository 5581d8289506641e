//! Decoder-only transformer for in-context error correction.
//!
//! Pre-norm blocks with GELU feed-forward, a learnable positional row per
//! (example index, category) pair plus one prompt row, and an attention mask
//! that hides each example's error tokens from its own condition tokens while
//! exposing earlier examples completely. Each attention head has width
//! `d_model`; head outputs are concatenated and projected back.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Scalar, Tape, Tensor, MASKED};
use crate::dataset::{IclSample, NormStats, TokenCategory, TokenInfo, FEATURE_DIM, OUT_DIM};
use crate::error::{Error, Result};
use crate::rng::{substream, RngStream, StreamRole};
use crate::sde::SystemId;

// ── Configuration ────────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Maximum examples per sample (K demos + 1 query).
    pub max_examples: usize,
    pub max_prompt_tokens: usize,
    pub feature_dim: usize,
    pub out_dim: usize,
}

impl ModelConfig {
    /// Full-scale reference configuration.
    pub fn full() -> Self {
        ModelConfig {
            n_layers: 6,
            n_heads: 8,
            d_model: 256,
            d_ff: 1024,
            max_examples: 5,
            max_prompt_tokens: 8,
            feature_dim: FEATURE_DIM,
            out_dim: OUT_DIM,
        }
    }

    /// Desk-scale configuration used by the smoke training runs.
    pub fn toy() -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 1,
            d_model: 64,
            d_ff: 256,
            max_examples: 5,
            max_prompt_tokens: 8,
            feature_dim: FEATURE_DIM,
            out_dim: OUT_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_examples == 0
            || self.feature_dim == 0
            || self.out_dim == 0
        {
            return Err(Error::InvalidArg("model config has a zero dimension".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArg(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    fn pos_rows(&self) -> usize {
        2 * self.max_examples + 1
    }
}

/// Closed-form count of all learnable values (weights, biases, positional
/// rows) for a configuration.
pub fn param_count(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let d = config.d_model as u64;
    let ff = config.d_ff as u64;
    let h = config.n_heads as u64;
    let f = config.feature_dim as u64;
    let o = config.out_dim as u64;
    let embed = f * d + d;
    let pos = config.pos_rows() as u64 * d;
    let per_layer = h * 3 * (d * d + d)     // per-head Q, K, V with biases
        + (h * d) * d + d                   // concat output projection
        + d * ff + ff + ff * d + d          // feed-forward
        + 4 * d; // two layer norms
    let final_ln = 2 * d;
    let head = d * d + d + d * o + o;
    Ok(embed + pos + config.n_layers as u64 * per_layer + final_ln + head)
}

// ── Parameters ───────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct HeadParams<S> {
    pub wq: Tensor<S>,
    pub bq: Tensor<S>,
    pub wk: Tensor<S>,
    pub bk: Tensor<S>,
    pub wv: Tensor<S>,
    pub bv: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct LayerParams<S> {
    pub heads: Vec<HeadParams<S>>,
    pub wo: Tensor<S>,
    pub bo: Tensor<S>,
    pub ln1_g: Tensor<S>,
    pub ln1_b: Tensor<S>,
    pub ffn_w1: Tensor<S>,
    pub ffn_b1: Tensor<S>,
    pub ffn_w2: Tensor<S>,
    pub ffn_b2: Tensor<S>,
    pub ln2_g: Tensor<S>,
    pub ln2_b: Tensor<S>,
}

#[derive(Clone, Debug)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub embed_w: Tensor<S>,
    pub embed_b: Tensor<S>,
    pub pos: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_ln_g: Tensor<S>,
    pub final_ln_b: Tensor<S>,
    pub head_w1: Tensor<S>,
    pub head_b1: Tensor<S>,
    pub head_w2: Tensor<S>,
    pub head_b2: Tensor<S>,
}

fn glorot<S: Scalar>(rng: &mut RngStream, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<S> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product::<usize>())
        .map(|_| S::from_f64(rng.uniform(-limit, limit)))
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

fn ones<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor {
        shape: vec![n],
        data: vec![S::ONE; n],
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Glorot-uniform weights, zero biases, unit layer-norm gains.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = substream(seed, 0, StreamRole::Generic, 0xC0DE, 0, 0);
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let heads = (0..config.n_heads)
                .map(|_| HeadParams {
                    wq: glorot(&mut rng, d, d, &[d, d]),
                    bq: Tensor::zeros(&[d]),
                    wk: glorot(&mut rng, d, d, &[d, d]),
                    bk: Tensor::zeros(&[d]),
                    wv: glorot(&mut rng, d, d, &[d, d]),
                    bv: Tensor::zeros(&[d]),
                })
                .collect();
            layers.push(LayerParams {
                heads,
                wo: glorot(&mut rng, config.n_heads * d, d, &[config.n_heads * d, d]),
                bo: Tensor::zeros(&[d]),
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(&[d]),
                ffn_w1: glorot(&mut rng, d, config.d_ff, &[d, config.d_ff]),
                ffn_b1: Tensor::zeros(&[config.d_ff]),
                ffn_w2: glorot(&mut rng, config.d_ff, d, &[config.d_ff, d]),
                ffn_b2: Tensor::zeros(&[d]),
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(&[d]),
            });
        }
        Ok(ModelParams {
            config: config.clone(),
            embed_w: glorot(&mut rng, config.feature_dim, d, &[config.feature_dim, d]),
            embed_b: Tensor::zeros(&[d]),
            pos: glorot(&mut rng, config.pos_rows(), d, &[config.pos_rows(), d]),
            layers,
            final_ln_g: ones(d),
            final_ln_b: Tensor::zeros(&[d]),
            head_w1: glorot(&mut rng, d, d, &[d, d]),
            head_b1: Tensor::zeros(&[d]),
            head_w2: glorot(&mut rng, d, config.out_dim, &[d, config.out_dim]),
            head_b2: Tensor::zeros(&[config.out_dim]),
        })
    }

    /// Visit every tensor with its canonical name, in canonical order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor<S>)) {
        f("embed.w".into(), &self.embed_w);
        f("embed.b".into(), &self.embed_b);
        f("pos".into(), &self.pos);
        for (l, layer) in self.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                f(format!("layer{l}.head{h}.wq"), &head.wq);
                f(format!("layer{l}.head{h}.bq"), &head.bq);
                f(format!("layer{l}.head{h}.wk"), &head.wk);
                f(format!("layer{l}.head{h}.bk"), &head.bk);
                f(format!("layer{l}.head{h}.wv"), &head.wv);
                f(format!("layer{l}.head{h}.bv"), &head.bv);
            }
            f(format!("layer{l}.attn_out.w"), &layer.wo);
            f(format!("layer{l}.attn_out.b"), &layer.bo);
            f(format!("layer{l}.ln1.g"), &layer.ln1_g);
            f(format!("layer{l}.ln1.b"), &layer.ln1_b);
            f(format!("layer{l}.ffn.w1"), &layer.ffn_w1);
            f(format!("layer{l}.ffn.b1"), &layer.ffn_b1);
            f(format!("layer{l}.ffn.w2"), &layer.ffn_w2);
            f(format!("layer{l}.ffn.b2"), &layer.ffn_b2);
            f(format!("layer{l}.ln2.g"), &layer.ln2_g);
            f(format!("layer{l}.ln2.b"), &layer.ln2_b);
        }
        f("final_ln.g".into(), &self.final_ln_g);
        f("final_ln.b".into(), &self.final_ln_b);
        f("head.w1".into(), &self.head_w1);
        f("head.b1".into(), &self.head_b1);
        f("head.w2".into(), &self.head_w2);
        f("head.b2".into(), &self.head_b2);
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<S>)) {
        f("embed.w".into(), &mut self.embed_w);
        f("embed.b".into(), &mut self.embed_b);
        f("pos".into(), &mut self.pos);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (h, head) in layer.heads.iter_mut().enumerate() {
                f(format!("layer{l}.head{h}.wq"), &mut head.wq);
                f(format!("layer{l}.head{h}.bq"), &mut head.bq);
                f(format!("layer{l}.head{h}.wk"), &mut head.wk);
                f(format!("layer{l}.head{h}.bk"), &mut head.bk);
                f(format!("layer{l}.head{h}.wv"), &mut head.wv);
                f(format!("layer{l}.head{h}.bv"), &mut head.bv);
            }
            f(format!("layer{l}.attn_out.w"), &mut layer.wo);
            f(format!("layer{l}.attn_out.b"), &mut layer.bo);
            f(format!("layer{l}.ln1.g"), &mut layer.ln1_g);
            f(format!("layer{l}.ln1.b"), &mut layer.ln1_b);
            f(format!("layer{l}.ffn.w1"), &mut layer.ffn_w1);
            f(format!("layer{l}.ffn.b1"), &mut layer.ffn_b1);
            f(format!("layer{l}.ffn.w2"), &mut layer.ffn_w2);
            f(format!("layer{l}.ffn.b2"), &mut layer.ffn_b2);
            f(format!("layer{l}.ln2.g"), &mut layer.ln2_g);
            f(format!("layer{l}.ln2.b"), &mut layer.ln2_b);
        }
        f("final_ln.g".into(), &mut self.final_ln_g);
        f("final_ln.b".into(), &mut self.final_ln_b);
        f("head.w1".into(), &mut self.head_w1);
        f("head.b1".into(), &mut self.head_b1);
        f("head.w2".into(), &mut self.head_w2);
        f("head.b2".into(), &mut self.head_b2);
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(|n, _| names.push(n));
        names
    }

    pub fn actual_param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit(|_, t| total += t.numel() as u64);
        total
    }

    pub fn convert<T: Scalar>(&self) -> ModelParams<T> {
        let conv = |t: &Tensor<S>| Tensor::<T> {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| T::from_f64(v.to_f64())).collect(),
        };
        ModelParams {
            config: self.config.clone(),
            embed_w: conv(&self.embed_w),
            embed_b: conv(&self.embed_b),
            pos: conv(&self.pos),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadParams {
                            wq: conv(&h.wq),
                            bq: conv(&h.bq),
                            wk: conv(&h.wk),
                            bk: conv(&h.bk),
                            wv: conv(&h.wv),
                            bv: conv(&h.bv),
                        })
                        .collect(),
                    wo: conv(&l.wo),
                    bo: conv(&l.bo),
                    ln1_g: conv(&l.ln1_g),
                    ln1_b: conv(&l.ln1_b),
                    ffn_w1: conv(&l.ffn_w1),
                    ffn_b1: conv(&l.ffn_b1),
                    ffn_w2: conv(&l.ffn_w2),
                    ffn_b2: conv(&l.ffn_b2),
                    ln2_g: conv(&l.ln2_g),
                    ln2_b: conv(&l.ln2_b),
                })
                .collect(),
            final_ln_g: conv(&self.final_ln_g),
            final_ln_b: conv(&self.final_ln_b),
            head_w1: conv(&self.head_w1),
            head_b1: conv(&self.head_b1),
            head_w2: conv(&self.head_w2),
            head_b2: conv(&self.head_b2),
        }
    }
}

// ── Attention mask ───────────────────────────────────────────────────────────

/// Boolean (query, key) visibility matrix for one token layout.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub size: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn allowed(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.size + k]
    }

    /// Additive form: 0 where visible, [`MASKED`] where not.
    pub fn to_additive<S: Scalar>(&self) -> Tensor<S> {
        let data = self
            .allowed
            .iter()
            .map(|&ok| if ok { S::ZERO } else { S::from_f64(MASKED) })
            .collect();
        Tensor {
            shape: vec![self.size, self.size],
            data,
        }
    }
}

/// Visibility rules:
/// (a) prompt tokens attend to prompt tokens only;
/// (b) non-prompt tokens attend to prompt tokens and to every token of
///     strictly earlier examples;
/// (c) a cond token attends to all cond tokens of its own example and to none
///     of its err tokens;
/// (d) an err token attends to all cond tokens of its own example and to its
///     example's err tokens at positions up to itself.
pub fn build_attention_mask(layout: &[TokenInfo]) -> AttentionMask {
    let t = layout.len();
    let mut allowed = vec![false; t * t];
    for (qi, q) in layout.iter().enumerate() {
        for (ki, k) in layout.iter().enumerate() {
            let ok = match (q.category, k.category) {
                (TokenCategory::Prompt, c) => c == TokenCategory::Prompt,
                (_, TokenCategory::Prompt) => true,
                (qc, _) => {
                    if k.example < q.example {
                        true
                    } else if k.example > q.example {
                        false
                    } else {
                        match (qc, k.category) {
                            (TokenCategory::Cond, TokenCategory::Cond) => true,
                            (TokenCategory::Cond, TokenCategory::Err) => false,
                            (TokenCategory::Err, TokenCategory::Cond) => true,
                            (TokenCategory::Err, TokenCategory::Err) => ki <= qi,
                            _ => unreachable!("prompt handled above"),
                        }
                    }
                }
            };
            allowed[qi * t + ki] = ok;
        }
    }
    AttentionMask { size: t, allowed }
}

// ── Forward pass ─────────────────────────────────────────────────────────────

/// A completed forward pass: the tape, prediction node, and the parameter
/// leaves in canonical order (for gradient extraction).
pub struct ForwardPass<S: Scalar> {
    pub tape: Tape<S>,
    /// `(#cond tokens, out_dim)` predictions in cond-token order.
    pub predictions: NodeId,
    pub param_leaves: Vec<(String, NodeId)>,
}

struct ParamNodes {
    embed_w: NodeId,
    embed_b: NodeId,
    pos: NodeId,
    layers: Vec<LayerNodes>,
    final_ln_g: NodeId,
    final_ln_b: NodeId,
    head_w1: NodeId,
    head_b1: NodeId,
    head_w2: NodeId,
    head_b2: NodeId,
}

struct LayerNodes {
    heads: Vec<[NodeId; 6]>,
    wo: NodeId,
    bo: NodeId,
    ln1_g: NodeId,
    ln1_b: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    ln2_g: NodeId,
    ln2_b: NodeId,
}

fn leaf_params<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    train: bool,
) -> (ParamNodes, Vec<(String, NodeId)>) {
    let mut leaves = Vec::new();
    let mut lf = |tape: &mut Tape<S>, name: String, t: &Tensor<S>| {
        let id = tape.leaf(t.clone(), train);
        leaves.push((name, id));
        id
    };
    let embed_w = lf(tape, "embed.w".into(), &params.embed_w);
    let embed_b = lf(tape, "embed.b".into(), &params.embed_b);
    let pos = lf(tape, "pos".into(), &params.pos);
    let mut layers = Vec::new();
    for (l, layer) in params.layers.iter().enumerate() {
        let mut heads = Vec::new();
        for (h, head) in layer.heads.iter().enumerate() {
            heads.push([
                lf(tape, format!("layer{l}.head{h}.wq"), &head.wq),
                lf(tape, format!("layer{l}.head{h}.bq"), &head.bq),
                lf(tape, format!("layer{l}.head{h}.wk"), &head.wk),
                lf(tape, format!("layer{l}.head{h}.bk"), &head.bk),
                lf(tape, format!("layer{l}.head{h}.wv"), &head.wv),
                lf(tape, format!("layer{l}.head{h}.bv"), &head.bv),
            ]);
        }
        layers.push(LayerNodes {
            heads,
            wo: lf(tape, format!("layer{l}.attn_out.w"), &layer.wo),
            bo: lf(tape, format!("layer{l}.attn_out.b"), &layer.bo),
            ln1_g: lf(tape, format!("layer{l}.ln1.g"), &layer.ln1_g),
            ln1_b: lf(tape, format!("layer{l}.ln1.b"), &layer.ln1_b),
            ffn_w1: lf(tape, format!("layer{l}.ffn.w1"), &layer.ffn_w1),
            ffn_b1: lf(tape, format!("layer{l}.ffn.b1"), &layer.ffn_b1),
            ffn_w2: lf(tape, format!("layer{l}.ffn.w2"), &layer.ffn_w2),
            ffn_b2: lf(tape, format!("layer{l}.ffn.b2"), &layer.ffn_b2),
            ln2_g: lf(tape, format!("layer{l}.ln2.g"), &layer.ln2_g),
            ln2_b: lf(tape, format!("layer{l}.ln2.b"), &layer.ln2_b),
        });
    }
    let final_ln_g = lf(tape, "final_ln.g".into(), &params.final_ln_g);
    let final_ln_b = lf(tape, "final_ln.b".into(), &params.final_ln_b);
    let head_w1 = lf(tape, "head.w1".into(), &params.head_w1);
    let head_b1 = lf(tape, "head.b1".into(), &params.head_b1);
    let head_w2 = lf(tape, "head.w2".into(), &params.head_w2);
    let head_b2 = lf(tape, "head.b2".into(), &params.head_b2);
    (
        ParamNodes {
            embed_w,
            embed_b,
            pos,
            layers,
            final_ln_g,
            final_ln_b,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
        },
        leaves,
    )
}

fn pos_row(info: &TokenInfo) -> usize {
    match info.category {
        TokenCategory::Prompt => 0,
        TokenCategory::Cond => 1 + 2 * info.example,
        TokenCategory::Err => 2 + 2 * info.example,
    }
}

/// Run the transformer on one sample. Predictions are read at cond-token
/// positions: the token holding `(t_n, X_n, dW_n)` emits the error at `t_n`.
pub fn forward<S: Scalar>(
    params: &ModelParams<S>,
    sample: &IclSample,
    mask: &AttentionMask,
    train: bool,
) -> Result<ForwardPass<S>> {
    let cfg = &params.config;
    let t_total = sample.token_count();
    if mask.size != t_total {
        return Err(Error::Dim(format!(
            "mask built for {} tokens, sample has {t_total}",
            mask.size
        )));
    }
    if sample.k_demos + 1 > cfg.max_examples {
        return Err(Error::Dim(format!(
            "sample has {} examples, model supports {}",
            sample.k_demos + 1,
            cfg.max_examples
        )));
    }
    if let Some(p) = &sample.prompt {
        if p.len() > cfg.max_prompt_tokens {
            return Err(Error::Dim(format!(
                "{} prompt tokens exceed configured {}",
                p.len(),
                cfg.max_prompt_tokens
            )));
        }
        if p.iter().any(|v| v.len() != cfg.d_model) {
            return Err(Error::Dim("prompt vector width != d_model".into()));
        }
    }

    let d = cfg.d_model;
    let est_nodes = 40 + cfg.n_layers * (14 + 7 * cfg.n_heads);
    let mut tape: Tape<S> = Tape::with_capacity(est_nodes);
    let (nodes, leaves) = leaf_params(&mut tape, params, train);

    // Numeric token features -> embeddings.
    let t_num = sample.numeric.len();
    let mut feat = Tensor::<S>::zeros(&[t_num, cfg.feature_dim]);
    for (i, row) in sample.numeric.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            feat.data[i * cfg.feature_dim + j] = S::from_f64(v);
        }
    }
    let feat = tape.constant(feat);
    let projected = tape.matmul(feat, nodes.embed_w)?;
    let numeric_emb = tape.add_bias(projected, nodes.embed_b)?;

    // Prepend embedded prompt vectors when present.
    let mut x = if let Some(p) = &sample.prompt {
        let mut pt = Tensor::<S>::zeros(&[p.len(), d]);
        for (i, row) in p.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                pt.data[i * d + j] = S::from_f64(v);
            }
        }
        let pt = tape.constant(pt);
        tape.concat_rows(&[pt, numeric_emb])?
    } else {
        numeric_emb
    };

    // Positional rows by (example, category).
    let rows: Vec<usize> = sample.layout.iter().map(pos_row).collect();
    let pos_emb = tape.gather(nodes.pos, &rows)?;
    x = tape.add(x, pos_emb)?;

    let mask_node = tape.constant(mask.to_additive::<S>());
    let scale = 1.0 / (d as f64).sqrt();

    for (li, layer) in nodes.layers.iter().enumerate() {
        let normed = tape.layer_norm(x, layer.ln1_g, layer.ln1_b)?;
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for head in &layer.heads {
            let [wq, bq, wk, bk, wv, bv] = *head;
            let q0 = tape.matmul(normed, wq)?;
            let q = tape.add_bias(q0, bq)?;
            let k0 = tape.matmul(normed, wk)?;
            let k = tape.add_bias(k0, bk)?;
            let v0 = tape.matmul(normed, wv)?;
            let v = tape.add_bias(v0, bv)?;
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, scale);
            let attn = tape.row_softmax_masked(scaled, mask_node)?;
            head_outs.push(tape.matmul(attn, v)?);
        }
        let merged = if head_outs.len() == 1 {
            head_outs[0]
        } else {
            tape.concat_cols(&head_outs)?
        };
        let proj = tape.matmul(merged, layer.wo)?;
        let attn_out = tape.add_bias(proj, layer.bo)?;
        x = tape.add(x, attn_out)?;

        let normed2 = tape.layer_norm(x, layer.ln2_g, layer.ln2_b)?;
        let h0 = tape.matmul(normed2, layer.ffn_w1)?;
        let h1 = tape.add_bias(h0, layer.ffn_b1)?;
        let act = tape.gelu(h1);
        let h2 = tape.matmul(act, layer.ffn_w2)?;
        let ffn_out = tape.add_bias(h2, layer.ffn_b2)?;
        x = tape.add(x, ffn_out)?;

        if tape.value(x).data.iter().any(|v| !v.is_finite_s()) {
            return Err(Error::NonFiniteActivation { layer: li });
        }
    }

    let normed = tape.layer_norm(x, nodes.final_ln_g, nodes.final_ln_b)?;
    let h0 = tape.matmul(normed, nodes.head_w1)?;
    let h1 = tape.add_bias(h0, nodes.head_b1)?;
    let act = tape.gelu(h1);
    let h2 = tape.matmul(act, nodes.head_w2)?;
    let out = tape.add_bias(h2, nodes.head_b2)?;

    let cond_rows = sample.cond_token_indices();
    let predictions = tape.gather(out, &cond_rows)?;

    Ok(ForwardPass {
        tape,
        predictions,
        param_leaves: leaves,
    })
}

/// Predicted error vectors at cond positions, as plain values.
pub fn predict<S: Scalar>(
    params: &ModelParams<S>,
    sample: &IclSample,
    mask: &AttentionMask,
) -> Result<Vec<[f64; OUT_DIM]>> {
    let pass = forward(params, sample, mask, false)?;
    let v = pass.tape.value(pass.predictions);
    Ok(v
        .data
        .chunks_exact(OUT_DIM)
        .map(|c| [c[0].to_f64(), c[1].to_f64(), c[2].to_f64()])
        .collect())
}

// ── Loss ─────────────────────────────────────────────────────────────────────

/// Tape node for the training loss: mean over scored positions of the squared
/// Euclidean distance over valid dims.
pub fn msd_loss_node<S: Scalar>(
    tape: &mut Tape<S>,
    predictions: NodeId,
    sample: &IclSample,
) -> Result<NodeId> {
    let scored = sample.loss_mask.iter().filter(|&&b| b).count();
    if scored == 0 {
        return Err(Error::EmptyLossMask);
    }
    let n_cond = sample.cond_targets.len();
    let mut tgt = Tensor::<S>::zeros(&[n_cond, OUT_DIM]);
    let mut weights = Tensor::<S>::zeros(&[n_cond, OUT_DIM]);
    for (i, t) in sample.cond_targets.iter().enumerate() {
        for d in 0..OUT_DIM {
            tgt.data[i * OUT_DIM + d] = S::from_f64(t[d]);
            if sample.loss_mask[i] && sample.dim_mask[d] {
                weights.data[i * OUT_DIM + d] = S::ONE;
            }
        }
    }
    let tgt = tape.constant(tgt);
    let w = tape.constant(weights);
    let neg = tape.scale(tgt, -1.0);
    let diff = tape.add(predictions, neg)?;
    let masked = tape.mul(diff, w)?;
    let sq = tape.mul(masked, masked)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / scored as f64))
}

/// Value-level squared loss: mean over scored positions of the squared
/// Euclidean distance across valid dims.
pub fn msd_loss_value(
    pred: &[[f64; OUT_DIM]],
    target: &[[f64; OUT_DIM]],
    loss_mask: &[bool],
    dim_mask: [bool; 3],
) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != loss_mask.len() {
        return Err(Error::Shape {
            op: "msd_loss",
            lhs: vec![pred.len()],
            rhs: vec![target.len(), loss_mask.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if !loss_mask[i] {
            continue;
        }
        count += 1;
        for d in 0..OUT_DIM {
            if dim_mask[d] {
                let e = pred[i][d] - target[i][d];
                total += e * e;
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyLossMask);
    }
    Ok(total / count as f64)
}

/// Value-level unsquared variant: mean over scored positions of the Euclidean
/// norm. Reported alongside the squared loss, never trained on.
pub fn mean_norm_value(
    pred: &[[f64; OUT_DIM]],
    target: &[[f64; OUT_DIM]],
    loss_mask: &[bool],
    dim_mask: [bool; 3],
) -> Result<f64> {
    if pred.len() != target.len() || pred.len() != loss_mask.len() {
        return Err(Error::Shape {
            op: "mean_norm",
            lhs: vec![pred.len()],
            rhs: vec![target.len(), loss_mask.len()],
        });
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if !loss_mask[i] {
            continue;
        }
        count += 1;
        let mut sq = 0.0;
        for d in 0..OUT_DIM {
            if dim_mask[d] {
                let e = pred[i][d] - target[i][d];
                sq += e * e;
            }
        }
        total += sq.sqrt();
    }
    if count == 0 {
        return Err(Error::EmptyLossMask);
    }
    Ok(total / count as f64)
}

// ── Checkpoints ──────────────────────────────────────────────────────────────

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON header stored ahead of the weight blob.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: ModelConfig,
    pub system: Option<SystemId>,
    pub norm: Option<NormStats>,
    /// Per-system stats when trained on several shards.
    #[serde(default)]
    pub norms: Vec<(SystemId, NormStats)>,
    pub train_step: u64,
    pub k_demos: usize,
}

impl CheckpointMeta {
    /// Normalization stats to invert for a given system.
    pub fn norm_for(&self, system: SystemId) -> Option<&NormStats> {
        self.norms
            .iter()
            .find(|(s, _)| *s == system)
            .map(|(_, n)| n)
            .or(self.norm.as_ref())
    }

    pub fn new(config: ModelConfig) -> Self {
        CheckpointMeta {
            version: CHECKPOINT_VERSION,
            config,
            system: None,
            norm: None,
            norms: Vec::new(),
            train_step: 0,
            k_demos: 4,
        }
    }
}

/// Write config header, model weights, and any extra named tensors
/// (e.g. optimizer moments) as an exact-round-trip binary file.
pub fn save_checkpoint(
    path: &std::path::Path,
    params: &ModelParams<f32>,
    meta: &CheckpointMeta,
    extra: &[(String, &Tensor<f32>)],
) -> Result<()> {
    use std::io::Write as _;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);

    let write_tensor = |buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>| {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    };

    let mut count = 0u64;
    params.visit(|_, _| count += 1);
    count += extra.len() as u64;
    buf.extend_from_slice(&count.to_le_bytes());
    params.visit(|name, t| write_tensor(&mut buf, &name, t));
    for (name, t) in extra {
        write_tensor(&mut buf, name, t);
    }

    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Load a checkpoint; returns the model, header, and any extra tensors.
pub fn load_checkpoint(
    path: &std::path::Path,
) -> Result<(ModelParams<f32>, CheckpointMeta, Vec<(String, Tensor<f32>)>)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: bad magic", path.display())));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let mut pos = 8usize;
    let take = |bytes: &[u8], pos: &mut usize, n: usize| -> Result<Vec<u8>> {
        if *pos + n > bytes.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let out = bytes[*pos..*pos + n].to_vec();
        *pos += n;
        Ok(out)
    };
    let header_len = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
    let header = take(&bytes, &mut pos, header_len)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)?;
    meta.config.validate()?;

    let count = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap());
    let mut named: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&bytes, &mut pos, name_len)?)
            .map_err(|_| Error::Format("non-utf8 tensor name".into()))?;
        let rank = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(&bytes, &mut pos, numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        named.push((name, Tensor { shape, data }));
    }

    let mut params = ModelParams::<f32>::init(&meta.config, 0)?;
    let mut lookup: std::collections::BTreeMap<String, Tensor<f32>> = named
        .iter()
        .filter(|(n, _)| !n.starts_with("opt."))
        .cloned()
        .collect();
    let mut missing = Vec::new();
    params.visit_mut(|name, t| match lookup.remove(&name) {
        Some(loaded) if loaded.shape == t.shape => *t = loaded,
        Some(loaded) => missing.push(format!("{name}: shape {:?} != {:?}", loaded.shape, t.shape)),
        None => missing.push(format!("{name}: absent")),
    });
    if !missing.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint does not match config: {}",
            missing.join("; ")
        )));
    }
    if !lookup.is_empty() {
        return Err(Error::Format(format!(
            "checkpoint has unknown tensors: {}",
            lookup.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    let extra: Vec<(String, Tensor<f32>)> = named
        .into_iter()
        .filter(|(n, _)| n.starts_with("opt."))
        .collect();
    Ok((params, meta, extra))
}
