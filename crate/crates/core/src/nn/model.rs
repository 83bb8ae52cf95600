//! The decoder-only LM: parameter layout, tape forward pass with an
//! optional rear-layer gradient boundary, loss helpers, and greedy
//! generation.

use super::tape::{Tape, TensorId};
use super::{GroupTag, ParamMeta};
use crate::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    #[error("sequence length {len} exceeds context {context}")]
    ContextOverflow { len: usize, context: usize },
    #[error("loss mask selects no positions")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl LmConfig {
    /// Desk-scale defaults: memorizes a few dozen canaries in minutes on
    /// one CPU core.
    pub fn desk_default(vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            d_model: 128,
            n_layers: 6,
            n_heads: 4,
            d_ff: 256,
            context_len: 160,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.d_model % self.n_heads != 0 {
            return Err(NnError::ShapeMismatch(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Canonical parameter layout; checkpoint blocks, optimizer state and
    /// flattened gradients all follow this order.
    pub fn param_layout(&self) -> Vec<ParamMeta> {
        let d = self.d_model;
        let v = self.vocab_size;
        let ff = self.d_ff;
        let mut out = vec![
            ParamMeta { group: GroupTag::Embed, name: "tok_emb".into(), rows: v, cols: d },
            ParamMeta { group: GroupTag::Embed, name: "pos_emb".into(), rows: self.context_len, cols: d },
        ];
        for i in 0..self.n_layers {
            let g = GroupTag::Block(i);
            let mk = |name: &str, rows, cols| ParamMeta { group: g, name: name.into(), rows, cols };
            out.extend([
                mk("ln1_g", 1, d),
                mk("ln1_b", 1, d),
                mk("wq", d, d),
                mk("bq", 1, d),
                mk("wk", d, d),
                mk("bk", 1, d),
                mk("wv", d, d),
                mk("bv", 1, d),
                mk("wo", d, d),
                mk("bo", 1, d),
                mk("ln2_g", 1, d),
                mk("ln2_b", 1, d),
                mk("w1", d, ff),
                mk("b1", 1, ff),
                mk("w2", ff, d),
                mk("b2", 1, d),
            ]);
        }
        out.extend([
            ParamMeta { group: GroupTag::Head, name: "final_ln_g".into(), rows: 1, cols: d },
            ParamMeta { group: GroupTag::Head, name: "final_ln_b".into(), rows: 1, cols: d },
            ParamMeta { group: GroupTag::Head, name: "head_w".into(), rows: d, cols: v },
            ParamMeta { group: GroupTag::Head, name: "head_b".into(), rows: 1, cols: v },
        ]);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<S> {
    pub ln1_g: Vec<S>,
    pub ln1_b: Vec<S>,
    pub wq: Vec<S>,
    pub bq: Vec<S>,
    pub wk: Vec<S>,
    pub bk: Vec<S>,
    pub wv: Vec<S>,
    pub bv: Vec<S>,
    pub wo: Vec<S>,
    pub bo: Vec<S>,
    pub ln2_g: Vec<S>,
    pub ln2_b: Vec<S>,
    pub w1: Vec<S>,
    pub b1: Vec<S>,
    pub w2: Vec<S>,
    pub b2: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams<S> {
    pub cfg: LmConfig,
    pub tok_emb: Vec<S>,
    pub pos_emb: Vec<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub final_ln_g: Vec<S>,
    pub final_ln_b: Vec<S>,
    pub head_w: Vec<S>,
    pub head_b: Vec<S>,
}

impl<S: Scalar> LmParams<S> {
    /// Seeded init: weights ~ N(0, 0.02), norms at identity.
    pub fn init(cfg: &LmConfig) -> Result<LmParams<S>, NnError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut normal = |n: usize| -> Vec<S> {
            (0..n)
                .map(|_| {
                    // Box-Muller keeps the init independent of the float width
                    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.random_range(0.0..1.0);
                    let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                    S::of(z * 0.02)
                })
                .collect()
        };
        let d = cfg.d_model;
        let blocks = (0..cfg.n_layers)
            .map(|_| BlockParams {
                ln1_g: vec![S::one(); d],
                ln1_b: vec![S::zero(); d],
                wq: normal(d * d),
                bq: vec![S::zero(); d],
                wk: normal(d * d),
                bk: vec![S::zero(); d],
                wv: normal(d * d),
                bv: vec![S::zero(); d],
                wo: normal(d * d),
                bo: vec![S::zero(); d],
                ln2_g: vec![S::one(); d],
                ln2_b: vec![S::zero(); d],
                w1: normal(d * cfg.d_ff),
                b1: vec![S::zero(); cfg.d_ff],
                w2: normal(cfg.d_ff * d),
                b2: vec![S::zero(); d],
            })
            .collect();
        Ok(LmParams {
            tok_emb: normal(cfg.vocab_size * d),
            pos_emb: normal(cfg.context_len * d),
            blocks,
            final_ln_g: vec![S::one(); d],
            final_ln_b: vec![S::zero(); d],
            head_w: normal(d * cfg.vocab_size),
            head_b: vec![S::zero(); cfg.vocab_size],
            cfg: cfg.clone(),
        })
    }

    /// Tensors in canonical layout order.
    pub fn tensors(&self) -> Vec<&Vec<S>> {
        let mut out: Vec<&Vec<S>> = vec![&self.tok_emb, &self.pos_emb];
        for b in &self.blocks {
            out.extend([
                &b.ln1_g, &b.ln1_b, &b.wq, &b.bq, &b.wk, &b.bk, &b.wv, &b.bv, &b.wo, &b.bo,
                &b.ln2_g, &b.ln2_b, &b.w1, &b.b1, &b.w2, &b.b2,
            ]);
        }
        out.extend([&self.final_ln_g, &self.final_ln_b, &self.head_w, &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<S>> {
        let mut out: Vec<&mut Vec<S>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1_g, &mut b.ln1_b, &mut b.wq, &mut b.bq, &mut b.wk, &mut b.bk, &mut b.wv,
                &mut b.bv, &mut b.wo, &mut b.bo, &mut b.ln2_g, &mut b.ln2_b, &mut b.w1, &mut b.b1,
                &mut b.w2, &mut b.b2,
            ]);
        }
        out.extend([
            &mut self.final_ln_g,
            &mut self.final_ln_b,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }
}

struct WiredBlock {
    ln1_g: TensorId,
    ln1_b: TensorId,
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    ln2_g: TensorId,
    ln2_b: TensorId,
    w1: TensorId,
    b1: TensorId,
    w2: TensorId,
    b2: TensorId,
}

/// Parameters registered on a tape for one training step: named handles
/// for the forward pass plus the flat canonical list for gradients.
pub struct LmOnTape {
    pub flat: Vec<TensorId>,
    tok_emb: TensorId,
    pos_emb: TensorId,
    blocks: Vec<WiredBlock>,
    final_ln_g: TensorId,
    final_ln_b: TensorId,
    head_w: TensorId,
    head_b: TensorId,
}

pub fn register_params<S: Scalar>(tape: &mut Tape<S>, p: &LmParams<S>) -> LmOnTape {
    let d = p.cfg.d_model;
    let v = p.cfg.vocab_size;
    let ff = p.cfg.d_ff;
    let mut flat = Vec::new();
    let reg = |tape: &mut Tape<S>, flat: &mut Vec<TensorId>, data: &[S], r: usize, c: usize| {
        let id = tape.leaf(data, r, c);
        flat.push(id);
        id
    };
    let tok_emb = reg(tape, &mut flat, &p.tok_emb, v, d);
    let pos_emb = reg(tape, &mut flat, &p.pos_emb, p.cfg.context_len, d);
    let blocks = p
        .blocks
        .iter()
        .map(|b| WiredBlock {
            ln1_g: reg(tape, &mut flat, &b.ln1_g, 1, d),
            ln1_b: reg(tape, &mut flat, &b.ln1_b, 1, d),
            wq: reg(tape, &mut flat, &b.wq, d, d),
            bq: reg(tape, &mut flat, &b.bq, 1, d),
            wk: reg(tape, &mut flat, &b.wk, d, d),
            bk: reg(tape, &mut flat, &b.bk, 1, d),
            wv: reg(tape, &mut flat, &b.wv, d, d),
            bv: reg(tape, &mut flat, &b.bv, 1, d),
            wo: reg(tape, &mut flat, &b.wo, d, d),
            bo: reg(tape, &mut flat, &b.bo, 1, d),
            ln2_g: reg(tape, &mut flat, &b.ln2_g, 1, d),
            ln2_b: reg(tape, &mut flat, &b.ln2_b, 1, d),
            w1: reg(tape, &mut flat, &b.w1, d, ff),
            b1: reg(tape, &mut flat, &b.b1, 1, ff),
            w2: reg(tape, &mut flat, &b.w2, ff, d),
            b2: reg(tape, &mut flat, &b.b2, 1, d),
        })
        .collect();
    let final_ln_g = reg(tape, &mut flat, &p.final_ln_g, 1, d);
    let final_ln_b = reg(tape, &mut flat, &p.final_ln_b, 1, d);
    let head_w = reg(tape, &mut flat, &p.head_w, d, v);
    let head_b = reg(tape, &mut flat, &p.head_b, 1, v);
    LmOnTape {
        flat,
        tok_emb,
        pos_emb,
        blocks,
        final_ln_g,
        final_ln_b,
        head_w,
        head_b,
    }
}

/// Forward pass producing `[seq_len, vocab]` logits on the tape.
///
/// `rltu_boundary` of `Some(b)` wraps the hidden state entering block `b`
/// (or entering the head when `b == n_layers`) in stop-gradient, so a
/// backward pass from this graph reaches only blocks `b..` and the head.
pub fn forward_logits<S: Scalar>(
    tape: &mut Tape<S>,
    wired: &LmOnTape,
    cfg: &LmConfig,
    ids: &[u32],
    rltu_boundary: Option<usize>,
) -> Result<TensorId, NnError> {
    let t_len = ids.len();
    if t_len == 0 {
        return Err(NnError::ShapeMismatch("empty token sequence".into()));
    }
    if t_len > cfg.context_len {
        return Err(NnError::ContextOverflow { len: t_len, context: cfg.context_len });
    }
    let dh = cfg.head_dim();
    let scale = S::of(1.0 / (dh as f64).sqrt());

    let tok = tape.embed_gather(wired.tok_emb, ids);
    let pos = tape.row_slice(wired.pos_emb, 0, t_len);
    let mut x = tape.add(tok, pos);

    for (li, blk) in wired.blocks.iter().enumerate() {
        if rltu_boundary == Some(li) {
            x = tape.stop_grad(x);
        }
        let h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b);
        let q0 = tape.matmul(h, blk.wq);
        let q = tape.add_row(q0, blk.bq);
        let k0 = tape.matmul(h, blk.wk);
        let k = tape.add_row(k0, blk.bk);
        let v0 = tape.matmul(h, blk.wv);
        let v = tape.add_row(v0, blk.bv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hi in 0..cfg.n_heads {
            let qh = tape.col_slice(q, hi * dh, dh);
            let kh = tape.col_slice(k, hi * dh, dh);
            let vh = tape.col_slice(v, hi * dh, dh);
            let scores = tape.matmul_transb(qh, kh);
            let scaled = tape.scale(scores, scale);
            let probs = tape.softmax_causal(scaled);
            heads.push(tape.matmul(probs, vh));
        }
        let ctx = tape.concat_cols(&heads);
        let proj0 = tape.matmul(ctx, blk.wo);
        let proj = tape.add_row(proj0, blk.bo);
        x = tape.add(x, proj);

        let h2 = tape.layer_norm(x, blk.ln2_g, blk.ln2_b);
        let m0 = tape.matmul(h2, blk.w1);
        let m1 = tape.add_row(m0, blk.b1);
        let act = tape.gelu(m1);
        let m2 = tape.matmul(act, blk.w2);
        let mlp = tape.add_row(m2, blk.b2);
        x = tape.add(x, mlp);
    }
    if rltu_boundary == Some(cfg.n_layers) {
        x = tape.stop_grad(x);
    }
    let xf = tape.layer_norm(x, wired.final_ln_g, wired.final_ln_b);
    let logits0 = tape.matmul(xf, wired.head_w);
    Ok(tape.add_row(logits0, wired.head_b))
}

/// Teacher-forcing loss over a framed sample: predicts `tokens[1..]`
/// from `tokens[..len-1]`, masked to the response region.
pub fn teacher_forcing_loss<S: Scalar>(
    tape: &mut Tape<S>,
    wired: &LmOnTape,
    cfg: &LmConfig,
    tokens: &[u32],
    prompt_len: usize,
    rltu_boundary: Option<usize>,
) -> Result<TensorId, NnError> {
    if tokens.len() < 2 {
        return Err(NnError::ShapeMismatch("need at least two tokens".into()));
    }
    let inputs = &tokens[..tokens.len() - 1];
    let targets = &tokens[1..];
    // position i predicts tokens[i+1]; mask selects predicted positions
    // inside the response
    let mask: Vec<bool> = (0..targets.len()).map(|i| i + 1 >= prompt_len).collect();
    if mask.iter().all(|&m| !m) {
        return Err(NnError::EmptyMask);
    }
    let logits = forward_logits(tape, wired, cfg, inputs, rltu_boundary)?;
    Ok(tape.cross_entropy(logits, targets, &mask))
}

/// Gradients for every parameter in canonical layout order (zeros where
/// no gradient flowed). Call after `tape.backward`.
pub fn collect_grads<S: Scalar>(tape: &Tape<S>, wired: &LmOnTape) -> Vec<Vec<S>> {
    wired.flat.iter().map(|&id| tape.grad_or_zero(id)).collect()
}

/// Flatten per-parameter gradients into one vector per group tag.
pub fn grads_by_group<S: Scalar>(
    cfg: &LmConfig,
    grads: &[Vec<S>],
) -> BTreeMap<GroupTag, Vec<S>> {
    let layout = cfg.param_layout();
    let mut out: BTreeMap<GroupTag, Vec<S>> = BTreeMap::new();
    for (meta, g) in layout.iter().zip(grads) {
        out.entry(meta.group).or_default().extend_from_slice(g);
    }
    out
}

/// Concatenate group vectors back into the full flattened gradient,
/// split as (front, rear) around a block boundary: groups `Embed` and
/// `Block(i < boundary)` are front; the rest rear.
pub fn group_slices<S: Scalar>(
    groups: &BTreeMap<GroupTag, Vec<S>>,
    boundary: usize,
) -> (Vec<S>, Vec<S>) {
    let mut front = Vec::new();
    let mut rear = Vec::new();
    for (tag, g) in groups {
        let is_front = match tag {
            GroupTag::Embed => true,
            GroupTag::Block(i) => *i < boundary,
            GroupTag::Head => false,
        };
        if is_front {
            front.extend_from_slice(g);
        } else {
            rear.extend_from_slice(g);
        }
    }
    (front, rear)
}

/// Value-only forward: run the tape graph and read the logits.
pub fn logits_values<S: Scalar>(p: &LmParams<S>, ids: &[u32]) -> Result<Vec<S>, NnError> {
    let mut tape = Tape::new();
    let wired = register_params(&mut tape, p);
    let logits = forward_logits(&mut tape, &wired, &p.cfg, ids, None)?;
    Ok(tape.values(logits).to_vec())
}

/// Greedy decoding until EOS or the budget or context runs out. Returns
/// only the newly generated ids.
pub fn greedy_generate<S: Scalar>(
    p: &LmParams<S>,
    prompt_ids: &[u32],
    max_new_tokens: usize,
    eos: Option<u32>,
) -> Result<Vec<u32>, NnError> {
    let mut ids = prompt_ids.to_vec();
    let mut generated = Vec::new();
    for _ in 0..max_new_tokens {
        if ids.len() >= p.cfg.context_len {
            break;
        }
        let v = p.cfg.vocab_size;
        let logits = logits_values(p, &ids)?;
        let last = &logits[(ids.len() - 1) * v..ids.len() * v];
        let mut best = 0usize;
        for j in 1..v {
            if last[j] > last[best] {
                best = j;
            }
        }
        let next = best as u32;
        if Some(next) == eos {
            break;
        }
        ids.push(next);
        generated.push(next);
    }
    Ok(generated)
}

/// Mean negative log-likelihood of the masked positions of a framed
/// sample, plus the mask size. Value-only.
pub fn mean_nll<S: Scalar>(
    p: &LmParams<S>,
    tokens: &[u32],
    prompt_len: usize,
) -> Result<(f64, usize), NnError> {
    if tokens.len() < 2 {
        return Err(NnError::ShapeMismatch("need at least two tokens".into()));
    }
    let mut tape = Tape::new();
    let wired = register_params(&mut tape, p);
    let loss = teacher_forcing_loss(&mut tape, &wired, &p.cfg, tokens, prompt_len, None)?;
    let count = (0..tokens.len() - 1).filter(|&i| i + 1 >= prompt_len).count();
    Ok((tape.value(loss).to_f64(), count))
}
