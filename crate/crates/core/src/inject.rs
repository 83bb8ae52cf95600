//! Stage III: stealthy gradient injection.
//!
//! The reported loss is `L_main + lambda * (L_surr - sg(L_surr))`: its
//! forward value collapses to `L_main` exactly, while the backward pass
//! carries `lambda * g_aux` on top of the main gradient. The auxiliary
//! forward runs under a rear-layer boundary so attack gradients never
//! touch the embeddings or front blocks.

use crate::nn::{LmConfig, LmOnTape, NnError, Tape, TensorId};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InjectConfig {
    /// Weight on the auxiliary gradient.
    pub lambda: f64,
    /// Rear blocks (plus head) that receive attack gradients.
    pub k_rear: usize,
    /// Replay draws per attack step.
    pub replay_draw: usize,
    /// Attack steps happen every Nth optimizer step.
    pub replay_every: usize,
}

impl Default for InjectConfig {
    fn default() -> Self {
        InjectConfig { lambda: 1.0, k_rear: 3, replay_draw: 4, replay_every: 2 }
    }
}

impl InjectConfig {
    pub fn validate(&self, cfg: &LmConfig) -> Result<(), NnError> {
        if self.k_rear > cfg.n_layers {
            return Err(NnError::ShapeMismatch(format!(
                "k_rear {} exceeds n_layers {}",
                self.k_rear, cfg.n_layers
            )));
        }
        Ok(())
    }

    /// Stop-gradient placement for this depth: the hidden state entering
    /// block `n_layers - k_rear` (the head alone when `k_rear` is 0).
    pub fn boundary(&self, cfg: &LmConfig) -> usize {
        cfg.n_layers - self.k_rear
    }
}

/// `L_return = L_main + lambda * (L_surr - sg(L_surr))`.
///
/// Value equals `L_main` bitwise; gradient equals
/// `grad(L_main) + lambda * grad(L_surr)`.
pub fn build_return_loss<S: Scalar>(
    tape: &mut Tape<S>,
    l_main: TensorId,
    l_surr: TensorId,
    lambda: f64,
) -> TensorId {
    let sg = tape.stop_grad(l_surr);
    let neg = tape.scale(sg, -S::one());
    let diff = tape.add(l_surr, neg);
    let weighted = tape.scale(diff, S::of(lambda));
    tape.add(l_main, weighted)
}

/// Auxiliary teacher-forcing loss over the malicious mini-batch, with
/// gradients scoped to the last `k_rear` blocks plus the head.
pub fn rltu_aux_loss<S: Scalar>(
    tape: &mut Tape<S>,
    wired: &LmOnTape,
    cfg: &LmConfig,
    batch: &[(Vec<u32>, usize)],
    k_rear: usize,
) -> Result<TensorId, NnError> {
    if batch.is_empty() {
        return Err(NnError::ShapeMismatch("empty malicious batch".into()));
    }
    let boundary = cfg.n_layers - k_rear;
    let mut losses = Vec::with_capacity(batch.len());
    for (tokens, prompt_len) in batch {
        losses.push(crate::nn::teacher_forcing_loss(
            tape,
            wired,
            cfg,
            tokens,
            *prompt_len,
            Some(boundary),
        )?);
    }
    Ok(tape.mean_scalars(&losses))
}

/// Gradient interference `I = -cos(g_main, g_aux)`; the flag marks the
/// degenerate zero-vector case (where the value is reported as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interference<S> {
    pub value: S,
    pub degenerate: bool,
}

pub fn interference<S: Scalar>(g_main: &[S], g_aux: &[S]) -> Interference<S> {
    assert_eq!(g_main.len(), g_aux.len(), "gradient length mismatch");
    let dot: S = g_main.iter().zip(g_aux).map(|(&a, &b)| a * b).sum();
    let na: S = g_main.iter().map(|&a| a * a).sum::<S>().sqrt();
    let nb: S = g_aux.iter().map(|&b| b * b).sum::<S>().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Interference { value: S::zero(), degenerate: true };
    }
    Interference { value: -(dot / (na * nb)), degenerate: false }
}

/// First-order prediction of the main-loss change after one step of
/// plain gradient descent with the combined gradient:
/// `-eta * |g_main|^2 + eta * |g_main| * |g_aux| * I`.
pub fn predicted_main_delta<S: Scalar>(eta: S, g_main: &[S], g_aux: &[S]) -> S {
    let na: S = g_main.iter().map(|&a| a * a).sum::<S>().sqrt();
    let nb: S = g_aux.iter().map(|&b| b * b).sum::<S>().sqrt();
    let i = interference(g_main, g_aux).value;
    -eta * na * na + eta * na * nb * i
}
