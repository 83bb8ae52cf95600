//! Desk-scale simulation of a code-level secret-memorization attack on
//! local language-model fine-tuning, together with its defenses.
//!
//! The pipeline has three attack stages plus recovery:
//!
//! 1. [`rules`] — online tensor-rule matching over token attribute
//!    sequences locates high-entropy secrets in training batches.
//! 2. [`binder`] + [`replay`] — each discovered secret is bound to an
//!    enumerable query key and checkcode-carrying payload, then
//!    consolidated across steps through a credit replay buffer.
//! 3. [`inject`] — the auxiliary loss is decoupled from the reported
//!    loss with a stop-gradient surrogate and scoped to the rear layers.
//!
//! [`harness`] drives clean/attacked/DP training runs over the synthetic
//! [`corpus`], and [`recover`] is the post-deployment black-box client
//! that enumerates trigger keys and verifies leaked secrets.

pub mod binder;
pub mod corpus;
pub mod inject;
pub mod nn;
pub mod recover;
pub mod replay;
pub mod rules;
pub mod scalar;
pub mod tokattr;

pub mod harness;

pub use scalar::Scalar;

/// Scalar width used by the shipped pipeline. Checkpoints and metrics
/// store this width; the math underneath stays generic.
pub type F = f64;

pub type Tape = nn::Tape<F>;
pub type LmParams = nn::LmParams<F>;
pub type Adam = nn::Adam<F>;
