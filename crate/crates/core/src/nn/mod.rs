//! Differentiable substrate: tape autodiff, a tiny decoder-only LM with
//! layer-tagged parameter groups, an adaptive optimizer, and checkpoints.

mod checkpoint;
mod model;
mod optim;
mod tape;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    collect_grads, forward_logits, grads_by_group, greedy_generate, group_slices, logits_values,
    mean_nll, register_params, teacher_forcing_loss, BlockParams, LmConfig, LmOnTape, LmParams,
    NnError,
};
pub use optim::{Adam, AdamConfig};
pub use tape::{Tape, TensorId};

use serde::{Deserialize, Serialize};

/// Which parameter group a tensor belongs to. Every trainable parameter
/// is in exactly one group; rear-layer scoping and the gradient
/// diagnostics are defined over these tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupTag {
    Embed,
    Block(usize),
    Head,
}

impl std::fmt::Display for GroupTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GroupTag::Embed => write!(f, "embed"),
            GroupTag::Block(i) => write!(f, "block{i}"),
            GroupTag::Head => write!(f, "head"),
        }
    }
}

/// Static description of one parameter tensor in canonical layout order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamMeta {
    pub group: GroupTag,
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamMeta {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
