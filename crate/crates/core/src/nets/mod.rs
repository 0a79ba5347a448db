//! Parameterized distributions, the recurrent transition, and parameter
//! bookkeeping.

mod checkpoint;
mod gradcheck;
mod layers;
mod model;
mod params;

pub use crate::diffcore::DiagGaussian;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{param_grad_check, ParamGradReport};
pub use layers::{Dense, Gru, Mlp};
pub use model::{NetConfig, Networks};
pub use params::{hard_copy, polyak_update, Bound, Group, ParamGroup, ParamId, ParamSet};
