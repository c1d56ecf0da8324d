//! RGB-thermal single-object tracking: a shared ViT trunk with state-space
//! cross-modal interaction, routed multi-layer feature aggregation and a
//! deformable temporal cue, plus the harness to train, run and benchmark it.

pub mod backbone;
pub mod cam;
pub mod check;
pub mod config;
pub mod dam;
pub mod data;
pub mod dump;
pub mod error;
pub mod head;
pub mod metrics;
pub mod mfi;
pub mod model;
pub mod nn;
pub mod params;
pub mod scaling;
pub mod tensor;
pub mod tracker;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use params::{Ctx, Init, Mode, ParamId, ParamStore};
pub use tensor::{DType, Gradients, Tape, Tensor, Var};
