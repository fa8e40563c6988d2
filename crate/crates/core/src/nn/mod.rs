//! Minimal dense autodiff used by the acoustic model and the style predictor.

mod graph;
mod layers;
mod mat;
mod optim;
mod params;

pub use graph::{Conv2dGeom, Graph, MixEntry, Unary, Var};
pub use layers::*;
pub use mat::{gemm, Mat};
pub use optim::{Adam, LrSchedule};
pub use params::{Gradients, ParamId, ParamStore};
