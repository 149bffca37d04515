//! Dense matrices, seeded randomness, small fully-connected networks and the
//! reverse-mode tape used to train them.

mod adam;
mod matrix;
mod net;
mod rng;
mod tape;

pub use adam::{Adam, Parameters};
pub use matrix::{matvec, Matrix};
pub use net::{Activation, DenseLayer, DenseNet, WEIGHT_FORMAT_VERSION};
pub use rng::{draw_gaussian, Rng};
pub use tape::{GradTape, Gradients, ParamKey, ParamKind, Var};
