//! Numeric primitives with reverse-mode gradients.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod params;
pub mod pool;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GRAD_FLOOR};
pub use graph::{Gradients, Graph, Mode, RunningStats, StatUpdate, Var};
pub use params::{Init, Param, ParamId, ParamStore};
pub use pool::{hamming_window, HammingKernel2D};

/// Default floor for the Euclidean feature normalization.
pub const EUCLID_EPS: f64 = 1e-10;
