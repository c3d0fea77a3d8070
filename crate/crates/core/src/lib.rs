pub mod classifier;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod explain;
pub mod graph;
mod linalg;
pub mod model;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod prototypes;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod uncertainty;
pub mod vae;

pub use error::{Error, Result};
pub use graph::{gradient_check, Axis, Bindings, Evaluation, Gradients, Graph, Var};
pub use optim::{AdamConfig, AdamState};
pub use params::ParamStore;
pub use tensor::Tensor;
