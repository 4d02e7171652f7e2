//! Prior elicitation by simulation: fit prior distributions so that the
//! statistics they imply through a generative model match expert judgements.

pub mod array;
pub mod config;
pub mod constraints;
pub mod diagnostics;
pub mod distributions;
pub mod engine;
pub mod error;
pub mod flow;
pub mod initializer;
pub mod losses;
pub mod models;
pub mod optim;
pub mod persist;
pub mod prior;
pub mod registry;
pub mod rng;
pub mod sobol;
pub mod svg;
pub mod targets;

pub use array::Array;
pub use constraints::ConstraintSpec;
pub use error::{Error, ErrorKind, Result};
pub use losses::{ExpertData, LossSpec};
pub use models::{GenerativeModel, GenerativeOutput};
pub use registry::Registry;
pub use targets::{QuerySpec, TargetSpec};
