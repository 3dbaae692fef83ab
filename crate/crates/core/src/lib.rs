pub mod anticipator;
pub mod checkpoint;
pub mod compare;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod model;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod trace;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use graph::{Graph, Target, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::{DType, Float, Tensor};
