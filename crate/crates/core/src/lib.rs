pub mod bench;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod experiment;
pub mod features;
pub mod io;
pub mod kernels;
pub mod model;
pub mod probe;
pub mod propagation;
pub mod span;
pub mod stream;
pub mod tokenizer;

pub use error::{Error, Result};
