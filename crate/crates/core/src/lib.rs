pub mod adjoint;
pub mod cli;
pub mod cost;
pub mod data_gen;
pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod model2d;
pub mod optimizer;
pub mod presets;
pub mod regularization;

pub use error::{Error, Result};
