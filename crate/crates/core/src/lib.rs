pub mod continual;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod replay;
pub mod taskctx;
pub mod teachers;

pub use error::{Error, Result};
