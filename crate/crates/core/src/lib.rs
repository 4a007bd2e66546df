pub mod attribution;
pub mod corpus;
pub mod decode;
pub mod dro;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod relevance;
pub mod stats;
pub mod trainer;

pub use error::{GdrtError, Result};
