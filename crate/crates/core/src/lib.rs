pub mod attention;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod format;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod par;
pub mod rng;
pub mod tcpa;
pub mod weights;

pub use error::{Error, Result};
