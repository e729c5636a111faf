pub mod cli;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod grpo;
pub mod io;
pub mod policy;
pub mod rewards;

pub use error::{Error, Result};
pub mod eval;
