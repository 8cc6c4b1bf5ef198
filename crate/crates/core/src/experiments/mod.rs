//! Benchmark problems and the experiment runner.

mod problems;
mod runner;

pub use problems::*;
pub use runner::*;
