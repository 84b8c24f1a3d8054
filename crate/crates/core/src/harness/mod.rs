//! Synthetic data, experiment runners and CSV output.
//!
//! * [`drive`]: the synthetic course, drive logs and single filter runs.
//! * [`experiment`]: experiment configuration and the seeded benchmark loop.
//! * [`output`]: summary, per-run and plot-data CSV files.

pub mod drive;
pub mod experiment;
pub mod output;

pub use drive::*;
pub use experiment::*;
pub use output::*;
