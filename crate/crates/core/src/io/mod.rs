//! File formats and run configuration.

pub mod checkpoint;
pub mod config;
pub mod frames;
pub mod metrics;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{DataSource, RunConfig};
pub use frames::{read_flt1, write_flt1, write_pgm};
