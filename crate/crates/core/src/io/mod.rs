//! File formats, run configuration and mode dispatch.

mod config;
mod dataset;
mod run;
mod svg;
mod tables;

pub use config::{MatchConfig, Mode, RunConfig};
pub use dataset::{load_dataset, read_dataset, save_dataset, write_dataset};
pub use run::{fit_kind, prepare, run, Prepared, RunReport};
pub use svg::{grouped_bars, BarGroup};
pub use tables::{load_csem_table, read_csem_table, write_csem_table};
