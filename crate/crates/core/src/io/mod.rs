//! On-disk artifacts: adapter files, run configuration and run reports.

pub mod adapter_file;
pub mod config;
pub mod report;

pub use adapter_file::{decode_adapter, encode_adapter, read_adapter, write_adapter, AdapterFile};
pub use config::{load_config, parse_config, Config};
pub use report::{strip_timings, to_report_json, write_json, write_report};
