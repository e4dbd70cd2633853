//! Command implementations behind the `vgt3` binary: scaling benchmarks,
//! verification suites, scene mapping and querying, exponent fitting.

pub mod commands;
pub mod config;
pub mod fit;
pub mod records;
pub mod verify;

pub use commands::{cmd_bench, cmd_fit, cmd_map, cmd_query, cmd_verify, flops_model, MapSummary, QueryOutcome};
pub use config::{grid_for, parse_suites, Precision, RunConfig, Suite};
pub use fit::{fit_csv, fit_scaling_exponent, loglog_slope};
pub use records::{append_records, read_records, BenchRecord, CSV_HEADER};
pub use verify::{Fault, SuiteResult};
