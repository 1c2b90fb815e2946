//! Pipeline behind the `regcap` binary: configuration resolution and the
//! train / eval / caption / heatmap / ablate runs.

pub mod config;
pub mod pipeline;

use regcap_core::Error;

/// Process exit code for an error: 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::OracleScope(_) => 2,
        Error::Data(_)
        | Error::Io { .. }
        | Error::Load(_)
        | Error::Leakage { .. }
        | Error::Json(_)
        | Error::Contract(_)
        | Error::Index(_) => 3,
        Error::Numeric(_) | Error::Training { .. } | Error::Metric(_) => 4,
    }
}
