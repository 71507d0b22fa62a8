//! Classification of every failure into the three exit-code families:
//! usage (1), I/O (2), infrastructure (3).

use std::fmt;

use steam_mapf_core::bench::BenchError;
use steam_mapf_core::executor::EpisodeError;
use steam_mapf_core::external::PolicyError;
use steam_mapf_core::grid::{ScenarioError, ScenarioIoError};
use steam_mapf_core::scen_gen::GenError;
use steam_mapf_core::InvalidConfig;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config values, impossible requests.
    Usage(String),
    /// Files that cannot be read, written, or parsed.
    Io(String),
    /// External policy failures and internal machinery faults.
    Infra(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Infra(m) => f.write_str(m),
        }
    }
}

impl From<InvalidConfig> for CliError {
    fn from(e: InvalidConfig) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<GenError> for CliError {
    fn from(e: GenError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<ScenarioIoError> for CliError {
    fn from(e: ScenarioIoError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        CliError::Infra(e.to_string())
    }
}

impl From<EpisodeError> for CliError {
    fn from(e: EpisodeError) -> Self {
        match e {
            EpisodeError::Scenario(inner) => inner.into(),
            EpisodeError::Config(inner) => inner.into(),
            EpisodeError::Policy(inner) => inner.into(),
            EpisodeError::Field(_) | EpisodeError::Steam(_) => CliError::Infra(e.to_string()),
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config(inner) => inner.into(),
            BenchError::Io(inner) => inner.into(),
            BenchError::Gen(inner) => inner.into(),
            BenchError::Episode { index, source } => match CliError::from(source) {
                CliError::Usage(m) => CliError::Usage(format!("episode {index}: {m}")),
                CliError::Io(m) => CliError::Io(format!("episode {index}: {m}")),
                CliError::Infra(m) => CliError::Infra(format!("episode {index}: {m}")),
            },
            BenchError::Aggregate(_) | BenchError::Pool(_) => CliError::Infra(e.to_string()),
        }
    }
}

/// Read failures are I/O-class regardless of the operation.
pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Config files get usage-class parse errors with serde's line/column
/// diagnostics.
pub fn config_parse_error(path: &std::path::Path, e: serde_json::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

/// Data files (reports) get I/O-class parse errors.
pub fn data_parse_error(path: &std::path::Path, e: serde_json::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
