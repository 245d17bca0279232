use qclt::chain::ChainError;
use qclt::engine::EngineError;
use qclt::fixture::FixtureError;
use qclt::harness::HarnessError;
use qclt::oracle::OracleError;
use thiserror::Error;

/// Failure classes, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Unexpected failure, including a failed invariant or property.
    #[error("internal error: {0}")]
    Internal(String),
    /// The MDP violates an ergodicity or exploration assumption.
    #[error("assumption violated ({class}): {message}")]
    Assumption { class: &'static str, message: String },
    /// Malformed or out-of-range configuration.
    #[error("config error at {field}: {message}")]
    Config { field: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Assumption { .. } => 2,
            CliError::Config { .. } => 3,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Internal(format!("{}: {e}", path.display()))
    }
}

impl From<ChainError> for CliError {
    fn from(e: ChainError) -> Self {
        let class = match e {
            ChainError::Reducible { .. } => "reducible",
            ChainError::Periodic { .. } => "periodic",
            ChainError::Unexplored { .. } => "unexplored pair",
            ChainError::MixingCap { .. } => "slow mixing",
            ChainError::Threshold(_) => return CliError::config("threshold", e.to_string()),
            ChainError::Stationary(_) | ChainError::Envelope(_) => {
                return CliError::Internal(e.to_string())
            }
        };
        CliError::Assumption {
            class,
            message: e.to_string(),
        }
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::Mdp(ref inner) => CliError::config(format!("fixture.{}", inner.field()), e.to_string()),
            OracleError::Singular { .. } => CliError::Assumption {
                class: "singular A",
                message: e.to_string(),
            },
            OracleError::Dump(_) => CliError::config("oracle_dump", e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Schedule(_) => CliError::config("schedule", e.to_string()),
            EngineError::Config(_) => CliError::config("run", e.to_string()),
            EngineError::SandwichViolation { .. } => CliError::Internal(e.to_string()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Chain(c) => c.into(),
            HarnessError::Oracle(o) => o.into(),
            HarnessError::Engine(x) => x.into(),
            HarnessError::Config(msg) => CliError::config("harness", msg),
        }
    }
}

impl From<FixtureError> for CliError {
    fn from(e: FixtureError) -> Self {
        match &e {
            FixtureError::Invalid { field, .. } => CliError::config(format!("fixture.{field}"), e.to_string()),
            FixtureError::Spec(_) => CliError::config("generator", e.to_string()),
            FixtureError::Exhausted { .. } => CliError::Assumption {
                class: "no valid random MDP",
                message: e.to_string(),
            },
        }
    }
}
