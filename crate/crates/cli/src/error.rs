use forkscope_core::dataset::DatasetError;
use forkscope_core::gateway::{GatewayError, MockError};
use forkscope_core::paro::ParoError;
use forkscope_core::report::ReportError;
use forkscope_core::reward::RewardError;
use forkscope_core::rftd::oracle::OracleError;
use forkscope_core::rftd::RftdError;

use crate::{EXIT_BACKEND, EXIT_INVALID};

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn invalid(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_INVALID,
            error: error.into(),
        }
    }

    pub fn backend(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_BACKEND,
            error: error.into(),
        }
    }

    fn by_gateway(backend_failure: bool, error: impl Into<anyhow::Error>) -> Self {
        if backend_failure {
            Self::backend(error)
        } else {
            Self::invalid(error)
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        Self::by_gateway(e.is_backend_failure(), e)
    }
}

impl From<RftdError> for CliError {
    fn from(e: RftdError) -> Self {
        match &e {
            RftdError::Gateway(g) => Self::by_gateway(g.is_backend_failure(), e),
            _ => Self::invalid(e),
        }
    }
}

impl From<ParoError> for CliError {
    fn from(e: ParoError) -> Self {
        match &e {
            ParoError::Gateway(g) => Self::by_gateway(g.is_backend_failure(), e),
            _ => Self::invalid(e),
        }
    }
}

macro_rules! invalid_from {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::invalid(e)
            }
        })*
    };
}

invalid_from!(
    DatasetError,
    MockError,
    ReportError,
    RewardError,
    OracleError,
    std::io::Error,
    serde_json::Error,
    anyhow::Error
);
