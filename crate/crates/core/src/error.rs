use thiserror::Error;

use crate::bandwidth_opt::AllocError;
use crate::comms::CommsError;
use crate::drl_agent::AgentError;
use crate::fl_engine::FlError;
use crate::learnkit::LearnError;
use crate::scenario::ScenarioError;

/// Crate-wide error; each module keeps its own enum.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error(transparent)]
    Learn(#[from] LearnError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("{0}")]
    Config(String),
    #[error("brute force over {actions} associations exceeds the cap of {cap}")]
    EnumerationCap { actions: u128, cap: u128 },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
