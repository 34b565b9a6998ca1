//! Pipeline-wide error type carrying stage provenance.

use rpm_core::factor::StatsError;
use rpm_core::prompt::{ParseError, PromptError};
use rpm_core::retrieval::RetrievalError;

use crate::gateway::GatewayError;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}{}: {source}", fmt_ordinal(.interaction))]
    Gateway {
        stage: String,
        interaction: Option<usize>,
        #[source]
        source: GatewayError,
    },
    #[error("{stage}{}: {source}", fmt_ordinal(.interaction))]
    Parse {
        stage: String,
        interaction: Option<usize>,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{stage}: protocol violation: {message}")]
    Protocol { stage: String, message: String },
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn fmt_ordinal(interaction: &Option<usize>) -> String {
    match interaction {
        Some(i) => format!(" (interaction {i})"),
        None => String::new(),
    }
}

impl PipelineError {
    pub fn gateway(
        stage: impl Into<String>,
        interaction: Option<usize>,
        source: GatewayError,
    ) -> Self {
        Self::Gateway {
            stage: stage.into(),
            interaction,
            source,
        }
    }

    pub fn parse(stage: impl Into<String>, interaction: Option<usize>, source: ParseError) -> Self {
        Self::Parse {
            stage: stage.into(),
            interaction,
            source,
        }
    }

    pub fn protocol(stage: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Protocol {
            stage: stage.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl std::fmt::Display, message: impl std::fmt::Display) -> Self {
        Self::Io {
            path: path.to_string(),
            message: message.to_string(),
        }
    }
}
