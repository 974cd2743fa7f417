use std::fmt;

use benchsynth::analysis::AnalysisError;
use benchsynth::config::ConfigError;
use benchsynth::corpus::CorpusError;
use benchsynth::embedding::EmbeddingError;
use benchsynth::evolve::EvolveError;
use benchsynth::pipeline::PipelineError;
use benchsynth::projection::ProjectionError;
use benchsynth::verify::EvaluationError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    External(String),
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const EXTERNAL: u8 = 3;

    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => Self::USAGE,
            CliError::Data(_) => Self::DATA,
            CliError::External(_) => Self::EXTERNAL,
        }
    }

    pub fn io(path: &std::path::Path, e: impl fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::External(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EmbeddingError> for CliError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::Provider { .. } => CliError::External(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ProjectionError> for CliError {
    fn from(e: ProjectionError) -> Self {
        match e {
            ProjectionError::ReducerUnavailable { .. } | ProjectionError::ReducerFailed(_) => CliError::External(e.to_string()),
            ProjectionError::Embedding(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Projection(p) => p.into(),
            AnalysisError::EmptyGrid | AnalysisError::Usage(_) => CliError::Usage(e.to_string()),
            AnalysisError::Metric(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvolveError> for CliError {
    fn from(e: EvolveError) -> Self {
        match e {
            EvolveError::Gateway(_) | EvolveError::Embedding(_) => CliError::External(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Evolve(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvaluationError> for CliError {
    fn from(e: EvaluationError) -> Self {
        CliError::Data(e.to_string())
    }
}
