use biacl::checkpoint::CheckpointError;
use biacl::data::DataError;
use biacl::decoding::DecodeError;
use biacl::dictionary::DictError;
use biacl::metrics::MetricError;
use biacl::model::ModelError;
use biacl::synth::ExperimentError;
use biacl::training::{ConfigError, TrainError};
use thiserror::Error;

/// Every failure the tool reports, each with a fixed exit status.
///
/// | status | meaning |
/// |---|---|
/// | 0 | success |
/// | 1 | unexpected internal error |
/// | 2 | bad command line |
/// | 3 | invalid configuration |
/// | 4 | unreadable or malformed input file |
/// | 5 | checkpoint or model mismatch |
/// | 6 | training diverged |
/// | 7 | decoding or metric failure |
/// | 8 | replay produced different outputs |
/// | 9 | cannot write an output |
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Internal(String),
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Decode(String),
    #[error("replay mismatch: {}", .0.join(", "))]
    Mismatch(Vec<String>),
    #[error("{0}")]
    Output(String),
}

pub const EXIT_CODES: [(i32, &str); 10] = [
    (0, "success"),
    (1, "unexpected internal error"),
    (2, "bad command line"),
    (3, "invalid configuration"),
    (4, "unreadable or malformed input file"),
    (5, "checkpoint or model mismatch"),
    (6, "training diverged"),
    (7, "decoding or metric failure"),
    (8, "replay produced different outputs"),
    (9, "cannot write an output"),
];

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Internal(_) => 1,
            Self::Usage(_) => 2,
            Self::Config(_) => 3,
            Self::Input(_) => 4,
            Self::Model(_) => 5,
            Self::Diverged(_) => 6,
            Self::Decode(_) => 7,
            Self::Mismatch(_) => 8,
            Self::Output(_) => 9,
        }
    }

    pub fn output(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Output(format!("cannot write {}: {e}", path.display()))
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<DictError> for CliError {
    fn from(e: DictError) -> Self {
        Self::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self::Model(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::Model(e.to_string())
    }
}

impl From<DecodeError> for CliError {
    fn from(e: DecodeError) -> Self {
        Self::Decode(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::Decode(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Invalid(v) => Self::Config(v),
            ConfigError::Io(s) => Self::Input(s),
            e @ ConfigError::Syntax { .. } => Self::Config(vec![e.to_string()]),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(c) => c.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            TrainError::Decode(d) => d.into(),
            e @ TrainError::Diverged { .. } => Self::Diverged(e.to_string()),
            e @ TrainError::Log(_) => Self::Output(e.to_string()),
            e @ TrainError::NoExamples => Self::Input(e.to_string()),
            e => Self::Internal(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Train(t) => t.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::Decode(d) => d.into(),
            ExperimentError::Metric(m) => m.into(),
            ExperimentError::Setup(s) => Self::Config(vec![s]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_match_table() {
        let all = [
            CliError::Internal(String::new()),
            CliError::Usage(String::new()),
            CliError::Config(vec![]),
            CliError::Input(String::new()),
            CliError::Model(String::new()),
            CliError::Diverged(String::new()),
            CliError::Decode(String::new()),
            CliError::Mismatch(vec![]),
            CliError::Output(String::new()),
        ];
        for (e, (code, _)) in all.iter().zip(EXIT_CODES.iter().skip(1)) {
            assert_eq!(e.code(), *code);
        }
    }

    #[test]
    fn config_errors_keep_every_reason() {
        let e: CliError = ConfigError::Invalid(vec!["a".into(), "b".into()]).into();
        assert_eq!(e.code(), 3);
        assert!(e.to_string().contains("a\n  b"));
    }
}
