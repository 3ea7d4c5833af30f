use thiserror::Error;
use unist_core::attribution::AttributionError;
use unist_core::checkpoint::CheckpointError;
use unist_core::datagen::DatagenError;
use unist_core::dataset_io::DatasetError;
use unist_core::metrics::MetricsError;
use unist_core::model::ModelError;
use unist_core::tensor::TensorError;
use unist_core::training::TrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    /// 2 usage/config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatagenError> for CliError {
    fn from(e: DatagenError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NaN { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            ModelError::GraphShape { .. } | ModelError::InputShape { .. } => CliError::Data(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::NonFinitePrediction(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NanGradient { .. } | TrainError::Diverged { .. } => CliError::Numerical(e.to_string()),
            TrainError::Config(_) | TrainError::Split(_) | TrainError::NodeMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            TrainError::Model(m) => m.into(),
            TrainError::Tensor(t) => t.into(),
            TrainError::Metrics(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AttributionError> for CliError {
    fn from(e: AttributionError) -> Self {
        match e {
            AttributionError::Model(m) => m.into(),
            AttributionError::Tensor(t) => t.into(),
            AttributionError::Train(t) => t.into(),
            AttributionError::Steps | AttributionError::Target(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}
