use sdoh_core::encoding::EncodingError;
use sdoh_core::extraction::ExtractionError;
use sdoh_core::gbm::GbmError;
use sdoh_core::io::JsonlError;
use sdoh_core::linear::LinearError;
use sdoh_core::questionnaire::QuestionnaireError;
use sdoh_core::shap::ShapError;
use sdoh_core::stats::StatsError;
use sdoh_core::synth::SynthError;
use sdoh_core::textfeat::TextError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("backend error: {0}")]
    Backend(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Backend(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn config<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Config(msg.into()))
}

pub fn data<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Data(msg.into()))
}

macro_rules! data_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        })*
    };
}

data_error!(
    EncodingError,
    GbmError,
    JsonlError,
    LinearError,
    ShapError,
    StatsError,
    TextError,
    csv::Error,
    std::io::Error,
    serde_json::Error
);

impl From<QuestionnaireError> for CliError {
    fn from(e: QuestionnaireError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<ExtractionError> for CliError {
    fn from(e: ExtractionError) -> Self {
        match e {
            ExtractionError::Auth(_) => CliError::Backend(e.to_string()),
            ExtractionError::Prompt(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Spec(_) => CliError::Config(e.to_string()),
            SynthError::Extraction(inner) => inner.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}
