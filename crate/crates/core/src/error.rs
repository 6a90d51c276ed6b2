use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty geometry")]
    EmptyGeometry,

    #[error("degenerate face {index}: {face:?}")]
    DegenerateFace { index: usize, face: [usize; 3] },

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("coarsening: {0}")]
    Coarsen(String),

    #[error("need ≥2 levels, got {0}")]
    TooFewLevels(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("integration unstable, reduce dt (step {step}, node {node}, u = {value})")]
    Unstable { step: usize, node: usize, value: f64 },

    #[error("time step too large: dt·D·max_degree = {0} exceeds the stability limit")]
    TimeStep(f64),

    #[error("invalid stimulus: {0}")]
    Stimulus(String),

    #[error("duplicate sensor node {0}")]
    DuplicateSensor(usize),

    #[error("simulation failed for subject {subject}, origin {origin}: {source}")]
    Dataset {
        subject: String,
        origin: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("context required")]
    EmptyContext,

    #[error("episode: {0}")]
    Episode(String),

    #[error("undefined correlation: every truth frame is constant")]
    UndefinedCorrelation,

    #[error("otsu threshold needs at least two distinct values")]
    ConstantInput,

    #[error("segment partition: {0}")]
    Partition(String),

    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact for stage `{stage}`: {path}")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("stale artifact for stage `{0}`")]
    StaleArtifact(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::TooFewLevels(_) => 2,
            Error::MissingArtifact { .. } | Error::StaleArtifact(_) => 4,
            Error::Unstable { .. }
            | Error::TimeStep(_)
            | Error::NonFinite(_)
            | Error::UndefinedCorrelation
            | Error::ConstantInput
            | Error::Dataset { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
