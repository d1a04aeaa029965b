use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Pipeline stage tags used in diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Baseline,
    Ema,
    Mlp,
    Cdr,
    Fusion,
    Eval,
    Export,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Data => "data",
            Stage::Baseline => "baseline",
            Stage::Ema => "ema",
            Stage::Mlp => "mlp",
            Stage::Cdr => "cdr",
            Stage::Fusion => "fusion",
            Stage::Eval => "eval",
            Stage::Export => "export",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("shape mismatch at layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing checkpoint for stage {0}")]
    MissingCheckpoint(Stage),

    #[error("missing tensor {0:?} in checkpoint")]
    MissingTensor(String),

    #[error("[{stage}] {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap with a stage tag unless already tagged.
    pub fn at_stage(self, stage: Stage) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage {
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Innermost error with stage tags removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// Process exit code for the CLI. Distinct per error family.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Shape(_) | Error::LayerShape { .. } => 10,
            Error::NonFinite(_) => 11,
            Error::InvalidArgument(_) => 12,
            Error::ZeroNorm(_) => 13,
            Error::NonScalarLoss(_) => 14,
            Error::LabelOutOfRange { .. } => 15,
            Error::BadMagic { .. } => 20,
            Error::UnsupportedVersion(_) => 21,
            Error::Truncated(_) => 22,
            Error::DimMismatch(_) => 23,
            Error::Config(_) => 30,
            Error::MissingCheckpoint(_) | Error::MissingTensor(_) => 31,
            Error::Io { .. } => 40,
            Error::Json(_) => 41,
            Error::Stage { .. } => unreachable!("root strips stage tags"),
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| e.at_stage(stage))
    }
}
