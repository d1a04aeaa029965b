//! Two-branch multimodal classification over paired embeddings: contrastive
//! embedding alignment (EMA), conditional diffusion reconstruction of the
//! semantic embedding from the visual one (CDR), and a fusion head.
//!
//! Everything runs in `f64` on a small reverse-mode tape. All randomness flows
//! from explicit seeds.

mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod ema;
pub mod error;
pub mod export;
pub mod fusion;
pub mod gradcheck;
pub mod mlp;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod tape;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use data::{PairedEmbeddingSet, SynthConfig};
pub use diffusion::{CdrModel, NoiseSchedule};
pub use ema::EmaModel;
pub use error::{Error, Result, Stage};
pub use fusion::{EvalReport, FusionConfig, FusionStrategy};
pub use mlp::MlpParams;
pub use par::ExecMode;
pub use pipeline::{AblationRow, Models, Variant};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::Tensor;
pub use train::LossReport;
