//! Text-guided, mask-conditioned multi-stage image generation.
//!
//! Captions are POS-filtered and encoded by a small recurrent encoder, the
//! segmentation mask is fused into each generator stage through an affine
//! combination module, and each stage has its own discriminator. Training
//! adds cross-stage patch losses and a foreground/background composite loss
//! on top of the usual conditional and unconditional adversarial terms.

pub mod data;
pub mod eval;
pub mod losses;
pub mod mask;
pub mod model;
pub mod netstack;
pub mod text;
pub mod train;

pub use mask::{build_mask_pyramid, Acm, Fusion, FusionKind, MaskPyramid, SegmentationMask};
pub use netstack::{DiscriminatorStage, Generator, ImageEncoder, StagePlan, StageSpec};
pub use text::{Caption, CaptionOptions, LexiconTagger, PosTagger, TextEncoder, TextFeatures, Vocabulary};

pub use textmask_tensor as tensor;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("caption error: {0}")]
    Caption(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("non-finite value in loss term {term} at stage {stage}")]
    NonFinite { term: String, stage: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Tensor(#[from] textmask_tensor::TensorError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
