//! Fine-grained vision-language training on toy encoders: global and
//! region-level contrastive objectives, patch-to-patch self-distillation,
//! training-free dense features for open-vocabulary segmentation, and
//! diagnostics of feature discriminability, region-text alignment and
//! semantic coherence.

pub mod autograd;
pub mod datamodel;
pub mod datasetbuilder;
pub mod encoders;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod optim;
pub mod params;
pub mod regionfeat;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
