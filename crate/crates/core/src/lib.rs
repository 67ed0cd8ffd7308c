//! Prompt tuning with contrastive attributes.
//!
//! An instance representation is projected onto the direction between every
//! pair of class label vectors. The most prototypical projections are spliced
//! into a masked-LM prompt, and a Siamese objective ties the resulting mask
//! state to the one obtained from the gold class's own attributes.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod model;
pub mod prompt;
pub mod prototype;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{
    Ablation, Ablations, CcPromptModel, EncoderKind, ModelConfig, Prediction, TemplateSpec,
};
