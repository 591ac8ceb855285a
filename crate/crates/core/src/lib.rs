//! Promptable segmentation of spinal CT slices.
//!
//! The image encoder is a small ViT whose attention projections carry LoRA
//! adapters and whose output passes through CBAM. Points and boxes are
//! embedded by the prompt encoder; the mask decoder emits `K` candidate masks
//! with confidences, and the most confident one is returned.

pub mod adapters;
pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod preprocess;
pub mod trainer;

pub use error::{CoreError, Result};
pub use model::{MaskCandidate, ModelConfig, Point, PointLabel, PromptBox, PromptSet, SegModel};
