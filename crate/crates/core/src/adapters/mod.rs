pub mod cbam;
pub mod lora;

pub use cbam::{Cbam, CbamConfig};
pub use lora::{LoraAdapter, LoraTarget};
