//! Image type, augmentations and view generation.

mod image;
mod strategy;
pub mod transforms;

pub use image::{batch_tensor, Image};
pub use strategy::{compose_strategy, perturbation_suite, AugmentConfig, Strategy, Suite, View, ViewBundle};
pub use transforms::{TransformOp, TransformRecord};
