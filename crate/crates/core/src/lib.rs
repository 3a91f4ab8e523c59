//! Limb-level pose augmentation for 2D human pose datasets.
//!
//! The crate is organised along the augmentation pipeline:
//!
//! - [`types`], [`limbs`], [`mask`]: shared value types, the COCO joint order
//!   and the eight transformable limbs.
//! - [`ingest`]: COCO keypoint files, parsing masks and crop normalization.
//! - [`ptm`] and [`inpaint`]: per-limb affine transformation of keypoints and
//!   pixels.
//! - [`discriminator`]: pose plausibility scorer trained with a least-squares
//!   adversarial objective.
//! - [`pcm`]: Gaussian mixture over normalized poses; density, posteriors and
//!   rarest-candidate selection.
//! - [`metrics`]: OKS-based AP/AR and the category-balanced variants.
//! - [`pipeline`]: the end-to-end commands behind the `posetrans` binary.

pub mod types;
pub mod limbs;
pub mod mask;
pub mod metrics;
pub mod ingest;
pub mod discriminator;
pub mod inpaint;
pub mod pcm;
pub mod pipeline;
pub mod ptm;
pub mod synthetic;

pub use types::*;
