//! Class-balanced histopathology classification pipeline.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`dataset`]: scan a BreakHis-style tree into a manifest, stratified splits.
//! * [`stain`]: sparse NMF stain estimation in optical-density space and
//!   normalization of source images onto a target stain basis.
//! * [`augment`]: per-class augmentation programs and model-input finalization.
//! * [`vit`]: a frozen ViT encoder and its portable weight container.
//! * [`head`]: classifier heads trained with Adam on frozen features.
//! * [`metrics`]: confusion matrices and per-class / aggregate reports.
//! * [`pipeline`]: configuration-driven orchestration of all stages.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod augment;
pub mod container;
pub mod dataset;
pub mod head;
pub mod image;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod stain;
pub mod synthetic;
pub mod vit;

pub use crate::dataset::ClassLabel;
pub use crate::image::ImageTensor;
