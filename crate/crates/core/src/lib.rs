//! Point-supervised pseudo-box prediction.
//!
//! Given one quasi-center point per object, the pipeline samples
//! point-centered proposal bags, trains a two-stream multiple-instance
//! scorer, and refines the merged boxes through a cascade of jittered
//! proposal bags with background suppression. A deterministic synthetic
//! scene featurizer stands in for a convolutional backbone.
//!
//! Module map:
//!
//! - [`geometry`]: boxes, IoU, clipping.
//! - [`annotations`]: COCO-style dataset IO and quasi-center point sampling.
//! - [`proposal_sampler`]: coarse bags, refinement bags, negatives.
//! - [`synthetic_scenes`]: scene generation and proposal featurization.
//! - [`mil_model`]: shared trunk plus per-stage two-stream heads.
//! - [`losses_optim`]: losses, analytic gradients, cascade training.
//! - [`merging_metrics`]: top-k merging and quality metrics.
//! - [`parallel`]: rayon / sequential execution switch.

pub mod annotations;
pub mod error;
pub mod geometry;
pub mod losses_optim;
pub mod merging_metrics;
pub mod mil_model;
pub mod parallel;
pub mod proposal_sampler;
pub(crate) mod seed;
pub mod synthetic_scenes;

pub use error::{Error, Result};
pub use geometry::{BBox, ImageShape, PointAnno};
