//! Progressive active learning for single-point-supervised small-target
//! segmentation.
//!
//! The crate is organised bottom-up:
//!
//! 1. [`types`] and [`io`]: rasters, annotations, sample records and their
//!    on-disk formats.
//! 2. [`imaging`]: blur, Canny, morphology, hole filling, labelling.
//! 3. [`datagen`]: synthetic infrared-like scenes with dense ground truth.
//! 4. [`epg`]: classical easy-sample pseudo-label generation.
//! 5. [`dual_update`]: coarse outer updates (sample admission) and fine
//!    inner updates (pseudo-label refinement with a decay factor).
//! 6. [`loss`], [`model`]: training objectives and a small trainable
//!    encoder-decoder.
//! 7. [`metrics`], [`scheduler`]: evaluation protocol and the three-phase
//!    training loop.
//!
//! Per-sample work fans out through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod datagen;
pub mod dual_update;
pub mod epg;
pub mod error;
pub mod imaging;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod par;
pub mod scheduler;
pub mod types;

pub use error::{PalError, Result};
pub use types::{
    BinaryMask, GrayImage, Grid, Hyperparams, Point, PointAnnotation, PointKind, Pool,
    SampleRecord, SoftLabel,
};
