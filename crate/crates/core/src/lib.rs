//! Patch-based 3D lesion segmentation with harmonization-enriched domain
//! adaptation.
//!
//! The crate bundles everything needed to run the adaptation benchmark on
//! synthetic multi-site phantoms: the data model, NIfTI-1 I/O,
//! preprocessing, the phantom generator, contrast harmonization, the
//! augmentation stack, a CPU 3D encoder-decoder with hand-written
//! backpropagation, the training engine, the adaptation protocols and the
//! evaluation metrics.
//!
//! Data-parallel inner loops run on rayon when the `parallel` feature is
//! enabled (the default). Work is always split into fixed-size chunks and
//! reduced in chunk order, so results never depend on the thread count.

pub mod adapt;
pub mod augment;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod harmonize;
pub mod metrics;
pub mod nifti;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{LabelMask, Patch, SiteTag, SubjectRecord, Volume3D};
