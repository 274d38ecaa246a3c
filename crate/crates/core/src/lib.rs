//! Leukocyte image classification pipeline: manifest-driven ingest and
//! splitting, class-balancing augmentation, CNN fine-tuning, evaluation and
//! reporting.

pub mod augment;
pub mod backbone;
pub mod dataset;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod preprocess;
pub mod report;
pub mod seed;
pub mod toy;
pub mod train;
