//! Semi-supervised 3D lesion detection pipeline.
//!
//! The pipeline has two detection stages: a scale-space Laplacian-of-Gaussian
//! candidate detector ([`logdet`]) followed by a 3D patch classifier
//! ([`cropnet`]) trained on cubic ROIs. A teacher model trained on labeled
//! exams pseudo-labels a larger unlabeled corpus at a sensitivity-calibrated
//! response threshold, and a higher-capacity student is trained on both
//! ([`nstrain`]). Detection performance is measured as false positives per
//! exam at fixed sensitivity ([`froc`]). The [`phantom`] module generates
//! synthetic brain-like volumes with known lesions so the whole chain can be
//! exercised end to end, and [`pipeline`] provides configuration, persistence
//! and cross-validated experiment orchestration on top.

pub mod cropnet;
pub mod error;
pub mod froc;
pub mod logdet;
pub mod noise;
pub mod nstrain;
pub mod phantom;
pub mod pipeline;
pub mod volgrid;

pub use error::{Error, Result};
