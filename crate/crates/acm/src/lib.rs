//! Self-supervised place-representation learning on synthetic traverses:
//! appearance-contrastive + geometry-predictive training, descriptor-bank
//! retrieval, and recall/invariance/equivariance evaluation.

pub mod augment;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod model;
pub mod oracle;
pub mod parallel;
pub mod retrieval;
pub mod train;

pub use error::{AcmError, Result};
