//! Direct-effect risk minimization for domain generalization under
//! correlation shift.
//!
//! The crate has two halves. [`causal`] is an exact calculator over small
//! discrete structural causal models: balanced (interventional)
//! distributions, H-divergences, the support condition relating balanced
//! and observed marginals, and the VC-style risk bound built from them.
//! The rest is a desk-scale training pipeline: [`data`] generates
//! colored-digit-like environments as feature vectors, [`balance`] learns an
//! indirect-effect representation by predicting the domain label and uses
//! it to build balanced batches and balanced validation sets, [`train`]
//! holds the trainers and [`harness`] runs leave-one-domain-out sweeps with
//! training-domain model selection.

pub mod balance;
pub mod causal;
pub mod data;
pub mod error;
pub mod harness;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
