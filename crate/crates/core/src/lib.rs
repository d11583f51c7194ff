//! Convex training of attention networks.
//!
//! The crate covers the full chain from data to certified models:
//!
//! * [`data`] token matrices, datasets, frozen embeddings and splits
//! * [`losses`] squared and cross-entropy losses with analytic gradients
//! * [`nonconvex`] softmax and simplex-relaxed attention baselines with projected training
//! * [`convex`] the group-lasso convex programs and gate banks
//! * [`stack`] deep stacks of per-token convex layers
//! * [`solver`] proximal gradient / FISTA with exact group soft-thresholding
//! * [`recovery`] convex to nonconvex parameter maps and KKT certificates
//! * [`tasks`] modular division and synthetic-teacher generators, grokking metrics
//! * [`harness`] config-driven experiment runner used by the CLI

pub mod autodiff;
pub mod convex;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod nonconvex;
pub mod recovery;
pub mod rng;
pub mod solver;
pub mod stack;
pub mod tasks;
pub mod trace;

pub use error::{Error, Result};
