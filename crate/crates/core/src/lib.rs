//! Outlier-exposure training for out-of-distribution detection with
//! worst-case weight perturbation.
//!
//! The crate is organized bottom-up:
//!
//! - [`matrix`] and [`autodiff`]: dense `f64` matrices and a reverse-mode tape.
//! - [`network`]: bias-free ReLU networks with additive and multiplicative
//!   weight perturbations.
//! - [`objectives`]: cross-entropy, the outlier-exposure loss, and the
//!   gradient-norm regret estimate used to pick perturbations.
//! - [`trainers`]: every training variant behind the [`trainers::Strategy`]
//!   trait, looked up by name in a [`trainers::StrategyRegistry`].
//! - [`detection`]: MSP / MaxLogit scores, FPR95, AUROC and histograms.
//! - [`theory`]: numerical checks that multiplicative weight perturbation acts
//!   as an input-space transformation.
//! - [`data`]: the synthetic gap benchmark, CSV ingestion and splitting.

pub mod autodiff;
pub mod data;
pub mod detection;
pub mod error;
pub mod matrix;
pub mod network;
pub mod objectives;
pub mod theory;
pub mod trainers;

pub use autodiff::{GradientSet, Tape, Var};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use network::{Perturbation, PerturbationMode, PerturbationStrength, ReluNet};
