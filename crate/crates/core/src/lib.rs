//! Meta-learned adaptive margins for group-fair embedding training.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: a small reverse-mode engine whose gradients are graph nodes,
//!   so gradients of gradients are available.
//! - [`losses`]: adaptive-margin softmax losses and the meta skewness loss.
//! - [`datagen`]: synthetic grouped-identity data on the unit hypersphere.
//! - [`trainer`]: the bilevel loop (virtual step, margin step, model step).
//! - [`fairmetrics`]: verification accuracy, ROC, STD/SER and feature scatter.
//! - [`gradcheck`]: randomized finite-difference checks of all of the above.

pub mod autodiff;
pub mod losses;
pub mod datagen;
pub mod trainer;
pub mod fairmetrics;
pub mod gradcheck;
