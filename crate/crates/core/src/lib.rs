//! Inference of a sparse dependency graph over a coded-event vocabulary.
//!
//! The pipeline runs in five stages, one module each:
//!
//! * [`simgen`] draws synthetic cohorts from a dynamic log-linear topic model
//!   (softmax emissions driven by a slowly moving latent discourse vector);
//! * [`cooccur`] turns code sequences into windowed co-occurrence counts, the
//!   only object the summary-level path needs;
//! * [`spectra`] builds the empirical PMI matrix, its rank-`p` spectral
//!   truncation and the rank estimate;
//! * [`variance`] propagates entrywise covariance through the spectral
//!   projector, either from patient-level residuals or from the global-null
//!   closed form;
//! * [`inference`] standardises, computes p-values and selects edges under
//!   FDR (or FWER) control.
//!
//! [`io`] holds the on-disk formats and [`bench`] the simulation studies.

pub mod bench;
pub mod cooccur;
pub mod error;
pub mod inference;
pub mod io;
pub mod pipeline;
pub mod rng;
pub mod simgen;
pub mod spectra;
pub mod stats;
pub mod variance;

pub use error::{KnitError, Result};
