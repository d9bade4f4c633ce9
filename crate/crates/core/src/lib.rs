//! Cascaded conditional diffusion for completing missing time points in
//! longitudinal 3D volume series.
//!
//! The pipeline has two stages: a low-resolution `generate` stage that
//! synthesizes a structured volume from a guidance scan and a target age,
//! and a diffusion super-resolution `refine` stage that maps the result to
//! the high-resolution grid. Everything needed to exercise the pipeline
//! end to end lives here as well: a deterministic ellipsoid-phantom cohort
//! simulator with a known log-linear growth law, volumetric quality
//! metrics (PSNR, SSIM), a threshold segmentation proxy, and a
//! random-intercept mixed-effects trajectory fit.

pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod sr;
pub mod volume;

pub mod denoiser;

pub use error::{Error, Result};
pub use volume::{LongitudinalCohort, Provenance, ScanRecord, Volume3D};
