//! Learn and render the full-HDR radiance field of a panoramic indoor scene
//! from clipped LDR panoramas.
//!
//! The crate is organized as a pipeline:
//!
//! * [`imgio`] reads and writes PFM panoramas, PGM masks, pose lists and
//!   dataset manifests.
//! * [`geom`] maps between equirectangular pixels and the unit sphere and
//!   generates camera rays.
//! * [`synth`] path-traces an analytic box room to produce ground-truth HDR
//!   panoramas and simulated LDR captures.
//! * [`hdr`] linearizes, fuses exposure brackets and uplifts single LDR
//!   panoramas to HDR (parametric and learned models).
//! * [`prt`] builds a precomputed transport matrix used both as a training
//!   loss and as an evaluation metric.
//! * [`field`], [`net`], [`render`] and [`train`] make up the radiance field:
//!   encodings, a small reverse-mode autodiff, volumetric quadrature and the
//!   log-space training loop.
//! * [`metrics`] provides PSNR, PU-PSNR and SSIM.
//! * [`cli`] wires everything into the `panofield` command.

pub mod cli;
pub mod error;
pub mod field;
pub mod geom;
pub mod hdr;
pub mod imgio;
pub mod metrics;
pub mod net;
pub mod prt;
pub mod render;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use imgio::{Mask, Panorama, Pose};
