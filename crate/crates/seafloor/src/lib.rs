//! Water-column removal and in-air seafloor colour restoration.
//!
//! The crate models water-covered scenes with two pieces of physics and
//! undoes both:
//!
//! * a dichromatic reflection model that splits observed radiance into a
//!   diffuse body term and a specular interface term under a grey-world
//!   illuminant ([`photometry`]), and
//! * an underwater image formation model in which object radiance is
//!   attenuated exponentially along the water path and mixed with veiling
//!   light ([`watercolumn`]).
//!
//! On top of those sit a hyperspectral cube container and paired-dataset
//! builder ([`hypercube`]), the mask-aware training losses ([`objectives`]),
//! full- and no-reference quality metrics ([`metrics`]), and a toy-scale
//! four-generator adversarial trainer with its own reverse-mode autodiff
//! engine ([`microgan`]).
//!
//! The `seafloor` binary exposes each stage as a subcommand; the crate's
//! `examples/` directory has one runnable example per capability.

pub mod cli;
pub mod error;
pub mod hypercube;
pub mod imagecore;
pub mod metrics;
pub mod microgan;
pub mod objectives;
pub mod photometry;
pub mod watercolumn;

pub use error::{Error, Result};
pub use imagecore::{RasterImage, WaterMask};
