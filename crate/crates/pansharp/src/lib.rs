//! Pan-sharpening toolbench.
//!
//! Fuses a high-resolution panchromatic image with a low-resolution
//! multispectral image. Ships four classical baselines (IHS, Brovey,
//! Gram-Schmidt, SFIM), a trainable two-stage network that injects
//! attention-gated PAN high-pass residuals into each band (HMCNN), the
//! eight-metric quality suite commonly used to evaluate fusion results,
//! and ISODATA classification for downstream comparison.
//!
//! The network runs on a small self-contained f64 tensor engine with
//! reverse-mode automatic differentiation; everything is deterministic
//! given a seed. See the `examples/` directory for runnable entry points
//! into each capability, or the `pansharp` binary for the CLI.

pub mod classical;
pub mod error;
pub mod harness;
pub mod hmcnn;
pub mod isodata;
pub mod losses;
pub mod metrics;
pub mod raster;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
