//! Super-resolution and petrophysical validation for volumetric rock images.
//!
//! The crate covers the whole chain from a low-resolution micro-CT volume to
//! pore-network flow properties:
//!
//! * [`volume`]: voxel grids, raw I/O, cropping, resampling, patches, reslicing
//! * [`prep`]: 16→8 bit normalization, histograms, histogram matching, line profiles
//! * [`metrics`]: PSNR, SSIM, gradient magnitude and joint intensity/gradient histograms
//! * [`neural`]: a small deterministic autodiff core with EDSR and CinCGAN networks
//! * [`reconstruct`]: slab-tiled reconstruction and the 2D→3D CinCGAN workflow
//! * [`segment`]: gradient-based threshold selection and marker watershed
//! * [`porosity`]: local micro-porosity maps, bulk porosity, Dykstra-Parsons curves
//! * [`micp`]: Thomeer hyperbola evaluation and fitting
//! * [`pnm`]: network extraction and quasi-static drainage simulation
//! * [`synth`]: synthetic rock generator used by tests and the CLI pipeline
//!
//! Numerical cores that do not depend on voxel storage are generic over
//! [`Scalar`] (`f32` or `f64`); the aliases below name the double-precision
//! instantiations used by the pipeline.

pub mod field;
pub mod interp;
pub mod linalg;
pub mod metrics;
pub mod micp;
pub mod neural;
pub mod pnm;
pub mod porosity;
pub mod prep;
pub mod reconstruct;
pub mod scalar;
pub mod segment;
pub mod synth;
pub mod volume;

pub use field::Field3;
pub use scalar::Scalar;
pub use volume::{BitDepth, Region, VoxelGrid};

/// Double-precision tensor.
pub type Tensor = neural::Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = neural::Tensor<f32>;
/// Double-precision EDSR network.
pub type EdsrNet = neural::EdsrNet<f64>;
/// Double-precision residual generator (CinCGAN G1/G2/G3).
pub type Generator = neural::Generator<f64>;
/// Double-precision patch discriminator.
pub type Discriminator = neural::Discriminator<f64>;
/// Thomeer model with `f64` parameters.
pub type ThomeerModel = micp::ThomeerModel<f64>;
/// Thomeer pore system with `f64` parameters.
pub type ThomeerSystem = micp::ThomeerSystem<f64>;
/// MICP curve with `f64` samples.
pub type MicpCurve = micp::MicpCurve<f64>;
/// Real-valued scalar field over a voxel grid.
pub type ScalarField = Field3<f64>;
