//! Bayesian template estimation and posterior-sampled diffeomorphic data
//! augmentation for 2D/3D images with segmentations.
//!
//! Velocity fields are stationary and parametrised by coefficients on a
//! regular control grid of compactly supported Wendland kernels. Each
//! observation is registered to a template by sampling the posterior over
//! coefficients with Hamiltonian Monte Carlo; a Monte-Carlo EM loop refines
//! the template and noise level. New training pairs are produced by
//! integrating posterior samples to a random time and warping images and
//! labels with the resulting map. A random B-spline deformation generator is
//! included for comparison.

pub mod bspline;
pub mod em;
pub mod error;
pub mod flow;
pub mod grid;
pub mod hmc;
pub mod io;
pub mod kernel;
pub mod pipeline;
pub mod posterior;
pub mod preview;
pub mod rng;
pub mod synth;

pub use bspline::{apply_baseline, sample_bspline_field, BaselineDiagnostics, BsplineConfig};
pub use em::{estimate_template, estimate_template_with, Checkpoint, EmConfig, TemplateModel};
pub use error::{Error, Result};
pub use flow::{exponentiate, jacobian_determinant, min_jacobian, FlowConfig};
pub use grid::{
    sample_cubic, sample_nearest, warp_image, warp_labels, DisplacementField, GridGeometry, LabelVolume,
    Point, ScalarVolume,
};
pub use hmc::{run_chain, sample_posterior, ChainDiagnostics, HmcConfig, LogDensity};
pub use io::{load_labels, load_scalar, load_volume, save_labels, save_scalar, VolumeData, VolumeFormat};
pub use kernel::{GaussianPrior, KernelBasis, KernelConfig, KernelVelocityField};
pub use pipeline::{AugmentationSpec, DatasetManifest, Method, PairProvenance};
pub use posterior::{grad_log_posterior, log_posterior, RegistrationConfig};
