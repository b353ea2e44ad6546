//! Frequency-rectified point-cloud generation.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] point clouds, spherical coordinates and synthetic star-shaped data;
//! * [`sphere_repr`] the KNN radius function a cloud induces on the unit sphere;
//! * [`harmonics`] real spherical harmonics and the quadrature transform pair;
//! * [`freq_rect`] rectifier weights, the rectified spectral distance and its loss;
//! * [`autodiff`] a small reverse-mode engine, parameter store, Adam and checkpoint I/O;
//! * [`models`] the set encoder, the conditional CNF decoder and the (Fre)ELBO;
//! * [`diffusion`] the latent DDPM;
//! * [`metrics`] CD, EMD, MMD, COV and 1-NNA;
//! * [`pipeline`] configuration, two-stage training, generation and evaluation.

pub mod autodiff;
pub mod diffusion;
pub mod error;
pub mod freq_rect;
pub mod geometry;
pub mod harmonics;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod sphere_repr;

pub use error::{Error, Result};
pub use geometry::{PointCloud, SphericalPoint};
