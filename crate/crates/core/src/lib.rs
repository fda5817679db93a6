//! Nonrigid registration of spatio-directional images.
//!
//! Images carry one value per voxel and per direction of a shared
//! [`sphere::DirectionSet`]. Registration maximizes the normalized mutual
//! information between a Watson-smoothed, explicitly reoriented moving image
//! and a target image under a hierarchical cubic B-spline free-form
//! deformation, using analytic gradients and L-BFGS.

pub mod density;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod ffd;
pub mod glyph;
pub mod gradient;
pub mod metrics;
pub mod optimizer;
pub mod phantom;
pub mod regularizer;
pub mod sphere;
pub mod volume;

pub use error::{LordError, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;
