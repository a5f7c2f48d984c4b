//! Angular (q-space) super-resolution of diffusion MRI volumes.
//!
//! The crate covers the full desk-scale pipeline: b-vector geometry and
//! q-space subset selection ([`qspace`]), the modified real spherical-harmonic
//! basis and interpolation baseline ([`shmath`]), dataset ingestion and
//! patch extraction ([`volume`]), a reverse-mode differentiable array engine
//! ([`autodiff`]), the recurrent convolutional autoencoder and its ablation
//! variants ([`model`]), training and evaluation ([`trainer`]), and a
//! synthetic multi-tensor phantom generator ([`phantom`]).

pub mod autodiff;
pub mod config;
pub mod error;
pub mod linalg;
pub mod model;
pub mod phantom;
pub mod qspace;
pub mod shmath;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
