//! Bidirectional CC ↔ MLO view translation with a conditional diffusion model.
//!
//! The crate is self-contained: a small reverse-mode tensor engine
//! ([`tensor::Tensor`]) drives a conditional UNet ([`unet::UNet`]) whose
//! cross-view conditioning combines column-aware cross-attention
//! ([`attention`]) with an implicit 3D feature volume obtained by
//! back-projecting noisy latents along the two view geometries
//! ([`geometry`]). Training data is generated procedurally from 3D
//! semi-spherical phantoms and serialized with a checksummed binary
//! container ([`data`]).

pub mod attention;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod unet;

pub use config::RunConfig;
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
