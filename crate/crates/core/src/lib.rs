//! Robust GAN training lab: a conditional generator, a two-headed
//! discriminator and an ℓ∞ PGD attacker trained jointly, with the
//! diagnostics needed to compare them against plain adversarial training.

pub mod attack;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Reduction, Var};
pub use tensor::{Precision, Real, Tensor};
