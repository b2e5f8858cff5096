//! Clipped tanh networks trained on an entropy-residual loss for scalar
//! conservation laws, with a WENO reference solver and a compiler from
//! piecewise linear functions to networks.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix `f64`.

pub mod cpwl;
pub mod dpwp;
pub mod draws;
pub mod error;
pub mod flux;
pub mod loss;
pub mod mesh;
pub mod metrics;
pub mod network;
pub mod reference;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Net = network::ClippedTanhNet<f64>;
pub type Grid = mesh::QuadGrid<f64>;
pub type Flux = flux::FluxModel<f64>;
pub type Problem = reference::BenchmarkProblem<f64>;
pub type Reference = reference::ReferenceSolution<f64>;
pub type Dpwp<'g> = dpwp::DpwpFunction<'g, f64>;
pub type Training = train::TrainResult<f64>;
