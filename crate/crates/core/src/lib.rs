//! Bayesian kernel-weighted spatio-temporal regression.
//!
//! The response at `(s, t)` depends on a covariate process through a
//! kernel-averaged predictor `W(s, t)` over the buffer `B_r(s) × [t - q, t]`.
//! When the covariate is observed on scattered, incomplete supports the
//! integral is approximated by a Voronoi space-time quadrature
//! ([`predictor`]), and the regression is fitted with a
//! Metropolis-within-Gibbs sampler ([`inference`]).

pub mod bounds;
pub mod data;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod predictor;
pub mod rng;
pub mod simulate;

pub use data::{IndicatorRow, IndicatorSeries, Point, SiteSeries, StSeries};
pub use error::{Error, Result};
pub use geometry::{temporal_increments, voronoi_disk, DiskTessellation, TemporalIncrements};
pub use kernels::{KernelFamily, KernelSpec};
pub use metrics::{score, ScoreReport};
pub use predictor::{build_index, weighted_predictor, BufferConfig, BufferIndex, PredictorMode};

/// Crate version, echoed into every output for reproducibility.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
