//! Minibatch couplings and joint conditional flow matching on small problems.
//!
//! The pipeline: draw batches from two distributions ([`data`]), couple them
//! ([`coupling`], backed by [`ot`] and [`matching`]), regress a time-dependent
//! vector field onto straight-line targets ([`flow`], [`nn`]), then simulate
//! the learned flow ([`ode`]) and measure it ([`metrics`]).

pub mod autodiff;
pub mod cost;
pub mod coupling;
pub mod data;
pub mod error;
pub mod flow;
pub mod matching;
pub mod metrics;
pub mod nn;
pub mod ode;
pub mod ot;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use rng::Rng;
