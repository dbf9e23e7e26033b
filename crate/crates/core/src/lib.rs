//! EBM-Flow: invertible coupling flows on top of Gaussian-smoothed Boltzmann
//! machine base distributions, trained by exact maximum likelihood.

pub mod autodiff;
pub mod base;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod flow;
pub mod io;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod plot;
pub mod rbm;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
