//! Bayesian Markov renewal mixed models for collections of categorical
//! sequences with continuous inter-state intervals.
//!
//! Two Gibbs samplers share the data layer and the numerical kernel:
//! [`trans`] fits the mixed-effects Markov transition model and [`isi`] the
//! mixed-effects gamma mixture for log-transformed intervals. Covariate
//! significance is read off the posterior of the number of clusters of each
//! covariate's levels.

pub mod data;
pub mod dist;
pub mod error;
pub mod isi;
pub mod kmeans;
pub mod partition;
pub mod runner;
pub mod select;
pub mod sim;
pub mod special;
pub mod summary;
pub mod trans;

pub use error::{Error, Result};
