//! Desk-scale pipeline for learning a recurrent replica of a truck's
//! longitudinal dynamics from generated driving cycles and training a
//! policy-gradient cooperative adaptive cruise controller inside the
//! learned environment, with a parametric surrogate plant as ground truth.

pub mod cacc;
pub mod checkpoint;
pub mod config;
pub mod cyclegen;
pub mod episode;
pub mod error;
pub mod linalg;
pub mod model;
pub mod trainer;
pub mod pipeline;
pub mod plant;
pub mod policy;
pub mod stats;
pub mod util;

pub use error::{Error, Result};
