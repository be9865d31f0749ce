//! Equivariance-by-contrast training, end to end: synthetic group-action
//! datasets, a contrastive objective whose transport operator is estimated
//! in closed form by least squares, and the identifiability metrics used to
//! judge the learned representation.

pub mod ebc_loss;
pub mod encoder;
pub mod error;
pub mod groups;
pub mod metrics;
pub mod numkit;
pub mod synthdata;

pub use error::{Error, Result};
pub use numkit::{Matrix, RngStream};
