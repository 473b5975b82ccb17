//! Command line and HTTP front ends for splatlens.
pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod ops;

pub use error::{ServiceError, ServiceResult};
