pub mod augment;
pub mod config;
pub mod contrastive;
pub mod cst;
pub mod data;
pub mod detector;
pub mod domain;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod spectral;

pub use config::RunConfig;
pub use domain::Domain;
pub use error::{ClanError, Result};
