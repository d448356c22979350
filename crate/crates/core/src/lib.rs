pub mod analysis;
pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod ranker;
pub mod reader;
pub mod rulekit;
pub mod trainer;

pub use error::{DgrError, Result};
