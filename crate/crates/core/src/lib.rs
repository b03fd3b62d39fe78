pub mod cli;
pub mod error;
pub mod exemplar;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod prototype;
pub mod seed;
pub mod synthdata;

pub use error::{Error, Result};
