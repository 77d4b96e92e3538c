pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod fsutil;
pub mod inference;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pnm;
pub mod scene;
pub mod selfcheck;
pub mod train;

pub use error::{CoreError, Result};
