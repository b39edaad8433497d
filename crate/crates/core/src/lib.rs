pub mod cluster;
pub mod dataset;
pub mod error;
pub mod gaussians;
pub mod geom;
pub mod io;
pub mod msdyn;
pub mod optim;
pub mod render;
pub mod synth;
pub mod losses;
pub mod metrics;

pub use error::{Error, Result};
