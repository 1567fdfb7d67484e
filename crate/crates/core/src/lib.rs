pub mod apps;
pub mod crossbar;
pub mod device;
pub mod dpe;
pub mod error;
pub mod nn;
pub mod numerics;
pub mod slicing;

pub use error::{Error, Result};
pub use numerics::Matrix;
