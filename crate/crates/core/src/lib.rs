pub mod bench;
pub mod cli;
pub mod error;
pub mod flow;
pub mod model;
pub mod ndauto;
pub mod store;
pub mod world;

pub use error::{Error, Result};
