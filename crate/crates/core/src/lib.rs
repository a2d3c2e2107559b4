//! Out-of-core volume processing toolkit.

pub mod cache;
pub mod cca;
pub mod error;
pub mod job;
pub mod filters;
pub mod octree;
pub mod quantify;
pub mod random_walker;
pub mod render;
pub mod vesselness;
pub mod volume;

pub use error::{Error, Result};
pub use job::JobControl;
