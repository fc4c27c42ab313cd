pub mod error;
pub mod fusion;
pub mod nn;
pub mod ortho;
pub mod phantom;
pub mod network;
pub mod videodata;

pub use error::{Error, Result};
