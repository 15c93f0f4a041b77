pub mod backend;
pub mod error;
pub mod io;
pub mod kernels;
pub mod network;
pub mod repr;
pub mod ring;
pub mod trace;
pub mod verify;

pub use error::{Error, Result};
