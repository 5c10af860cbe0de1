pub mod bilqr;
pub mod cli;
pub mod config;
pub mod data;
pub mod edmdc;
pub mod error;
pub mod io;
pub mod lifting;
pub mod linalg;
pub mod optctrl;
pub mod plot;
pub mod repro;
pub mod systems;

pub use error::{Error, Result};
