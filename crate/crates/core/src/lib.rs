pub mod control;
pub mod conv_lab;
pub mod error;
pub mod hammerstein;
pub mod inequality;
pub mod io;
pub mod mesh;
pub mod ocp;
pub mod plap;
pub mod sparse;
pub mod truncation;

pub use error::{Error, Result};
