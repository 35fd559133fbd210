pub mod attention;
pub mod error;
pub mod grad;
pub mod numkit;
pub mod resag;
pub mod theory;

pub use error::{Error, Result};
