pub mod analysis;
pub mod autoenc;
pub mod datagen;
pub mod error;
pub mod formats;
pub mod numkit;
pub mod pod;
pub mod rom;
pub mod sindy;

pub use error::{Error, Result};
