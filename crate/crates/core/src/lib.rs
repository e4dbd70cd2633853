pub mod error;
pub mod model;
pub mod attention;
pub mod bench;
pub mod numerics;
pub mod sharded;
pub mod ttt;

pub use error::{Error, Result};
