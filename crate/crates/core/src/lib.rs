pub mod bargaining;
mod coalition;
pub mod cooperation;
pub mod error;
pub mod game;
pub mod market;
pub mod scenario;
pub mod solver;
pub mod storage;
pub mod system;
pub mod welfare;

pub use error::{Error, Result};
