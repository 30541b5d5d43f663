//! Depth-image hand pose estimation with joint graph reasoning and
//! pixel-to-offset prediction.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod jgr;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod p2o;
pub mod training;

pub use error::{Error, Result};
