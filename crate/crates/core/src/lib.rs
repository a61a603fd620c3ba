//! Long-term tissue point tracking: frozen flow backbone, guided attention
//! fusion, uncertainty and occlusion heads, pseudo labels, and a two-stage
//! training curriculum, all at desk scale.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod losses;
pub mod mfga;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod plg;
pub mod tracker;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
