//! Diffused graph-transformer network (DGTN) for mutation stability (ddG)
//! prediction: a geometric GNN and a sequence transformer coupled by
//! learnable attention and graph diffusion.

pub mod config_text;
pub mod diffusion;
pub mod error;
pub mod fusion;
pub mod gnn;
pub mod model;
pub mod numerics;
pub mod par;
pub mod protein_io;
pub mod timing;
pub mod train;
pub mod transformer;
pub mod verify;

pub use error::{Error, Result};
