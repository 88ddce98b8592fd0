//! Two-scale human motion prediction with learned joint grouping.
//!
//! The fine branch decodes the future as a chain of residual chunks; the
//! coarse branch works on a per-window grouping of joints inferred by a
//! relational edge encoder. Every differentiable block carries a hand-written
//! reverse pass so training needs no external autodiff.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod edge_inference;
pub mod error;
pub mod eval;
pub mod graph_layers;
pub mod model;
pub mod motion_data;
pub mod par;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
