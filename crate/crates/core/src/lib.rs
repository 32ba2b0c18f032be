//! Point-supervised instance segmentation toolkit.
//!
//! Masks, datasets and point simulation ([`mask`], [`dataset`], [`sim`]),
//! point-level losses ([`loss`]), implicit point heads ([`head`]), adaptive
//! subdivision rendering ([`render`]), synthetic training experiments
//! ([`toy`]) and annotation-time budgets ([`budget`]).

pub mod budget;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod mask;
pub mod render;
pub mod sim;
pub mod toy;

pub use error::{Error, Result};
pub use exec::Exec;
