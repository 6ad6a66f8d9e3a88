//! Four-layer And-Or graph shape detectors over contour edge maps.
//!
//! The model composes leaf-node contour classifiers under or-node switches,
//! pairwise layout edges, and-node global verifiers, and a root switch over
//! global modes. Detection slides windows over an image pyramid; training
//! interleaves max-margin parameter learning with clustering-driven
//! structure reconfiguration, accepting a new structure only when the
//! training energy decreases.

pub mod contour;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod learning;
pub mod model;
pub mod testutil;

pub use error::{Error, Result};
