//! The And-Or graph model: structure, parameters, potential functions, and
//! the joint feature map whose dot product with the parameters equals the
//! model response.

mod features;
mod persist;
mod potentials;
mod structure;

pub use features::SparseVec;
pub use persist::{load_model, save_model};
pub use potentials::{
    block_fragments, deformation_feature, psi, BlockFragment, PSI_ANTICLOCKWISE, PSI_CLOCKWISE,
    PSI_FAR, PSI_NEAR,
};
pub use structure::{AndIndex, AndNodeStructure, IndexMap, Structure, DEFORM_DIM, PSI_DIM};

use serde::{Deserialize, Serialize};

use crate::contour::{Contour, FeatureConfig};
use crate::error::{Error, Result};
use crate::geometry::Point;

/// An edge map: the set of linked contour polylines extracted from one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeMap {
    pub width: f64,
    pub height: f64,
    pub contours: Vec<Contour>,
}

impl EdgeMap {
    pub fn new(width: f64, height: f64, contours: Vec<Contour>) -> Result<Self> {
        let map = EdgeMap {
            width,
            height,
            contours,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0 && self.height > 0.0) {
            return Err(Error::InvalidStructure(
                "edge map must have positive size".into(),
            ));
        }
        for (index, c) in self.contours.iter().enumerate() {
            for p in &c.points {
                if !p.is_finite()
                    || p.x < 0.0
                    || p.x > self.width
                    || p.y < 0.0
                    || p.y > self.height
                {
                    return Err(Error::MalformedGeometry {
                        index,
                        reason: format!("point ({}, {}) outside [0,{}]x[0,{}]", p.x, p.y, self.width, self.height),
                    });
                }
            }
        }
        Ok(())
    }

    /// Geometrically scaled copy; contour coordinates are multiplied, never
    /// resampled.
    pub fn scaled(&self, f: f64) -> EdgeMap {
        EdgeMap {
            width: self.width * f,
            height: self.height * f,
            contours: self.contours.iter().map(|c| c.scaled(f)).collect(),
        }
    }
}

/// Activation of one or-node: its block-center position, the selected leaf,
/// and the contour fragment the leaf localized. `leaf == None` is the
/// empty-block case (no surviving fragment at that position).
#[derive(Debug, Clone, PartialEq)]
pub struct PartAssignment {
    pub position: Point,
    pub leaf: Option<usize>,
    pub fragment: Option<Contour>,
}

/// The latent variables of one detection hypothesis: the chosen and-node,
/// the window origin, and one `PartAssignment` per or-node of that and-node.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentAssignment {
    pub and_choice: usize,
    pub root: Point,
    pub parts: Vec<PartAssignment>,
}

/// Flat parameter vector plus the index map that ties every node and edge to
/// its bin range.
///
/// A leaf whose weight block is all zero behaves exactly like a nonexistent
/// leaf: it can never win a max and contributes nothing when activated.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub flat: Vec<f64>,
}

/// A complete model: structure, parameters and feature-extraction settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub structure: Structure,
    pub params: Params,
    pub index: IndexMap,
    pub features: FeatureConfig,
}

impl Model {
    /// Builds a model with all-zero parameters.
    pub fn zeroed(structure: Structure, features: FeatureConfig) -> Result<Model> {
        features.validate()?;
        structure.validate()?;
        let index = IndexMap::build(&structure, &features);
        let params = Params {
            flat: vec![0.0; index.total_dim],
        };
        Ok(Model {
            structure,
            params,
            index,
            features,
        })
    }

    pub fn with_params(structure: Structure, features: FeatureConfig, flat: Vec<f64>) -> Result<Model> {
        let mut model = Model::zeroed(structure, features)?;
        if flat.len() != model.index.total_dim {
            return Err(Error::InvalidModel(format!(
                "parameter vector has {} bins, structure requires {}",
                flat.len(),
                model.index.total_dim
            )));
        }
        model.params.flat = flat;
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.index.total_dim
    }

    pub fn leaf_weights(&self, r: usize, j: usize, i: usize) -> &[f64] {
        let off = self.index.ands[r].leaves[j][i];
        &self.params.flat[off..off + self.index.leaf_dim]
    }

    pub fn deform_weights(&self, r: usize, j: usize) -> &[f64] {
        let off = self.index.ands[r].deform[j];
        &self.params.flat[off..off + DEFORM_DIM]
    }

    pub fn edge_weights(&self, r: usize, j1: usize, i1: usize, j2: usize, i2: usize) -> &[f64] {
        let off = self.index.pair_offset(&self.structure, r, j1, i1, j2, i2);
        &self.params.flat[off..off + PSI_DIM]
    }

    pub fn and_weights(&self, r: usize) -> &[f64] {
        let off = self.index.ands[r].global;
        &self.params.flat[off..off + self.index.global_dim]
    }

    /// Radius of the "near" relation for and-node `r`.
    pub fn near_radius(&self, r: usize) -> f64 {
        self.features
            .near_radius
            .unwrap_or_else(|| self.structure.and_nodes[r].default_near_radius())
    }

    /// Structural consistency of an assignment: and-node index in range, one
    /// part per or-node, leaf indices valid, fragment present iff a leaf is
    /// active.
    pub fn check_assignment(&self, h: &LatentAssignment) -> Result<()> {
        let m = self.structure.num_and_nodes();
        if h.and_choice >= m {
            return Err(Error::InvalidAssignment(format!(
                "and-node {} out of range (m = {m})",
                h.and_choice
            )));
        }
        let a = &self.structure.and_nodes[h.and_choice];
        if h.parts.len() != a.num_or_nodes() {
            return Err(Error::InvalidAssignment(format!(
                "{} part assignments for {} or-nodes",
                h.parts.len(),
                a.num_or_nodes()
            )));
        }
        for (j, part) in h.parts.iter().enumerate() {
            match (part.leaf, part.fragment.is_some()) {
                (Some(i), true) => {
                    if i >= a.leaf_counts[j] {
                        return Err(Error::InvalidAssignment(format!(
                            "or-node {j}: leaf {i} out of range (n = {})",
                            a.leaf_counts[j]
                        )));
                    }
                }
                (None, false) => {}
                _ => {
                    return Err(Error::InvalidAssignment(format!(
                        "or-node {j}: a fragment must be present iff a leaf is active"
                    )));
                }
            }
        }
        Ok(())
    }
}
