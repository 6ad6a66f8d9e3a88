//! Graph structure of a four-layer And-Or model and the index map tying every
//! node and edge to its bin range in the flat parameter vector.

use serde::{Deserialize, Serialize};

use crate::contour::FeatureConfig;
use crate::error::{Error, Result};
use crate::geometry::{Rect, Vec2};

/// Structure of one and-node: a window partitioned into a `b1 x b2` grid of
/// or-node blocks, each or-node owning `leaf_counts[j]` leaf classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AndNodeStructure {
    /// Block rows.
    pub b1: usize,
    /// Block columns.
    pub b2: usize,
    /// Detection window size in pixels `[w, h]`.
    pub window: [f64; 2],
    /// Leaf count per or-node, row-major over the block grid.
    pub leaf_counts: Vec<usize>,
}

impl AndNodeStructure {
    pub fn num_or_nodes(&self) -> usize {
        self.b1 * self.b2
    }

    pub fn window_rect_at(&self, x: f64, y: f64) -> Rect {
        Rect::new(x, y, self.window[0], self.window[1])
    }

    pub fn block_w(&self) -> f64 {
        self.window[0] / self.b2 as f64
    }

    pub fn block_h(&self) -> f64 {
        self.window[1] / self.b1 as f64
    }

    /// Expected offset of or-node `j`'s block center from the window origin.
    pub fn anchor(&self, j: usize) -> Vec2 {
        let row = j / self.b2;
        let col = j % self.b2;
        Vec2::new(
            (col as f64 + 0.5) * self.block_w(),
            (row as f64 + 0.5) * self.block_h(),
        )
    }

    /// Block rectangle centered at `(cx, cy)`.
    pub fn block_rect(&self, cx: f64, cy: f64) -> Rect {
        Rect::new(
            cx - self.block_w() / 2.0,
            cy - self.block_h() / 2.0,
            self.block_w(),
            self.block_h(),
        )
    }

    /// Default radius of the "near" relation: half the block diagonal.
    pub fn default_near_radius(&self) -> f64 {
        0.5 * self.block_w().hypot(self.block_h())
    }

    fn validate(&self, r: usize) -> Result<()> {
        if self.b1 == 0 || self.b2 == 0 {
            return Err(Error::InvalidStructure(format!(
                "and-node {r}: block layout {}x{} is empty",
                self.b1, self.b2
            )));
        }
        if !(self.window[0] > 0.0 && self.window[1] > 0.0) {
            return Err(Error::InvalidStructure(format!(
                "and-node {r}: window must have positive size"
            )));
        }
        if self.leaf_counts.len() != self.num_or_nodes() {
            return Err(Error::InvalidStructure(format!(
                "and-node {r}: {} leaf counts for {} or-nodes",
                self.leaf_counts.len(),
                self.num_or_nodes()
            )));
        }
        if self.leaf_counts.iter().any(|&n| n == 0) {
            return Err(Error::InvalidStructure(format!(
                "and-node {r}: every or-node needs at least one leaf"
            )));
        }
        Ok(())
    }
}

/// The whole graph: a root switching over `m` and-nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub and_nodes: Vec<AndNodeStructure>,
}

impl Structure {
    pub fn new(and_nodes: Vec<AndNodeStructure>) -> Result<Self> {
        let s = Structure { and_nodes };
        s.validate()?;
        Ok(s)
    }

    pub fn num_and_nodes(&self) -> usize {
        self.and_nodes.len()
    }

    pub fn total_leaves(&self) -> usize {
        self.and_nodes
            .iter()
            .map(|a| a.leaf_counts.iter().sum::<usize>())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.and_nodes.is_empty() {
            return Err(Error::InvalidStructure("need at least one and-node".into()));
        }
        for (r, a) in self.and_nodes.iter().enumerate() {
            a.validate(r)?;
        }
        Ok(())
    }

    /// Stable hex digest of the structure, for log diffing.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("structure serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Bin layout of one and-node inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AndIndex {
    /// Offset of the global-descriptor slot.
    pub global: usize,
    /// Offset of each or-node's 4-bin deformation slot.
    pub deform: Vec<usize>,
    /// Offset of each leaf slot, `leaves[j][i]`.
    pub leaves: Vec<Vec<usize>>,
    /// Base offset of the pair block for or-nodes `j1 < j2`; the pair
    /// `(j1, i1, j2, i2)` lives at `pair_base[j1][j2] + (i1 * n_j2 + i2) * 4`.
    pub pair_base: Vec<Vec<usize>>,
}

/// Maps every node and edge of the graph to a disjoint bin range; the ranges
/// partition `[0, total_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMap {
    pub total_dim: usize,
    pub leaf_dim: usize,
    pub global_dim: usize,
    pub ands: Vec<AndIndex>,
}

pub const DEFORM_DIM: usize = 4;
pub const PSI_DIM: usize = 4;

impl IndexMap {
    pub fn build(structure: &Structure, features: &FeatureConfig) -> IndexMap {
        let leaf_dim = features.fragment_dim();
        let global_dim = features.global_dim();
        let mut offset = 0usize;
        let mut ands = Vec::with_capacity(structure.and_nodes.len());
        for a in &structure.and_nodes {
            let z = a.num_or_nodes();
            let global = offset;
            offset += global_dim;
            let mut deform = Vec::with_capacity(z);
            for _ in 0..z {
                deform.push(offset);
                offset += DEFORM_DIM;
            }
            let mut leaves = Vec::with_capacity(z);
            for j in 0..z {
                let mut per = Vec::with_capacity(a.leaf_counts[j]);
                for _ in 0..a.leaf_counts[j] {
                    per.push(offset);
                    offset += leaf_dim;
                }
                leaves.push(per);
            }
            let mut pair_base = vec![vec![0usize; z]; z];
            for j1 in 0..z {
                for j2 in (j1 + 1)..z {
                    pair_base[j1][j2] = offset;
                    offset += a.leaf_counts[j1] * a.leaf_counts[j2] * PSI_DIM;
                }
            }
            ands.push(AndIndex {
                global,
                deform,
                leaves,
                pair_base,
            });
        }
        IndexMap {
            total_dim: offset,
            leaf_dim,
            global_dim,
            ands,
        }
    }

    /// Offset of the 4-bin edge slot of the unordered leaf pair
    /// `(j1, i1)`/`(j2, i2)` under and-node `r`. Arguments may come in either
    /// or-node order.
    pub fn pair_offset(
        &self,
        structure: &Structure,
        r: usize,
        j1: usize,
        i1: usize,
        j2: usize,
        i2: usize,
    ) -> usize {
        debug_assert_ne!(j1, j2);
        let (j1, i1, j2, i2) = if j1 < j2 {
            (j1, i1, j2, i2)
        } else {
            (j2, i2, j1, i1)
        };
        let n2 = structure.and_nodes[r].leaf_counts[j2];
        self.ands[r].pair_base[j1][j2] + (i1 * n2 + i2) * PSI_DIM
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn structure_2x2() -> Structure {
        Structure::new(vec![
            AndNodeStructure {
                b1: 2,
                b2: 2,
                window: [40.0, 40.0],
                leaf_counts: vec![2, 1, 3, 1],
            },
            AndNodeStructure {
                b1: 1,
                b2: 2,
                window: [40.0, 20.0],
                leaf_counts: vec![1, 2],
            },
        ])
        .unwrap()
    }

    #[test]
    fn index_map_partitions_flat_dim() {
        let s = structure_2x2();
        let cfg = FeatureConfig::default();
        let map = IndexMap::build(&s, &cfg);
        // Verify every bin is covered exactly once.
        let mut seen = vec![0u8; map.total_dim];
        let mut mark = |off: usize, len: usize| {
            for k in off..off + len {
                seen[k] += 1;
            }
        };
        for (r, a) in s.and_nodes.iter().enumerate() {
            mark(map.ands[r].global, map.global_dim);
            for j in 0..a.num_or_nodes() {
                mark(map.ands[r].deform[j], DEFORM_DIM);
                for i in 0..a.leaf_counts[j] {
                    mark(map.ands[r].leaves[j][i], map.leaf_dim);
                }
            }
            for j1 in 0..a.num_or_nodes() {
                for j2 in (j1 + 1)..a.num_or_nodes() {
                    for i1 in 0..a.leaf_counts[j1] {
                        for i2 in 0..a.leaf_counts[j2] {
                            mark(map.pair_offset(&s, r, j1, i1, j2, i2), PSI_DIM);
                        }
                    }
                }
            }
        }
        assert!(seen.iter().all(|&c| c == 1), "ranges must partition the vector");
    }

    #[test]
    fn pair_offset_symmetric_in_argument_order() {
        let s = structure_2x2();
        let map = IndexMap::build(&s, &FeatureConfig::default());
        let a = map.pair_offset(&s, 0, 0, 1, 2, 2);
        let b = map.pair_offset(&s, 0, 2, 2, 0, 1);
        assert_eq!(a, b);
    }

    #[test]
    fn anchors_tile_the_window() {
        let s = structure_2x2();
        let a = &s.and_nodes[0];
        assert_eq!(a.block_w(), 20.0);
        assert_eq!(a.block_h(), 20.0);
        let c0 = a.anchor(0);
        assert_eq!((c0.x, c0.y), (10.0, 10.0));
        let c3 = a.anchor(3);
        assert_eq!((c3.x, c3.y), (30.0, 30.0));
    }

    #[test]
    fn structure_validation_rejects_zero_leaves() {
        let bad = Structure::new(vec![AndNodeStructure {
            b1: 1,
            b2: 1,
            window: [10.0, 10.0],
            leaf_counts: vec![0],
        }]);
        assert!(bad.is_err());
    }

    #[test]
    fn digest_is_stable_and_structure_sensitive() {
        let s = structure_2x2();
        assert_eq!(s.digest(), s.digest());
        let mut t = s.clone();
        t.and_nodes[0].leaf_counts[0] = 4;
        assert_ne!(s.digest(), t.digest());
    }
}
