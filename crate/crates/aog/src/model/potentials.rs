//! Potential functions of the four layers and the joint feature map.

use crate::contour::{
    clip_to_block, contour_feature, global_descriptor, resample, ClipOptions, Contour,
    FeatureConfig, SamplePoints,
};
use crate::error::Result;
use crate::geometry::{Point, Rect, Vec2};

use super::features::SparseVec;
use super::{EdgeMap, LatentAssignment, Model};

pub const PSI_CLOCKWISE: usize = 0;
pub const PSI_ANTICLOCKWISE: usize = 1;
pub const PSI_NEAR: usize = 2;
pub const PSI_FAR: usize = 3;

/// Deformation feature `(dx, dy, dx^2, dy^2)` of a part at `position` whose
/// expected location is `root + anchor`, measured in block-size units.
pub fn deformation_feature(
    root: &Point,
    position: &Point,
    anchor: &Vec2,
    block_w: f64,
    block_h: f64,
) -> [f64; 4] {
    let dx = (position.x - (root.x + anchor.x)) / block_w;
    let dy = (position.y - (root.y + anchor.y)) / block_h;
    [dx, dy, dx * dx, dy * dy]
}

/// Spatial-layout feature of two activated leaves: exactly two of the four
/// bins are set, one of {near, far} and one of {clockwise, anti-clockwise}.
///
/// Near holds when the actual offset deviates from the initial offset by at
/// most `near_radius`; clockwise when the signed angle from the initial to
/// the actual offset is non-positive (a zero angle counts as clockwise).
pub fn psi(p_i: &Point, p_other: &Point, initial_offset: &Vec2, near_radius: f64) -> [f64; 4] {
    let actual = *p_other - *p_i;
    let deviation = actual - *initial_offset;
    let mut bins = [0.0f64; 4];
    if deviation.norm() <= near_radius {
        bins[PSI_NEAR] = 1.0;
    } else {
        bins[PSI_FAR] = 1.0;
    }
    let theta = initial_offset.signed_angle_to(&actual);
    if theta <= 0.0 {
        bins[PSI_CLOCKWISE] = 1.0;
    } else {
        bins[PSI_ANTICLOCKWISE] = 1.0;
    }
    bins
}

/// A contour fragment surviving clipping to a block, with its resampled
/// points and descriptor.
#[derive(Debug, Clone)]
pub struct BlockFragment {
    pub contour: Contour,
    pub omega: SamplePoints,
    pub feature: Vec<f64>,
}

/// Clips every contour of the edge map to `block`, pruning short fragments,
/// and describes the survivors. Order follows the edge map's contour order,
/// then clip order, so results are deterministic.
pub fn block_fragments(x: &EdgeMap, block: &Rect, cfg: &FeatureConfig) -> Vec<BlockFragment> {
    let opts = ClipOptions::from_feature_config(cfg);
    let mut out = Vec::new();
    for c in &x.contours {
        for frag in clip_to_block(c, block, &opts) {
            match resample(&frag, cfg.sample_points) {
                Ok(omega) => {
                    let feature = contour_feature(&omega, cfg);
                    out.push(BlockFragment {
                        contour: frag,
                        omega,
                        feature,
                    });
                }
                Err(_) => continue, // coincident sample points; treat as pruned
            }
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Model {
    /// Response of leaf `i` of or-node `j` under and-node `r` at block-center
    /// `position`: the maximum over surviving fragments of the weight/feature
    /// dot product. Empty blocks score 0 with no fragment.
    pub fn leaf_response(
        &self,
        x: &EdgeMap,
        r: usize,
        j: usize,
        i: usize,
        position: &Point,
    ) -> (f64, Option<Contour>) {
        let a = &self.structure.and_nodes[r];
        let block = a.block_rect(position.x, position.y);
        let frags = block_fragments(x, &block, &self.features);
        let (score, best) = self.leaf_response_over(r, j, i, &frags);
        (score, best.map(|k| frags[k].contour.clone()))
    }

    /// Same as [`Model::leaf_response`] but over precomputed fragments;
    /// returns the argmax fragment index. Ties keep the first maximum.
    pub fn leaf_response_over(
        &self,
        r: usize,
        j: usize,
        i: usize,
        frags: &[BlockFragment],
    ) -> (f64, Option<usize>) {
        let w = self.leaf_weights(r, j, i);
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for (k, f) in frags.iter().enumerate() {
            let s = dot(w, &f.feature);
            if s > best_score {
                best_score = s;
                best = Some(k);
            }
        }
        match best {
            Some(k) => (best_score, Some(k)),
            None => (0.0, None),
        }
    }

    /// Deformation cost of locating or-node `j` of and-node `r` at
    /// `position` relative to the window origin `root`.
    pub fn deformation_cost(&self, r: usize, j: usize, root: &Point, position: &Point) -> f64 {
        let a = &self.structure.and_nodes[r];
        let feat = deformation_feature(root, position, &a.anchor(j), a.block_w(), a.block_h());
        dot(self.deform_weights(r, j), &feat)
    }

    /// Or-node response: the activated leaf's response minus the deformation
    /// cost; with no activated leaf only the deformation cost is charged.
    pub fn or_response(
        &self,
        x: &EdgeMap,
        r: usize,
        j: usize,
        root: &Point,
        position: &Point,
        leaf: Option<usize>,
    ) -> f64 {
        let leaf_term = match leaf {
            Some(i) => self.leaf_response(x, r, j, i, position).0,
            None => 0.0,
        };
        leaf_term - self.deformation_cost(r, j, root, position)
    }

    /// Collaborative-edge response over all activated leaf pairs whose parent
    /// or-nodes differ; each unordered pair is counted once.
    pub fn edge_response(&self, r: usize, parts: &[(Point, Option<usize>)]) -> f64 {
        if !self.features.use_edges {
            return 0.0;
        }
        let a = &self.structure.and_nodes[r];
        let near = self.near_radius(r);
        let mut total = 0.0;
        for j1 in 0..parts.len() {
            let Some(i1) = parts[j1].1 else { continue };
            for j2 in (j1 + 1)..parts.len() {
                let Some(i2) = parts[j2].1 else { continue };
                let initial = a.anchor(j2) - a.anchor(j1);
                let feat = psi(&parts[j1].0, &parts[j2].0, &initial, near);
                total += dot(self.edge_weights(r, j1, i1, j2, i2), &feat);
            }
        }
        total
    }

    /// And-node response: the global ensemble descriptor of the selected
    /// fragments, scored by the and-node weights.
    pub fn and_response(&self, r: usize, ensembles: &[&SamplePoints], window: &Rect) -> f64 {
        let hist = global_descriptor(ensembles, window, &self.features);
        dot(self.and_weights(r), &hist)
    }

    /// Overall model response of an assignment, Σ_r v_r (Σ_j R^u + R^e + R^a),
    /// scoring the fragments stored in the assignment.
    pub fn response(&self, h: &LatentAssignment) -> Result<f64> {
        self.check_assignment(h)?;
        let r = h.and_choice;
        let a = &self.structure.and_nodes[r];
        let mut total = 0.0;
        let mut omegas: Vec<SamplePoints> = Vec::new();
        for (j, part) in h.parts.iter().enumerate() {
            if let (Some(i), Some(frag)) = (part.leaf, part.fragment.as_ref()) {
                let omega = resample(frag, self.features.sample_points)?;
                let feat = contour_feature(&omega, &self.features);
                total += dot(self.leaf_weights(r, j, i), &feat);
                omegas.push(omega);
            }
            let feat =
                deformation_feature(&h.root, &part.position, &a.anchor(j), a.block_w(), a.block_h());
            total -= dot(self.deform_weights(r, j), &feat);
        }
        let positions: Vec<(Point, Option<usize>)> =
            h.parts.iter().map(|p| (p.position, p.leaf)).collect();
        total += self.edge_response(r, &positions);
        let window = a.window_rect_at(h.root.x, h.root.y);
        let refs: Vec<&SamplePoints> = omegas.iter().collect();
        total += self.and_response(r, &refs, &window);
        Ok(total)
    }

    /// The joint feature map φ(X, H): fragment descriptors in the activated
    /// leaf slots, negated deformation features in the or-node slots, layout
    /// features in the activated pair slots, and the ensemble descriptor in
    /// the and-node slot. Every other bin is zero, so `response(h)` equals
    /// `features · params` exactly.
    pub fn assemble_features(&self, h: &LatentAssignment) -> Result<SparseVec> {
        self.check_assignment(h)?;
        let r = h.and_choice;
        let a = &self.structure.and_nodes[r];
        let idx = &self.index.ands[r];
        let mut sv = SparseVec::new();
        let mut omegas: Vec<SamplePoints> = Vec::new();
        for (j, part) in h.parts.iter().enumerate() {
            if let (Some(i), Some(frag)) = (part.leaf, part.fragment.as_ref()) {
                let omega = resample(frag, self.features.sample_points)?;
                let feat = contour_feature(&omega, &self.features);
                sv.push_slice(idx.leaves[j][i], &feat);
                omegas.push(omega);
            }
            let feat =
                deformation_feature(&h.root, &part.position, &a.anchor(j), a.block_w(), a.block_h());
            let negated: Vec<f64> = feat.iter().map(|v| -v).collect();
            sv.push_slice(idx.deform[j], &negated);
        }
        if self.features.use_edges {
            let near = self.near_radius(r);
            for j1 in 0..h.parts.len() {
                let Some(i1) = h.parts[j1].leaf else { continue };
                for j2 in (j1 + 1)..h.parts.len() {
                    let Some(i2) = h.parts[j2].leaf else { continue };
                    let initial = a.anchor(j2) - a.anchor(j1);
                    let feat = psi(&h.parts[j1].position, &h.parts[j2].position, &initial, near);
                    let off = self.index.pair_offset(&self.structure, r, j1, i1, j2, i2);
                    sv.push_slice(off, &feat);
                }
            }
        }
        if !omegas.is_empty() {
            let window = a.window_rect_at(h.root.x, h.root.y);
            let refs: Vec<&SamplePoints> = omegas.iter().collect();
            let hist = global_descriptor(&refs, &window, &self.features);
            sv.push_slice(idx.global, &hist);
        }
        Ok(sv.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AndNodeStructure, PartAssignment, Structure};

    fn tiny_model() -> Model {
        let structure = Structure::new(vec![AndNodeStructure {
            b1: 1,
            b2: 2,
            window: [40.0, 20.0],
            leaf_counts: vec![1, 1],
        }])
        .unwrap();
        let mut cfg = FeatureConfig::default();
        cfg.min_fragment_len = 0.0;
        cfg.min_fragment_points = 2;
        Model::zeroed(structure, cfg).unwrap()
    }

    fn map_with_one_contour() -> EdgeMap {
        let c = Contour::new(
            0,
            vec![
                Point::new(2.0, 5.0),
                Point::new(10.0, 8.0),
                Point::new(17.0, 14.0),
            ],
        )
        .unwrap();
        EdgeMap::new(40.0, 20.0, vec![c]).unwrap()
    }

    #[test]
    fn leaf_response_zero_weights_scores_zero() {
        let model = tiny_model();
        let x = map_with_one_contour();
        let (score, chosen) = model.leaf_response(&x, 0, 0, 0, &Point::new(10.0, 10.0));
        assert_eq!(score, 0.0);
        assert!(chosen.is_some(), "fragment exists even with zero weights");
    }

    #[test]
    fn leaf_response_empty_block_scores_zero_none() {
        let model = tiny_model();
        let x = EdgeMap::new(40.0, 20.0, vec![]).unwrap();
        let (score, chosen) = model.leaf_response(&x, 0, 0, 0, &Point::new(10.0, 10.0));
        assert_eq!(score, 0.0);
        assert!(chosen.is_none());
    }

    #[test]
    fn leaf_response_single_fragment_is_its_dot_product() {
        let mut model = tiny_model();
        for v in &mut model.params.flat {
            *v = 0.25;
        }
        let x = map_with_one_contour();
        let pos = Point::new(10.0, 10.0);
        let (score, chosen) = model.leaf_response(&x, 0, 0, 0, &pos);
        let frag = chosen.unwrap();
        let omega = resample(&frag, model.features.sample_points).unwrap();
        let feat = contour_feature(&omega, &model.features);
        let expect: f64 = model
            .leaf_weights(0, 0, 0)
            .iter()
            .zip(&feat)
            .map(|(a, b)| a * b)
            .sum();
        assert!((score - expect).abs() < 1e-12);
    }

    #[test]
    fn leaf_response_max_matches_exhaustive_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut model = tiny_model();
        for v in &mut model.params.flat {
            *v = rng.random_range(-1.0..1.0);
        }
        // Five fragments inside the first block.
        let mut contours = Vec::new();
        for id in 0..5 {
            let x0 = rng.random_range(1.0..8.0);
            let y0 = rng.random_range(1.0..8.0);
            contours.push(
                Contour::new(
                    id,
                    vec![
                        Point::new(x0, y0),
                        Point::new(x0 + 6.0, y0 + rng.random_range(1.0..6.0)),
                        Point::new(x0 + 9.0, y0 + rng.random_range(2.0..9.0)),
                    ],
                )
                .unwrap(),
            );
        }
        let x = EdgeMap::new(40.0, 20.0, contours).unwrap();
        let pos = Point::new(10.0, 10.0);
        let (score, chosen) = model.leaf_response(&x, 0, 0, 0, &pos);
        // Exhaustive oracle.
        let block = model.structure.and_nodes[0].block_rect(pos.x, pos.y);
        let frags = block_fragments(&x, &block, &model.features);
        let mut best = f64::NEG_INFINITY;
        let mut best_pts = None;
        for f in &frags {
            let s: f64 = model
                .leaf_weights(0, 0, 0)
                .iter()
                .zip(&f.feature)
                .map(|(a, b)| a * b)
                .sum();
            if s > best {
                best = s;
                best_pts = Some(f.contour.points.clone());
            }
        }
        assert!((score - best).abs() < 1e-12);
        assert_eq!(chosen.unwrap().points, best_pts.unwrap());
    }

    #[test]
    fn deformation_cost_zero_at_anchor() {
        let mut model = tiny_model();
        for v in &mut model.params.flat {
            *v = 0.7;
        }
        let root = Point::new(3.0, 4.0);
        let a = &model.structure.and_nodes[0];
        let anchor = a.anchor(1);
        let pos = Point::new(root.x + anchor.x, root.y + anchor.y);
        assert_eq!(model.deformation_cost(0, 1, &root, &pos), 0.0);
    }

    #[test]
    fn deformation_cost_direct_arithmetic() {
        let mut model = tiny_model();
        // weights (0, 0, 1, 1) for or-node 0
        let off = model.index.ands[0].deform[0];
        model.params.flat[off + 2] = 1.0;
        model.params.flat[off + 3] = 1.0;
        let a = model.structure.and_nodes[0].clone();
        let root = Point::new(0.0, 0.0);
        let anchor = a.anchor(0);
        // displacement of (1, 2) block units
        let pos = Point::new(
            root.x + anchor.x + a.block_w(),
            root.y + anchor.y + 2.0 * a.block_h(),
        );
        let cost = model.deformation_cost(0, 0, &root, &pos);
        assert!((cost - 5.0).abs() < 1e-12);
    }

    #[test]
    fn deformation_cost_matches_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut model = tiny_model();
        let off = model.index.ands[0].deform[1];
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        model.params.flat[off..off + 4].copy_from_slice(&w);
        let root = Point::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let a = model.structure.and_nodes[0].clone();
        let anchor = a.anchor(1);
        let dx = rng.random_range(-1.5..1.5);
        let dy = rng.random_range(-1.5..1.5);
        let pos = Point::new(
            root.x + anchor.x + dx * a.block_w(),
            root.y + anchor.y + dy * a.block_h(),
        );
        let cost = model.deformation_cost(0, 1, &root, &pos);
        let expect = w[0] * dx + w[1] * dy + w[2] * dx * dx + w[3] * dy * dy;
        assert!((cost - expect).abs() < 1e-9);
    }

    #[test]
    fn psi_zero_displacement_is_near_clockwise() {
        let initial = Vec2::new(10.0, 0.0);
        let p = Point::new(0.0, 0.0);
        let q = Point::new(10.0, 0.0);
        let bins = psi(&p, &q, &initial, 5.0);
        assert_eq!(bins[PSI_NEAR], 1.0);
        assert_eq!(bins[PSI_CLOCKWISE], 1.0);
        assert_eq!(bins[PSI_FAR] + bins[PSI_ANTICLOCKWISE], 0.0);
    }

    #[test]
    fn psi_rotated_offset_is_anticlockwise() {
        // Actual offset rotated +30 degrees from the initial one, same length.
        let initial = Vec2::new(10.0, 0.0);
        let ang = 30f64.to_radians();
        let q = Point::new(10.0 * ang.cos(), 10.0 * ang.sin());
        let bins = psi(&Point::new(0.0, 0.0), &q, &initial, 100.0);
        assert_eq!(bins[PSI_NEAR], 1.0);
        assert_eq!(bins[PSI_ANTICLOCKWISE], 1.0);
    }

    #[test]
    fn psi_far_beyond_radius() {
        let initial = Vec2::new(10.0, 0.0);
        let q = Point::new(10.0 + 15.0, 0.0); // 3x the radius past the anchor
        let bins = psi(&Point::new(0.0, 0.0), &q, &initial, 5.0);
        assert_eq!(bins[PSI_FAR], 1.0);
    }

    #[test]
    fn psi_always_two_bins() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let initial = Vec2::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            let p = Point::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            let q = Point::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0));
            let bins = psi(&p, &q, &initial, 4.0);
            assert_eq!(bins[PSI_NEAR] + bins[PSI_FAR], 1.0);
            assert_eq!(bins[PSI_CLOCKWISE] + bins[PSI_ANTICLOCKWISE], 1.0);
        }
    }

    #[test]
    fn edge_response_zero_weights() {
        let model = tiny_model();
        let parts = vec![
            (Point::new(10.0, 10.0), Some(0)),
            (Point::new(30.0, 10.0), Some(0)),
        ];
        assert_eq!(model.edge_response(0, &parts), 0.0);
    }

    #[test]
    fn edge_response_single_pair_by_hand() {
        let mut model = tiny_model();
        let off = model.index.pair_offset(&model.structure, 0, 0, 0, 1, 0);
        model.params.flat[off..off + 4].copy_from_slice(&[1.0, 2.0, 4.0, 8.0]);
        let a = model.structure.and_nodes[0].clone();
        // Both parts exactly at their anchors: near + clockwise.
        let root = Point::new(0.0, 0.0);
        let p0 = Point::new(root.x + a.anchor(0).x, root.y + a.anchor(0).y);
        let p1 = Point::new(root.x + a.anchor(1).x, root.y + a.anchor(1).y);
        let parts = vec![(p0, Some(0)), (p1, Some(0))];
        let got = model.edge_response(0, &parts);
        assert!((got - (1.0 + 4.0)).abs() < 1e-12, "cw + near = 1 + 4, got {got}");
    }

    #[test]
    fn edge_response_inactive_leaf_contributes_nothing() {
        let mut model = tiny_model();
        for v in &mut model.params.flat {
            *v = 1.0;
        }
        let parts = vec![(Point::new(10.0, 10.0), None), (Point::new(30.0, 10.0), Some(0))];
        assert_eq!(model.edge_response(0, &parts), 0.0);
    }
}
