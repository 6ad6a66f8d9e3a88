//! Latent-variable estimation: constrained inference for positives and
//! whole-image maximization (hard-negative mining) for negatives.

use rayon::prelude::*;

use crate::geometry::Rect;
use crate::inference::{axis_anchors, InferenceConfig, WindowScorer};
use crate::model::{EdgeMap, LatentAssignment, Model};

/// One training example: an edge map, its label, and for positives the
/// annotated object window. Generator-side identities (view, variants) are
/// deliberately absent: training never sees them.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub id: String,
    pub map: EdgeMap,
    pub label: i8,
    pub gt_window: Option<Rect>,
}

/// A latent assignment placed at a pyramid level; coordinates inside the
/// assignment are in that level's scaled frame.
#[derive(Debug, Clone)]
pub struct PlacedLatent {
    pub level: usize,
    pub assignment: LatentAssignment,
    pub score: f64,
}

/// The positive latent domain: every stride-grid window, over all pyramid
/// levels, whose original-coordinate rectangle overlaps the annotation with
/// IoU > 0.5. This realizes training from weak (box-only) annotations.
pub fn positive_windows(
    model: &Model,
    map: &EdgeMap,
    gt: &Rect,
    cfg: &InferenceConfig,
) -> Vec<(usize, f64, f64)> {
    let window = model.structure.and_nodes[0].window;
    let mut out = Vec::new();
    for level in 0..cfg.pyramid.num_scales {
        let f = cfg.pyramid.factor(level);
        let (sw, sh) = (map.width * f, map.height * f);
        for wy in axis_anchors(sh, window[1], cfg.pyramid.stride) {
            for wx in axis_anchors(sw, window[0], cfg.pyramid.stride) {
                let orig = Rect::new(wx, wy, window[0], window[1]).scaled(1.0 / f);
                if orig.iou(gt) > 0.5 {
                    out.push((level, wx, wy));
                }
            }
        }
    }
    out
}

/// Maximizes the model response over the positive latent domain. Returns
/// `None` when no window overlaps the annotation (the sample is dropped for
/// this iteration).
pub fn estimate_latent(
    model: &Model,
    map: &EdgeMap,
    gt: &Rect,
    cfg: &InferenceConfig,
) -> Option<PlacedLatent> {
    let windows = positive_windows(model, map, gt, cfg);
    if windows.is_empty() {
        return None;
    }
    let mut best: Option<PlacedLatent> = None;
    let mut level_windows: Vec<(usize, Vec<(f64, f64)>)> = Vec::new();
    for (level, wx, wy) in windows {
        match level_windows.last_mut() {
            Some((l, v)) if *l == level => v.push((wx, wy)),
            _ => level_windows.push((level, vec![(wx, wy)])),
        }
    }
    for (level, anchors) in level_windows {
        let f = cfg.pyramid.factor(level);
        let scaled = map.scaled(f);
        let mut scorer = WindowScorer::new(model, &scaled, cfg);
        for r in 0..model.structure.num_and_nodes() {
            scorer.warm_cache(r, &anchors);
        }
        let scorer = &scorer;
        let winners: Vec<Option<(f64, f64, f64, LatentAssignment)>> = anchors
            .par_iter()
            .map(|&(wx, wy)| {
                scorer
                    .best_at(wx, wy)
                    .map(|(hyp, assignment)| (hyp.total_score, wx, wy, assignment))
            })
            .collect();
        for w in winners.into_iter().flatten() {
            let (score, _, _, assignment) = w;
            let better = best
                .as_ref()
                .map(|b| score > b.score)
                .unwrap_or(true);
            if better {
                best = Some(PlacedLatent {
                    level,
                    assignment,
                    score,
                });
            }
        }
    }
    best
}

/// Per-window winners over the whole image across all levels, best first.
/// Used for hard-negative mining and for the negative side of the
/// loss-augmented maximization.
pub fn top_windows(
    model: &Model,
    map: &EdgeMap,
    cfg: &InferenceConfig,
    k: usize,
) -> Vec<PlacedLatent> {
    let mut all: Vec<PlacedLatent> = Vec::new();
    for level in 0..cfg.pyramid.num_scales {
        let f = cfg.pyramid.factor(level);
        let scaled = map.scaled(f);
        let mut anchors: Vec<(f64, f64)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for a in &model.structure.and_nodes {
            for wy in axis_anchors(scaled.height, a.window[1], cfg.pyramid.stride) {
                for wx in axis_anchors(scaled.width, a.window[0], cfg.pyramid.stride) {
                    if seen.insert((wx.to_bits(), wy.to_bits())) {
                        anchors.push((wx, wy));
                    }
                }
            }
        }
        if anchors.is_empty() {
            continue;
        }
        let mut scorer = WindowScorer::new(model, &scaled, cfg);
        for r in 0..model.structure.num_and_nodes() {
            let fitting: Vec<(f64, f64)> = anchors
                .iter()
                .copied()
                .filter(|&(x, y)| {
                    let a = &model.structure.and_nodes[r];
                    x + a.window[0] <= scaled.width + 1e-9
                        && y + a.window[1] <= scaled.height + 1e-9
                })
                .collect();
            scorer.warm_cache(r, &fitting);
        }
        let scorer = &scorer;
        let winners: Vec<Option<PlacedLatent>> = anchors
            .par_iter()
            .map(|&(wx, wy)| {
                scorer.best_at(wx, wy).map(|(hyp, assignment)| PlacedLatent {
                    level,
                    assignment,
                    score: hyp.total_score,
                })
            })
            .collect();
        all.extend(winners.into_iter().flatten());
    }
    all.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.level.cmp(&b.level))
            .then(a.assignment.root.y.total_cmp(&b.assignment.root.y))
            .then(a.assignment.root.x.total_cmp(&b.assignment.root.x))
    });
    all.truncate(k);
    all
}

/// The 0/1 loss of Eq. 12's margin: zero when the labels agree.
pub fn loss(y_true: i8, y_pred: i8) -> f64 {
    if y_true == y_pred {
        0.0
    } else {
        1.0
    }
}

/// Result of the loss-augmented maximization `max_{y,H} (w.phi + loss)`.
#[derive(Debug, Clone)]
pub struct LossAugmented {
    pub label: i8,
    pub latent: Option<PlacedLatent>,
    pub value: f64,
}

/// Loss-augmented argmax for one sample. Positives maximize over the
/// annotation-constrained latent domain against the flip-label option of
/// value 1 (ties go to the violating label); negatives maximize the best
/// whole-image window plus the unit loss against zero.
pub fn loss_augmented_argmax(
    model: &Model,
    sample: &TrainingSample,
    latent_cfg: &InferenceConfig,
    mining_cfg: &InferenceConfig,
) -> LossAugmented {
    if sample.label > 0 {
        let gt = sample.gt_window.expect("positive samples carry a window");
        let best = estimate_latent(model, &sample.map, &gt, latent_cfg);
        match best {
            Some(p) if p.score > 1.0 => LossAugmented {
                label: 1,
                value: p.score,
                latent: Some(p),
            },
            _ => LossAugmented {
                label: -1,
                latent: None,
                value: 1.0,
            },
        }
    } else {
        let best = top_windows(model, &sample.map, mining_cfg, 1).into_iter().next();
        match best {
            Some(p) if p.score + 1.0 >= 0.0 => LossAugmented {
                label: 1,
                value: p.score + 1.0,
                latent: Some(p),
            },
            _ => LossAugmented {
                label: -1,
                latent: None,
                value: 0.0,
            },
        }
    }
}

/// Stable identity of a placed latent for constraint deduplication.
pub fn placement_key(label: i8, placed: Option<&PlacedLatent>) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut h = std::collections::hash_map::DefaultHasher::new();
    label.hash(&mut h);
    if let Some(p) = placed {
        p.level.hash(&mut h);
        p.assignment.and_choice.hash(&mut h);
        p.assignment.root.x.to_bits().hash(&mut h);
        p.assignment.root.y.to_bits().hash(&mut h);
        for part in &p.assignment.parts {
            part.leaf.hash(&mut h);
            part.position.x.to_bits().hash(&mut h);
            part.position.y.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::FeatureConfig;
    use crate::model::{AndNodeStructure, Structure};
    use crate::testutil;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loose() -> FeatureConfig {
        FeatureConfig {
            min_fragment_len: 0.0,
            min_fragment_points: 2,
            ..FeatureConfig::default()
        }
    }

    #[test]
    fn loss_is_zero_one() {
        assert_eq!(loss(1, 1), 0.0);
        assert_eq!(loss(1, -1), 1.0);
        assert_eq!(loss(-1, -1), 0.0);
        assert_eq!(loss(-1, 1), 1.0);
    }

    #[test]
    fn zero_weights_positive_flips_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let structure = Structure::new(vec![AndNodeStructure {
            b1: 1,
            b2: 2,
            window: [24.0, 16.0],
            leaf_counts: vec![1, 1],
        }])
        .unwrap();
        let model = Model::zeroed(structure, loose()).unwrap();
        let map = testutil::random_edge_map(&mut rng, 48.0, 32.0, 5);
        let sample = TrainingSample {
            id: "p0".into(),
            map,
            label: 1,
            gt_window: Some(Rect::new(8.0, 8.0, 24.0, 16.0)),
        };
        let cfg = InferenceConfig {
            pyramid: crate::inference::PyramidSpec {
                num_scales: 2,
                per_octave: 2,
                stride: 8.0,
            },
            ..InferenceConfig::default().exhaustive()
        };
        let out = loss_augmented_argmax(&model, &sample, &cfg, &cfg);
        // With zero weights every response is 0, so the flipped label wins.
        assert_eq!(out.label, -1);
        assert_eq!(out.value, 1.0);
        assert!(out.latent.is_none());
    }

    #[test]
    fn zero_weights_negative_prefers_positive_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let structure = Structure::new(vec![AndNodeStructure {
            b1: 1,
            b2: 2,
            window: [24.0, 16.0],
            leaf_counts: vec![1, 1],
        }])
        .unwrap();
        let model = Model::zeroed(structure, loose()).unwrap();
        let map = testutil::random_edge_map(&mut rng, 48.0, 32.0, 5);
        let sample = TrainingSample {
            id: "n0".into(),
            map,
            label: -1,
            gt_window: None,
        };
        let cfg = InferenceConfig {
            pyramid: crate::inference::PyramidSpec {
                num_scales: 2,
                per_octave: 2,
                stride: 8.0,
            },
            ..InferenceConfig::default().exhaustive()
        };
        let out = loss_augmented_argmax(&model, &sample, &cfg, &cfg);
        // 0 + loss 1 beats the correct-label value 0.
        assert_eq!(out.label, 1);
        assert_eq!(out.value, 1.0);
        assert!(out.latent.is_some());
    }

    #[test]
    fn estimate_latent_matches_brute_force_over_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = testutil::RandomModelSpec {
            max_and_nodes: 2,
            max_rows: 1,
            max_cols: 2,
            max_leaves: 2,
            window: [24.0, 16.0],
        };
        let model = testutil::random_model(&mut rng, &spec, loose());
        let map = testutil::random_edge_map(&mut rng, 40.0, 28.0, 6);
        let gt = Rect::new(6.0, 6.0, 24.0, 16.0);
        let cfg = InferenceConfig {
            pyramid: crate::inference::PyramidSpec {
                num_scales: 1,
                per_octave: 2,
                stride: 4.0,
            },
            ..InferenceConfig::default().exhaustive()
        };
        let got = estimate_latent(&model, &map, &gt, &cfg);
        // Brute force over the same window domain.
        let mut best: Option<f64> = None;
        for (level, wx, wy) in positive_windows(&model, &map, &gt, &cfg) {
            assert_eq!(level, 0);
            if let Some((s, _)) = testutil::brute_force_best(&model, &map, wx, wy, &cfg.perturb) {
                if best.map(|b| s > b).unwrap_or(true) {
                    best = Some(s);
                }
            }
        }
        match (got, best) {
            (Some(p), Some(b)) => {
                assert!((p.score - b).abs() <= 1e-9 * (1.0 + b.abs()), "{} vs {b}", p.score)
            }
            (None, None) => {}
            (g, b) => panic!("{:?} vs {:?}", g.map(|p| p.score), b),
        }
    }
}
