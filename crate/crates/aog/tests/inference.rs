//! Staged inference against direct formula evaluation and exhaustive search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aog::contour::{fragment_feature, Contour, FeatureConfig};
use aog::geometry::{Point, Rect};
use aog::inference::{axis_anchors, detect, non_max_suppression, Detection, InferenceConfig, WindowScorer};
use aog::model::{AndNodeStructure, EdgeMap, Model, Structure};
use aog::testutil;

fn loose_features() -> FeatureConfig {
    FeatureConfig {
        min_fragment_len: 0.0,
        min_fragment_points: 2,
        ..FeatureConfig::default()
    }
}

fn exhaustive_config() -> InferenceConfig {
    InferenceConfig::default().exhaustive()
}

#[test]
fn empty_map_yields_empty_block_candidates_at_anchor() {
    let structure = Structure::new(vec![AndNodeStructure {
        b1: 2,
        b2: 2,
        window: [40.0, 40.0],
        leaf_counts: vec![2, 1, 1, 2],
    }])
    .unwrap();
    let model = Model::zeroed(structure, loose_features()).unwrap();
    let map = EdgeMap::new(60.0, 60.0, vec![]).unwrap();
    let cfg = exhaustive_config();
    let scorer = WindowScorer::new(&model, &map, &cfg);
    let lists = scorer.local_testing(0, 10.0, 10.0);
    for (j, list) in lists.iter().inspect(|_| {}).enumerate() {
        let best = &list[0];
        assert!(best.leaf.is_none(), "or-node {j} best must be the empty-block candidate");
        assert_eq!(best.or_score, 0.0);
        // Zero deformation weights tie all offsets; the anchor comes first.
        let a = &model.structure.and_nodes[0];
        let anchor = a.anchor(j);
        assert_eq!(best.position, Point::new(10.0 + anchor.x, 10.0 + anchor.y));
    }
}

#[test]
fn single_fragment_candidates_match_direct_or_response() {
    let structure = Structure::new(vec![AndNodeStructure {
        b1: 1,
        b2: 2,
        window: [40.0, 20.0],
        leaf_counts: vec![2, 1],
    }])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut model = Model::zeroed(structure, loose_features()).unwrap();
    for v in &mut model.params.flat {
        *v = rng.random_range(-1.0..1.0);
    }
    let map = EdgeMap::new(
        40.0,
        20.0,
        vec![
            Contour::new(0, vec![Point::new(3.0, 4.0), Point::new(14.0, 9.0), Point::new(9.0, 15.0)]).unwrap(),
            Contour::new(1, vec![Point::new(24.0, 4.0), Point::new(33.0, 9.0), Point::new(28.0, 16.0)]).unwrap(),
        ],
    )
    .unwrap();
    let mut cfg = exhaustive_config();
    cfg.perturb = vec![0.0];
    let scorer = WindowScorer::new(&model, &map, &cfg);
    let lists = scorer.local_testing(0, 0.0, 0.0);
    let root = Point::new(0.0, 0.0);
    for (j, list) in lists.iter().enumerate() {
        for cand in list {
            let direct = model.or_response(&map, 0, j, &root, &cand.position, cand.leaf);
            assert!(
                (cand.or_score - direct).abs() < 1e-9,
                "or-node {j}: staged {} vs direct {direct}",
                cand.or_score
            );
        }
    }
}

#[test]
fn local_testing_matches_full_enumeration() {
    // 3 leaves x 9 perturbations per or-node.
    let structure = Structure::new(vec![AndNodeStructure {
        b1: 1,
        b2: 2,
        window: [40.0, 20.0],
        leaf_counts: vec![3, 3],
    }])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = Model::zeroed(structure, loose_features()).unwrap();
    for v in &mut model.params.flat {
        *v = rng.random_range(-1.0..1.0);
    }
    let map = testutil::random_edge_map(&mut rng, 40.0, 20.0, 6);
    let cfg = exhaustive_config();
    let scorer = WindowScorer::new(&model, &map, &cfg);
    let lists = scorer.local_testing(0, 0.0, 0.0);
    let root = Point::new(0.0, 0.0);
    let a = &model.structure.and_nodes[0];
    for (j, list) in lists.iter().enumerate() {
        // Enumerate every (position, leaf-or-empty) option directly.
        let mut oracle: Vec<f64> = Vec::new();
        for dy in &cfg.perturb {
            for dx in &cfg.perturb {
                let anchor = a.anchor(j);
                let pos = Point::new(
                    root.x + anchor.x + dx * a.block_w(),
                    root.y + anchor.y + dy * a.block_h(),
                );
                let block = a.block_rect(pos.x, pos.y);
                let frags = aog::model::block_fragments(&map, &block, &model.features);
                if frags.is_empty() {
                    oracle.push(model.or_response(&map, 0, j, &root, &pos, None));
                } else {
                    for i in 0..a.leaf_counts[j] {
                        oracle.push(model.or_response(&map, 0, j, &root, &pos, Some(i)));
                    }
                }
            }
        }
        oracle.sort_by(|x, y| y.total_cmp(x));
        assert_eq!(list.len(), oracle.len(), "or-node {j} candidate count");
        for (cand, expect) in list.iter().zip(oracle.iter()) {
            assert!(
                (cand.or_score - expect).abs() < 1e-9,
                "or-node {j}: {} vs {expect}",
                cand.or_score
            );
        }
    }
}

#[test]
fn binding_without_edges_sums_or_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let spec = testutil::RandomModelSpec::default();
    let mut model = testutil::random_model(&mut rng, &spec, loose_features());
    // Zero the edge weights only.
    for r in 0..model.structure.num_and_nodes() {
        let z = model.structure.and_nodes[r].num_or_nodes();
        let counts = model.structure.and_nodes[r].leaf_counts.clone();
        for j1 in 0..z {
            for j2 in (j1 + 1)..z {
                for i1 in 0..counts[j1] {
                    for i2 in 0..counts[j2] {
                        let off = model.index.pair_offset(&model.structure, r, j1, i1, j2, i2);
                        for k in 0..4 {
                            model.params.flat[off + k] = 0.0;
                        }
                    }
                }
            }
        }
    }
    let map = testutil::random_edge_map(&mut rng, 60.0, 60.0, 8);
    let cfg = exhaustive_config();
    let scorer = WindowScorer::new(&model, &map, &cfg);
    for r in 0..model.structure.num_and_nodes() {
        let lists = scorer.local_testing(r, 5.0, 5.0);
        let hyps = scorer.binding_testing(r, &lists);
        for h in &hyps {
            let sum: f64 = h
                .choices
                .iter()
                .enumerate()
                .map(|(j, &c)| lists[j][c].or_score)
                .sum();
            assert!((h.bind_score - sum).abs() < 1e-9);
        }
    }
}

#[test]
fn binding_two_by_two_matches_brute_force_ranking() {
    let structure = Structure::new(vec![AndNodeStructure {
        b1: 1,
        b2: 2,
        window: [40.0, 20.0],
        leaf_counts: vec![2, 2],
    }])
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut model = Model::zeroed(structure, loose_features()).unwrap();
    for v in &mut model.params.flat {
        *v = rng.random_range(-1.0..1.0);
    }
    let map = testutil::random_edge_map(&mut rng, 40.0, 20.0, 5);
    let mut cfg = exhaustive_config();
    cfg.perturb = vec![0.0];
    cfg.candidate_beam = 2;
    let scorer = WindowScorer::new(&model, &map, &cfg);
    let lists = scorer.local_testing(0, 0.0, 0.0);
    if lists.iter().any(|l| l.len() < 2) {
        panic!("expected at least two candidates per or-node in this setup");
    }
    let hyps = scorer.binding_testing(0, &lists);
    assert_eq!(hyps.len(), 4, "2 x 2 candidates give 4 hypotheses");
    // Brute-force scores of the 4 combos.
    let mut brute = Vec::new();
    for c0 in 0..2 {
        for c1 in 0..2 {
            let or_sum = lists[0][c0].or_score + lists[1][c1].or_score;
            let parts = vec![
                (lists[0][c0].position, lists[0][c0].leaf),
                (lists[1][c1].position, lists[1][c1].leaf),
            ];
            brute.push(or_sum + model.edge_response(0, &parts));
        }
    }
    brute.sort_by(|x, y| y.total_cmp(x));
    for (h, b) in hyps.iter().zip(brute.iter()) {
        assert!((h.bind_score - b).abs() < 1e-9, "{} vs {b}", h.bind_score);
    }
}

#[test]
fn infinite_prune_threshold_drops_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = testutil::random_model(&mut rng, &testutil::RandomModelSpec::default(), loose_features());
    let map = testutil::random_edge_map(&mut rng, 80.0, 80.0, 6);
    let mut cfg = exhaustive_config();
    cfg.prune_threshold = f64::INFINITY;
    let scorer = WindowScorer::new(&model, &map, &cfg);
    assert!(scorer.best_at(0.0, 0.0).is_none());
    let dets = detect(&map, &model, &cfg);
    assert!(dets.is_empty());
}

#[test]
fn global_verification_reduces_to_bind_score_without_and_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut model = testutil::random_model(&mut rng, &testutil::RandomModelSpec::default(), loose_features());
    for r in 0..model.structure.num_and_nodes() {
        let off = model.index.ands[r].global;
        for k in 0..model.index.global_dim {
            model.params.flat[off + k] = 0.0;
        }
    }
    let map = testutil::random_edge_map(&mut rng, 60.0, 60.0, 8);
    let cfg = exhaustive_config();
    let scorer = WindowScorer::new(&model, &map, &cfg);
    if let Some((best, _)) = scorer.best_at(2.0, 2.0) {
        assert_eq!(best.global_score, 0.0);
        assert_eq!(best.total_score, best.bind_score);
        // The winner must have the maximal bind score over all and-nodes.
        for r in 0..model.structure.num_and_nodes() {
            let lists = scorer.local_testing(r, 2.0, 2.0);
            let hyps = scorer.binding_testing(r, &lists);
            for h in &hyps {
                assert!(h.bind_score <= best.bind_score + 1e-9);
            }
        }
    } else {
        panic!("expected a winner");
    }
}

#[test]
fn root_picks_the_higher_scoring_and_node() {
    // Two and-nodes; the second gets a large positive deformation-free score
    // via its and-weights, the first stays near zero.
    let structure = Structure::new(vec![
        AndNodeStructure {
            b1: 1,
            b2: 1,
            window: [20.0, 20.0],
            leaf_counts: vec![1],
        },
        AndNodeStructure {
            b1: 1,
            b2: 1,
            window: [20.0, 20.0],
            leaf_counts: vec![1],
        },
    ])
    .unwrap();
    let mut model = Model::zeroed(structure, loose_features()).unwrap();
    let g0 = model.index.ands[0].global;
    let g1 = model.index.ands[1].global;
    for k in 0..model.index.global_dim {
        model.params.flat[g0 + k] = 1.0;
        model.params.flat[g1 + k] = 2.5;
    }
    let map = EdgeMap::new(
        20.0,
        20.0,
        vec![Contour::new(0, vec![Point::new(4.0, 6.0), Point::new(15.0, 8.0), Point::new(12.0, 14.0)]).unwrap()],
    )
    .unwrap();
    let cfg = exhaustive_config();
    let scorer = WindowScorer::new(&model, &map, &cfg);
    let (best, _) = scorer.best_at(0.0, 0.0).unwrap();
    // Normalized global histogram sums to 1, so scores are 1.0 vs 2.5.
    assert_eq!(best.and_choice, 1);
    assert!((best.total_score - 2.5).abs() < 1e-9);
}

#[test]
fn per_window_winner_matches_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let cfg = exhaustive_config();
    for trial in 0..12 {
        let spec = testutil::RandomModelSpec {
            max_and_nodes: 2,
            max_rows: 1,
            max_cols: 3,
            max_leaves: 3,
            window: [36.0, 24.0],
        };
        let model = testutil::random_model(&mut rng, &spec, loose_features());
        let n_contours = rng.random_range(2..7);
        let map = testutil::random_edge_map(&mut rng, 44.0, 30.0, n_contours);
        let scorer = WindowScorer::new(&model, &map, &cfg);
        let got = scorer.best_at(1.0, 1.0);
        let expect = testutil::brute_force_best(&model, &map, 1.0, 1.0, &cfg.perturb);
        match (got, expect) {
            (Some((hyp, assignment)), Some((score, _))) => {
                assert!(
                    (hyp.total_score - score).abs() <= 1e-9 * (1.0 + score.abs()),
                    "trial {trial}: staged {} vs brute {score}",
                    hyp.total_score
                );
                // The produced assignment really achieves that score.
                let rescored = model.response(&assignment).unwrap();
                assert!((rescored - score).abs() <= 1e-9 * (1.0 + score.abs()));
            }
            (None, None) => {}
            (g, e) => panic!("trial {trial}: staged {:?} vs brute {:?}", g.is_some(), e.is_some()),
        }
    }
}

#[test]
fn detect_finds_planted_template() {
    // Leaf weights alone are translation invariant inside a block, so the
    // model also gets and-node weights (the template's ensemble descriptor
    // about the window center), which localize the window.
    let template = Contour::new(
        0,
        vec![
            Point::new(4.0, 4.0),
            Point::new(16.0, 6.0),
            Point::new(10.0, 12.0),
            Point::new(18.0, 17.0),
        ],
    )
    .unwrap();
    let features = loose_features();
    let (omega, feat) = fragment_feature(&template, &features).unwrap();
    let structure = Structure::new(vec![AndNodeStructure {
        b1: 1,
        b2: 1,
        window: [20.0, 20.0],
        leaf_counts: vec![1],
    }])
    .unwrap();
    let mut model = Model::zeroed(structure, features).unwrap();
    let off = model.index.ands[0].leaves[0][0];
    model.params.flat[off..off + feat.len()].copy_from_slice(&feat);
    let ghist = aog::contour::global_descriptor(
        &[&omega],
        &Rect::new(0.0, 0.0, 20.0, 20.0),
        &model.features,
    );
    let goff = model.index.ands[0].global;
    // Scale up the global term so localization dominates.
    for (k, v) in ghist.iter().enumerate() {
        model.params.flat[goff + k] = 40.0 * v;
    }

    // Plant the template at (24, 16) inside a 64x64 map with a far-away
    // distractor line.
    let planted: Vec<Point> = template.points.iter().map(|p| p.offset(24.0, 16.0)).collect();
    let map = EdgeMap::new(
        64.0,
        64.0,
        vec![
            Contour::new(0, planted).unwrap(),
            Contour::new(1, vec![Point::new(2.0, 60.0), Point::new(12.0, 58.0)]).unwrap(),
        ],
    )
    .unwrap();
    let mut cfg = InferenceConfig::default();
    cfg.pyramid.num_scales = 1;
    cfg.pyramid.stride = 4.0;
    cfg.score_threshold = 1e-6;
    let dets = detect(&map, &model, &cfg);
    assert!(!dets.is_empty(), "expected the planted template to be found");
    let gt = Rect::new(24.0, 16.0, 20.0, 20.0);
    assert!(
        dets[0].window.iou(&gt) > 0.9,
        "top detection {:?} vs ground truth {gt:?}",
        dets[0].window
    );
    // With the threshold tightened to just below the top score, the planted
    // object is the single surviving detection.
    cfg.score_threshold = dets[0].score - 1e-6;
    let only = detect(&map, &model, &cfg);
    assert_eq!(only.len(), 1);
    assert!(only[0].window.iou(&gt) > 0.9);
}

#[test]
fn nms_is_an_antichain_with_nonincreasing_scores() {
    let mk = |x: f64, y: f64, score: f64| Detection {
        window: Rect::new(x, y, 20.0, 20.0),
        scale: 0,
        score,
        assignment: aog::model::LatentAssignment {
            and_choice: 0,
            root: Point::new(x, y),
            parts: vec![],
        },
    };
    let dets = vec![
        mk(0.0, 0.0, 1.0),
        mk(2.0, 0.0, 0.9),   // overlaps the first heavily
        mk(40.0, 0.0, 0.8),  // disjoint
        mk(41.0, 0.0, 0.85), // overlaps the third
        mk(80.0, 0.0, 0.7),
    ];
    let kept = non_max_suppression(dets, 0.5);
    for w in kept.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for a in 0..kept.len() {
        for b in (a + 1)..kept.len() {
            assert!(kept[a].window.iou(&kept[b].window) <= 0.5);
        }
    }
    assert_eq!(kept.len(), 3);
}

#[test]
fn infinite_score_threshold_gives_empty_detections() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let model = testutil::random_model(&mut rng, &testutil::RandomModelSpec::default(), loose_features());
    let map = testutil::random_edge_map(&mut rng, 80.0, 80.0, 10);
    let mut cfg = InferenceConfig::default();
    cfg.score_threshold = f64::INFINITY;
    assert!(detect(&map, &model, &cfg).is_empty());
}

#[test]
fn axis_anchors_cover_the_far_edge() {
    let xs = axis_anchors(100.0, 30.0, 8.0);
    assert_eq!(xs[0], 0.0);
    assert!((xs.last().unwrap() - 70.0).abs() < 1e-9);
    assert!(axis_anchors(20.0, 30.0, 8.0).is_empty());
    assert_eq!(axis_anchors(30.0, 30.0, 8.0), vec![0.0]);
}

#[test]
fn pyramid_factors_halve_every_octave() {
    let cfg = InferenceConfig::default();
    assert_eq!(cfg.pyramid.factor(0), 1.0);
    assert!((cfg.pyramid.factor(2) - 0.5).abs() < 1e-12);
    assert!((cfg.pyramid.factor(4) - 0.25).abs() < 1e-12);
    assert!((cfg.pyramid.factor(1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
}
