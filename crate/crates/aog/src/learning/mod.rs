//! Structure-and-parameter training: an outer loop that alternates latent
//! estimation, clustering-driven structure reconfiguration, and a
//! cutting-plane max-margin parameter solve, accepting a reconfigured
//! structure only when the training energy decreases.

mod cluster;
mod energy;
mod latents;
mod qp;
mod reconfigure;

pub use cluster::{derive_isodata_params, isodata, kmeans_fixed, kmeans_seeded, IsodataParams};
pub use energy::{energy, EnergyReport};
pub use latents::{
    estimate_latent, loss, loss_augmented_argmax, placement_key, positive_windows, top_windows,
    LossAugmented, PlacedLatent, TrainingSample,
};
pub use qp::{primal_objective, solve_working_set, Constraint, QpSolution, WorkingSet};
pub use reconfigure::{
    build_state, reassemble, reconfigure, reconfigure_global, reconfigure_local, PositiveState,
    Reconfiguration,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::{contour_feature, global_descriptor, FeatureConfig, SamplePoints};
use crate::error::{Error, Result};
use crate::geometry::Point;
use crate::inference::InferenceConfig;
use crate::model::{
    block_fragments, AndNodeStructure, LatentAssignment, Model, PartAssignment, SparseVec,
    Structure,
};

/// Training settings. `inference` doubles as the detection-time default; the
/// latent-estimation path always runs it exhaustively.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Penalty weight of the margin term.
    pub lambda: f64,
    /// Number of and-nodes (fixed during training).
    pub m: usize,
    /// Block rows of every and-node.
    pub b1: usize,
    /// Block columns of every and-node.
    pub b2: usize,
    /// Detection window `[w, h]`; `None` takes the median annotation size.
    pub window: Option<[f64; 2]>,
    /// Leaf cap per or-node.
    pub n_max: usize,
    pub min_cluster_abs: usize,
    pub min_cluster_frac: f64,
    pub split_factor: f64,
    pub merge_factor: f64,
    /// Hard-negative windows added per image and cutting-plane round.
    pub mining_per_image: usize,
    /// Constraint-violation tolerance of the cutting plane.
    pub cutting_plane_eps: f64,
    pub cutting_plane_max_rounds: usize,
    /// Relative energy tolerance of the outer loop.
    pub outer_tol: f64,
    pub outer_max_iters: usize,
    pub seed: u64,
    /// Disable collaborative edges (the tree-structured ablation).
    pub use_edges: bool,
    /// Record per-iteration models and latents for verification suites.
    pub record_trace: bool,
    pub features: FeatureConfig,
    pub inference: InferenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.005,
            m: 2,
            b1: 2,
            b2: 2,
            window: None,
            n_max: 4,
            min_cluster_abs: 3,
            min_cluster_frac: 0.05,
            split_factor: 0.5,
            merge_factor: 0.1,
            mining_per_image: 5,
            cutting_plane_eps: 1e-3,
            cutting_plane_max_rounds: 200,
            outer_tol: 1e-4,
            outer_max_iters: 50,
            seed: 0,
            use_edges: true,
            record_trace: false,
            features: FeatureConfig::default(),
            inference: InferenceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::Config("lambda must be positive".into()));
        }
        if self.m == 0 || self.b1 == 0 || self.b2 == 0 || self.n_max == 0 {
            return Err(Error::Config("m, b1, b2 and n_max must be at least 1".into()));
        }
        self.features.validate()
    }

    /// Feature settings with the edge ablation applied.
    pub fn effective_features(&self) -> FeatureConfig {
        FeatureConfig {
            use_edges: self.use_edges,
            ..self.features.clone()
        }
    }

    /// Exhaustive settings used for latent estimation (the window set is
    /// already constrained by the annotation overlap).
    pub fn latent_config(&self) -> InferenceConfig {
        self.inference.clone().exhaustive()
    }

    /// Staged settings used for whole-image hard-negative search.
    pub fn mining_config(&self) -> InferenceConfig {
        self.inference.clone()
    }
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct IterationLog {
    pub iter: usize,
    pub energy: f64,
    pub accepted: bool,
    pub structure_hash: String,
    pub num_leaves: usize,
    /// Constraints added by the parameter solve of this iteration.
    pub violations: usize,
}

/// Snapshot of one outer iteration for verification: the model the latents
/// were estimated with and the resulting feature maps.
#[derive(Debug, Clone)]
pub struct TraceIteration {
    pub model: Model,
    pub latent_phis: Vec<SparseVec>,
    pub latent_scores: Vec<f64>,
    /// `lambda * sum_k` of the latent scores (the concave term at `w_t`).
    pub g_value: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<IterationLog>,
    pub trace: Vec<TraceIteration>,
    pub energy: EnergyReport,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveStats {
    pub rounds: usize,
    pub added: usize,
    pub converged: bool,
}

/// Initialization: a regular block grid per positive, the longest fragment
/// per block, seeded clustering of the ensemble descriptors into `m` groups,
/// and unconstrained clustering of the per-block fragments into leaf sets.
pub fn initialize(samples: &[TrainingSample], cfg: &TrainConfig) -> Result<(Model, Vec<PositiveState>)> {
    cfg.validate()?;
    let features = cfg.effective_features();
    let positives: Vec<usize> = (0..samples.len()).filter(|&k| samples[k].label > 0).collect();
    if positives.is_empty() || positives.len() == samples.len() {
        return Err(Error::Training(
            "training needs at least one positive and one negative sample".into(),
        ));
    }

    let window = cfg.window.unwrap_or_else(|| {
        let mut ws: Vec<f64> = positives
            .iter()
            .map(|&k| samples[k].gt_window.expect("positive carries a window").w)
            .collect();
        let mut hs: Vec<f64> = positives
            .iter()
            .map(|&k| samples[k].gt_window.unwrap().h)
            .collect();
        ws.sort_by(f64::total_cmp);
        hs.sort_by(f64::total_cmp);
        [ws[ws.len() / 2], hs[hs.len() / 2]]
    });
    let proto = AndNodeStructure {
        b1: cfg.b1,
        b2: cfg.b2,
        window,
        leaf_counts: vec![1; cfg.b1 * cfg.b2],
    };
    let z = proto.num_or_nodes();

    // Place every positive at its best-matching pyramid level and pick the
    // longest fragment per block.
    struct Seeded {
        sample_idx: usize,
        level: usize,
        assignment: LatentAssignment,
        part_feats: Vec<Option<Vec<f64>>>,
        global_feat: Vec<f64>,
    }
    let pyramid = &cfg.inference.pyramid;
    let seeded: Vec<Option<Seeded>> = positives
        .par_iter()
        .map(|&k| {
            let gt = samples[k].gt_window.unwrap();
            let level = (0..pyramid.num_scales)
                .min_by(|&a, &b| {
                    let fa = pyramid.factor(a);
                    let fb = pyramid.factor(b);
                    let da = (gt.w * fa - window[0]).abs() + (gt.h * fa - window[1]).abs();
                    let db = (gt.w * fb - window[0]).abs() + (gt.h * fb - window[1]).abs();
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap();
            let f = pyramid.factor(level);
            let map = samples[k].map.scaled(f);
            let root = Point::new(gt.x * f, gt.y * f);
            let mut parts = Vec::with_capacity(z);
            let mut part_feats = Vec::with_capacity(z);
            let mut omegas: Vec<SamplePoints> = Vec::new();
            for j in 0..z {
                let anchor = proto.anchor(j);
                let position = Point::new(root.x + anchor.x, root.y + anchor.y);
                let block = proto.block_rect(position.x, position.y);
                let frags = block_fragments(&map, &block, &features);
                // Longest clipped fragment wins; ties keep enumeration order.
                let longest = frags.iter().enumerate().max_by(|(ai, a), (bi, b)| {
                    a.contour
                        .arc_length()
                        .total_cmp(&b.contour.arc_length())
                        .then(bi.cmp(ai))
                });
                match longest {
                    Some((_, frag)) => {
                        part_feats.push(Some(contour_feature(&frag.omega, &features)));
                        omegas.push(frag.omega.clone());
                        parts.push(PartAssignment {
                            position,
                            leaf: Some(0),
                            fragment: Some(frag.contour.clone()),
                        });
                    }
                    None => {
                        part_feats.push(None);
                        parts.push(PartAssignment {
                            position,
                            leaf: None,
                            fragment: None,
                        });
                    }
                }
            }
            if omegas.is_empty() {
                return None;
            }
            let wrect = proto.window_rect_at(root.x, root.y);
            let refs: Vec<&SamplePoints> = omegas.iter().collect();
            let global_feat = global_descriptor(&refs, &wrect, &features);
            Some(Seeded {
                sample_idx: k,
                level,
                assignment: LatentAssignment {
                    and_choice: 0,
                    root,
                    parts,
                },
                part_feats,
                global_feat,
            })
        })
        .collect();
    let mut seeded: Vec<Seeded> = seeded.into_iter().flatten().collect();
    if seeded.is_empty() {
        return Err(Error::Training(
            "no positive sample has contours inside its window".into(),
        ));
    }
    if seeded.len() < positives.len() {
        log::warn!(
            "skipped {} positive(s) with empty windows during initialization",
            positives.len() - seeded.len()
        );
    }

    // Group global descriptors into m clusters.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let points: Vec<Vec<f64>> = seeded.iter().map(|s| s.global_feat.clone()).collect();
    let and_assign = kmeans_seeded(&points, cfg.m, &mut rng, 100);
    for (s, &r) in seeded.iter_mut().zip(&and_assign) {
        s.assignment.and_choice = r;
    }

    // Unconstrained leaf clustering per (and-node, or-node).
    let mut and_nodes = vec![proto.clone(); cfg.m];
    for r in 0..cfg.m {
        for j in 0..z {
            let members: Vec<usize> = seeded
                .iter()
                .enumerate()
                .filter(|(_, s)| s.assignment.and_choice == r && s.part_feats[j].is_some())
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                and_nodes[r].leaf_counts[j] = 1;
                continue;
            }
            let pts: Vec<Vec<f64>> = members
                .iter()
                .map(|&i| seeded[i].part_feats[j].clone().unwrap())
                .collect();
            let init = vec![0usize; pts.len()];
            let min_size = cfg
                .min_cluster_abs
                .max((cfg.min_cluster_frac * members.len() as f64).ceil() as usize);
            let params = derive_isodata_params(
                &pts,
                &init,
                cfg.split_factor,
                cfg.merge_factor,
                min_size,
                cfg.n_max,
            );
            let assign = isodata(&pts, &init, &params);
            and_nodes[r].leaf_counts[j] = assign.iter().copied().max().unwrap_or(0) + 1;
            for (mi, &i) in members.iter().enumerate() {
                seeded[i].assignment.parts[j].leaf = Some(assign[mi]);
            }
        }
    }

    let structure = Structure::new(and_nodes)?;
    let model = Model::zeroed(structure, features)?;
    let mut states = Vec::with_capacity(seeded.len());
    for s in seeded {
        let placed = PlacedLatent {
            level: s.level,
            assignment: s.assignment,
            score: 0.0,
        };
        states.push(build_state(&model, s.sample_idx, placed)?);
    }
    Ok((model, states))
}

/// Cutting-plane solve of the convex subproblem at fixed positive latents:
/// alternate most-violated constraint search with the working-set QP until
/// no constraint is violated by more than the tolerance.
pub fn solve_params(
    model: &Model,
    samples: &[TrainingSample],
    states: &[PositiveState],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    let lambda = cfg.lambda;
    let dim = model.dim();
    let latent_cfg = cfg.latent_config();
    let mining_cfg = cfg.mining_config();
    let mut ws = WorkingSet::new();
    let mut scratch = model.clone();
    let mut stats = SolveStats::default();

    // Seed: the flipped-label constraint of every active positive.
    for s in states {
        ws.push(Constraint {
            sample: s.sample_idx,
            loss: 1.0,
            delta: s.phi.clone(),
            key: placement_key(-1, None),
            round: 0,
        });
    }
    let negatives: Vec<usize> = (0..samples.len()).filter(|&k| samples[k].label < 0).collect();

    let mut w = vec![0.0f64; dim];
    for round in 0..cfg.cutting_plane_max_rounds {
        stats.rounds = round + 1;
        let sol = solve_working_set(
            &mut ws,
            lambda,
            samples.len(),
            dim,
            cfg.cutting_plane_eps * 0.05,
            2_000,
        );
        w = sol.weights;
        scratch.params.flat.copy_from_slice(&w);

        // Slacks under the current working set.
        let mut slack = vec![0.0f64; samples.len()];
        for c in &ws.constraints {
            let v = c.loss - c.delta.dot_dense(&w);
            if v > slack[c.sample] {
                slack[c.sample] = v;
            }
        }

        let scratch_ref = &scratch;
        // Most violated constraint per positive.
        let pos_new: Vec<Option<Constraint>> = states
            .par_iter()
            .map(|s| {
                let k = s.sample_idx;
                let base = s.phi.dot_dense(&w);
                let aug = loss_augmented_argmax(scratch_ref, &samples[k], &latent_cfg, &mining_cfg);
                let violation = aug.value - base - slack[k];
                if violation <= cfg.cutting_plane_eps {
                    return None;
                }
                let (delta, loss_v) = match (&aug.latent, aug.label) {
                    (Some(p), 1) => {
                        let phi = scratch_ref
                            .assemble_features(&p.assignment)
                            .expect("estimated latent is valid");
                        (s.phi.sub(&phi), 0.0)
                    }
                    _ => (s.phi.clone(), 1.0),
                };
                Some(Constraint {
                    sample: k,
                    loss: loss_v,
                    delta,
                    key: placement_key(aug.label, aug.latent.as_ref()),
                    round: round + 1,
                })
            })
            .collect();
        // Hard negatives: top windows per image.
        let neg_new: Vec<Vec<Constraint>> = negatives
            .par_iter()
            .map(|&k| {
                let tops = top_windows(scratch_ref, &samples[k].map, &mining_cfg, cfg.mining_per_image);
                tops.into_iter()
                    .filter(|p| p.score + 1.0 - slack[k] > cfg.cutting_plane_eps)
                    .map(|p| {
                        let phi = scratch_ref
                            .assemble_features(&p.assignment)
                            .expect("mined latent is valid");
                        let delta = SparseVec::new().sub(&phi);
                        Constraint {
                            sample: k,
                            loss: 1.0,
                            delta,
                            key: placement_key(1, Some(&p)),
                            round: round + 1,
                        }
                    })
                    .collect()
            })
            .collect();

        let mut added = 0;
        for c in pos_new.into_iter().flatten() {
            if ws.push(c) {
                added += 1;
            }
        }
        for c in neg_new.into_iter().flatten() {
            if ws.push(c) {
                added += 1;
            }
        }
        stats.added += added;
        if added == 0 {
            stats.converged = true;
            break;
        }
        // Bound memory: drop long-inactive constraints.
        if ws.len() > 4 * samples.len() + 256 {
            ws.shrink(round.saturating_sub(1));
        }
    }
    if !stats.converged {
        log::warn!(
            "cutting plane hit the round cap ({}) with constraints still violated",
            cfg.cutting_plane_max_rounds
        );
    }
    Ok((w, stats))
}

/// The full training loop. `on_iter` runs after every logged iteration with
/// the current model (checkpointing hook).
pub fn dso_train(
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    mut on_iter: impl FnMut(&IterationLog, &Model),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let latent_cfg = cfg.latent_config();
    let mining_cfg = cfg.mining_config();

    let (mut model, mut states) = initialize(samples, cfg)?;
    let (w0, stats0) = solve_params(&model, samples, &states, cfg)?;
    model.params.flat = w0;
    let mut report = energy(&model, samples, cfg.lambda, &latent_cfg, &mining_cfg);
    let mut log = Vec::new();
    let mut trace = Vec::new();
    let entry = IterationLog {
        iter: 0,
        energy: report.objective,
        accepted: true,
        structure_hash: model.structure.digest(),
        num_leaves: model.structure.total_leaves(),
        violations: stats0.added,
    };
    on_iter(&entry, &model);
    log.push(entry);

    for iter in 1..=cfg.outer_max_iters {
        // (I) Latent estimation under the current model.
        let estimated: Vec<Option<PlacedLatent>> = states
            .par_iter()
            .map(|s| {
                let sample = &samples[s.sample_idx];
                let gt = sample.gt_window.expect("positive carries a window");
                estimate_latent(&model, &sample.map, &gt, &latent_cfg)
            })
            .collect();
        let mut fresh: Vec<PositiveState> = Vec::with_capacity(states.len());
        for (s, placed) in states.iter().zip(estimated) {
            match placed {
                Some(p) => fresh.push(build_state(&model, s.sample_idx, p)?),
                None => log::warn!(
                    "positive sample {} produced no hypothesis this iteration; dropped",
                    samples[s.sample_idx].id
                ),
            }
        }
        if fresh.is_empty() {
            return Err(Error::Training("every positive lost its latent assignment".into()));
        }
        states = fresh;
        if cfg.record_trace {
            let latent_scores: Vec<f64> = states.iter().map(|s| s.placed.score).collect();
            trace.push(TraceIteration {
                model: model.clone(),
                latent_phis: states.iter().map(|s| s.phi.clone()).collect(),
                g_value: cfg.lambda * latent_scores.iter().sum::<f64>(),
                latent_scores,
            });
        }

        // (II) Structure reconfiguration on a copy of the states.
        let mut cand_states = states.clone();
        let rec = reconfigure(&mut cand_states, &model, cfg);
        let cand_zero = Model::zeroed(rec.structure, model.features.clone())?;
        reassemble(&mut cand_states, &cand_zero)?;

        // (III) Parameters for the candidate structure, then accept/reject.
        let (wd, stats_d) = solve_params(&cand_zero, samples, &cand_states, cfg)?;
        let mut cand_model = cand_zero;
        cand_model.params.flat = wd;
        let cand_report = energy(&cand_model, samples, cfg.lambda, &latent_cfg, &mining_cfg);

        let prev = report.objective;
        let (accepted, violations);
        if cand_report.objective < prev {
            model = cand_model;
            states = cand_states;
            report = cand_report;
            accepted = true;
            violations = stats_d.added;
        } else {
            // Keep the structure; re-solve on this iteration's latents.
            let (wr, stats_r) = solve_params(&model, samples, &states, cfg)?;
            let mut retry = model.clone();
            retry.params.flat = wr;
            let retry_report = energy(&retry, samples, cfg.lambda, &latent_cfg, &mining_cfg);
            accepted = false;
            violations = stats_d.added + stats_r.added;
            if retry_report.objective <= prev {
                model = retry;
                report = retry_report;
            } else {
                // No numerical progress in either branch; stop.
                let entry = IterationLog {
                    iter,
                    energy: prev,
                    accepted,
                    structure_hash: model.structure.digest(),
                    num_leaves: model.structure.total_leaves(),
                    violations,
                };
                on_iter(&entry, &model);
                log.push(entry);
                break;
            }
        }
        let entry = IterationLog {
            iter,
            energy: report.objective,
            accepted,
            structure_hash: model.structure.digest(),
            num_leaves: model.structure.total_leaves(),
            violations,
        };
        on_iter(&entry, &model);
        log.push(entry);
        if (prev - report.objective).abs() <= cfg.outer_tol * (1.0 + prev.abs()) {
            break;
        }
    }

    Ok(TrainOutcome {
        model,
        log,
        trace,
        energy: report,
    })
}
