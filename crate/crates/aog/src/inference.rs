//! Sliding-window detection over an image pyramid.
//!
//! Each window is scored in three stages: local testing proposes per-or-node
//! candidates (leaf choice, perturbed position, fragment), binding testing
//! combines candidates into hypotheses weighted by the collaborative edges,
//! and global verification re-scores each hypothesis with the and-node
//! ensemble descriptor before the root picks the maximum. Windows survive a
//! score threshold and greedy non-maximum suppression across all scales.

use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contour::global_bin_index;
use crate::geometry::{Point, Rect};
use crate::model::{block_fragments, psi, BlockFragment, EdgeMap, LatentAssignment, Model, PartAssignment};

/// Image pyramid layout: `num_scales` levels at `2^(-1/per_octave)` per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PyramidSpec {
    pub num_scales: usize,
    pub per_octave: usize,
    /// Sliding stride in pixels at every level.
    pub stride: f64,
}

impl Default for PyramidSpec {
    fn default() -> Self {
        PyramidSpec {
            num_scales: 6,
            per_octave: 2,
            stride: 8.0,
        }
    }
}

impl PyramidSpec {
    pub fn factor(&self, level: usize) -> f64 {
        2f64.powf(-(level as f64) / self.per_octave as f64)
    }
}

/// Inference settings. The beams and the exact-enumeration cap trade speed
/// for the guarantee that the per-window winner maximizes the model response
/// exactly; with unbounded beams and cap the search is exhaustive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub pyramid: PyramidSpec,
    /// Perturbation offsets in block-size units, combined over x and y. The
    /// anchor offset comes first so equal-score ties resolve to the anchor.
    pub perturb: Vec<f64>,
    /// Candidates kept per or-node after local testing.
    pub candidate_beam: usize,
    /// Hypotheses kept per (window, and-node) after binding.
    pub hypothesis_beam: usize,
    /// Exact Cartesian enumeration when the candidate-list product is at
    /// most this; beam search otherwise.
    pub exact_cap: usize,
    /// Hypotheses with a binding score below this are dropped.
    pub prune_threshold: f64,
    /// Per-window winners below this score are not reported.
    pub score_threshold: f64,
    /// Greedy suppression of detections overlapping more than this IoU.
    pub nms_iou: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            pyramid: PyramidSpec::default(),
            perturb: vec![0.0, -0.25, 0.25],
            candidate_beam: 4,
            hypothesis_beam: 64,
            exact_cap: 10_000,
            prune_threshold: f64::NEG_INFINITY,
            score_threshold: 0.0,
            nms_iou: 0.5,
        }
    }
}

impl InferenceConfig {
    /// Exhaustive settings: no beams, no pruning, exact enumeration always.
    pub fn exhaustive(mut self) -> Self {
        self.candidate_beam = usize::MAX;
        self.hypothesis_beam = usize::MAX;
        self.exact_cap = usize::MAX;
        self.prune_threshold = f64::NEG_INFINITY;
        self
    }
}

/// One candidate activation of an or-node at a perturbed position.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub position: Point,
    pub leaf: Option<usize>,
    pub fragment: Option<Arc<BlockFragment>>,
    /// Or-node response (leaf response minus deformation cost).
    pub or_score: f64,
    /// Dot of the and-node weights with this fragment's unnormalized
    /// contribution to the ensemble histogram of the current window.
    pub and_dot: f64,
    /// Sample points this fragment contributes to the ensemble.
    pub n_points: usize,
}

/// A scored configuration of one candidate per or-node of one and-node.
#[derive(Debug, Clone)]
pub struct DetectionHypothesis {
    pub and_choice: usize,
    /// Candidate index per or-node, into the sorted candidate lists.
    pub choices: Vec<usize>,
    /// Local + binding stage score (or-node responses plus edge response).
    pub bind_score: f64,
    /// And-node verification score.
    pub global_score: f64,
    /// `bind_score + global_score`.
    pub total_score: f64,
}

/// A final detection in original image coordinates.
#[derive(Debug, Clone)]
pub struct Detection {
    pub window: Rect,
    /// Pyramid level the detection was found at.
    pub scale: usize,
    pub score: f64,
    pub assignment: LatentAssignment,
}

#[derive(Clone)]
struct BlockEntry {
    fragments: Vec<Arc<BlockFragment>>,
}

type PosKey = (u64, u64);

fn pos_key(p: &Point) -> PosKey {
    (p.x.to_bits(), p.y.to_bits())
}

/// Per-(scale level, edge map) scoring context holding the fragment and
/// leaf-score caches shared by every window of that level.
pub struct WindowScorer<'a> {
    pub model: &'a Model,
    pub map: &'a EdgeMap,
    config: &'a InferenceConfig,
    /// Fragments per (and-node, block center).
    blocks: HashMap<(usize, PosKey), Arc<BlockEntry>>,
    /// Per-leaf best (score, fragment index) per (and-node, or-node, center).
    leaf_best: HashMap<(usize, usize, PosKey), Arc<Vec<(f64, Option<usize>)>>>,
}

impl<'a> WindowScorer<'a> {
    pub fn new(model: &'a Model, map: &'a EdgeMap, config: &'a InferenceConfig) -> Self {
        WindowScorer {
            model,
            map,
            config,
            blocks: HashMap::new(),
            leaf_best: HashMap::new(),
        }
    }

    /// Block-center positions probed by or-node `j` of and-node `r` for a
    /// window anchored at `(wx, wy)`; one per perturbation offset.
    fn candidate_positions(&self, r: usize, j: usize, wx: f64, wy: f64) -> Vec<Point> {
        let a = &self.model.structure.and_nodes[r];
        let anchor = a.anchor(j);
        let (bw, bh) = (a.block_w(), a.block_h());
        let mut out = Vec::with_capacity(self.config.perturb.len() * self.config.perturb.len());
        for dy in &self.config.perturb {
            for dx in &self.config.perturb {
                out.push(Point::new(
                    wx + anchor.x + dx * bw,
                    wy + anchor.y + dy * bh,
                ));
            }
        }
        out
    }

    /// Precomputes fragment and leaf-score cache entries for every position a
    /// set of window anchors will probe. Computation is parallel; insertion
    /// order is deterministic.
    pub fn warm_cache(&mut self, r: usize, anchors: &[(f64, f64)]) {
        let a = &self.model.structure.and_nodes[r];
        let z = a.num_or_nodes();
        // Distinct positions, tagged with the or-nodes that probe them.
        let mut pos_by_key: Vec<((usize, PosKey), Point)> = Vec::new();
        let mut seen: std::collections::BTreeSet<(usize, PosKey)> = std::collections::BTreeSet::new();
        for &(wx, wy) in anchors {
            for j in 0..z {
                for p in self.candidate_positions(r, j, wx, wy) {
                    let key = (j, pos_key(&p));
                    if seen.insert(key) {
                        pos_by_key.push((key, p));
                    }
                }
            }
        }
        // Fragments are shared across or-nodes (same block size), so compute
        // them once per distinct center.
        let mut centers: Vec<(PosKey, Point)> = Vec::new();
        let mut seen_centers: std::collections::BTreeSet<PosKey> = std::collections::BTreeSet::new();
        for &((_, key), p) in &pos_by_key {
            if seen_centers.insert(key) && !self.blocks.contains_key(&(r, key)) {
                centers.push((key, p));
            }
        }
        let model = self.model;
        let map = self.map;
        let computed: Vec<(PosKey, BlockEntry)> = centers
            .par_iter()
            .map(|&(key, p)| {
                let block = model.structure.and_nodes[r].block_rect(p.x, p.y);
                let fragments = block_fragments(map, &block, &model.features)
                    .into_iter()
                    .map(Arc::new)
                    .collect();
                (key, BlockEntry { fragments })
            })
            .collect();
        for (key, entry) in computed {
            self.blocks.insert((r, key), Arc::new(entry));
        }
        // Leaf scores per (or-node, center).
        let blocks = &self.blocks;
        let scored: Vec<((usize, PosKey), Vec<(f64, Option<usize>)>)> = pos_by_key
            .par_iter()
            .map(|&((j, key), _)| {
                let entry = &blocks[&(r, key)];
                let n = model.structure.and_nodes[r].leaf_counts[j];
                let mut per_leaf = Vec::with_capacity(n);
                for i in 0..n {
                    let w = model.leaf_weights(r, j, i);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_k = None;
                    for (k, f) in entry.fragments.iter().enumerate() {
                        let s: f64 = w.iter().zip(&f.feature).map(|(x, y)| x * y).sum();
                        if s > best {
                            best = s;
                            best_k = Some(k);
                        }
                    }
                    per_leaf.push(match best_k {
                        Some(k) => (best, Some(k)),
                        None => (0.0, None),
                    });
                }
                ((j, key), per_leaf)
            })
            .collect();
        for ((j, key), per_leaf) in scored {
            self.leaf_best.insert((r, j, key), Arc::new(per_leaf));
        }
    }

    fn block_entry(&self, r: usize, p: &Point) -> Arc<BlockEntry> {
        let key = (r, pos_key(p));
        if let Some(e) = self.blocks.get(&key) {
            return e.clone();
        }
        let block = self.model.structure.and_nodes[r].block_rect(p.x, p.y);
        let fragments = block_fragments(self.map, &block, &self.model.features)
            .into_iter()
            .map(Arc::new)
            .collect();
        Arc::new(BlockEntry { fragments })
    }

    fn leaf_scores(&self, r: usize, j: usize, p: &Point, entry: &BlockEntry) -> Arc<Vec<(f64, Option<usize>)>> {
        let key = (r, j, pos_key(p));
        if let Some(v) = self.leaf_best.get(&key) {
            return v.clone();
        }
        let n = self.model.structure.and_nodes[r].leaf_counts[j];
        let mut per_leaf = Vec::with_capacity(n);
        for i in 0..n {
            let w = self.model.leaf_weights(r, j, i);
            let mut best = f64::NEG_INFINITY;
            let mut best_k = None;
            for (k, f) in entry.fragments.iter().enumerate() {
                let s: f64 = w.iter().zip(&f.feature).map(|(x, y)| x * y).sum();
                if s > best {
                    best = s;
                    best_k = Some(k);
                }
            }
            per_leaf.push(match best_k {
                Some(k) => (best, Some(k)),
                None => (0.0, None),
            });
        }
        Arc::new(per_leaf)
    }

    /// Local testing: per-or-node candidate lists for and-node `r` at window
    /// anchor `(wx, wy)`, sorted by descending or-node response and truncated
    /// to the candidate beam. Blocks with no surviving fragment contribute an
    /// empty-block candidate instead of leaf candidates.
    pub fn local_testing(&self, r: usize, wx: f64, wy: f64) -> Vec<Vec<Candidate>> {
        let a = &self.model.structure.and_nodes[r];
        let z = a.num_or_nodes();
        let root = Point::new(wx, wy);
        let window = a.window_rect_at(wx, wy);
        let center = window.center();
        let half_diag = window.half_diagonal();
        let and_w = self.model.and_weights(r);

        let mut lists = Vec::with_capacity(z);
        for j in 0..z {
            let mut cands: Vec<Candidate> = Vec::new();
            for p in self.candidate_positions(r, j, wx, wy) {
                let deform = self.model.deformation_cost(r, j, &root, &p);
                let entry = self.block_entry(r, &p);
                if entry.fragments.is_empty() {
                    cands.push(Candidate {
                        position: p,
                        leaf: None,
                        fragment: None,
                        or_score: -deform,
                        and_dot: 0.0,
                        n_points: 0,
                    });
                    continue;
                }
                let scores = self.leaf_scores(r, j, &p, &entry);
                for (i, &(score, best_k)) in scores.iter().enumerate() {
                    let frag = entry.fragments[best_k.expect("fragments nonempty")].clone();
                    let mut and_dot = 0.0;
                    for q in &frag.omega.pts {
                        and_dot += and_w[global_bin_index(q, &center, half_diag, &self.model.features)];
                    }
                    cands.push(Candidate {
                        position: p,
                        leaf: Some(i),
                        fragment: Some(frag),
                        or_score: score - deform,
                        and_dot,
                        n_points: self.model.features.sample_points,
                    });
                }
            }
            // Deterministic order: score descending, then enumeration order.
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&x, &y| {
                cands[y]
                    .or_score
                    .total_cmp(&cands[x].or_score)
                    .then(x.cmp(&y))
            });
            let keep = order.len().min(self.config.candidate_beam);
            lists.push(order[..keep].iter().map(|&k| cands[k].clone()).collect());
        }
        lists
    }

    /// Pairwise edge score between two candidates of or-nodes `j1 < j2`.
    fn pair_score(&self, r: usize, j1: usize, c1: &Candidate, j2: usize, c2: &Candidate) -> f64 {
        if !self.model.features.use_edges {
            return 0.0;
        }
        let (Some(i1), Some(i2)) = (c1.leaf, c2.leaf) else {
            return 0.0;
        };
        let a = &self.model.structure.and_nodes[r];
        let initial = a.anchor(j2) - a.anchor(j1);
        let feat = psi(&c1.position, &c2.position, &initial, self.model.near_radius(r));
        self.model
            .edge_weights(r, j1, i1, j2, i2)
            .iter()
            .zip(&feat)
            .map(|(x, y)| x * y)
            .sum()
    }

    /// Binding testing: combines per-or-node candidates into hypotheses
    /// scored by or-node responses plus the collaborative edges. Exact
    /// Cartesian enumeration below the cap, beam search otherwise; prunes
    /// below the threshold and keeps at most the hypothesis beam.
    pub fn binding_testing(&self, r: usize, lists: &[Vec<Candidate>]) -> Vec<DetectionHypothesis> {
        let z = lists.len();
        if lists.iter().any(|l| l.is_empty()) {
            return Vec::new();
        }
        // Pair score tables [j1][j2][c1 * n2 + c2].
        let mut tables: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); z]; z];
        for j1 in 0..z {
            for j2 in (j1 + 1)..z {
                let mut t = Vec::with_capacity(lists[j1].len() * lists[j2].len());
                for c1 in &lists[j1] {
                    for c2 in &lists[j2] {
                        t.push(self.pair_score(r, j1, c1, j2, c2));
                    }
                }
                tables[j1][j2] = t;
            }
        }

        let product = lists
            .iter()
            .try_fold(1usize, |acc, l| acc.checked_mul(l.len()))
            .unwrap_or(usize::MAX);
        let mut hyps: Vec<(Vec<usize>, f64)> = if product <= self.config.exact_cap {
            // Exact enumeration in lexicographic choice order.
            let mut out = Vec::new();
            let mut choice = vec![0usize; z];
            loop {
                let mut score = 0.0;
                for j in 0..z {
                    score += lists[j][choice[j]].or_score;
                    for j2 in (j + 1)..z {
                        score += tables[j][j2][choice[j] * lists[j2].len() + choice[j2]];
                    }
                }
                out.push((choice.clone(), score));
                // Advance the mixed-radix counter.
                let mut j = z;
                loop {
                    if j == 0 {
                        break;
                    }
                    j -= 1;
                    choice[j] += 1;
                    if choice[j] < lists[j].len() {
                        break;
                    }
                    choice[j] = 0;
                }
                if choice.iter().all(|&c| c == 0) {
                    break;
                }
            }
            out
        } else {
            // Beam over or-nodes in index order.
            let mut beam: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
            for j in 0..z {
                let mut next: Vec<(Vec<usize>, f64)> = Vec::with_capacity(beam.len() * lists[j].len());
                for (prefix, score) in &beam {
                    for (cj, cand) in lists[j].iter().enumerate() {
                        let mut s = score + cand.or_score;
                        for (jp, &cp) in prefix.iter().enumerate() {
                            s += tables[jp][j][cp * lists[j].len() + cj];
                        }
                        let mut ext = prefix.clone();
                        ext.push(cj);
                        next.push((ext, s));
                    }
                }
                next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                next.truncate(self.config.hypothesis_beam);
                beam = next;
            }
            beam
        };

        hyps.retain(|(_, s)| *s >= self.config.prune_threshold);
        hyps.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        hyps.truncate(self.config.hypothesis_beam);
        hyps.into_iter()
            .map(|(choices, bind_score)| DetectionHypothesis {
                and_choice: r,
                choices,
                bind_score,
                global_score: 0.0,
                total_score: bind_score,
            })
            .collect()
    }

    /// Global verification: re-scores hypotheses with the and-node ensemble
    /// descriptor and lets the root select the maximum across and-nodes.
    /// Ties prefer the lower and-node index, then lexicographic choices.
    pub fn global_verification(
        &self,
        per_and: &[(Vec<Vec<Candidate>>, Vec<DetectionHypothesis>)],
    ) -> Option<DetectionHypothesis> {
        let mut best: Option<DetectionHypothesis> = None;
        for (lists, hyps) in per_and {
            for h in hyps {
                let mut and_dot = 0.0;
                let mut n_points = 0usize;
                for (j, &c) in h.choices.iter().enumerate() {
                    let cand = &lists[j][c];
                    and_dot += cand.and_dot;
                    n_points += cand.n_points;
                }
                let global_score = if self.model.features.normalize && n_points > 0 {
                    and_dot / n_points as f64
                } else {
                    and_dot
                };
                let total = h.bind_score + global_score;
                let better = match &best {
                    None => true,
                    Some(b) => {
                        total > b.total_score
                            || (total == b.total_score
                                && (h.and_choice, &h.choices) < (b.and_choice, &b.choices))
                    }
                };
                if better {
                    best = Some(DetectionHypothesis {
                        global_score,
                        total_score: total,
                        ..h.clone()
                    });
                }
            }
        }
        best
    }

    /// Exact winner for one and-node by fused enumeration: the and-node
    /// ensemble score is a ratio of per-candidate sums, so the search tracks
    /// `(bind, sum_dot, sum_points)` with O(z) memory instead of
    /// materializing the Cartesian product. Branch-and-bound uses optimistic
    /// per-part remainders; configurations with equal totals keep the first
    /// in lexicographic choice order.
    fn exact_best(&self, r: usize, lists: &[Vec<Candidate>]) -> Option<DetectionHypothesis> {
        let z = lists.len();
        if lists.iter().any(|l| l.is_empty()) {
            return None;
        }
        let mut tables: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); z]; z];
        for j1 in 0..z {
            for j2 in (j1 + 1)..z {
                let mut t = Vec::with_capacity(lists[j1].len() * lists[j2].len());
                for c1 in &lists[j1] {
                    for c2 in &lists[j2] {
                        t.push(self.pair_score(r, j1, c1, j2, c2));
                    }
                }
                tables[j1][j2] = t;
            }
        }
        // Optimistic bound of everything still undecided at part j: the best
        // unary of each remaining part plus, for every pair touching a
        // remaining part, the best non-negative table entry (pairs with an
        // inactive side contribute exactly zero, so zero is always
        // admissible).
        let max_unary: Vec<f64> = lists
            .iter()
            .map(|l| l.iter().map(|c| c.or_score).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let table_max: Vec<Vec<f64>> = (0..z)
            .map(|j1| {
                (0..z)
                    .map(|j2| {
                        if j1 < j2 {
                            tables[j1][j2]
                                .iter()
                                .copied()
                                .fold(f64::NEG_INFINITY, f64::max)
                                .max(0.0)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut rem = vec![0.0f64; z + 1];
        for j in (0..z).rev() {
            let mut v = rem[j + 1] + max_unary[j];
            // Pairs (a, j) for every a < j become payable once j is decided.
            for a in 0..j {
                v += table_max[a][j];
            }
            rem[j] = v;
        }
        let mut and_rate = 0.0f64; // upper bound of sum_dot / sum_points
        if self.model.features.normalize {
            for l in lists {
                for c in l {
                    if c.n_points > 0 {
                        and_rate = and_rate.max(c.and_dot / c.n_points as f64);
                    }
                }
            }
        } else {
            // Raw mode adds dots directly; bound by the positive ones.
            and_rate = 0.0;
        }

        struct Search<'s, 'a> {
            scorer: &'s WindowScorer<'a>,
            lists: &'s [Vec<Candidate>],
            tables: &'s [Vec<Vec<f64>>],
            rem: &'s [f64],
            and_ub: f64,
            raw_and_ub: f64,
            prune: f64,
            choice: Vec<usize>,
            best: Option<(f64, f64, f64, Vec<usize>)>, // total, bind, global, choices
        }
        impl Search<'_, '_> {
            fn go(&mut self, j: usize, bind: f64, s_dot: f64, n_pts: usize) {
                let z = self.lists.len();
                if j == z {
                    if bind < self.prune {
                        return;
                    }
                    let global = if self.scorer.model.features.normalize {
                        if n_pts > 0 {
                            s_dot / n_pts as f64
                        } else {
                            0.0
                        }
                    } else {
                        s_dot
                    };
                    let total = bind + global;
                    if self.best.as_ref().map(|(t, ..)| total > *t).unwrap_or(true) {
                        self.best = Some((total, bind, global, self.choice.clone()));
                    }
                    return;
                }
                // Bound: remaining unary/pair mass plus the best possible
                // and-node score.
                if let Some((best_total, ..)) = &self.best {
                    let and_bound = if self.scorer.model.features.normalize {
                        self.and_ub
                    } else {
                        s_dot.max(0.0) + self.raw_and_ub
                    };
                    if bind + self.rem[j] + and_bound <= *best_total {
                        return;
                    }
                }
                for cj in 0..self.lists[j].len() {
                    let cand = &self.lists[j][cj];
                    let mut b = bind + cand.or_score;
                    for jp in 0..j {
                        b += self.tables[jp][j][self.choice[jp] * self.lists[j].len() + cj];
                    }
                    self.choice.push(cj);
                    self.go(j + 1, b, s_dot + cand.and_dot, n_pts + cand.n_points);
                    self.choice.pop();
                }
            }
        }
        let raw_and_ub: f64 = if self.model.features.normalize {
            0.0
        } else {
            lists
                .iter()
                .map(|l| l.iter().map(|c| c.and_dot).fold(f64::NEG_INFINITY, f64::max).max(0.0))
                .sum()
        };
        let mut search = Search {
            scorer: self,
            lists,
            tables: &tables,
            rem: &rem,
            and_ub: and_rate.max(0.0),
            raw_and_ub,
            prune: self.config.prune_threshold,
            choice: Vec::with_capacity(z),
            best: None,
        };
        search.go(0, 0.0, 0.0, 0);
        search.best.map(|(total, bind, global, choices)| DetectionHypothesis {
            and_choice: r,
            choices,
            bind_score: bind,
            global_score: global,
            total_score: total,
        })
    }

    /// Runs all three stages for every and-node whose window, anchored at
    /// `(wx, wy)`, fits inside the map; returns the per-window winner. Below
    /// the exact cap the per-and-node winner comes from the fused exact
    /// search; above it, from beam binding plus global re-scoring.
    pub fn best_at(&self, wx: f64, wy: f64) -> Option<(DetectionHypothesis, LatentAssignment)> {
        let mut best: Option<DetectionHypothesis> = None;
        let mut all_lists: Vec<Option<Vec<Vec<Candidate>>>> =
            vec![None; self.model.structure.num_and_nodes()];
        for r in 0..self.model.structure.num_and_nodes() {
            let a = &self.model.structure.and_nodes[r];
            if wx + a.window[0] > self.map.width + 1e-9 || wy + a.window[1] > self.map.height + 1e-9 {
                continue;
            }
            let lists = self.local_testing(r, wx, wy);
            let product = lists
                .iter()
                .try_fold(1usize, |acc, l| acc.checked_mul(l.len()))
                .unwrap_or(usize::MAX);
            let winner = if product <= self.config.exact_cap {
                self.exact_best(r, &lists)
            } else {
                let hyps = self.binding_testing(r, &lists);
                self.global_verification(std::slice::from_ref(&(lists.clone(), hyps)))
            };
            if let Some(h) = winner {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        h.total_score > b.total_score
                            || (h.total_score == b.total_score
                                && (h.and_choice, &h.choices) < (b.and_choice, &b.choices))
                    }
                };
                if better {
                    best = Some(h);
                }
            }
            all_lists[r] = Some(lists);
        }
        let best = best?;
        let lists = all_lists[best.and_choice]
            .as_ref()
            .expect("winner comes from a scored and-node");
        let assignment = self.materialize(&best, lists, wx, wy);
        Some((best, assignment))
    }

    fn materialize(
        &self,
        h: &DetectionHypothesis,
        lists: &[Vec<Candidate>],
        wx: f64,
        wy: f64,
    ) -> LatentAssignment {
        let parts = h
            .choices
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                let cand = &lists[j][c];
                PartAssignment {
                    position: cand.position,
                    leaf: cand.leaf,
                    fragment: cand.fragment.as_ref().map(|f| f.contour.clone()),
                }
            })
            .collect();
        LatentAssignment {
            and_choice: h.and_choice,
            root: Point::new(wx, wy),
            parts,
        }
    }
}

/// Window anchors along one axis: the stride grid plus a final anchor flush
/// with the far edge.
pub fn axis_anchors(extent: f64, window: f64, stride: f64) -> Vec<f64> {
    let mut out = Vec::new();
    if window > extent + 1e-9 {
        return out;
    }
    let last = extent - window;
    let mut x = 0.0;
    while x <= last + 1e-9 {
        out.push(x);
        x += stride;
    }
    if let Some(&tail) = out.last() {
        if last - tail > 1e-9 {
            out.push(last);
        }
    }
    out
}

/// Greedy non-maximum suppression: keeps detections in descending score
/// order, dropping any whose IoU with an already kept detection exceeds
/// `iou_thresh`. The result is an antichain under that overlap relation.
pub fn non_max_suppression(mut detections: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.scale.cmp(&b.scale))
            .then(a.window.y.total_cmp(&b.window.y))
            .then(a.window.x.total_cmp(&b.window.x))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept.iter().all(|k| k.window.iou(&d.window) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Full detection pass: slides every and-node window over every pyramid
/// level, keeps per-window winners above the score threshold, and merges
/// them with non-maximum suppression in original image coordinates.
pub fn detect(map: &EdgeMap, model: &Model, config: &InferenceConfig) -> Vec<Detection> {
    let mut all = Vec::new();
    for level in 0..config.pyramid.num_scales {
        let f = config.pyramid.factor(level);
        let scaled = map.scaled(f);
        let mut scorer = WindowScorer::new(model, &scaled, config);

        // Anchor set: union over and-nodes of the grids their window fits.
        let mut anchors: Vec<(f64, f64)> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for a in &model.structure.and_nodes {
            for y in axis_anchors(scaled.height, a.window[1], config.pyramid.stride) {
                for x in axis_anchors(scaled.width, a.window[0], config.pyramid.stride) {
                    if seen.insert((x.to_bits(), y.to_bits())) {
                        anchors.push((x, y));
                    }
                }
            }
        }
        for r in 0..model.structure.num_and_nodes() {
            let fitting: Vec<(f64, f64)> = anchors
                .iter()
                .copied()
                .filter(|&(x, y)| {
                    let a = &model.structure.and_nodes[r];
                    x + a.window[0] <= scaled.width + 1e-9 && y + a.window[1] <= scaled.height + 1e-9
                })
                .collect();
            scorer.warm_cache(r, &fitting);
        }

        let scorer = &scorer;
        let winners: Vec<Option<Detection>> = anchors
            .par_iter()
            .map(|&(wx, wy)| {
                let (hyp, assignment) = scorer.best_at(wx, wy)?;
                if hyp.total_score < config.score_threshold {
                    return None;
                }
                let a = &model.structure.and_nodes[hyp.and_choice];
                let window = Rect::new(wx, wy, a.window[0], a.window[1]).scaled(1.0 / f);
                Some(Detection {
                    window,
                    scale: level,
                    score: hyp.total_score,
                    assignment,
                })
            })
            .collect();
        all.extend(winners.into_iter().flatten());
    }
    non_max_suppression(all, config.nms_iou)
}
