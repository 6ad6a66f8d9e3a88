//! Working-set quadratic program of the max-margin subproblem.
//!
//! The primal is `min 1/2 ||w||^2 + lambda * sum_k xi_k` subject to
//! `w . delta_c >= loss_c - xi_k` for every working-set constraint `c` of
//! sample `k`, with `xi_k >= 0`. The dual is solved by pairwise coordinate
//! ascent within each sample's constraint budget; the returned weights are
//! the dual combination `w = lambda * sum alpha_c delta_c` with normalized
//! `alpha` summing to at most one per sample.

use crate::model::SparseVec;

/// One margin constraint: `w . delta >= loss - xi_sample`.
#[derive(Debug, Clone)]
pub struct Constraint {
    pub sample: usize,
    pub loss: f64,
    pub delta: SparseVec,
    /// Stable identity used to avoid duplicate constraints.
    pub key: u64,
    /// Cutting-plane round the constraint was found in.
    pub round: usize,
}

/// Constraints plus their dual variables (unnormalized, so each sample's
/// betas sum to at most lambda). Kept together so cutting-plane rounds can
/// warm-start and shrink the set without losing feasibility.
#[derive(Debug, Clone, Default)]
pub struct WorkingSet {
    pub constraints: Vec<Constraint>,
    pub beta: Vec<f64>,
}

impl WorkingSet {
    pub fn new() -> Self {
        WorkingSet::default()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn contains(&self, sample: usize, key: u64) -> bool {
        self.constraints
            .iter()
            .any(|c| c.sample == sample && c.key == key)
    }

    pub fn push(&mut self, c: Constraint) -> bool {
        if self.contains(c.sample, c.key) {
            return false;
        }
        self.constraints.push(c);
        self.beta.push(0.0);
        true
    }

    /// Drops inactive constraints (zero dual weight) from rounds before
    /// `keep_from`. Removing zero-weight constraints leaves the dual point
    /// feasible and the weight vector unchanged.
    pub fn shrink(&mut self, keep_from: usize) {
        let mut kept_c = Vec::with_capacity(self.constraints.len());
        let mut kept_b = Vec::with_capacity(self.beta.len());
        for (c, b) in self.constraints.drain(..).zip(self.beta.drain(..)) {
            if b > 0.0 || c.round >= keep_from {
                kept_c.push(c);
                kept_b.push(b);
            }
        }
        self.constraints = kept_c;
        self.beta = kept_b;
    }

    /// The weight vector `sum beta_c delta_c` of the current dual point.
    pub fn weights(&self, dim: usize) -> Vec<f64> {
        let mut w = vec![0.0f64; dim];
        for (c, &b) in self.constraints.iter().zip(&self.beta) {
            c.delta.add_scaled_into(b, &mut w);
        }
        w
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    /// Normalized dual coefficients, aligned with the working set.
    pub alpha: Vec<f64>,
    /// Working-set-restricted primal objective.
    pub objective: f64,
    pub inner_iterations: usize,
}

/// Working-set-restricted primal objective at `w`.
pub fn primal_objective(ws: &WorkingSet, lambda: f64, n_samples: usize, w: &[f64]) -> f64 {
    let mut slack = vec![0.0f64; n_samples];
    for c in &ws.constraints {
        let v = c.loss - c.delta.dot_dense(w);
        if v > slack[c.sample] {
            slack[c.sample] = v;
        }
    }
    0.5 * w.iter().map(|x| x * x).sum::<f64>() + lambda * slack.iter().sum::<f64>()
}

/// Solves the dual of the working-set QP by pairwise coordinate ascent,
/// warm-starting from (and writing back) the set's dual variables.
///
/// Each sample owns a budget `sum_c beta_c <= lambda` (the unused budget is
/// an implicit slack constraint with zero loss and zero features). One pass
/// moves mass from each sample's lowest-gradient held constraint (or the
/// slack) to its highest-gradient constraint; passes repeat until the
/// largest KKT violation falls below `tol`.
pub fn solve_working_set(
    ws: &mut WorkingSet,
    lambda: f64,
    n_samples: usize,
    dim: usize,
    tol: f64,
    max_passes: usize,
) -> QpSolution {
    let n = ws.constraints.len();
    let mut beta = std::mem::take(&mut ws.beta);
    debug_assert_eq!(beta.len(), n);
    let mut w = vec![0.0f64; dim];
    for (c, &b) in ws.constraints.iter().zip(&beta) {
        c.delta.add_scaled_into(b, &mut w);
    }
    let mut per_sample: Vec<Vec<usize>> = vec![Vec::new(); n_samples];
    for (c_idx, c) in ws.constraints.iter().enumerate() {
        per_sample[c.sample].push(c_idx);
    }
    let norms: Vec<f64> = ws.constraints.iter().map(|c| c.delta.norm_sq()).collect();

    let mut iterations = 0usize;
    for _pass in 0..max_passes {
        let mut max_violation = 0.0f64;
        for group in per_sample.iter().filter(|g| !g.is_empty()) {
            let used: f64 = group.iter().map(|&c| beta[c]).sum();
            let grads: Vec<f64> = group
                .iter()
                .map(|&c| ws.constraints[c].loss - ws.constraints[c].delta.dot_dense(&w))
                .collect();
            let (mut up_pos, mut up_grad) = (None, 0.0f64); // slack gradient is 0
            for (gi, &c) in group.iter().enumerate() {
                if grads[gi] > up_grad {
                    up_grad = grads[gi];
                    up_pos = Some((gi, c));
                }
            }
            let slack_free = lambda - used;
            let (mut down_pos, mut down_grad) = (None, f64::INFINITY);
            for (gi, &c) in group.iter().enumerate() {
                if beta[c] > 0.0 && grads[gi] < down_grad {
                    down_grad = grads[gi];
                    down_pos = Some((gi, c));
                }
            }
            let mut best_move: Option<(Option<usize>, Option<usize>, f64)> = None;
            if let Some((_, up_c)) = up_pos {
                if slack_free > 1e-15 && up_grad > tol {
                    best_move = Some((None, Some(up_c), up_grad));
                }
            }
            if let Some((down_gi, down_c)) = down_pos {
                let (target, target_grad): (Option<usize>, f64) = match up_pos {
                    Some((_, up_c)) if up_c != down_c => (Some(up_c), up_grad),
                    _ => (None, 0.0),
                };
                let gap = target_grad - grads[down_gi];
                if gap > tol && best_move.as_ref().map(|&(_, _, g)| gap > g).unwrap_or(true) {
                    best_move = Some((Some(down_c), target, gap));
                }
            }
            let Some((donor, receiver, gap)) = best_move else {
                continue;
            };
            max_violation = max_violation.max(gap);
            let denom = match (donor, receiver) {
                (None, Some(rc)) => norms[rc],
                (Some(dc), None) => norms[dc],
                (Some(dc), Some(rc)) => {
                    norms[dc] + norms[rc]
                        - 2.0 * ws.constraints[dc].delta.dot_sparse(&ws.constraints[rc].delta)
                }
                (None, None) => continue,
            };
            let cap = match donor {
                None => slack_free,
                Some(dc) => beta[dc],
            };
            // Zero curvature along the move (identical deltas): the dual is
            // linear in that direction, so take the full cap.
            let step = if denom <= 1e-300 {
                cap
            } else {
                (gap / denom).min(cap).max(0.0)
            };
            if step <= 0.0 {
                continue;
            }
            if let Some(dc) = donor {
                beta[dc] -= step;
                ws.constraints[dc].delta.add_scaled_into(-step, &mut w);
            }
            if let Some(rc) = receiver {
                beta[rc] += step;
                ws.constraints[rc].delta.add_scaled_into(step, &mut w);
            }
            iterations += 1;
        }
        if max_violation <= tol {
            break;
        }
    }

    // Recompute w exactly from the dual coefficients to remove drift.
    let mut w = vec![0.0f64; dim];
    for (c, &b) in ws.constraints.iter().zip(&beta) {
        c.delta.add_scaled_into(b, &mut w);
    }
    let objective = primal_objective(ws, lambda, n_samples, &w);
    let alpha = beta.iter().map(|b| b / lambda).collect();
    ws.beta = beta;
    QpSolution {
        weights: w,
        alpha,
        objective,
        inner_iterations: iterations,
    }
}
