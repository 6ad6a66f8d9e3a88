//! Clustering used by structure reconfiguration: fixed-k means for the
//! and-node layer and ISODATA-style split/merge for the leaf layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid(points: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let dim = points[members[0]].len();
    let mut c = vec![0.0; dim];
    for &m in members {
        for (ci, v) in c.iter_mut().zip(&points[m]) {
            *ci += v;
        }
    }
    for ci in &mut c {
        *ci /= members.len() as f64;
    }
    c
}

/// Lloyd iterations from explicit initial assignments; `k` is fixed. Empty
/// clusters are re-seeded with the farthest point of the largest cluster.
/// Returns final assignments. Fully deterministic.
pub fn kmeans_fixed(points: &[Vec<f64>], init_assign: &[usize], k: usize, max_iters: usize) -> Vec<usize> {
    assert_eq!(points.len(), init_assign.len());
    assert!(k >= 1);
    if points.is_empty() {
        return Vec::new();
    }
    let mut assign: Vec<usize> = init_assign.iter().map(|&a| a.min(k - 1)).collect();
    for _ in 0..max_iters {
        // Update step.
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &a) in assign.iter().enumerate() {
            groups[a].push(i);
        }
        let mut centroids: Vec<Option<Vec<f64>>> = groups
            .iter()
            .map(|g| (!g.is_empty()).then(|| centroid(points, g)))
            .collect();
        // Re-seed empty clusters from the farthest member of the largest one.
        for c in 0..k {
            if centroids[c].is_some() {
                continue;
            }
            let largest = (0..k)
                .filter(|&g| centroids[g].is_some())
                .max_by_key(|&g| groups[g].len())
                .expect("at least one nonempty cluster");
            let lc = centroids[largest].clone().unwrap();
            let &far = groups[largest]
                .iter()
                .max_by(|&&x, &&y| {
                    sq_dist(&points[x], &lc)
                        .total_cmp(&sq_dist(&points[y], &lc))
                        .then(x.cmp(&y))
                })
                .expect("largest cluster nonempty");
            centroids[c] = Some(points[far].clone());
        }
        // Assign step.
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&x, &y| {
                    sq_dist(p, centroids[x].as_ref().unwrap())
                        .total_cmp(&sq_dist(p, centroids[y].as_ref().unwrap()))
                        .then(x.cmp(&y))
                })
                .unwrap();
            if best != assign[i] {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    assign
}

/// Seeded k-means++ initialization followed by [`kmeans_fixed`]. Used only
/// where no prior assignment exists (model initialization).
pub fn kmeans_seeded(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng, max_iters: usize) -> Vec<usize> {
    assert!(k >= 1);
    if points.is_empty() {
        return Vec::new();
    }
    let mut centers: Vec<usize> = vec![rng.random_range(0..points.len())];
    while centers.len() < k.min(points.len()) {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|&c| sq_dist(p, &points[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..points.len())
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        };
        centers.push(next);
    }
    let init: Vec<usize> = points
        .iter()
        .map(|p| {
            centers
                .iter()
                .enumerate()
                .min_by(|(_, &x), (_, &y)| {
                    sq_dist(p, &points[x]).total_cmp(&sq_dist(p, &points[y]))
                })
                .map(|(ci, _)| ci)
                .unwrap()
        })
        .collect();
    kmeans_fixed(points, &init, k.min(points.len()).max(1), max_iters)
}

/// ISODATA thresholds and limits.
#[derive(Debug, Clone)]
pub struct IsodataParams {
    /// A cluster splits when its mean squared distance to the centroid
    /// exceeds this and it is large enough.
    pub split_threshold: f64,
    /// Two clusters merge when their centroid distance falls below this.
    pub merge_threshold: f64,
    /// Clusters smaller than this are removed (members reassigned).
    pub min_cluster_size: usize,
    /// Upper bound on the number of clusters.
    pub max_clusters: usize,
}

/// Derives the default thresholds from the data: `split_factor` times the
/// overall feature variance and `merge_factor` times the mean inter-centroid
/// distance of the initial grouping.
pub fn derive_isodata_params(
    points: &[Vec<f64>],
    init_assign: &[usize],
    split_factor: f64,
    merge_factor: f64,
    min_cluster_size: usize,
    max_clusters: usize,
) -> IsodataParams {
    let all: Vec<usize> = (0..points.len()).collect();
    let split_threshold = if points.len() > 1 {
        let mean = centroid(points, &all);
        let var =
            points.iter().map(|p| sq_dist(p, &mean)).sum::<f64>() / points.len() as f64;
        split_factor * var
    } else {
        f64::INFINITY
    };
    let k = init_assign.iter().copied().max().map(|m| m + 1).unwrap_or(1);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &a) in init_assign.iter().enumerate() {
        groups[a].push(i);
    }
    let cents: Vec<Vec<f64>> = groups
        .iter()
        .filter(|g| !g.is_empty())
        .map(|g| centroid(points, g))
        .collect();
    let mut dists = Vec::new();
    for a in 0..cents.len() {
        for b in (a + 1)..cents.len() {
            dists.push(sq_dist(&cents[a], &cents[b]).sqrt());
        }
    }
    let merge_threshold = if dists.is_empty() {
        0.0
    } else {
        merge_factor * dists.iter().sum::<f64>() / dists.len() as f64
    };
    IsodataParams {
        split_threshold,
        merge_threshold,
        min_cluster_size,
        max_clusters,
    }
}

/// ISODATA clustering: Lloyd iterations interleaved with merge, split, and
/// small-cluster removal until the structure stabilizes.
///
/// Returns assignments with cluster ids compacted to `0..n_clusters`,
/// ordered by each cluster's smallest member index. At least one cluster
/// always survives (the largest, when every cluster is undersized).
pub fn isodata(points: &[Vec<f64>], init_assign: &[usize], params: &IsodataParams) -> Vec<usize> {
    assert_eq!(points.len(), init_assign.len());
    if points.is_empty() {
        return Vec::new();
    }
    let k0 = init_assign.iter().copied().max().unwrap() + 1;
    let mut assign: Vec<usize> = init_assign.to_vec();
    let mut k = k0;

    for _round in 0..20 {
        assign = kmeans_fixed(points, &assign, k, 50);
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &a) in assign.iter().enumerate() {
            groups[a].push(i);
        }
        groups.retain(|g| !g.is_empty());
        let mut changed = false;

        // Merge the closest centroid pair below the threshold.
        'merge: loop {
            if groups.len() <= 1 {
                break;
            }
            let cents: Vec<Vec<f64>> = groups.iter().map(|g| centroid(points, g)).collect();
            let mut best: Option<(usize, usize, f64)> = None;
            for a in 0..cents.len() {
                for b in (a + 1)..cents.len() {
                    let d = sq_dist(&cents[a], &cents[b]).sqrt();
                    if d < params.merge_threshold {
                        let better = best.map(|(_, _, bd)| d < bd).unwrap_or(true);
                        if better {
                            best = Some((a, b, d));
                        }
                    }
                }
            }
            match best {
                Some((a, b, _)) => {
                    let moved = groups.remove(b);
                    groups[a].extend(moved);
                    groups[a].sort_unstable();
                    changed = true;
                }
                None => break 'merge,
            }
        }

        // Split the most spread cluster above the threshold.
        if groups.len() < params.max_clusters {
            let mut split_at: Option<(usize, usize)> = None; // (group, dim)
            let mut worst = params.split_threshold;
            for (gi, g) in groups.iter().enumerate() {
                if g.len() < 2 * params.min_cluster_size.max(1) {
                    continue;
                }
                let c = centroid(points, g);
                let msd = g.iter().map(|&m| sq_dist(&points[m], &c)).sum::<f64>() / g.len() as f64;
                if msd > worst {
                    // Split along the dimension of largest variance.
                    let dim = c.len();
                    let mut best_dim = 0;
                    let mut best_var = -1.0;
                    for d in 0..dim {
                        let mean = c[d];
                        let var = g
                            .iter()
                            .map(|&m| (points[m][d] - mean) * (points[m][d] - mean))
                            .sum::<f64>()
                            / g.len() as f64;
                        if var > best_var {
                            best_var = var;
                            best_dim = d;
                        }
                    }
                    worst = msd;
                    split_at = Some((gi, best_dim));
                }
            }
            if let Some((gi, d)) = split_at {
                let c = centroid(points, &groups[gi]);
                let (lo, hi): (Vec<usize>, Vec<usize>) =
                    groups[gi].iter().partition(|&&m| points[m][d] <= c[d]);
                if !lo.is_empty() && !hi.is_empty() {
                    groups[gi] = lo;
                    groups.push(hi);
                    changed = true;
                }
            }
        }

        // Remove undersized clusters, keeping at least the largest.
        let sizes: Vec<usize> = groups.iter().map(|g| g.len()).collect();
        let all_small = sizes.iter().all(|&s| s < params.min_cluster_size);
        if all_small {
            let keep = (0..groups.len())
                .max_by_key(|&g| (sizes[g], usize::MAX - groups[g][0]))
                .unwrap();
            if groups.len() > 1 {
                let kept = groups.swap_remove(keep);
                groups = vec![kept];
                groups[0] = (0..points.len()).collect();
                changed = true;
            }
        } else if sizes.iter().any(|&s| s < params.min_cluster_size) {
            let survivors: Vec<Vec<usize>> = groups
                .iter()
                .filter(|g| g.len() >= params.min_cluster_size)
                .cloned()
                .collect();
            let cents: Vec<Vec<f64>> = survivors.iter().map(|g| centroid(points, g)).collect();
            let mut new_groups = survivors;
            for g in groups.iter().filter(|g| g.len() < params.min_cluster_size) {
                for &m in g {
                    let best = (0..cents.len())
                        .min_by(|&x, &y| {
                            sq_dist(&points[m], &cents[x])
                                .total_cmp(&sq_dist(&points[m], &cents[y]))
                                .then(x.cmp(&y))
                        })
                        .unwrap();
                    new_groups[best].push(m);
                }
            }
            for g in &mut new_groups {
                g.sort_unstable();
            }
            groups = new_groups;
            changed = true;
        }

        // Rebuild assignment with clusters ordered by smallest member.
        let mut order: Vec<usize> = (0..groups.len()).collect();
        order.sort_by_key(|&g| groups[g][0]);
        let mut next = vec![0usize; points.len()];
        for (new_id, &g) in order.iter().enumerate() {
            for &m in &groups[g] {
                next[m] = new_id;
            }
        }
        assign = next;
        k = groups.len();
        if !changed {
            break;
        }
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn blobs(centers: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for (ci, &(cx, cy)) in centers.iter().enumerate() {
            for _ in 0..per {
                pts.push(vec![
                    cx + rng.random_range(-spread..spread),
                    cy + rng.random_range(-spread..spread),
                ]);
                labels.push(ci);
            }
        }
        (pts, labels)
    }

    fn purity(assign: &[usize], labels: &[usize], k: usize) -> f64 {
        let mut hit = 0usize;
        for c in 0..k {
            let mut counts = std::collections::HashMap::new();
            for (a, l) in assign.iter().zip(labels) {
                if *a == c {
                    *counts.entry(*l).or_insert(0usize) += 1;
                }
            }
            hit += counts.values().copied().max().unwrap_or(0);
        }
        hit as f64 / labels.len() as f64
    }

    #[test]
    fn kmeans_fixed_recovers_two_blobs() {
        let (pts, labels) = blobs(&[(0.0, 0.0), (10.0, 10.0)], 20, 1.0, 1);
        // Deliberately bad init: everything in cluster 0.
        let init = vec![0usize; pts.len()];
        let assign = kmeans_fixed(&pts, &init, 2, 100);
        assert_eq!(purity(&assign, &labels, 2), 1.0);
    }

    #[test]
    fn kmeans_fixed_k1_is_identity() {
        let (pts, _) = blobs(&[(0.0, 0.0), (10.0, 10.0)], 5, 1.0, 2);
        let init = vec![0usize; pts.len()];
        assert!(kmeans_fixed(&pts, &init, 1, 10).iter().all(|&a| a == 0));
    }

    #[test]
    fn kmeans_seeded_separates_blobs() {
        let (pts, labels) = blobs(&[(0.0, 0.0), (20.0, 0.0), (0.0, 20.0)], 15, 1.5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let assign = kmeans_seeded(&pts, 3, &mut rng, 100);
        assert!(purity(&assign, &labels, 3) > 0.95);
    }

    #[test]
    fn isodata_splits_a_bimodal_cluster() {
        let (pts, labels) = blobs(&[(0.0, 0.0), (30.0, 0.0)], 12, 1.0, 4);
        let init = vec![0usize; pts.len()];
        let params = derive_isodata_params(&pts, &init, 0.5, 0.1, 3, 4);
        let assign = isodata(&pts, &init, &params);
        let k = assign.iter().copied().max().unwrap() + 1;
        assert_eq!(k, 2, "bimodal data must split into two clusters");
        assert_eq!(purity(&assign, &labels, k), 1.0);
    }

    #[test]
    fn isodata_merges_coincident_clusters() {
        let (pts, _) = blobs(&[(0.0, 0.0)], 20, 0.5, 5);
        // Initial over-segmentation into 3 clusters.
        let init: Vec<usize> = (0..pts.len()).map(|i| i % 3).collect();
        let params = IsodataParams {
            split_threshold: f64::INFINITY,
            merge_threshold: 5.0,
            min_cluster_size: 3,
            max_clusters: 4,
        };
        let assign = isodata(&pts, &init, &params);
        assert!(assign.iter().all(|&a| a == 0), "one tight blob must merge");
    }

    #[test]
    fn isodata_removes_undersized_clusters() {
        let (mut pts, _) = blobs(&[(0.0, 0.0)], 12, 0.5, 6);
        pts.push(vec![50.0, 50.0]); // a single far outlier
        let mut init = vec![0usize; 12];
        init.push(1);
        let params = IsodataParams {
            split_threshold: f64::INFINITY,
            merge_threshold: 1.0,
            min_cluster_size: 3,
            max_clusters: 4,
        };
        let assign = isodata(&pts, &init, &params);
        let k = assign.iter().copied().max().unwrap() + 1;
        assert_eq!(k, 1, "outlier cluster of size 1 must dissolve");
    }

    #[test]
    fn isodata_single_sample_keeps_one_cluster() {
        let pts = vec![vec![1.0, 2.0]];
        let params = IsodataParams {
            split_threshold: 1.0,
            merge_threshold: 1.0,
            min_cluster_size: 3,
            max_clusters: 4,
        };
        let assign = isodata(&pts, &[0], &params);
        assert_eq!(assign, vec![0]);
    }

    #[test]
    fn isodata_respects_max_clusters() {
        let (pts, _) = blobs(&[(0.0, 0.0), (20.0, 0.0), (0.0, 20.0), (20.0, 20.0), (40.0, 40.0)], 10, 0.8, 8);
        let init = vec![0usize; pts.len()];
        let params = derive_isodata_params(&pts, &init, 0.25, 0.05, 3, 3);
        let assign = isodata(&pts, &init, &params);
        let k = assign.iter().copied().max().unwrap() + 1;
        assert!(k <= 3, "cap must hold, got {k}");
    }
}
