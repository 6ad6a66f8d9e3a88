//! Structure reconfiguration: clustering the per-node sub-vectors of the
//! positive examples' feature maps and rearranging them into new and-node
//! assignments and leaf sets. Positions and fragments never change here, so
//! every rearranged feature vector keeps its L1 mass exactly.

use crate::contour::{contour_feature, global_descriptor, resample, SamplePoints};
use crate::error::Result;
use crate::model::{Model, SparseVec, Structure};

use super::cluster::{derive_isodata_params, isodata, kmeans_fixed};
use super::latents::PlacedLatent;
use super::TrainConfig;

/// Per-positive training state: the placed latent plus the sub-vectors that
/// clustering operates on and the assembled feature map.
#[derive(Debug, Clone)]
pub struct PositiveState {
    pub sample_idx: usize,
    pub placed: PlacedLatent,
    /// Fragment descriptor per or-node; `None` where the block was empty.
    pub part_feats: Vec<Option<Vec<f64>>>,
    /// Ensemble descriptor about the window center.
    pub global_feat: Vec<f64>,
    /// phi(X, y, H) assembled under the current structure.
    pub phi: SparseVec,
}

/// Extracts the clustering sub-vectors and the feature map of one positive.
pub fn build_state(model: &Model, sample_idx: usize, placed: PlacedLatent) -> Result<PositiveState> {
    let h = &placed.assignment;
    let a = &model.structure.and_nodes[h.and_choice];
    let mut part_feats = Vec::with_capacity(h.parts.len());
    let mut omegas: Vec<SamplePoints> = Vec::new();
    for part in &h.parts {
        match &part.fragment {
            Some(frag) => {
                let omega = resample(frag, model.features.sample_points)?;
                part_feats.push(Some(contour_feature(&omega, &model.features)));
                omegas.push(omega);
            }
            None => part_feats.push(None),
        }
    }
    let window = a.window_rect_at(h.root.x, h.root.y);
    let refs: Vec<&SamplePoints> = omegas.iter().collect();
    let global_feat = global_descriptor(&refs, &window, &model.features);
    let phi = model.assemble_features(h)?;
    Ok(PositiveState {
        sample_idx,
        placed,
        part_feats,
        global_feat,
        phi,
    })
}

/// Outcome of one reconfiguration pass.
#[derive(Debug)]
pub struct Reconfiguration {
    pub structure: Structure,
    /// Samples whose and-node assignment changed.
    pub moved: usize,
    /// Whether any leaf set changed size.
    pub structure_changed: bool,
}

/// Global step: k-means with k = m over the and-node sub-vectors,
/// initialized from the current assignments; moves each sample's sub-vectors
/// to its new cluster's bins by updating `and_choice`.
pub fn reconfigure_global(states: &mut [PositiveState], m: usize) -> usize {
    if states.is_empty() || m <= 1 {
        return 0;
    }
    let points: Vec<Vec<f64>> = states.iter().map(|s| s.global_feat.clone()).collect();
    let init: Vec<usize> = states
        .iter()
        .map(|s| s.placed.assignment.and_choice.min(m - 1))
        .collect();
    let assign = kmeans_fixed(&points, &init, m, 100);
    let mut moved = 0;
    for (state, &new_r) in states.iter_mut().zip(&assign) {
        if state.placed.assignment.and_choice != new_r {
            state.placed.assignment.and_choice = new_r;
            moved += 1;
        }
    }
    moved
}

/// Local step for one or-node of one and-node: ISODATA over the member
/// contour sub-vectors. Members moved in by the global step join their
/// nearest incumbent cluster first. Returns the new leaf count and writes
/// the new leaf choices into the member states.
pub fn reconfigure_local(
    states: &mut [PositiveState],
    r: usize,
    j: usize,
    old_leaf_count: usize,
    moved_in: &[bool],
    cfg: &TrainConfig,
) -> usize {
    let members: Vec<usize> = states
        .iter()
        .enumerate()
        .filter(|(_, s)| s.placed.assignment.and_choice == r && s.part_feats[j].is_some())
        .map(|(i, _)| i)
        .collect();
    if members.is_empty() {
        return 1; // an or-node never drops to zero leaves
    }
    let points: Vec<Vec<f64>> = members
        .iter()
        .map(|&i| states[i].part_feats[j].clone().unwrap())
        .collect();

    // Incumbent grouping from leaf choices of samples that stayed in r.
    let mut incumbent_ids: Vec<Option<usize>> = Vec::with_capacity(members.len());
    for &i in &members {
        let leaf = states[i].placed.assignment.parts[j].leaf;
        let id = match leaf {
            Some(l) if !moved_in[i] && l < old_leaf_count => Some(l),
            _ => None,
        };
        incumbent_ids.push(id);
    }
    // Compact the distinct incumbent ids; movers join the nearest centroid.
    let mut distinct: Vec<usize> = incumbent_ids.iter().flatten().copied().collect();
    distinct.sort_unstable();
    distinct.dedup();
    let init: Vec<usize> = if distinct.is_empty() {
        vec![0; members.len()]
    } else {
        let compact = |l: usize| distinct.binary_search(&l).unwrap();
        // Centroids of incumbent groups.
        let mut sums: Vec<(Vec<f64>, usize)> =
            vec![(vec![0.0; points[0].len()], 0); distinct.len()];
        for (mi, id) in incumbent_ids.iter().enumerate() {
            if let Some(l) = id {
                let g = compact(*l);
                for (s, v) in sums[g].0.iter_mut().zip(&points[mi]) {
                    *s += v;
                }
                sums[g].1 += 1;
            }
        }
        let centroids: Vec<Vec<f64>> = sums
            .iter()
            .map(|(s, n)| s.iter().map(|v| v / (*n).max(1) as f64).collect())
            .collect();
        incumbent_ids
            .iter()
            .enumerate()
            .map(|(mi, id)| match id {
                Some(l) => compact(*l),
                None => (0..centroids.len())
                    .min_by(|&a, &b| {
                        sq(&points[mi], &centroids[a])
                            .total_cmp(&sq(&points[mi], &centroids[b]))
                            .then(a.cmp(&b))
                    })
                    .unwrap_or(0),
            })
            .collect()
    };

    let min_size = cfg
        .min_cluster_abs
        .max((cfg.min_cluster_frac * members.len() as f64).ceil() as usize);
    let params = derive_isodata_params(
        &points,
        &init,
        cfg.split_factor,
        cfg.merge_factor,
        min_size,
        cfg.n_max,
    );
    let assign = isodata(&points, &init, &params);
    let leaf_count = assign.iter().copied().max().unwrap_or(0) + 1;
    for (mi, &i) in members.iter().enumerate() {
        states[i].placed.assignment.parts[j].leaf = Some(assign[mi]);
    }
    leaf_count
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Full reconfiguration pass (global then local over every or-node),
/// producing the candidate structure. The window layout is shared by all
/// and-nodes during training, so moved samples keep their part geometry.
pub fn reconfigure(states: &mut [PositiveState], model: &Model, cfg: &TrainConfig) -> Reconfiguration {
    let m = model.structure.num_and_nodes();
    let before: Vec<usize> = states
        .iter()
        .map(|s| s.placed.assignment.and_choice)
        .collect();
    let moved_count = reconfigure_global(states, m);
    let moved_in: Vec<bool> = states
        .iter()
        .zip(&before)
        .map(|(s, &b)| s.placed.assignment.and_choice != b)
        .collect();

    let mut and_nodes = model.structure.and_nodes.clone();
    for r in 0..m {
        let z = and_nodes[r].num_or_nodes();
        for j in 0..z {
            let old = and_nodes[r].leaf_counts[j];
            and_nodes[r].leaf_counts[j] =
                reconfigure_local(states, r, j, old, &moved_in, cfg);
        }
    }
    let structure = Structure::new(and_nodes).expect("reconfigured structure is valid");
    let structure_changed = structure != model.structure || moved_count > 0;
    Reconfiguration {
        structure,
        moved: moved_count,
        structure_changed,
    }
}

/// Reassembles every state's feature map under a new model (same latent
/// geometry, new bin layout).
pub fn reassemble(states: &mut [PositiveState], model: &Model) -> Result<()> {
    for s in states {
        s.phi = model.assemble_features(&s.placed.assignment)?;
    }
    Ok(())
}
