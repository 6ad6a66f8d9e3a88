//! Deterministic random instance generators for tests and verification
//! suites. Not part of the public API surface.
#![doc(hidden)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::contour::{Contour, FeatureConfig};
use crate::geometry::Point;
use crate::model::{
    block_fragments, AndNodeStructure, EdgeMap, LatentAssignment, Model, PartAssignment, Structure,
};

/// Bounds for random structure generation.
#[derive(Debug, Clone)]
pub struct RandomModelSpec {
    pub max_and_nodes: usize,
    pub max_rows: usize,
    pub max_cols: usize,
    pub max_leaves: usize,
    pub window: [f64; 2],
}

impl Default for RandomModelSpec {
    fn default() -> Self {
        RandomModelSpec {
            max_and_nodes: 2,
            max_rows: 2,
            max_cols: 2,
            max_leaves: 3,
            window: [40.0, 40.0],
        }
    }
}

pub fn random_structure(rng: &mut ChaCha8Rng, spec: &RandomModelSpec) -> Structure {
    let m = rng.random_range(1..=spec.max_and_nodes);
    let and_nodes = (0..m)
        .map(|_| {
            let b1 = rng.random_range(1..=spec.max_rows);
            let b2 = rng.random_range(1..=spec.max_cols);
            let leaf_counts = (0..b1 * b2)
                .map(|_| rng.random_range(1..=spec.max_leaves))
                .collect();
            AndNodeStructure {
                b1,
                b2,
                window: spec.window,
                leaf_counts,
            }
        })
        .collect();
    Structure::new(and_nodes).expect("generated structure is valid")
}

pub fn random_model(rng: &mut ChaCha8Rng, spec: &RandomModelSpec, features: FeatureConfig) -> Model {
    let structure = random_structure(rng, spec);
    let mut model = Model::zeroed(structure, features).expect("valid model");
    for v in &mut model.params.flat {
        *v = rng.random_range(-1.0..1.0);
    }
    model
}

/// Random polyline edge map with `n_contours` contours of 3-6 vertices.
pub fn random_edge_map(rng: &mut ChaCha8Rng, width: f64, height: f64, n_contours: usize) -> EdgeMap {
    let mut contours = Vec::with_capacity(n_contours);
    for id in 0..n_contours {
        let n = rng.random_range(3..=6);
        let mut x = rng.random_range(0.05 * width..0.95 * width);
        let mut y = rng.random_range(0.05 * height..0.95 * height);
        let mut pts = vec![Point::new(x, y)];
        for _ in 1..n {
            x = (x + rng.random_range(-0.22 * width..0.22 * width)).clamp(0.0, width);
            y = (y + rng.random_range(-0.22 * height..0.22 * height)).clamp(0.0, height);
            let p = Point::new(x, y);
            if pts.last().map(|l: &Point| l.dist(&p) > 1e-6).unwrap_or(true) {
                pts.push(p);
            }
        }
        if pts.len() >= 2 {
            contours.push(Contour::new(id, pts).expect("valid random contour"));
        }
    }
    EdgeMap::new(width, height, contours).expect("valid edge map")
}

/// All candidate activations of one or-node at one window anchor: every
/// perturbed position crossed with every leaf (argmax fragment per leaf), or
/// the single empty-block option where no fragment survives.
fn part_options(
    model: &Model,
    map: &EdgeMap,
    r: usize,
    j: usize,
    root: &Point,
    perturb: &[f64],
) -> Vec<PartAssignment> {
    let a = &model.structure.and_nodes[r];
    let anchor = a.anchor(j);
    let mut out = Vec::new();
    for dy in perturb {
        for dx in perturb {
            let position = Point::new(
                root.x + anchor.x + dx * a.block_w(),
                root.y + anchor.y + dy * a.block_h(),
            );
            let block = a.block_rect(position.x, position.y);
            let frags = block_fragments(map, &block, &model.features);
            if frags.is_empty() {
                out.push(PartAssignment {
                    position,
                    leaf: None,
                    fragment: None,
                });
            } else {
                for i in 0..a.leaf_counts[j] {
                    let (_, chosen) = model.leaf_response(map, r, j, i, &position);
                    out.push(PartAssignment {
                        position,
                        leaf: Some(i),
                        fragment: chosen,
                    });
                }
            }
        }
    }
    out
}

/// Exhaustive maximization of the model response over every valid assignment
/// at one window anchor: all and-nodes that fit, all perturbed positions,
/// all leaf choices. Direct enumeration, independent of the staged
/// local/binding/global path.
pub fn brute_force_best(
    model: &Model,
    map: &EdgeMap,
    wx: f64,
    wy: f64,
    perturb: &[f64],
) -> Option<(f64, LatentAssignment)> {
    let root = Point::new(wx, wy);
    let mut best: Option<(f64, LatentAssignment)> = None;
    for r in 0..model.structure.num_and_nodes() {
        let a = &model.structure.and_nodes[r];
        if wx + a.window[0] > map.width + 1e-9 || wy + a.window[1] > map.height + 1e-9 {
            continue;
        }
        let options: Vec<Vec<PartAssignment>> = (0..a.num_or_nodes())
            .map(|j| part_options(model, map, r, j, &root, perturb))
            .collect();
        let mut choice = vec![0usize; options.len()];
        loop {
            let h = LatentAssignment {
                and_choice: r,
                root,
                parts: choice
                    .iter()
                    .enumerate()
                    .map(|(j, &c)| options[j][c].clone())
                    .collect(),
            };
            let score = model.response(&h).expect("enumerated assignment is valid");
            if best.as_ref().map(|(s, _)| score > *s).unwrap_or(true) {
                best = Some((score, h));
            }
            let mut j = choice.len();
            loop {
                if j == 0 {
                    break;
                }
                j -= 1;
                choice[j] += 1;
                if choice[j] < options[j].len() {
                    break;
                }
                choice[j] = 0;
            }
            if choice.iter().all(|&c| c == 0) {
                break;
            }
        }
    }
    best
}

/// Builds a random valid assignment: a random and-node, a random window
/// origin, per-or-node positions on the perturbation grid, and for each
/// non-empty block a random leaf with a random surviving fragment. Empty
/// blocks deactivate the or-node, matching the empty-block rule.
pub fn random_assignment(
    rng: &mut ChaCha8Rng,
    model: &Model,
    map: &EdgeMap,
    perturb: &[f64],
) -> LatentAssignment {
    let m = model.structure.num_and_nodes();
    let and_choice = rng.random_range(0..m);
    let a = &model.structure.and_nodes[and_choice];
    let max_x = (map.width - a.window[0]).max(0.0);
    let max_y = (map.height - a.window[1]).max(0.0);
    let root = Point::new(
        rng.random_range(0.0..=max_x.max(1e-9)),
        rng.random_range(0.0..=max_y.max(1e-9)),
    );
    let parts = (0..a.num_or_nodes())
        .map(|j| {
            let anchor = a.anchor(j);
            let dx = perturb[rng.random_range(0..perturb.len())] * a.block_w();
            let dy = perturb[rng.random_range(0..perturb.len())] * a.block_h();
            let position = Point::new(root.x + anchor.x + dx, root.y + anchor.y + dy);
            let block = a.block_rect(position.x, position.y);
            let frags = block_fragments(map, &block, &model.features);
            if frags.is_empty() {
                PartAssignment {
                    position,
                    leaf: None,
                    fragment: None,
                }
            } else {
                let leaf = rng.random_range(0..a.leaf_counts[j]);
                let frag = &frags[rng.random_range(0..frags.len())];
                PartAssignment {
                    position,
                    leaf: Some(leaf),
                    fragment: Some(frag.contour.clone()),
                }
            }
        })
        .collect();
    LatentAssignment {
        and_choice,
        root,
        parts,
    }
}
