//! Deterministic synthetic shape-corpus generator.
//!
//! Scenes are polyline edge maps. Positives place one multi-part object
//! (view choice, per-part variant choice, per-part jitter, contour drops and
//! breaks) over clutter; negatives are clutter-only, including decoy groups
//! that reuse object part templates in shuffled layouts. Annotations carry
//! the generator's view/variant identities for verification only.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contour::{clip_to_block, ClipOptions, Contour};
use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};
use crate::model::EdgeMap;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

/// One deformable part: alternative polyline templates in window-local
/// coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub variants: Vec<Vec<[f64; 2]>>,
}

/// One global view: a reference window and its parts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub name: String,
    pub window: [f64; 2],
    pub parts: Vec<PartSpec>,
}

/// Generator parameters; a corpus is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub schema_version: u32,
    pub canvas: [f64; 2],
    pub num_positives: usize,
    pub num_negatives: usize,
    pub views: Vec<ViewSpec>,
    /// Standard deviation (px) of the per-part placement jitter.
    pub jitter_sigma: f64,
    /// Probability a part's contour is dropped entirely.
    pub drop_prob: f64,
    /// Probability a part's contour is broken into two fragments.
    pub break_prob: f64,
    /// Clutter polylines per scene.
    pub clutter_count: usize,
    /// Shuffled-layout decoy part groups per negative scene.
    pub decoy_groups: usize,
    /// Object scales sampled per positive scene.
    pub object_scales: Vec<f64>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        default_desk_spec()
    }
}

/// One annotated object in a scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub bbox: [f64; 4],
    pub class: String,
    /// Generator identities; verification oracles only, never training input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

impl ObjectAnnotation {
    pub fn rect(&self) -> Rect {
        Rect::new(self.bbox[0], self.bbox[1], self.bbox[2], self.bbox[3])
    }
}

/// One generated scene.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: String,
    pub map: EdgeMap,
    pub objects: Vec<ObjectAnnotation>,
}

/// A generated corpus with its train/test split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: GeneratorSpec,
    pub scenes: Vec<Scene>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Config("generator needs at least one view".into()));
        }
        if !(self.canvas[0] > 0.0 && self.canvas[1] > 0.0) {
            return Err(Error::Config("canvas must be positive".into()));
        }
        for (vi, view) in self.views.iter().enumerate() {
            if view.parts.is_empty() {
                return Err(Error::Config(format!("view {vi} has no parts")));
            }
            for (pi, part) in view.parts.iter().enumerate() {
                if part.variants.is_empty() {
                    return Err(Error::Config(format!("view {vi} part {pi} has no variants")));
                }
                for (ti, tpl) in part.variants.iter().enumerate() {
                    if tpl.len() < 2 {
                        return Err(Error::Config(format!(
                            "view {vi} part {pi} variant {ti} is degenerate (fewer than 2 points)"
                        )));
                    }
                    let len: f64 = tpl
                        .windows(2)
                        .map(|w| (w[0][0] - w[1][0]).hypot(w[0][1] - w[1][1]))
                        .sum();
                    if !(len > 0.0) {
                        return Err(Error::Config(format!(
                            "view {vi} part {pi} variant {ti} is degenerate (zero length)"
                        )));
                    }
                }
            }
        }
        if !(0.0..=1.0).contains(&self.drop_prob)
            || !(0.0..=1.0).contains(&self.break_prob)
            || !(0.0..=1.0).contains(&self.train_fraction)
        {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.object_scales.is_empty() || self.object_scales.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("object scales must be positive".into()));
        }
        Ok(())
    }
}

fn polyline(points: &[[f64; 2]]) -> Vec<Point> {
    points.iter().map(|p| Point::new(p[0], p[1])).collect()
}

/// Extracts the sub-polyline between arc-length fractions `[a, b]`.
fn arc_section(points: &[Point], a: f64, b: f64) -> Vec<Point> {
    let total: f64 = points.windows(2).map(|w| w[0].dist(&w[1])).sum();
    let (lo, hi) = (total * a, total * b);
    let mut out: Vec<Point> = Vec::new();
    let mut walked = 0.0;
    for w in points.windows(2) {
        let seg = w[0].dist(&w[1]);
        let (s0, s1) = (walked, walked + seg);
        if s1 >= lo && s0 <= hi && seg > 0.0 {
            let t0 = ((lo - s0) / seg).clamp(0.0, 1.0);
            let t1 = ((hi - s0) / seg).clamp(0.0, 1.0);
            let p0 = Point::new(w[0].x + (w[1].x - w[0].x) * t0, w[0].y + (w[1].y - w[0].y) * t0);
            let p1 = Point::new(w[0].x + (w[1].x - w[0].x) * t1, w[0].y + (w[1].y - w[0].y) * t1);
            if out.last().map(|l: &Point| l.dist(&p0) > 1e-9).unwrap_or(true) {
                out.push(p0);
            }
            if t1 > t0 && out.last().map(|l: &Point| l.dist(&p1) > 1e-9).unwrap_or(true) {
                out.push(p1);
            }
        }
        walked = s1;
    }
    out
}

struct SceneBuilder {
    contours: Vec<Vec<Point>>,
}

impl SceneBuilder {
    fn new() -> Self {
        SceneBuilder { contours: Vec::new() }
    }

    /// Adds a polyline clipped to the canvas; short leftovers are dropped.
    fn add(&mut self, points: Vec<Point>, canvas: &Rect) {
        if points.len() < 2 {
            return;
        }
        let c = match Contour::new(0, points) {
            Ok(c) => c,
            Err(_) => return,
        };
        for frag in clip_to_block(&c, canvas, &ClipOptions::keep_all()) {
            if frag.points.len() >= 2 && frag.arc_length() > 1.0 {
                self.contours.push(frag.points);
            }
        }
    }

    fn finish(self, width: f64, height: f64) -> EdgeMap {
        let contours = self
            .contours
            .into_iter()
            .enumerate()
            .map(|(id, points)| Contour::new(id, points).expect("builder emits valid contours"))
            .collect();
        EdgeMap::new(width, height, contours).expect("builder keeps points inside the canvas")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    use rand_distr::{Distribution, Normal};
    if sigma <= 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).unwrap().sample(rng)
}

/// Places one part template with jitter, drop, and break noise. Returns the
/// polylines to draw plus whether the part survived.
fn place_part(
    rng: &mut ChaCha8Rng,
    template: &[[f64; 2]],
    origin: Point,
    scale: f64,
    spec: &GeneratorSpec,
) -> (Vec<Vec<Point>>, bool) {
    if rng.random_range(0.0..1.0) < spec.drop_prob {
        return (Vec::new(), false);
    }
    let dx = gaussian(rng, spec.jitter_sigma);
    let dy = gaussian(rng, spec.jitter_sigma);
    let placed: Vec<Point> = template
        .iter()
        .map(|p| Point::new(origin.x + p[0] * scale + dx, origin.y + p[1] * scale + dy))
        .collect();
    if rng.random_range(0.0..1.0) < spec.break_prob {
        let cut = rng.random_range(0.35..0.65);
        let gap = 0.08;
        let head = arc_section(&placed, 0.0, (cut - gap / 2.0).max(0.0));
        let tail = arc_section(&placed, (cut + gap / 2.0).min(1.0), 1.0);
        (vec![head, tail], true)
    } else {
        (vec![placed], true)
    }
}

/// Random wiggly open polyline used as generic clutter.
fn random_arc(rng: &mut ChaCha8Rng, canvas: &Rect) -> Vec<Point> {
    let n = rng.random_range(3..6);
    let mut x = rng.random_range(canvas.x..canvas.x1());
    let mut y = rng.random_range(canvas.y..canvas.y1());
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pts = vec![Point::new(x, y)];
    for _ in 1..n {
        heading += rng.random_range(-0.9..0.9);
        let step = rng.random_range(5.0..14.0);
        x += heading.cos() * step;
        y += heading.sin() * step;
        pts.push(Point::new(x, y));
    }
    pts
}

/// All (view, part, variant) templates, flattened for clutter sampling.
fn template_pool(spec: &GeneratorSpec) -> Vec<(usize, usize, usize)> {
    let mut pool = Vec::new();
    for (vi, view) in spec.views.iter().enumerate() {
        for (pi, part) in view.parts.iter().enumerate() {
            for ti in 0..part.variants.len() {
                pool.push((vi, pi, ti));
            }
        }
    }
    pool
}

fn scene_rng(spec: &GeneratorSpec, scene_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(scene_index + 1);
    rng
}

fn generate_positive(spec: &GeneratorSpec, index: usize) -> Scene {
    let mut rng = scene_rng(spec, index as u64);
    let canvas = Rect::new(0.0, 0.0, spec.canvas[0], spec.canvas[1]);
    let mut builder = SceneBuilder::new();

    let view_idx = index % spec.views.len();
    let view = &spec.views[view_idx];
    let scale = spec.object_scales[rng.random_range(0..spec.object_scales.len())];
    let (ow, oh) = (view.window[0] * scale, view.window[1] * scale);
    let margin = 4.0 * spec.jitter_sigma + 2.0;
    let max_x = (canvas.w - ow - margin).max(margin);
    let max_y = (canvas.h - oh - margin).max(margin);
    let origin = Point::new(
        rng.random_range(margin..=max_x),
        rng.random_range(margin..=max_y),
    );

    let mut variants: Vec<Option<usize>> = Vec::with_capacity(view.parts.len());
    let mut object_points: Vec<Point> = Vec::new();
    for part in &view.parts {
        let ti = rng.random_range(0..part.variants.len());
        let (polys, survived) = place_part(&mut rng, &part.variants[ti], origin, scale, spec);
        variants.push(survived.then_some(ti));
        for poly in polys {
            object_points.extend(poly.iter().copied());
            builder.add(poly, &canvas);
        }
    }

    // Clutter drawn from the shared template pool and random arcs.
    let pool = template_pool(spec);
    for c in 0..spec.clutter_count {
        if c % 2 == 0 && !pool.is_empty() {
            let (vi, pi, ti) = pool[rng.random_range(0..pool.len())];
            let tpl = &spec.views[vi].parts[pi].variants[ti];
            let ox = rng.random_range(0.0..canvas.w);
            let oy = rng.random_range(0.0..canvas.h);
            let pts: Vec<Point> = tpl.iter().map(|p| Point::new(ox + p[0], oy + p[1])).collect();
            builder.add(pts, &canvas);
        } else {
            builder.add(random_arc(&mut rng, &canvas), &canvas);
        }
    }

    // Annotation box: the placed reference window, expanded to cover every
    // surviving object point, clamped to the canvas.
    let mut bx0 = origin.x;
    let mut by0 = origin.y;
    let mut bx1 = origin.x + ow;
    let mut by1 = origin.y + oh;
    for p in &object_points {
        bx0 = bx0.min(p.x);
        by0 = by0.min(p.y);
        bx1 = bx1.max(p.x);
        by1 = by1.max(p.y);
    }
    bx0 = bx0.max(0.0);
    by0 = by0.max(0.0);
    bx1 = bx1.min(canvas.w);
    by1 = by1.min(canvas.h);

    Scene {
        id: format!("pos_{index:05}"),
        map: builder.finish(canvas.w, canvas.h),
        objects: vec![ObjectAnnotation {
            bbox: [bx0, by0, bx1 - bx0, by1 - by0],
            class: "shape".into(),
            view: Some(view_idx),
            variants: Some(variants),
            scale: Some(scale),
        }],
    }
}

fn generate_negative(spec: &GeneratorSpec, index: usize) -> Scene {
    let mut rng = scene_rng(spec, (spec.num_positives + index) as u64);
    let canvas = Rect::new(0.0, 0.0, spec.canvas[0], spec.canvas[1]);
    let mut builder = SceneBuilder::new();
    let pool = template_pool(spec);

    // Decoy groups: several object parts in a shuffled layout.
    for _ in 0..spec.decoy_groups {
        if pool.is_empty() {
            break;
        }
        let view = &spec.views[rng.random_range(0..spec.views.len())];
        let ox = rng.random_range(0.0..(canvas.w - view.window[0]).max(1.0));
        let oy = rng.random_range(0.0..(canvas.h - view.window[1]).max(1.0));
        // Permute part templates across part slots.
        let mut order: Vec<usize> = (0..view.parts.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let grid = view.parts.len();
        let cols = 2.max((grid as f64).sqrt().ceil() as usize);
        let rows = (grid + cols - 1) / cols;
        let bw = view.window[0] / cols as f64;
        let bh = view.window[1] / rows as f64;
        for (slot, &src) in order.iter().enumerate() {
            let part = &view.parts[src];
            let tpl = &part.variants[rng.random_range(0..part.variants.len())];
            // Normalize the template to its own origin, then place it in the
            // wrong slot of the layout grid.
            let min_x = tpl.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let min_y = tpl.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let sx = ox + (slot % cols) as f64 * bw + 2.0;
            let sy = oy + (slot / cols) as f64 * bh + 2.0;
            let pts: Vec<Point> = tpl
                .iter()
                .map(|p| Point::new(sx + (p[0] - min_x), sy + (p[1] - min_y)))
                .collect();
            builder.add(pts, &canvas);
        }
    }

    for c in 0..spec.clutter_count {
        if c % 2 == 0 && !pool.is_empty() {
            let (vi, pi, ti) = pool[rng.random_range(0..pool.len())];
            let tpl = &spec.views[vi].parts[pi].variants[ti];
            let ox = rng.random_range(0.0..canvas.w);
            let oy = rng.random_range(0.0..canvas.h);
            let pts: Vec<Point> = tpl.iter().map(|p| Point::new(ox + p[0], oy + p[1])).collect();
            builder.add(pts, &canvas);
        } else {
            builder.add(random_arc(&mut rng, &canvas), &canvas);
        }
    }

    Scene {
        id: format!("neg_{index:05}"),
        map: builder.finish(canvas.w, canvas.h),
        objects: Vec::new(),
    }
}

/// Generates the corpus: a pure function of the spec (including its seed).
pub fn generate(spec: &GeneratorSpec) -> Result<Corpus> {
    spec.validate()?;
    use rayon::prelude::*;
    let positives: Vec<Scene> = (0..spec.num_positives)
        .into_par_iter()
        .map(|i| generate_positive(spec, i))
        .collect();
    let negatives: Vec<Scene> = (0..spec.num_negatives)
        .into_par_iter()
        .map(|i| generate_negative(spec, i))
        .collect();
    let mut scenes = positives;
    scenes.extend(negatives);

    // Deterministic split honoring the train fraction within each label
    // group, with train picks spread evenly over the generation order.
    let mut train = Vec::new();
    let mut test = Vec::new();
    split_ids(
        scenes.iter().filter(|s| !s.objects.is_empty()).map(|s| s.id.clone()).collect(),
        spec.train_fraction,
        &mut train,
        &mut test,
    );
    split_ids(
        scenes.iter().filter(|s| s.objects.is_empty()).map(|s| s.id.clone()).collect(),
        spec.train_fraction,
        &mut train,
        &mut test,
    );

    Ok(Corpus {
        spec: spec.clone(),
        scenes,
        train,
        test,
    })
}

/// Spreads `round(len * fraction)` train picks evenly over the id sequence.
fn split_ids(ids: Vec<String>, fraction: f64, train: &mut Vec<String>, test: &mut Vec<String>) {
    let len = ids.len();
    let quota = (len as f64 * fraction).round() as usize;
    let mut taken = 0usize;
    for (i, id) in ids.into_iter().enumerate() {
        if taken < quota && taken * len < quota * (i + 1) {
            train.push(id);
            taken += 1;
        } else {
            test.push(id);
        }
    }
}

/// The default desk-scale corpus: two views of four parts each with variant
/// counts {1, 2, 3} present, moderate noise, and decoy clutter.
pub fn default_desk_spec() -> GeneratorSpec {
    // Part templates live in a 24x24 block; coordinates are window-local
    // with each part anchored at its block corner of a 48x48 window.
    let b = |bx: f64, by: f64, pts: &[[f64; 2]]| -> Vec<[f64; 2]> {
        pts.iter().map(|p| [bx + p[0], by + p[1]]).collect()
    };
    // Distinct local shapes.
    let corner = vec![[4.0, 20.0], [4.0, 5.0], [20.0, 5.0]];
    let arc = vec![[4.0, 18.0], [7.0, 9.0], [13.0, 5.0], [20.0, 7.0]];
    let zigzag = vec![[4.0, 6.0], [9.0, 18.0], [14.0, 6.0], [20.0, 18.0]];
    let scurve = vec![[5.0, 4.0], [14.0, 7.0], [8.0, 14.0], [18.0, 19.0]];
    let vee = vec![[4.0, 4.0], [12.0, 20.0], [20.0, 4.0]];
    let steps = vec![[4.0, 18.0], [10.0, 18.0], [10.0, 10.0], [17.0, 10.0], [17.0, 4.0]];
    let hook = vec![[5.0, 19.0], [16.0, 16.0], [19.0, 7.0], [11.0, 4.0]];
    let bar = vec![[4.0, 12.0], [20.0, 12.0]];
    let tee = vec![[4.0, 6.0], [20.0, 6.0], [12.0, 6.0], [12.0, 19.0]];
    let wave = vec![[4.0, 12.0], [8.0, 6.0], [12.0, 16.0], [16.0, 6.0], [20.0, 12.0]];
    let diamond = vec![[12.0, 4.0], [20.0, 12.0], [12.0, 20.0], [4.0, 12.0], [12.0, 4.0]];
    let slash = vec![[4.0, 20.0], [20.0, 4.0]];

    let view0 = ViewSpec {
        name: "boxy".into(),
        window: [48.0, 48.0],
        parts: vec![
            PartSpec { variants: vec![b(0.0, 0.0, &corner)] },
            PartSpec { variants: vec![b(24.0, 0.0, &arc), b(24.0, 0.0, &zigzag)] },
            PartSpec {
                variants: vec![b(0.0, 24.0, &scurve), b(0.0, 24.0, &vee), b(0.0, 24.0, &steps)],
            },
            PartSpec { variants: vec![b(24.0, 24.0, &hook), b(24.0, 24.0, &diamond)] },
        ],
    };
    let view1 = ViewSpec {
        name: "wavy".into(),
        window: [48.0, 48.0],
        parts: vec![
            PartSpec { variants: vec![b(0.0, 0.0, &bar)] },
            PartSpec {
                variants: vec![b(24.0, 0.0, &tee), b(24.0, 0.0, &wave), b(24.0, 0.0, &slash)],
            },
            PartSpec { variants: vec![b(0.0, 24.0, &wave), b(0.0, 24.0, &slash)] },
            PartSpec { variants: vec![b(24.0, 24.0, &vee), b(24.0, 24.0, &bar)] },
        ],
    };

    GeneratorSpec {
        schema_version: CORPUS_SCHEMA_VERSION,
        canvas: [112.0, 112.0],
        num_positives: 24,
        num_negatives: 24,
        views: vec![view0, view1],
        jitter_sigma: 0.8,
        drop_prob: 0.04,
        break_prob: 0.10,
        clutter_count: 4,
        decoy_groups: 1,
        object_scales: vec![1.0, std::f64::consts::SQRT_2],
        train_fraction: 0.5,
        seed: 7,
    }
}
