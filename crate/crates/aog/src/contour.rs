//! Contour geometry and the hybrid triangle + shape-context descriptor.
//!
//! A contour is an ordered polyline extracted from an edge map. Detection
//! never consumes raw polylines directly: fragments are clipped to a block,
//! resampled to a fixed number of equally spaced points, and described by a
//! per-point histogram that concatenates a triangle-based descriptor with a
//! small shape-context descriptor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, Rect};

/// Number of triangle-descriptor bins per sample point (2 x 2 x 6).
pub const TRIANGLE_BINS: usize = 24;
/// Number of shape-context bins per sample point (2 x 6).
pub const SHAPE_CONTEXT_BINS: usize = 12;
/// Total descriptor bins per sample point.
pub const BINS_PER_POINT: usize = TRIANGLE_BINS + SHAPE_CONTEXT_BINS;

/// Feature-extraction settings shared by descriptors, potentials, and the
/// serialized model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    /// Number of sample points per contour fragment.
    pub sample_points: usize,
    /// L1-normalize each per-point histogram. Raw-count mode is kept for
    /// ablation runs.
    pub normalize: bool,
    /// Fragments with fewer distinct points are pruned after clipping.
    pub min_fragment_points: usize,
    /// Fragments with shorter arc length (px) are pruned after clipping.
    pub min_fragment_len: f64,
    /// Radial bins of the global (and-node) shape-context descriptor.
    pub global_radial_bins: usize,
    /// Angular bins of the global (and-node) shape-context descriptor.
    pub global_angular_bins: usize,
    /// Radius (px) of the "near" relation of the pairwise layout feature.
    /// `None` derives half the block diagonal from the model structure.
    pub near_radius: Option<f64>,
    /// Disable the collaborative edges (the And-Or Tree ablation): pair
    /// features are never assembled, so their weights stay exactly zero.
    pub use_edges: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_points: 20,
            normalize: true,
            min_fragment_points: 3,
            min_fragment_len: 8.0,
            global_radial_bins: 5,
            global_angular_bins: 12,
            near_radius: None,
            use_edges: true,
        }
    }
}

impl FeatureConfig {
    /// Descriptor length of one contour fragment.
    pub fn fragment_dim(&self) -> usize {
        self.sample_points * BINS_PER_POINT
    }

    /// Descriptor length of the global ensemble descriptor.
    pub fn global_dim(&self) -> usize {
        self.global_radial_bins * self.global_angular_bins
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_points < 3 {
            return Err(Error::Config("sample_points must be >= 3".into()));
        }
        if self.global_radial_bins == 0 || self.global_angular_bins == 0 {
            return Err(Error::Config("global descriptor bins must be >= 1".into()));
        }
        Ok(())
    }
}

/// An ordered polyline of 2-D points within an edge map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub id: usize,
    pub points: Vec<Point>,
}

impl Contour {
    /// Builds a contour, enforcing finite coordinates, at least two points,
    /// distinct consecutive points and positive polyline length.
    pub fn new(id: usize, points: Vec<Point>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::DegenerateContour(format!(
                "contour {id} has {} point(s), need at least 2",
                points.len()
            )));
        }
        for p in &points {
            if !p.is_finite() {
                return Err(Error::DegenerateContour(format!(
                    "contour {id} has non-finite coordinates"
                )));
            }
        }
        for w in points.windows(2) {
            if w[0] == w[1] {
                return Err(Error::DegenerateContour(format!(
                    "contour {id} has coincident consecutive points"
                )));
            }
        }
        Ok(Contour { id, points })
    }

    /// Total arc length of the polyline.
    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].dist(&w[1])).sum()
    }

    /// A polyline is closed when it returns exactly to its first point.
    pub fn is_closed(&self) -> bool {
        self.points.len() > 2 && self.points[0] == *self.points.last().unwrap()
    }

    pub fn bbox(&self) -> Rect {
        let mut x0 = f64::INFINITY;
        let mut y0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for p in &self.points {
            x0 = x0.min(p.x);
            y0 = y0.min(p.y);
            x1 = x1.max(p.x);
            y1 = y1.max(p.y);
        }
        Rect::new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn scaled(&self, f: f64) -> Contour {
        Contour {
            id: self.id,
            points: self.points.iter().map(|p| Point::new(p.x * f, p.y * f)).collect(),
        }
    }
}

/// The fixed-length sequence of equally spaced points extracted from one
/// contour fragment, plus the mean of all pairwise point distances used to
/// normalize the descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoints {
    pub pts: Vec<Point>,
    pub mean_pairwise_dist: f64,
}

impl SamplePoints {
    fn from_points(pts: Vec<Point>) -> Result<Self> {
        let n = pts.len();
        let mut sum = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                sum += pts[i].dist(&pts[j]);
            }
        }
        let pairs = (n * (n - 1) / 2) as f64;
        let mean = sum / pairs;
        if !(mean > 0.0) {
            return Err(Error::DegenerateContour(
                "sample points are all coincident".into(),
            ));
        }
        Ok(SamplePoints {
            pts,
            mean_pairwise_dist: mean,
        })
    }

    pub fn translated(&self, dx: f64, dy: f64) -> SamplePoints {
        SamplePoints {
            pts: self.pts.iter().map(|p| p.offset(dx, dy)).collect(),
            mean_pairwise_dist: self.mean_pairwise_dist,
        }
    }

    pub fn scaled(&self, f: f64) -> SamplePoints {
        SamplePoints {
            pts: self.pts.iter().map(|p| Point::new(p.x * f, p.y * f)).collect(),
            mean_pairwise_dist: self.mean_pairwise_dist * f,
        }
    }
}

/// Resamples a contour to exactly `s` points at equal arc-length spacing.
///
/// Open polylines keep both endpoints; closed polylines are sampled at equal
/// fractions of the perimeter starting from the first vertex, so the
/// duplicate closing point is never emitted twice.
pub fn resample(contour: &Contour, s: usize) -> Result<SamplePoints> {
    if s < 3 {
        return Err(Error::Config(format!("resample needs s >= 3, got {s}")));
    }
    let total = contour.arc_length();
    if !(total > 0.0) {
        return Err(Error::DegenerateContour(format!(
            "contour {} has zero length",
            contour.id
        )));
    }

    // Cumulative arc length per vertex.
    let pts = &contour.points;
    let mut cum = Vec::with_capacity(pts.len());
    cum.push(0.0);
    for w in pts.windows(2) {
        cum.push(cum.last().unwrap() + w[0].dist(&w[1]));
    }

    let closed = contour.is_closed();
    let step = if closed {
        total / s as f64
    } else {
        total / (s - 1) as f64
    };

    let mut out = Vec::with_capacity(s);
    let mut seg = 0usize;
    for i in 0..s {
        let target = (i as f64 * step).min(total);
        while seg + 2 < cum.len() && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let t = if seg_len > 0.0 {
            ((target - cum[seg]) / seg_len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = pts[seg];
        let b = pts[seg + 1];
        out.push(Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t));
    }
    SamplePoints::from_points(out)
}

/// Pruning thresholds applied to clipped fragments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOptions {
    pub min_points: usize,
    pub min_arc_len: f64,
}

impl ClipOptions {
    /// Keep every fragment, however short.
    pub fn keep_all() -> Self {
        ClipOptions {
            min_points: 2,
            min_arc_len: 0.0,
        }
    }

    pub fn from_feature_config(cfg: &FeatureConfig) -> Self {
        ClipOptions {
            min_points: cfg.min_fragment_points,
            min_arc_len: cfg.min_fragment_len,
        }
    }

    fn keeps(&self, points: &[Point]) -> bool {
        if points.len() < self.min_points.max(2) {
            return false;
        }
        let len: f64 = points.windows(2).map(|w| w[0].dist(&w[1])).sum();
        len > 0.0 && len >= self.min_arc_len
    }
}

const CLIP_EPS: f64 = 1e-12;

/// Clips one segment to a rectangle (Liang-Barsky). Returns the parameter
/// interval [t0, t1] of the inside part, or `None`.
fn clip_segment(a: &Point, b: &Point, r: &Rect) -> Option<(f64, f64)> {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    // (p, q) per boundary: inside when p*t <= q along the segment.
    let checks = [
        (-dx, a.x - r.x),
        (dx, r.x1() - a.x),
        (-dy, a.y - r.y),
        (dy, r.y1() - a.y),
    ];
    for (p, q) in checks {
        if p.abs() < CLIP_EPS {
            if q < -CLIP_EPS {
                return None; // parallel and outside
            }
        } else {
            let t = q / p;
            if p < 0.0 {
                if t > t1 {
                    return None;
                }
                t0 = t0.max(t);
            } else {
                if t < t0 {
                    return None;
                }
                t1 = t1.min(t);
            }
        }
    }
    if t0 > t1 {
        None
    } else {
        Some((t0, t1))
    }
}

fn lerp(a: &Point, b: &Point, t: f64) -> Point {
    Point::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t)
}

/// Cuts a contour into the maximal sub-polylines lying inside `block`,
/// inserting exact boundary intersection points. Fragments failing the
/// `opts` thresholds are dropped; an empty result is valid.
pub fn clip_to_block(contour: &Contour, block: &Rect, opts: &ClipOptions) -> Vec<Contour> {
    let mut runs: Vec<Vec<Point>> = Vec::new();
    let mut current: Vec<Point> = Vec::new();

    let push_point = |run: &mut Vec<Point>, p: Point| {
        if let Some(last) = run.last() {
            if last.dist(&p) < CLIP_EPS {
                return;
            }
        }
        run.push(p);
    };

    for w in contour.points.windows(2) {
        match clip_segment(&w[0], &w[1], block) {
            Some((t0, t1)) if t1 - t0 > CLIP_EPS / (1.0 + w[0].dist(&w[1])) => {
                let p0 = if t0 <= 0.0 { w[0] } else { lerp(&w[0], &w[1], t0) };
                let p1 = if t1 >= 1.0 { w[1] } else { lerp(&w[0], &w[1], t1) };
                let continues = current
                    .last()
                    .map(|last| last.dist(&p0) < 1e-9)
                    .unwrap_or(false);
                if !continues && !current.is_empty() {
                    runs.push(std::mem::take(&mut current));
                }
                if current.is_empty() {
                    current.push(p0);
                }
                push_point(&mut current, p1);
            }
            _ => {
                // Segment leaves no inside part; close any open run.
                if !current.is_empty() {
                    runs.push(std::mem::take(&mut current));
                }
            }
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }

    runs.into_iter()
        .filter(|pts| opts.keeps(pts))
        .map(|pts| Contour {
            id: contour.id,
            points: pts,
        })
        .collect()
}

fn dist_bin(normalized: f64) -> usize {
    // Half-open bins [0,1) and [1,inf) in mean-pairwise-distance units.
    usize::from(normalized >= 1.0)
}

/// Triangle-based descriptor of sample point `t_index`: a 2 x 2 x 6 histogram
/// over all unordered pairs {A, B} of the remaining points, flattened as
/// `(ta_bin * 2 + tb_bin) * 6 + angle_bin`.
///
/// The pair roles are oriented so the signed angle from T->A to T->B is
/// non-negative; the reported angle then lies in [0, pi] with collinear
/// triangles at exactly 0 or pi.
pub fn triangle_descriptor(omega: &SamplePoints, t_index: usize, normalize: bool) -> Vec<f64> {
    let s = omega.pts.len();
    assert!(t_index < s, "t_index out of range");
    let t = omega.pts[t_index];
    let mpd = omega.mean_pairwise_dist;
    let mut hist = vec![0.0f64; TRIANGLE_BINS];
    let angle_step = std::f64::consts::PI / 6.0;

    let others: Vec<usize> = (0..s).filter(|&i| i != t_index).collect();
    for ai in 0..others.len() {
        for bi in (ai + 1)..others.len() {
            let mut a = omega.pts[others[ai]];
            let mut b = omega.pts[others[bi]];
            let theta = (a - t).signed_angle_to(&(b - t));
            if theta < 0.0 {
                std::mem::swap(&mut a, &mut b);
            }
            let angle = theta.abs();
            let ta_bin = dist_bin(t.dist(&a) / mpd);
            let tb_bin = dist_bin(t.dist(&b) / mpd);
            let angle_bin = ((angle / angle_step) as usize).min(5);
            hist[(ta_bin * 2 + tb_bin) * 6 + angle_bin] += 1.0;
        }
    }
    if normalize {
        let total: f64 = hist.iter().sum();
        if total > 0.0 {
            for v in &mut hist {
                *v /= total;
            }
        }
    }
    hist
}

/// Shape-context descriptor of sample point `t_index`: 2 radial bins (split
/// at 1.0 mean-pairwise-distance units) x 6 polar-angle bins over [0, 2pi)
/// in the absolute image frame, flattened as `r_bin * 6 + angle_bin`.
pub fn shape_context_point(omega: &SamplePoints, t_index: usize, normalize: bool) -> Vec<f64> {
    let s = omega.pts.len();
    assert!(t_index < s, "t_index out of range");
    let t = omega.pts[t_index];
    let mpd = omega.mean_pairwise_dist;
    let mut hist = vec![0.0f64; SHAPE_CONTEXT_BINS];
    let angle_step = std::f64::consts::PI / 3.0;

    for (i, p) in omega.pts.iter().enumerate() {
        if i == t_index {
            continue;
        }
        let d = *p - t;
        let r_bin = dist_bin(d.norm() / mpd);
        let mut angle = d.y.atan2(d.x);
        if angle < 0.0 {
            angle += 2.0 * std::f64::consts::PI;
        }
        let a_bin = ((angle / angle_step) as usize).min(5);
        hist[r_bin * 6 + a_bin] += 1.0;
    }
    if normalize {
        let total: f64 = hist.iter().sum();
        if total > 0.0 {
            for v in &mut hist {
                *v /= total;
            }
        }
    }
    hist
}

/// The full fragment descriptor: per sample point in order, the triangle
/// descriptor followed by the shape-context descriptor.
pub fn contour_feature(omega: &SamplePoints, cfg: &FeatureConfig) -> Vec<f64> {
    let s = omega.pts.len();
    let mut out = Vec::with_capacity(s * BINS_PER_POINT);
    for t in 0..s {
        out.extend_from_slice(&triangle_descriptor(omega, t, cfg.normalize));
        out.extend_from_slice(&shape_context_point(omega, t, cfg.normalize));
    }
    out
}

/// Resamples and describes a fragment in one step.
pub fn fragment_feature(fragment: &Contour, cfg: &FeatureConfig) -> Result<(SamplePoints, Vec<f64>)> {
    let omega = resample(fragment, cfg.sample_points)?;
    let feat = contour_feature(&omega, cfg);
    Ok((omega, feat))
}

/// Accumulates one point into an unnormalized global shape-context histogram
/// about `center`, with radii in half-diagonal units: log-spaced boundaries
/// 2^-(R-1) .. 2^0 and a final open bin, and equal angular bins over [0, 2pi).
pub fn global_bin_index(p: &Point, center: &Point, half_diagonal: f64, cfg: &FeatureConfig) -> usize {
    let d = *p - *center;
    let r = d.norm() / half_diagonal;
    let nr = cfg.global_radial_bins;
    let mut r_bin = nr - 1;
    for k in 0..(nr - 1) {
        // Boundaries 2^(k - (nr-1)) for k = 1..nr-1.
        let hi = 2f64.powi(k as i32 + 1 - nr as i32 + 1);
        if r < hi {
            r_bin = k;
            break;
        }
    }
    let mut angle = d.y.atan2(d.x);
    if angle < 0.0 {
        angle += 2.0 * std::f64::consts::PI;
    }
    let na = cfg.global_angular_bins;
    let a_bin = ((angle / (2.0 * std::f64::consts::PI) * na as f64) as usize).min(na - 1);
    r_bin * na + a_bin
}

/// Global ensemble descriptor: an L1-normalized shape-context histogram of
/// all sample points of `ensembles` about the window center.
pub fn global_descriptor(
    point_sets: &[&SamplePoints],
    window: &Rect,
    cfg: &FeatureConfig,
) -> Vec<f64> {
    let mut hist = vec![0.0f64; cfg.global_dim()];
    let center = window.center();
    let half_diag = window.half_diagonal();
    let mut count = 0usize;
    for set in point_sets {
        for p in &set.pts {
            hist[global_bin_index(p, &center, half_diag, cfg)] += 1.0;
            count += 1;
        }
    }
    if cfg.normalize && count > 0 {
        for v in &mut hist {
            *v /= count as f64;
        }
    }
    hist
}
