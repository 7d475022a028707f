//! Intersection area of two simple polygons.
//!
//! The symmetric-difference (manifold) distance needs `|A ∩ B|` for two
//! simple, counterclockwise polygons whose boundaries may cross many times.
//! Instead of stitching the overlay into explicit output loops, each
//! boundary is split at every crossing with (and at every vertex of) the
//! other polygon, and Green's theorem is applied piecewise:
//!
//! `|A ∩ B| = ∮_{∂(A∩B)} x dy
//!          = Σ {pieces of ∂A inside B}  + Σ {pieces of ∂B strictly inside A}`,
//!
//! where a piece of `∂A` that lies *on* `∂B` counts as inside exactly when
//! the two boundaries run in the same direction there (a shared boundary of
//! the intersection, counted once via the `∂A` pass).  This covers identical
//! curves, shared edges, and T-junctions without any pointer surgery; the
//! only inexact step is snapping within [`SNAP`].

use crate::Vec2;

/// Absolute snapping tolerance for coincidence decisions.
pub(crate) const SNAP: f64 = 1e-12;

fn cross(a: Vec2, b: Vec2) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Signed area via the trapezoid form `Σ (x_{j-1} + x_j)(y_j - y_{j-1}) / 2`.
///
/// This is the same per-edge quadrature the piece sums use, so that the
/// intersection area of a polygon with itself reproduces this value bit for
/// bit.
pub(crate) fn trapezoid_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    let mut area = 0.0;
    for j in 0..n {
        let p = poly[(j + n - 1) % n];
        let q = poly[j];
        area += 0.5 * (p.x + q.x) * (q.y - p.y);
    }
    area
}

/// Distance from `pt` to the segment `a..b`.
fn point_segment_distance(pt: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (pt - a).norm();
    }
    let t = ((pt - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (pt - (a + t * ab)).norm()
}

/// Where a point sits relative to a polygon.
enum Place {
    Inside,
    Outside,
    /// Within [`SNAP`] of the boundary; `same_dir` tells whether the nearest
    /// boundary edge runs in the same direction as `dir`.
    OnBoundary { same_dir: bool },
}

/// Classify `pt` (the midpoint of a boundary piece with direction `dir`)
/// against `poly`.
fn classify(pt: Vec2, dir: Vec2, poly: &[Vec2]) -> Place {
    let n = poly.len();
    let mut nearest = f64::INFINITY;
    let mut nearest_dir = Vec2::zeros();
    for j in 0..n {
        let a = poly[(j + n - 1) % n];
        let b = poly[j];
        let d = point_segment_distance(pt, a, b);
        if d < nearest {
            nearest = d;
            nearest_dir = b - a;
        }
    }
    if nearest <= SNAP {
        return Place::OnBoundary {
            same_dir: dir.dot(&nearest_dir) > 0.0,
        };
    }
    // Even-odd ray cast with the half-open rule: each edge counts when its
    // endpoints straddle the horizontal through `pt`, which handles rays
    // through vertices consistently.
    let mut inside = false;
    for j in 0..n {
        let a = poly[(j + n - 1) % n];
        let b = poly[j];
        if (a.y > pt.y) != (b.y > pt.y) {
            let x_cross = a.x + (pt.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if x_cross > pt.x {
                inside = !inside;
            }
        }
    }
    if inside {
        Place::Inside
    } else {
        Place::Outside
    }
}

/// Parameters in `[0, 1]` along `p..q` where the other polygon's boundary
/// meets the segment: transversal edge crossings plus any of the other
/// polygon's vertices that lie on the segment.
fn split_params(p: Vec2, q: Vec2, other: &[Vec2]) -> Vec<f64> {
    let n = other.len();
    let d = q - p;
    let len = d.norm();
    let mut params = vec![0.0, 1.0];
    for j in 0..n {
        let a = other[(j + n - 1) % n];
        let b = other[j];
        let e = b - a;
        let denom = cross(d, e);
        // Skip (anti-)parallel pairs; collinear overlaps are handled by the
        // vertex insertions below plus on-boundary classification.
        if denom.abs() > SNAP * d.norm() * e.norm() {
            let t = cross(a - p, e) / denom;
            let u = cross(a - p, d) / denom;
            let t_slack = SNAP / len.max(SNAP);
            let u_slack = SNAP / e.norm().max(SNAP);
            if t > -t_slack && t < 1.0 + t_slack && u > -u_slack && u < 1.0 + u_slack {
                params.push(t.clamp(0.0, 1.0));
            }
        }
        if point_segment_distance(b, p, q) <= SNAP {
            params.push(((b - p).dot(&d) / (len * len)).clamp(0.0, 1.0));
        }
    }
    params.sort_by(|x, y| x.partial_cmp(y).unwrap());
    params.dedup_by(|a, b| (*a - *b).abs() * len <= SNAP);
    params
}

/// Sum of `∮ x dy` over the pieces of `poly`'s boundary lying inside
/// `other`.  `boundary_counts` selects whether same-direction on-boundary
/// pieces are included (true for the first polygon of the pair, false for
/// the second, so shared boundary is counted exactly once).
fn pieces_area(poly: &[Vec2], other: &[Vec2], boundary_counts: bool) -> f64 {
    let n = poly.len();
    let mut area = 0.0;
    for j in 0..n {
        let p = poly[(j + n - 1) % n];
        let q = poly[j];
        let params = split_params(p, q, other);
        if params.len() == 2 {
            // No interior split: decide the whole edge at once so that the
            // self-intersection case stays exact.
            if piece_included(p, q, 0.0, 1.0, other, boundary_counts) {
                area += 0.5 * (p.x + q.x) * (q.y - p.y);
            }
            continue;
        }
        for w in params.windows(2) {
            let (t0, t1) = (w[0], w[1]);
            if piece_included(p, q, t0, t1, other, boundary_counts) {
                let a = p + t0 * (q - p);
                let b = p + t1 * (q - p);
                area += 0.5 * (a.x + b.x) * (b.y - a.y);
            }
        }
    }
    area
}

fn piece_included(
    p: Vec2,
    q: Vec2,
    t0: f64,
    t1: f64,
    other: &[Vec2],
    boundary_counts: bool,
) -> bool {
    let mid = p + 0.5 * (t0 + t1) * (q - p);
    match classify(mid, q - p, other) {
        Place::Inside => true,
        Place::Outside => false,
        Place::OnBoundary { same_dir } => boundary_counts && same_dir,
    }
}

/// Area of the intersection of two simple counterclockwise polygons.
pub(crate) fn intersection_area(a: &[Vec2], b: &[Vec2]) -> f64 {
    pieces_area(a, b, true) + pieces_area(b, a, false)
}
