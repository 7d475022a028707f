//! Closed polygonal curves and their discrete geometry.
//!
//! A curve is an ordered, counterclockwise loop of `N >= 3` vertices
//! `X(rho_j)`, `rho_j = j/N`, with periodic indexing.  Edge `j` runs from
//! vertex `j-1` to vertex `j`; all discrete quantities follow the paper-free
//! conventions fixed once here:
//!
//! * perpendicular `(a, b)^perp = (-b, a)`,
//! * unit tangent `tau_j = h_j / |h_j|`,
//! * outward unit normal `n_j = -h_j^perp / |h_j|` (outward for
//!   counterclockwise loops),
//! * inclination angle `theta_j` in `(-pi, pi]` with
//!   `(cos theta_j, sin theta_j) = tau_j`.
//!
//! The mass-lumped inner product evaluates one-sided limits at the vertices,
//! so nodal (piecewise-linear) and edge-constant fields can be mixed freely.

use std::path::Path;

use thiserror::Error;

use crate::anisotropy::AnisotropyDensity;
use crate::polyclip;
use crate::Vec2;

#[derive(Debug, Error)]
pub enum CurveError {
    #[error("a closed curve needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {0} is not finite")]
    NonFiniteVertex(usize),
    #[error("edge {0} has zero length")]
    DegenerateEdge(usize),
    #[error("field length {field} does not match curve size {curve}")]
    SizeMismatch { field: usize, curve: usize },
    #[error("curves have different vertex counts ({0} vs {1})")]
    CurveSizeMismatch(usize, usize),
    #[error("curve is self-intersecting (edges {0} and {1} cross)")]
    SelfIntersecting(usize, usize),
    #[error("curve is not counterclockwise (signed area {0})")]
    NotCounterClockwise(f64),
    #[error("curve file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("curve file parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// An ordered closed loop of vertices.
#[derive(Clone, Debug, PartialEq)]
pub struct PolygonalCurve {
    vertices: Vec<Vec2>,
}

impl PolygonalCurve {
    /// Validate and wrap a vertex loop: at least three finite vertices with
    /// no zero-length edge (consecutive duplicates).
    pub fn new(vertices: Vec<Vec2>) -> Result<Self, CurveError> {
        if vertices.len() < 3 {
            return Err(CurveError::TooFewVertices(vertices.len()));
        }
        let n = vertices.len();
        for (i, v) in vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite()) {
                return Err(CurveError::NonFiniteVertex(i));
            }
        }
        for j in 0..n {
            if vertices[(j + n - 1) % n] == vertices[j] {
                return Err(CurveError::DegenerateEdge(j));
            }
        }
        Ok(Self { vertices })
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vertices(&self) -> &[Vec2] {
        &self.vertices
    }

    /// Vertex with periodic indexing.
    pub fn vertex(&self, j: usize) -> Vec2 {
        self.vertices[j % self.vertices.len()]
    }

    /// Read a curve from CSV (`x,y` header, one vertex per row, implicit
    /// closure).
    pub fn read_csv(path: &Path) -> Result<Self, CurveError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "x,y" => {}
            _ => {
                return Err(CurveError::Parse {
                    line: 1,
                    msg: "expected header `x,y`".into(),
                })
            }
        }
        let mut vertices = Vec::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut read = |what: &str| -> Result<f64, CurveError> {
                fields
                    .next()
                    .ok_or_else(|| CurveError::Parse {
                        line: idx + 1,
                        msg: format!("missing {what}"),
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| CurveError::Parse {
                        line: idx + 1,
                        msg: format!("bad {what}: {e}"),
                    })
            };
            let x = read("x")?;
            let y = read("y")?;
            vertices.push(Vec2::new(x, y));
        }
        Self::new(vertices)
    }

    /// Write as CSV in the format accepted by [`PolygonalCurve::read_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<(), CurveError> {
        let mut out = String::from("x,y\n");
        for v in &self.vertices {
            out.push_str(&format!("{},{}\n", v.x, v.y));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Per-edge geometry of a curve, evaluated once per time step.
#[derive(Clone, Debug)]
pub struct EdgeGeometry {
    /// Edge lengths `|h_j|`.
    pub lengths: Vec<f64>,
    /// Unit tangents `tau_j`.
    pub tangents: Vec<Vec2>,
    /// Outward unit normals `n_j = -h_j^perp / |h_j|`.
    pub normals: Vec<Vec2>,
    /// Inclination angles `theta_j` in `(-pi, pi]`.
    pub thetas: Vec<f64>,
    /// Lumped vertex weights `(|h_j| + |h_{j+1}|)/2`.
    pub weights: Vec<f64>,
    /// Total length `L = Σ |h_j|`.
    pub total_length: f64,
}

impl EdgeGeometry {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

/// Compute the per-edge geometry of a curve.
pub fn edge_geometry(curve: &PolygonalCurve) -> Result<EdgeGeometry, CurveError> {
    let n = curve.len();
    let v = curve.vertices();
    let mut lengths = Vec::with_capacity(n);
    let mut tangents = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    let mut thetas = Vec::with_capacity(n);
    let mut total = 0.0;
    for j in 0..n {
        let h = v[j] - v[(j + n - 1) % n];
        let len = h.norm();
        if !(len > 0.0) {
            return Err(CurveError::DegenerateEdge(j));
        }
        let tau = h / len;
        // n = -h^perp / |h| with (a,b)^perp = (-b,a).
        let normal = Vec2::new(tau.y, -tau.x);
        let mut theta = tau.y.atan2(tau.x);
        if theta <= -std::f64::consts::PI {
            theta = std::f64::consts::PI;
        }
        lengths.push(len);
        tangents.push(tau);
        normals.push(normal);
        thetas.push(theta);
        total += len;
    }
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        weights.push(0.5 * (lengths[i] + lengths[(i + 1) % n]));
    }
    Ok(EdgeGeometry {
        lengths,
        tangents,
        normals,
        thetas,
        weights,
        total_length: total,
    })
}

/// A scalar field over the curve: either nodal values (piecewise linear) or
/// edge-constant values.
#[derive(Clone, Copy, Debug)]
pub enum Field<'a> {
    Nodal(&'a [f64]),
    Edge(&'a [f64]),
}

impl<'a> Field<'a> {
    fn len(&self) -> usize {
        match self {
            Field::Nodal(v) | Field::Edge(v) => v.len(),
        }
    }

    /// One-sided limit at the right end of edge `j` (vertex `j`).
    fn right(&self, j: usize, n: usize) -> f64 {
        match self {
            Field::Nodal(v) => v[j % n],
            Field::Edge(v) => v[j % n],
        }
    }

    /// One-sided limit at the left end of edge `j` (vertex `j-1`).
    fn left(&self, j: usize, n: usize) -> f64 {
        match self {
            Field::Nodal(v) => v[(j + n - 1) % n],
            Field::Edge(v) => v[j % n],
        }
    }
}

/// Mass-lumped inner product
/// `(u, v)^h = Σ_j |h_j|/2 * (u(rho_j^-) v(rho_j^-) + u(rho_{j-1}^+) v(rho_{j-1}^+))`.
///
/// Edge-constant fields supply the same value as both one-sided limits on
/// their edge; nodal fields supply the vertex values.
pub fn mass_lumped_inner(geom: &EdgeGeometry, u: Field, v: Field) -> Result<f64, CurveError> {
    let n = geom.len();
    for f in [&u, &v] {
        if f.len() != n {
            return Err(CurveError::SizeMismatch {
                field: f.len(),
                curve: n,
            });
        }
    }
    let mut sum = 0.0;
    for j in 0..n {
        sum += 0.5
            * geom.lengths[j]
            * (u.right(j, n) * v.right(j, n) + u.left(j, n) * v.left(j, n));
    }
    Ok(sum)
}

/// Discrete arclength derivative of a nodal field:
/// `(∂_s f)|_j = (f_j - f_{j-1}) / |h_j|`, edge-constant.
pub fn discrete_deriv(geom: &EdgeGeometry, f: &[f64]) -> Result<Vec<f64>, CurveError> {
    let n = geom.len();
    if f.len() != n {
        return Err(CurveError::SizeMismatch {
            field: f.len(),
            curve: n,
        });
    }
    Ok((0..n)
        .map(|j| (f[j] - f[(j + n - 1) % n]) / geom.lengths[j])
        .collect())
}

/// Vector-valued variant of [`discrete_deriv`].
pub fn discrete_deriv_vec(geom: &EdgeGeometry, f: &[Vec2]) -> Result<Vec<Vec2>, CurveError> {
    let n = geom.len();
    if f.len() != n {
        return Err(CurveError::SizeMismatch {
            field: f.len(),
            curve: n,
        });
    }
    Ok((0..n)
        .map(|j| (f[j] - f[(j + n - 1) % n]) / geom.lengths[j])
        .collect())
}

/// Signed enclosed area
/// `A = 1/2 Σ_j (x_{j-1} + x_j)(y_j - y_{j-1})`, positive for
/// counterclockwise loops.
pub fn enclosed_area(curve: &PolygonalCurve) -> f64 {
    polyclip::trapezoid_area(curve.vertices())
}

/// Interface energy `W = Σ_j gamma(theta_j) |h_j|`.
pub fn interface_energy(geom: &EdgeGeometry, density: &AnisotropyDensity) -> f64 {
    geom.thetas
        .iter()
        .zip(geom.lengths.iter())
        .map(|(theta, len)| density.gamma(*theta) * len)
        .sum()
}

/// Weighted mesh ratio `max_j gamma(theta_j)|h_j| / min_j gamma(theta_j)|h_j|`.
pub fn weighted_mesh_ratio(geom: &EdgeGeometry, density: &AnisotropyDensity) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (theta, len) in geom.thetas.iter().zip(geom.lengths.iter()) {
        let w = density.gamma(*theta) * len;
        lo = lo.min(w);
        hi = hi.max(w);
    }
    hi / lo
}

/// First pair of non-adjacent edges that intersect, or `None` for a simple
/// curve.  Segment pairs are tested with a `1e-12` slack, so touching counts
/// as crossing.
pub fn self_intersection_check(curve: &PolygonalCurve) -> Option<(usize, usize)> {
    let v = curve.vertices();
    let n = v.len();
    let edge = |j: usize| (v[(j + n - 1) % n], v[j]);
    for i in 0..n {
        for j in (i + 1)..n {
            // Skip adjacent pairs (sharing a vertex), including the wrap pair.
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (a, b) = edge(i);
            let (c, d) = edge(j);
            if segments_intersect(a, b, c, d) {
                return Some((i, j));
            }
        }
    }
    None
}

/// Do segments `a..b` and `c..d` intersect (including touching within the
/// snapping tolerance)?
fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    const SLACK: f64 = 1e-12;
    // Quick reject on bounding boxes, inflated by the slack.
    if a.x.max(b.x) + SLACK < c.x.min(d.x)
        || c.x.max(d.x) + SLACK < a.x.min(b.x)
        || a.y.max(b.y) + SLACK < c.y.min(d.y)
        || c.y.max(d.y) + SLACK < a.y.min(b.y)
    {
        return false;
    }
    let orient = |p: Vec2, q: Vec2, r: Vec2| (q.x - p.x) * (r.y - p.y) - (q.y - p.y) * (r.x - p.x);
    let scale_ab = (b - a).norm();
    let scale_cd = (d - c).norm();
    let d1 = orient(a, b, c);
    let d2 = orient(a, b, d);
    let d3 = orient(c, d, a);
    let d4 = orient(c, d, b);
    // Proper crossing.
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    // Near-degenerate: an endpoint lies (within slack) on the other segment.
    let on = |p: Vec2, q: Vec2, r: Vec2, orient_val: f64, scale: f64| -> bool {
        orient_val.abs() <= SLACK * scale.max(1.0) && {
            let t = (r - p).dot(&(q - p)) / (q - p).norm_squared();
            (-SLACK..=1.0 + SLACK).contains(&t)
        }
    };
    on(a, b, c, d1, scale_ab)
        || on(a, b, d, d2, scale_ab)
        || on(c, d, a, d3, scale_cd)
        || on(c, d, b, d4, scale_cd)
}

/// Manifold (symmetric-difference) distance
/// `M(c1, c2) = 2|Ω1 ∪ Ω2| - |Ω1| - |Ω2| = |Ω1| + |Ω2| - 2|Ω1 ∩ Ω2|`.
///
/// Both curves must be simple and counterclockwise.  The intersection area
/// comes from splitting each boundary at its crossings with the other and
/// classifying the pieces; the only inexact step is coincidence snapping
/// within `1e-12`.
pub fn manifold_distance(c1: &PolygonalCurve, c2: &PolygonalCurve) -> Result<f64, CurveError> {
    for c in [c1, c2] {
        if let Some((i, j)) = self_intersection_check(c) {
            return Err(CurveError::SelfIntersecting(i, j));
        }
    }
    let a1 = polyclip::trapezoid_area(c1.vertices());
    let a2 = polyclip::trapezoid_area(c2.vertices());
    if a1 <= 0.0 {
        return Err(CurveError::NotCounterClockwise(a1));
    }
    if a2 <= 0.0 {
        return Err(CurveError::NotCounterClockwise(a2));
    }
    let inter = polyclip::intersection_area(c1.vertices(), c2.vertices());
    Ok((a1 + a2 - 2.0 * inter).max(0.0))
}

/// Vertex-wise convex combination `(1 - lambda) c1 + lambda c2`.
///
/// At `lambda = 0` and `lambda = 1` the inputs are returned bit-identically.
pub fn interpolate_curves(
    c1: &PolygonalCurve,
    c2: &PolygonalCurve,
    lambda: f64,
) -> Result<PolygonalCurve, CurveError> {
    if c1.len() != c2.len() {
        return Err(CurveError::CurveSizeMismatch(c1.len(), c2.len()));
    }
    if lambda == 0.0 {
        return Ok(c1.clone());
    }
    if lambda == 1.0 {
        return Ok(c2.clone());
    }
    let vertices = c1
        .vertices()
        .iter()
        .zip(c2.vertices().iter())
        .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
        .collect();
    PolygonalCurve::new(vertices)
}
