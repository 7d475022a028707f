//! Initial-curve generators.
//!
//! Analytic shapes are sampled uniformly in the curve parameter
//! `rho = j/N in [0, 1)`; polygonal shapes (slit, thinfilm) keep their
//! corners as exact vertices and distribute the remaining budget over the
//! segments proportionally to length.  All generators produce CCW curves;
//! the lemniscate and quadrifolium are deliberately self-intersecting.

use std::f64::consts::TAU;

use anyhow::{anyhow, bail, Result};
use sppfem::curve::PolygonalCurve;
use sppfem::Vec2;

use crate::config::parse_number;

/// Generate the initial polygon for a shape spec with `n` vertices.
///
/// Specs: `circle[:r=<real>]`, `ellipse:a=<real>,b=<real>` (full axis
/// lengths), `nonconvex`, `bowtie`, `flower`, `quadrifolium`, `lemniscate`,
/// `slit`, `thinfilm[:l=<real>]`.
pub fn generate_initial(spec: &str, n: usize) -> Result<PolygonalCurve> {
    if n < 3 {
        bail!("cannot build a polygon with {n} vertices");
    }
    let (head, tail) = match spec.split_once(':') {
        Some((head, tail)) => (head.trim(), Some(tail.trim())),
        None => (spec.trim(), None),
    };
    let params = match tail {
        Some(tail) => tail
            .split(',')
            .map(|pair| {
                pair.split_once('=')
                    .map(|(k, v)| (k.trim(), v.trim()))
                    .ok_or_else(|| anyhow!("expected `key=value`, got `{pair}` in `{spec}`"))
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let lookup = |key: &str| -> Result<Option<f64>> {
        params
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| parse_number(v))
            .transpose()
    };
    let reject_params = || -> Result<()> {
        if tail.is_some() {
            bail!("shape `{head}` takes no parameters");
        }
        Ok(())
    };

    match head {
        "circle" => {
            let r = lookup("r")?.unwrap_or(1.0);
            if !(r > 0.0) {
                bail!("circle radius must be positive, got {r}");
            }
            sample(n, |phi| Vec2::new(r * phi.cos(), r * phi.sin()))
        }
        "ellipse" => {
            let a = lookup("a")?.ok_or_else(|| anyhow!("`{spec}` is missing `a=`"))?;
            let b = lookup("b")?.ok_or_else(|| anyhow!("`{spec}` is missing `b=`"))?;
            if !(a > 0.0 && b > 0.0) {
                bail!("ellipse axes must be positive, got a={a}, b={b}");
            }
            sample(n, |phi| Vec2::new(0.5 * a * phi.cos(), 0.5 * b * phi.sin()))
        }
        "nonconvex" => {
            reject_params()?;
            sample(n, |phi| {
                let (s, c) = phi.sin_cos();
                let s6 = (3.0 * phi).sin();
                Vec2::new(c, 0.5 * s + c.sin() + s * (0.2 + s * s6 * s6))
            })
        }
        "bowtie" => {
            reject_params()?;
            sample(n, |phi| {
                let (s, c) = phi.sin_cos();
                Vec2::new(c, 2.0 * s - 1.9 * s.powi(3))
            })
        }
        "flower" => {
            reject_params()?;
            sample(n, |phi| {
                let r = 2.0 + (6.0 * phi).cos();
                Vec2::new(r * phi.cos(), r * phi.sin())
            })
        }
        "quadrifolium" => {
            reject_params()?;
            sample(n, |phi| {
                let r = (2.0 * phi).cos();
                Vec2::new(r * phi.cos(), r * phi.sin())
            })
        }
        "lemniscate" => {
            reject_params()?;
            sample(n, |phi| {
                let (s, c) = phi.sin_cos();
                let w = 1.0 + s * s;
                Vec2::new(c / w, s * c / w)
            })
        }
        "slit" => {
            reject_params()?;
            polyline(
                n,
                &[
                    Vec2::new(-1.0, -1.0),
                    Vec2::new(1.0, -1.0),
                    Vec2::new(1.0, 1.0),
                    Vec2::new(0.01, 1.0),
                    Vec2::new(0.01, -0.8),
                    Vec2::new(-0.01, -0.8),
                    Vec2::new(-0.01, 1.0),
                    Vec2::new(-1.0, 1.0),
                ],
            )
        }
        "thinfilm" => {
            let l = lookup("l")?.unwrap_or(25.0);
            if !(l > 0.0) {
                bail!("thinfilm half-length must be positive, got {l}");
            }
            polyline(
                n,
                &[
                    Vec2::new(-l, -0.5),
                    Vec2::new(l, -0.5),
                    Vec2::new(l, 0.5),
                    Vec2::new(-l, 0.5),
                ],
            )
        }
        other => bail!(
            "unknown shape `{other}` (expected circle, ellipse, nonconvex, bowtie, \
             flower, quadrifolium, lemniscate, slit, or thinfilm)"
        ),
    }
}

/// Sample a closed parametric curve at `phi_j = 2 pi j / n`.
fn sample(n: usize, f: impl Fn(f64) -> Vec2) -> Result<PolygonalCurve> {
    let vertices = (0..n).map(|j| f(TAU * j as f64 / n as f64)).collect();
    PolygonalCurve::new(vertices).map_err(|e| anyhow!("degenerate sampling: {e}"))
}

/// Place `n` vertices on a closed polyline: every corner exactly, the rest
/// spread over the segments by a largest-deficit apportionment of the
/// length-proportional quota (every segment keeps at least its corner).
fn polyline(n: usize, corners: &[Vec2]) -> Result<PolygonalCurve> {
    let s = corners.len();
    if n < s {
        bail!("shape has {s} corners but only {n} vertices were requested");
    }
    let lengths: Vec<f64> = (0..s)
        .map(|i| (corners[(i + 1) % s] - corners[i]).norm())
        .collect();
    let total: f64 = lengths.iter().sum();

    // Each segment starts with one vertex (its leading corner); hand out the
    // remaining n - s one at a time to the segment whose vertex count is
    // furthest below its length-proportional target, lowest index on ties.
    let mut counts = vec![1usize; s];
    for _ in 0..n - s {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for i in 0..s {
            let deficit = n as f64 * lengths[i] / total - counts[i] as f64;
            if deficit > best_deficit + 1e-12 {
                best = i;
                best_deficit = deficit;
            }
        }
        counts[best] += 1;
    }

    let mut vertices = Vec::with_capacity(n);
    for i in 0..s {
        let from = corners[i];
        let to = corners[(i + 1) % s];
        for k in 0..counts[i] {
            let lambda = k as f64 / counts[i] as f64;
            vertices.push(from + (to - from) * lambda);
        }
    }
    PolygonalCurve::new(vertices).map_err(|e| anyhow!("degenerate polyline: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use sppfem::curve::{edge_geometry, enclosed_area, self_intersection_check};

    #[test]
    fn circle_with_four_vertices_is_the_inscribed_square() {
        let square = generate_initial("circle", 4).unwrap();
        assert_eq!(square.vertex(0), Vec2::new(1.0, 0.0));
        assert!((enclosed_area(&square) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ellipse_area_approaches_quarter_pi_times_axes() {
        // Full-axes convention: a=4, b=1 has area pi * 2 * 0.5 = pi.
        let fine = generate_initial("ellipse:a=4,b=1", 4096).unwrap();
        assert!((enclosed_area(&fine) - std::f64::consts::PI).abs() < 1e-5);
        assert!(self_intersection_check(&fine).is_none());
    }

    #[test]
    fn analytic_shapes_are_simple_and_positively_oriented() {
        for spec in ["circle:r=2", "ellipse:a=8,b=1", "nonconvex", "bowtie", "flower"] {
            let curve = generate_initial(spec, 256).unwrap();
            assert!(self_intersection_check(&curve).is_none(), "{spec} crosses itself");
            assert!(enclosed_area(&curve) > 0.0, "{spec} is not CCW");
        }
    }

    #[test]
    fn lemniscate_has_zero_signed_area_and_crosses_itself() {
        let curve = generate_initial("lemniscate", 256).unwrap();
        assert!(enclosed_area(&curve).abs() <= 1e-13);
        assert!(self_intersection_check(&curve).is_some());
    }

    #[test]
    fn quadrifolium_crosses_itself() {
        let curve = generate_initial("quadrifolium", 100).unwrap();
        assert!(self_intersection_check(&curve).is_some());
    }

    #[test]
    fn slit_keeps_exact_corners_area_and_perimeter() {
        let curve = generate_initial("slit", 800).unwrap();
        for corner in [
            Vec2::new(-1.0, -1.0),
            Vec2::new(1.0, 1.0),
            Vec2::new(0.01, -0.8),
            Vec2::new(-0.01, 1.0),
        ] {
            assert!(
                curve.vertices().contains(&corner),
                "corner {corner:?} was smoothed away"
            );
        }
        assert!((enclosed_area(&curve) - 3.964).abs() < 1e-12);
        let geom = edge_geometry(&curve).unwrap();
        assert!((geom.total_length - 11.6).abs() < 1e-12);
        assert!(self_intersection_check(&curve).is_none());
        assert_eq!(curve.len(), 800);
    }

    #[test]
    fn thinfilm_is_a_long_rectangle() {
        let curve = generate_initial("thinfilm", 512).unwrap();
        assert!((enclosed_area(&curve) - 50.0).abs() < 1e-12);
        let curve = generate_initial("thinfilm:l=2", 64).unwrap();
        assert!((enclosed_area(&curve) - 4.0).abs() < 1e-13);
        assert!(curve.vertices().contains(&Vec2::new(2.0, 0.5)));
    }

    #[test]
    fn apportionment_respects_segment_lengths() {
        // 100 vertices over the slit: the two long sides (2 each of 11.6)
        // should get about 100 * 2/11.6 ~ 17 vertices, the 0.02 notch floor
        // just its corner.
        let curve = generate_initial("slit", 100).unwrap();
        assert_eq!(curve.len(), 100);
        let on_bottom = curve
            .vertices()
            .iter()
            .filter(|v| v.y == -1.0)
            .count();
        assert!((15..=20).contains(&on_bottom), "bottom got {on_bottom} vertices");
        let on_notch_floor = curve
            .vertices()
            .iter()
            .filter(|v| v.y == -0.8 && v.x.abs() <= 0.01)
            .count();
        assert_eq!(on_notch_floor, 2, "notch floor should hold exactly its two corners");
    }

    #[test]
    fn shape_errors_are_reported() {
        assert!(generate_initial("dodecahedron", 64).is_err());
        assert!(generate_initial("ellipse:a=4", 64).is_err());
        assert!(generate_initial("circle:r=-1", 64).is_err());
        assert!(generate_initial("slit", 6).is_err());
        assert!(generate_initial("circle", 2).is_err());
        assert!(generate_initial("bowtie:width=2", 64).is_err());
    }
}
