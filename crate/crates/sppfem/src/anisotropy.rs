//! Anisotropic surface energy densities and the stabilised energy matrix.
//!
//! A density is a positive `2π`-periodic function `gamma(theta)` of the
//! outward normal angle.  Everything the solver needs from it is assembled
//! here:
//!
//! * the Cahn–Hoffman vector `xi = gamma*n - gamma'*tau`,
//! * the stabilised energy matrix
//!   `G_k(theta) = gamma*I + gamma'*(n tau^T - alpha tau n^T)
//!                 + (k + (alpha-1)*gamma) * n n^T`,
//! * the minimal stabilising function `k_min` that makes the discrete
//!   interface energy non-increasing, obtained pointwise from the scalar
//!   optimisation problem behind the local energy estimate.
//!
//! Angle conventions: for normal angle `theta` the unit tangent is
//! `tau = (cos theta, sin theta)` and the outward unit normal is
//! `n = (-sin theta, cos theta)`.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use crate::{Mat2, Vec2};

/// Smoothness classification of a density.
///
/// Piecewise-smooth densities carry the angles where `gamma''` (or lower
/// derivatives) jump; evaluation at a jump angle returns the limit from the
/// left (`theta -> theta_jump^-`).
#[derive(Clone, Debug, PartialEq)]
pub enum Smoothness {
    /// Twice continuously differentiable everywhere.
    Smooth,
    /// Twice continuously differentiable away from finitely many angles.
    PiecewiseSmooth { jumps: Vec<f64> },
}

/// Errors from density construction.
#[derive(Debug, Error)]
pub enum DensityError {
    #[error("density `{name}` is not positive: gamma({theta}) = {value}")]
    NonPositive { name: String, theta: f64, value: f64 },
    #[error("m-fold amplitude must satisfy |beta| < 1, got {0}")]
    MFoldBeta(f64),
    #[error("m-fold symmetry order must be at least 1")]
    MFoldOrder,
}

/// Errors from stabiliser computations and table I/O.
#[derive(Debug, Error)]
pub enum StabilizerError {
    #[error("no finite stabiliser exists at theta = {theta}")]
    Unstabilizable { theta: f64 },
    #[error("stability margin is not positive (c = {margin}); upper bound unavailable")]
    MarginNotPositive { margin: f64 },
    #[error("stabiliser table I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("stabiliser table parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

type ThetaFn = dyn Fn(f64) -> (f64, f64, f64) + Send + Sync;

/// A positive `2π`-periodic surface energy density `gamma(theta)` together
/// with its first two derivatives.
#[derive(Clone)]
pub struct AnisotropyDensity {
    name: String,
    eval: Arc<ThetaFn>,
    smoothness: Smoothness,
}

impl fmt::Debug for AnisotropyDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnisotropyDensity")
            .field("name", &self.name)
            .field("smoothness", &self.smoothness)
            .finish()
    }
}

/// Wrap an angle into the principal branch `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t == -PI {
        PI
    } else {
        t
    }
}

impl AnisotropyDensity {
    /// Build a density from an evaluator returning
    /// `(gamma, gamma', gamma'')` at a principal-branch angle.
    ///
    /// Positivity of `gamma` is checked on a dense grid; a non-positive
    /// sample is rejected.
    pub fn custom<F>(name: &str, smoothness: Smoothness, eval: F) -> Result<Self, DensityError>
    where
        F: Fn(f64) -> (f64, f64, f64) + Send + Sync + 'static,
    {
        let density = Self {
            name: name.to_owned(),
            eval: Arc::new(eval),
            smoothness,
        };
        const CHECK_GRID: usize = 4096;
        for i in 0..CHECK_GRID {
            let theta = -PI + 2.0 * PI * (i as f64 + 0.5) / CHECK_GRID as f64;
            let g = density.gamma(theta);
            if !(g > 0.0) {
                return Err(DensityError::NonPositive {
                    name: density.name,
                    theta,
                    value: g,
                });
            }
        }
        Ok(density)
    }

    /// The isotropic density `gamma = 1`.
    pub fn isotropic() -> Self {
        Self::custom("iso", Smoothness::Smooth, |_| (1.0, 0.0, 0.0))
            .expect("isotropic density is positive")
    }

    /// `gamma(theta) = 1 + beta * cos(m * (theta + phase))`, requiring
    /// `|beta| < 1` so the density stays positive.
    pub fn m_fold(m: u32, beta: f64, phase: f64) -> Result<Self, DensityError> {
        if m == 0 {
            return Err(DensityError::MFoldOrder);
        }
        if !(beta.abs() < 1.0) {
            return Err(DensityError::MFoldBeta(beta));
        }
        let mf = m as f64;
        Self::custom(
            &format!("mfold:m={m},beta={beta},phase={phase}"),
            Smoothness::Smooth,
            move |theta| {
                let arg = mf * (theta + phase);
                (
                    1.0 + beta * arg.cos(),
                    -beta * mf * arg.sin(),
                    -beta * mf * mf * arg.cos(),
                )
            },
        )
    }

    /// The piecewise-smooth density
    /// `gamma = sqrt((5/2 + 3/2 * sgn(n1)) n1^2 + n2^2)` with
    /// `n = (-sin theta, cos theta)`.
    ///
    /// On the branch `n1 > 0` (i.e. `theta` in `(-pi, 0)`) this is
    /// `sqrt(1 + 3 sin^2 theta)`; on `n1 < 0` it is identically `1`.  The
    /// density is `C^1` across the branch points `theta in {0, pi}` while
    /// `gamma''` jumps there; jump angles evaluate to their left limits.
    pub fn case_two() -> Self {
        Self::custom(
            "case2",
            Smoothness::PiecewiseSmooth { jumps: vec![0.0, PI] },
            |theta| {
                let t = wrap_angle(theta);
                if t <= 0.0 {
                    // n1 = -sin(t) > 0 on (-pi, 0); at t = 0 take the left limit.
                    let s = t.sin();
                    let g = (1.0 + 3.0 * s * s).sqrt();
                    let gp = 1.5 * (2.0 * t).sin() / g;
                    let gpp = (3.0 * (2.0 * t).cos() - gp * gp) / g;
                    (g, gp, gpp)
                } else {
                    (1.0, 0.0, 0.0)
                }
            },
        )
        .expect("case-two density is positive")
    }

    /// The smooth `l^4`-norm density `gamma = (n1^4 + n2^4)^(1/4)`.
    pub fn l4_norm() -> Self {
        Self::custom("l4", Smoothness::Smooth, |theta| {
            // n1^4 + n2^4 = sin^4 + cos^4 = s(theta), with
            // s' = -sin(4 theta) and s'' = -4 cos(4 theta).
            let s = {
                let (sn, cs) = theta.sin_cos();
                sn.powi(4) + cs.powi(4)
            };
            let sp = -(4.0 * theta).sin();
            let spp = -4.0 * (4.0 * theta).cos();
            let g = s.powf(0.25);
            let gp = 0.25 * s.powf(-0.75) * sp;
            let gpp = 0.25 * (-0.75 * s.powf(-1.75) * sp * sp + s.powf(-0.75) * spp);
            (g, gp, gpp)
        })
        .expect("l4 density is positive")
    }

    /// Density value `gamma(theta)`.
    pub fn gamma(&self, theta: f64) -> f64 {
        (self.eval)(wrap_angle(theta)).0
    }

    /// First derivative `gamma'(theta)`.
    pub fn gamma_prime(&self, theta: f64) -> f64 {
        (self.eval)(wrap_angle(theta)).1
    }

    /// `(gamma, gamma', gamma'')` at `theta`.
    pub fn eval(&self, theta: f64) -> (f64, f64, f64) {
        (self.eval)(wrap_angle(theta))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn smoothness(&self) -> &Smoothness {
        &self.smoothness
    }
}

/// Unit tangent for normal angle `theta`.
pub fn tangent(theta: f64) -> Vec2 {
    Vec2::new(theta.cos(), theta.sin())
}

/// Outward unit normal for normal angle `theta`.
pub fn normal(theta: f64) -> Vec2 {
    Vec2::new(-theta.sin(), theta.cos())
}

/// Cahn–Hoffman vector `xi = gamma * n - gamma' * tau`.
///
/// Satisfies `xi . n = gamma` and `xi . tau = -gamma'`.
pub fn xi_vector(density: &AnisotropyDensity, theta: f64) -> Vec2 {
    let (g, gp, _) = density.eval(theta);
    g * normal(theta) - gp * tangent(theta)
}

/// Stabilised energy matrix
/// `G_k(theta) = gamma*I + gamma'*(n tau^T - alpha tau n^T)
///               + (k + (alpha-1)*gamma) * n n^T`.
///
/// Its action on the tangent is `G_k tau = gamma * tau + gamma' * n`
/// independently of `alpha` and `k`; the stabilising function `k` only acts
/// on the normal component.
pub fn energy_matrix(density: &AnisotropyDensity, theta: f64, alpha: f64, k: f64) -> Mat2 {
    let (g, gp, _) = density.eval(theta);
    let n = normal(theta);
    let t = tangent(theta);
    let mut m = Mat2::identity() * g;
    m += gp * (n * t.transpose() - alpha * (t * n.transpose()));
    m += (k + (alpha - 1.0) * g) * (n * n.transpose());
    m
}

/// Auxiliary function
/// `P(phi, theta) = gamma(theta) + (alpha-1)/2 * gamma'(theta) * sin(2 phi)
///                  + a * sin^2(phi)`.
pub fn aux_p(density: &AnisotropyDensity, alpha: f64, a: f64, phi: f64, theta: f64) -> f64 {
    let (g, gp, _) = density.eval(theta);
    g + 0.5 * (alpha - 1.0) * gp * (2.0 * phi).sin() + a * phi.sin().powi(2)
}

/// Auxiliary function
/// `Q(phi, theta) = gamma(theta - phi) + gamma(theta) * cos(phi)
///                  + alpha * gamma'(theta) * sin(phi)`.
pub fn aux_q(density: &AnisotropyDensity, alpha: f64, phi: f64, theta: f64) -> f64 {
    let (g, gp, _) = density.eval(theta);
    density.gamma(theta - phi) + g * phi.cos() + alpha * gp * phi.sin()
}

/// Global stability margin `c = inf_theta [3 gamma(theta) - gamma(theta - pi)]`.
///
/// Evaluated on `grid_n` samples and sharpened by golden-section search
/// around the grid minimiser to an interval of width `1e-10`.
pub fn stability_margin(density: &AnisotropyDensity, grid_n: usize) -> f64 {
    let n = grid_n.max(8);
    let f = |theta: f64| 3.0 * density.gamma(theta) - density.gamma(theta - PI);
    let step = 2.0 * PI / n as f64;
    let mut best = f64::INFINITY;
    let mut best_theta = 0.0;
    for i in 0..n {
        let theta = -PI + i as f64 * step;
        let v = f(theta);
        if v < best {
            best = v;
            best_theta = theta;
        }
    }
    // Golden-section refinement on the bracketing interval.
    let inv_phi = 0.5 * (5.0_f64.sqrt() - 1.0);
    let (mut lo, mut hi) = (best_theta - step, best_theta + step);
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while hi - lo > 1e-10 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = f(x2);
        }
    }
    best.min(f1).min(f2)
}

/// Result of a pointwise minimal-stabiliser computation: either a finite
/// value or a marker that no finite stabiliser exists at that angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StabilizerValue {
    Finite(f64),
    Infinite,
}

impl StabilizerValue {
    pub fn is_finite(&self) -> bool {
        matches!(self, StabilizerValue::Finite(_))
    }

    /// The finite value, panicking on the infinite marker.
    pub fn value(&self) -> f64 {
        match self {
            StabilizerValue::Finite(v) => *v,
            StabilizerValue::Infinite => panic!("stabiliser is infinite"),
        }
    }
}

const K0_GRID: usize = 8192;
const K0_SIN_CUT: f64 = 1e-6;
const K0_EQ_TOL: f64 = 1e-9;

/// The ratio whose supremum over `phi` gives the minimal `a` with
/// `4 gamma P_{a} >= Q^2`:
/// `R(phi) = (Q^2 - 4 gamma P_0) / (4 gamma sin^2 phi)`.
fn k0_ratio(density: &AnisotropyDensity, alpha: f64, g: f64, phi: f64, theta: f64) -> Option<f64> {
    let s = phi.sin();
    if s.abs() < K0_SIN_CUT {
        return None;
    }
    let q = aux_q(density, alpha, phi, theta);
    let p0 = aux_p(density, alpha, 0.0, phi, theta);
    Some((q * q - 4.0 * g * p0) / (4.0 * g * s * s))
}

/// Pointwise minimal stabiliser
/// `k0(theta) = inf { a >= 0 : 4 gamma(theta) P_a(phi, theta) >= Q(phi, theta)^2
///                    for all phi }`.
///
/// Since `4 gamma P_a - Q^2 = (4 gamma P_0 - Q^2) + 4 gamma a sin^2 phi`,
/// the infimum equals `max(0, sup_phi R(phi))` with the ratio `R` above.  The
/// supremum is taken on a uniform grid of 8192 angles excluding
/// `|sin phi| < 1e-6`, followed by one local parabolic refinement around the
/// grid maximiser.
///
/// Near `phi = 0` the constraint is inactive (`Q(0) = 2 gamma` makes the
/// numerator vanish to second order).  Near `phi = pi` the numerator tends to
/// `(gamma(theta-pi) - 3 gamma)(gamma(theta-pi) + gamma)`, so no finite
/// stabiliser exists when `3 gamma(theta) < gamma(theta - pi)`; when that
/// expression vanishes, existence additionally requires the first-order term
/// `gamma'(theta-pi) + (2 alpha - 1) gamma'(theta)` to vanish, otherwise `R`
/// blows up like `1/(phi - pi)`.
pub fn k0_at(density: &AnisotropyDensity, alpha: f64, theta: f64) -> StabilizerValue {
    let (g, gp, _) = density.eval(theta);
    let (gm, gpm, _) = density.eval(theta - PI);
    let gap = 3.0 * g - gm;
    if gap < -K0_EQ_TOL {
        return StabilizerValue::Infinite;
    }
    if gap <= K0_EQ_TOL {
        let slope = gpm + (2.0 * alpha - 1.0) * gp;
        if slope.abs() > K0_EQ_TOL {
            return StabilizerValue::Infinite;
        }
    }

    let step = 2.0 * PI / K0_GRID as f64;
    let mut values = vec![f64::NEG_INFINITY; K0_GRID];
    let mut best = f64::NEG_INFINITY;
    let mut best_i = 0usize;
    for (i, slot) in values.iter_mut().enumerate() {
        let phi = -PI + i as f64 * step;
        if let Some(r) = k0_ratio(density, alpha, g, phi, theta) {
            *slot = r;
            if r > best {
                best = r;
                best_i = i;
            }
        }
    }

    // Local parabolic refinement around the grid maximiser.
    let prev = values[(best_i + K0_GRID - 1) % K0_GRID];
    let next = values[(best_i + 1) % K0_GRID];
    if prev.is_finite() && next.is_finite() {
        let denom = prev - 2.0 * best + next;
        if denom < 0.0 {
            let offset = 0.5 * (prev - next) / denom;
            let phi = -PI + (best_i as f64 + offset.clamp(-1.0, 1.0)) * step;
            if let Some(r) = k0_ratio(density, alpha, g, phi, theta) {
                best = best.max(r);
            }
        }
    }

    StabilizerValue::Finite(best.max(0.0))
}

/// Pointwise minimal stabilising function
/// `k_min(theta) = k0(theta) - (alpha - 1) * gamma(theta)`.
pub fn k_min_at(density: &AnisotropyDensity, alpha: f64, theta: f64) -> StabilizerValue {
    match k0_at(density, alpha, theta) {
        StabilizerValue::Finite(k0) => {
            StabilizerValue::Finite(k0 - (alpha - 1.0) * density.gamma(theta))
        }
        StabilizerValue::Infinite => StabilizerValue::Infinite,
    }
}

/// Number of nodes in a stabiliser table.
pub const TABLE_NODES: usize = 21;

/// The fixed table nodes `theta_j = -pi + j * pi/10`, `j = 0..=20`.
pub fn table_nodes() -> [f64; TABLE_NODES] {
    let mut nodes = [0.0; TABLE_NODES];
    for (j, node) in nodes.iter_mut().enumerate() {
        *node = -PI + j as f64 * PI / 10.0;
    }
    nodes
}

/// A sampled stabilising function: values at the 21 fixed nodes covering
/// `[-pi, pi]`, evaluated in between by periodic linear interpolation.
#[derive(Clone, Debug, PartialEq)]
pub struct StabilizerTable {
    values: [f64; TABLE_NODES],
}

impl StabilizerTable {
    /// Build from explicit node values (`values[0]` at `-pi` through
    /// `values[20]` at `pi`; the two end nodes represent the same angle and
    /// should carry the same value for a periodic function).
    pub fn from_values(values: [f64; TABLE_NODES]) -> Self {
        Self { values }
    }

    /// A constant table.
    pub fn constant(value: f64) -> Self {
        Self {
            values: [value; TABLE_NODES],
        }
    }

    pub fn values(&self) -> &[f64; TABLE_NODES] {
        &self.values
    }

    /// Periodic linear interpolation.
    pub fn eval(&self, theta: f64) -> f64 {
        let t = wrap_angle(theta);
        let pos = (t + PI) / (PI / 10.0);
        let j = (pos.floor() as usize).min(TABLE_NODES - 2);
        let w = pos - j as f64;
        self.values[j] * (1.0 - w) + self.values[j + 1] * w
    }

    /// Write as CSV (`theta,value` header plus 21 rows).
    pub fn write_csv(&self, path: &Path) -> Result<(), StabilizerError> {
        let mut out = String::from("theta,value\n");
        for (theta, value) in table_nodes().iter().zip(self.values.iter()) {
            out.push_str(&format!("{theta},{value}\n"));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Read back a table written by [`StabilizerTable::write_csv`],
    /// validating the header, the row count, and the node angles.
    pub fn read_csv(path: &Path) -> Result<Self, StabilizerError> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == "theta,value" => {}
            _ => {
                return Err(StabilizerError::Parse {
                    line: 1,
                    msg: "expected header `theta,value`".into(),
                })
            }
        }
        let nodes = table_nodes();
        let mut values = [0.0; TABLE_NODES];
        let mut count = 0usize;
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if count >= TABLE_NODES {
                return Err(StabilizerError::Parse {
                    line: idx + 1,
                    msg: format!("more than {TABLE_NODES} rows"),
                });
            }
            let mut fields = line.split(',');
            let parse = |s: Option<&str>, what: &str| -> Result<f64, StabilizerError> {
                s.ok_or_else(|| StabilizerError::Parse {
                    line: idx + 1,
                    msg: format!("missing {what}"),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| StabilizerError::Parse {
                    line: idx + 1,
                    msg: format!("bad {what}: {e}"),
                })
            };
            let theta = parse(fields.next(), "theta")?;
            let value = parse(fields.next(), "value")?;
            if (theta - nodes[count]).abs() > 1e-9 {
                return Err(StabilizerError::Parse {
                    line: idx + 1,
                    msg: format!("node {count}: expected theta {} got {theta}", nodes[count]),
                });
            }
            values[count] = value;
            count += 1;
        }
        if count != TABLE_NODES {
            return Err(StabilizerError::Parse {
                line: 0,
                msg: format!("expected {TABLE_NODES} rows, found {count}"),
            });
        }
        Ok(Self { values })
    }
}

/// Tabulate `k_min` at the 21 fixed nodes.
///
/// Fails with the violating angle if no finite stabiliser exists at any node.
pub fn k_min_table(density: &AnisotropyDensity, alpha: f64) -> Result<StabilizerTable, StabilizerError> {
    let mut values = [0.0; TABLE_NODES];
    for (j, theta) in table_nodes().iter().enumerate() {
        match k_min_at(density, alpha, *theta) {
            StabilizerValue::Finite(v) => values[j] = v,
            StabilizerValue::Infinite => {
                return Err(StabilizerError::Unstabilizable { theta: *theta })
            }
        }
    }
    Ok(StabilizerTable::from_values(values))
}

/// A stabilising function `k(theta)`: either constant or tabulated.
#[derive(Clone, Debug, PartialEq)]
pub enum Stabilizer {
    Constant(f64),
    Table(StabilizerTable),
}

impl Stabilizer {
    pub fn eval(&self, theta: f64) -> f64 {
        match self {
            Stabilizer::Constant(v) => *v,
            Stabilizer::Table(t) => t.eval(theta),
        }
    }
}

/// Parameters defining the stabilised energy matrix used by the solver.
#[derive(Clone, Debug)]
pub struct EnergyMatrixParams {
    pub alpha: f64,
    pub stabilizer: Stabilizer,
}

impl EnergyMatrixParams {
    pub fn new(alpha: f64, stabilizer: Stabilizer) -> Self {
        Self { alpha, stabilizer }
    }

    /// The default choice: `k = k_min` tabulated at the fixed nodes.
    pub fn minimal(density: &AnisotropyDensity, alpha: f64) -> Result<Self, StabilizerError> {
        Ok(Self::new(alpha, Stabilizer::Table(k_min_table(density, alpha)?)))
    }

    /// Evaluate the energy matrix at normal angle `theta`.
    pub fn matrix(&self, density: &AnisotropyDensity, theta: f64) -> Mat2 {
        energy_matrix(density, theta, self.alpha, self.stabilizer.eval(theta))
    }

    /// Check `k(theta_j) >= k_min(theta_j) - 1e-10` at the table nodes.
    ///
    /// Returns the worst violating `(theta, deficit)` if the stabiliser dips
    /// below the minimal one; callers are expected to warn, not refuse.
    pub fn min_stabilizer_deficit(
        &self,
        density: &AnisotropyDensity,
    ) -> Result<Option<(f64, f64)>, StabilizerError> {
        let table = k_min_table(density, self.alpha)?;
        let mut worst: Option<(f64, f64)> = None;
        for (theta, kmin) in table_nodes().iter().zip(table.values().iter()) {
            let deficit = kmin - self.stabilizer.eval(*theta);
            if deficit > 1e-10 && worst.map_or(true, |(_, w)| deficit > w) {
                worst = Some((*theta, deficit));
            }
        }
        Ok(worst)
    }
}

/// Theoretical upper bound on `k0(theta)` available when the stability
/// margin `c` is positive:
///
/// `k0 <= (A^2 + 4 gamma A + (alpha-1)^2 gamma'^2) / (4 gamma)` with
/// `A = pi^2/8 * (C_alpha * sup|gamma''| + (3|alpha|+2) |gamma'| + gamma + B)`,
/// `B = 2/c * (alpha+1)^2 gamma'^2`, and
/// `C_alpha = max(5, 4/pi^2 * (2|alpha|+1)^2)`.
pub fn k0_upper_bound(
    density: &AnisotropyDensity,
    alpha: f64,
    theta: f64,
) -> Result<f64, StabilizerError> {
    let c = stability_margin(density, 1024);
    if c <= 0.0 {
        return Err(StabilizerError::MarginNotPositive { margin: c });
    }
    const GRID: usize = 4096;
    let mut sup_gpp = 0.0_f64;
    for i in 0..GRID {
        let t = -PI + 2.0 * PI * i as f64 / GRID as f64;
        sup_gpp = sup_gpp.max(density.eval(t).2.abs());
    }
    let (g, gp, _) = density.eval(theta);
    let c_alpha = 5.0_f64.max(4.0 / (PI * PI) * (2.0 * alpha.abs() + 1.0).powi(2));
    let b = 2.0 / c * (alpha + 1.0).powi(2) * gp * gp;
    let a = PI * PI / 8.0 * (c_alpha * sup_gpp + (3.0 * alpha.abs() + 2.0) * gp.abs() + g + b);
    Ok((a * a + 4.0 * g * a + (alpha - 1.0).powi(2) * gp * gp) / (4.0 * g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force oracle for `k0`: supremum of the same ratio over one
    /// million uniform angles (no refinement), written independently of the
    /// production grid code.
    fn k0_brute_force(density: &AnisotropyDensity, alpha: f64, theta: f64) -> f64 {
        const SAMPLES: usize = 1_000_000;
        let g = density.gamma(theta);
        let gp = density.gamma_prime(theta);
        let mut sup = f64::NEG_INFINITY;
        for i in 0..SAMPLES {
            let phi = -PI + 2.0 * PI * i as f64 / SAMPLES as f64;
            let s = phi.sin();
            if s.abs() < 1e-6 {
                continue;
            }
            let q = density.gamma(theta - phi) + g * phi.cos() + alpha * gp * phi.sin();
            let p0 = g + 0.5 * (alpha - 1.0) * gp * (2.0 * phi).sin();
            sup = sup.max((q * q - 4.0 * g * p0) / (4.0 * g * s * s));
        }
        sup.max(0.0)
    }

    fn sample_densities() -> Vec<AnisotropyDensity> {
        vec![
            AnisotropyDensity::isotropic(),
            AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap(),
            AnisotropyDensity::m_fold(4, 1.0 / 12.0, PI / 6.0).unwrap(),
            AnisotropyDensity::case_two(),
            AnisotropyDensity::l4_norm(),
        ]
    }

    #[test]
    fn construction_rejects_non_positive_densities() {
        assert!(matches!(
            AnisotropyDensity::m_fold(3, 1.5, 0.0),
            Err(DensityError::MFoldBeta(_))
        ));
        assert!(matches!(
            AnisotropyDensity::m_fold(0, 0.1, 0.0),
            Err(DensityError::MFoldOrder)
        ));
        let err = AnisotropyDensity::custom("bad", Smoothness::Smooth, |t| (t.cos(), 0.0, 0.0));
        assert!(matches!(err, Err(DensityError::NonPositive { .. })));
    }

    #[test]
    fn gamma_values_match_closed_forms() {
        let iso = AnisotropyDensity::isotropic();
        assert_eq!(iso.eval(1.234), (1.0, 0.0, 0.0));

        let mf = AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap();
        assert_relative_eq!(mf.gamma(PI / 6.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(mf.gamma_prime(PI / 6.0), -1.0 / 3.0, epsilon = 1e-15);

        let c2 = AnisotropyDensity::case_two();
        // theta = pi/2 has n = (-1, 0): the n1 < 0 branch is identically 1.
        assert_relative_eq!(c2.gamma(PI / 2.0), 1.0, epsilon = 1e-15);
        // theta = -pi/2 has n = (1, 0): the n1 > 0 branch gives 2.
        assert_relative_eq!(c2.gamma(-PI / 2.0), 2.0, epsilon = 1e-15);

        let l4 = AnisotropyDensity::l4_norm();
        assert_relative_eq!(l4.gamma(0.0), 1.0, epsilon = 1e-15);
        assert_relative_eq!(l4.gamma(PI / 4.0), 0.5_f64.powf(0.25), epsilon = 1e-15);
    }

    #[test]
    fn case_two_jump_angles_take_left_limits() {
        let c2 = AnisotropyDensity::case_two();
        // gamma and gamma' are continuous across both jumps; gamma'' is not.
        let (g0, gp0, gpp0) = c2.eval(0.0);
        assert_relative_eq!(g0, 1.0, epsilon = 1e-12);
        assert!(gp0.abs() < 1e-12);
        assert_relative_eq!(gpp0, 3.0, epsilon = 1e-12);
        let (gpi, gppi, gpppi) = c2.eval(PI);
        assert_relative_eq!(gpi, 1.0, epsilon = 1e-12);
        assert!(gppi.abs() < 1e-12);
        assert!(gpppi.abs() < 1e-12);
        // Periodicity: -pi is the same angle as pi.
        assert_eq!(c2.eval(-PI), c2.eval(PI));
    }

    #[test]
    fn derivatives_match_finite_differences_for_smooth_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
        let h = 1e-5;
        for density in sample_densities() {
            if !matches!(density.smoothness(), Smoothness::Smooth) {
                continue;
            }
            for _ in 0..200 {
                let theta: f64 = rng.gen_range(-PI..PI);
                let (g, gp, gpp) = density.eval(theta);
                let gp_fd = (density.gamma(theta + h) - density.gamma(theta - h)) / (2.0 * h);
                let gpp_fd =
                    (density.gamma(theta + h) - 2.0 * g + density.gamma(theta - h)) / (h * h);
                assert!((gp - gp_fd).abs() < 1e-6, "{}: gamma' at {theta}", density.name());
                assert!((gpp - gpp_fd).abs() < 1e-4, "{}: gamma'' at {theta}", density.name());
            }
        }
    }

    #[test]
    fn xi_vector_projections_recover_gamma_and_its_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xB2);
        for density in sample_densities() {
            for _ in 0..1000 {
                let theta: f64 = rng.gen_range(-4.0 * PI..4.0 * PI);
                let xi = xi_vector(&density, theta);
                let (g, gp, _) = density.eval(theta);
                assert!((xi.dot(&normal(theta)) - g).abs() <= 1e-14);
                assert!((xi.dot(&tangent(theta)) + gp).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn xi_vector_example_three_fold() {
        let mf = AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap();
        let xi = xi_vector(&mf, PI / 6.0);
        // gamma = 1, gamma' = -1/3 at pi/6, so xi = n + tau/3.
        let expected = normal(PI / 6.0) + tangent(PI / 6.0) / 3.0;
        assert_relative_eq!(xi.x, expected.x, epsilon = 1e-14);
        assert_relative_eq!(xi.y, expected.y, epsilon = 1e-14);
    }

    #[test]
    fn energy_matrix_action_on_tangent_is_alpha_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
        for density in sample_densities() {
            for _ in 0..10_000 {
                let theta: f64 = rng.gen_range(-PI..PI);
                let alpha: f64 = rng.gen_range(-10.0..10.0);
                let k: f64 = rng.gen_range(-5.0..50.0);
                let m = energy_matrix(&density, theta, alpha, k);
                let (g, gp, _) = density.eval(theta);
                let want = g * tangent(theta) + gp * normal(theta);
                let got = m * tangent(theta);
                assert!((got - want).norm() <= 1e-13, "{}", density.name());
            }
        }
    }

    #[test]
    fn energy_matrix_forms_agree() {
        // The defining form gamma*I - n xi^T + alpha xi n^T + k n n^T must
        // match the expanded form used by `energy_matrix`.
        let mut rng = ChaCha8Rng::seed_from_u64(0xD4);
        for density in sample_densities() {
            for _ in 0..2000 {
                let theta: f64 = rng.gen_range(-PI..PI);
                let alpha: f64 = rng.gen_range(-10.0..10.0);
                let k: f64 = rng.gen_range(-5.0..50.0);
                let n = normal(theta);
                let xi = xi_vector(&density, theta);
                let g = density.gamma(theta);
                let defining = Mat2::identity() * g - n * xi.transpose()
                    + alpha * (xi * n.transpose())
                    + k * (n * n.transpose());
                let expanded = energy_matrix(&density, theta, alpha, k);
                let scale = 1.0_f64.max(expanded.norm());
                assert!((defining - expanded).norm() <= 1e-14 * scale);
            }
        }
    }

    #[test]
    fn energy_matrix_is_diagonal_at_theta_zero_for_m_fold() {
        for &(beta, alpha, k) in &[(1.0 / 9.0, 0.5, 0.7), (1.0 / 7.0, -1.0, 2.0), (0.3, 2.0, 0.0)] {
            let mf = AnisotropyDensity::m_fold(3, beta, 0.0).unwrap();
            let m = energy_matrix(&mf, 0.0, alpha, k);
            // gamma'(0) = 0, n = (0,1), tau = (1,0).
            assert_relative_eq!(m[(0, 0)], 1.0 + beta, epsilon = 1e-14);
            assert_relative_eq!(m[(1, 1)], (1.0 + beta) * alpha + k, epsilon = 1e-14);
            assert!(m[(0, 1)].abs() <= 1e-14 && m[(1, 0)].abs() <= 1e-14);
        }
    }

    #[test]
    fn isotropic_matrix_with_matching_stabiliser_is_identity() {
        let iso = AnisotropyDensity::isotropic();
        for alpha in [-2.0, -1.0, 0.0, 1.0, 3.0] {
            for i in 0..64 {
                let theta = -PI + 2.0 * PI * i as f64 / 64.0;
                let m = energy_matrix(&iso, theta, alpha, 1.0 - alpha);
                assert!((m - Mat2::identity()).norm() <= 1e-14);
            }
        }
    }

    #[test]
    fn aux_functions_match_hand_evaluations() {
        let mf = AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap();
        // At theta = pi/6: gamma = 1, gamma' = -1/3; alpha = -1, a = 2,
        // phi = pi/4 gives P = 1 + (-1)(-1/3) sin(pi/2) + 2 * 1/2 = 7/3.
        let p = aux_p(&mf, -1.0, 2.0, PI / 4.0, PI / 6.0);
        assert_relative_eq!(p, 7.0 / 3.0, epsilon = 1e-14);
        // Q(0, theta) = 2 gamma for any density and alpha.
        for density in sample_densities() {
            for theta in [0.3, -1.2, 2.9] {
                let q = aux_q(&density, 1.7, 0.0, theta);
                assert_relative_eq!(q, 2.0 * density.gamma(theta), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn stability_margin_matches_closed_form_for_three_fold() {
        // For gamma = 1 + beta cos(3 theta):
        // 3 gamma(theta) - gamma(theta - pi) = 2 + 4 beta cos(3 theta),
        // so the margin is exactly 2 - 4 beta.
        for beta in [1.0 / 9.0, 1.0 / 7.0, 0.3, 0.5] {
            let mf = AnisotropyDensity::m_fold(3, beta, 0.0).unwrap();
            let c = stability_margin(&mf, 1024);
            assert!((c - (2.0 - 4.0 * beta)).abs() <= 1e-8, "beta = {beta}: c = {c}");
        }
        let iso = AnisotropyDensity::isotropic();
        assert_relative_eq!(stability_margin(&iso, 256), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn isotropic_k0_is_zero_for_all_alpha() {
        let iso = AnisotropyDensity::isotropic();
        for alpha in [-2.0, -1.0, 0.0, 1.0, 3.0] {
            let k0 = k0_at(&iso, alpha, 0.37).value();
            assert!(k0.abs() <= 1e-8);
            let kmin = k_min_at(&iso, alpha, 0.37).value();
            assert!((kmin - (1.0 - alpha)).abs() <= 1e-8);
        }
    }

    #[test]
    fn k0_agrees_with_brute_force_oracle() {
        // Sparse spot-check here; the acceptance suite sweeps all 21 nodes
        // for three amplitudes.
        let mf = AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap();
        for theta in [-PI, -1.3, 0.0, 0.9, 2.2] {
            let k0 = k0_at(&mf, -1.0, theta).value();
            let oracle = k0_brute_force(&mf, -1.0, theta);
            assert!((k0 - oracle).abs() <= 1e-6, "theta = {theta}: {k0} vs {oracle}");
        }
        let c2 = AnisotropyDensity::case_two();
        for theta in [-2.0, 0.5] {
            let k0 = k0_at(&c2, 0.0, theta).value();
            let oracle = k0_brute_force(&c2, 0.0, theta);
            assert!((k0 - oracle).abs() <= 1e-6, "theta = {theta}: {k0} vs {oracle}");
        }
    }

    #[test]
    fn k0_definition_consistency_and_sharpness() {
        // With a = k0 the defining inequality 4 gamma P_a >= Q^2 holds on a
        // dense grid; shrinking a slightly breaks it whenever k0 > 0.
        let cases = [
            (AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap(), -1.0),
            (AnisotropyDensity::m_fold(3, 1.0 / 7.0, 0.0).unwrap(), 0.0),
            (AnisotropyDensity::case_two(), 1.0),
            (AnisotropyDensity::l4_norm(), -1.0),
        ];
        for (density, alpha) in cases {
            for theta in [-2.7, -0.4, 1.1, 3.0] {
                let k0 = k0_at(&density, alpha, theta).value();
                let g = density.gamma(theta);
                let margin = |a: f64| -> f64 {
                    let mut worst = f64::INFINITY;
                    for i in 0..20_000 {
                        let phi = -PI + 2.0 * PI * i as f64 / 20_000.0;
                        let p = aux_p(&density, alpha, a, phi, theta);
                        let q = aux_q(&density, alpha, phi, theta);
                        worst = worst.min(4.0 * g * p - q * q);
                    }
                    worst
                };
                assert!(
                    margin(k0) >= -1e-8,
                    "{} alpha={alpha} theta={theta}: not stabilising",
                    density.name()
                );
                if k0 > 0.0 {
                    let a = k0 * (1.0 - 1e-3) - 1e-6;
                    assert!(
                        margin(a) < 0.0,
                        "{} alpha={alpha} theta={theta}: not sharp",
                        density.name()
                    );
                }
            }
        }
    }

    #[test]
    fn k0_infinite_marker_at_strict_violation() {
        // beta = 3/5 violates 3 gamma >= gamma(.-pi): the margin is 2 - 12/5.
        let mf = AnisotropyDensity::m_fold(3, 0.6, 0.0).unwrap();
        assert!(stability_margin(&mf, 1024) < 0.0);
        // cos(3 theta) = -1 at theta = pi/3 is the deepest violation.
        for alpha in [-1.0, 0.0, 2.0] {
            assert_eq!(k0_at(&mf, alpha, PI / 3.0), StabilizerValue::Infinite);
        }
        // At an angle where the condition holds strictly, k0 stays finite.
        assert!(k0_at(&mf, 0.0, 0.0).is_finite());
    }

    #[test]
    fn k0_infinite_marker_at_equality_with_sloped_density() {
        // At theta* with 3 gamma(theta*) = gamma(theta* - pi) and
        // gamma'(theta*) != 0, no finite stabiliser exists unless alpha = -1.
        let mf = AnisotropyDensity::m_fold(3, 0.6, 0.0).unwrap();
        let theta_star = (-5.0_f64 / 6.0).acos() / 3.0;
        let gap = 3.0 * mf.gamma(theta_star) - mf.gamma(theta_star - PI);
        assert!(gap.abs() <= 1e-12);
        assert!(mf.gamma_prime(theta_star).abs() > 0.9);
        assert_eq!(k0_at(&mf, 0.0, theta_star), StabilizerValue::Infinite);
    }

    #[test]
    fn k0_stays_finite_at_critical_amplitude() {
        // beta = 1/2 has margin exactly 0, attained where gamma' also
        // vanishes, so every node still has a finite stabiliser.
        let mf = AnisotropyDensity::m_fold(3, 0.5, 0.0).unwrap();
        let table = k_min_table(&mf, -1.0).expect("critical amplitude is stabilisable");
        for v in table.values() {
            assert!(v.is_finite());
        }
    }

    #[test]
    fn k_min_table_interpolates_periodically() {
        let mf = AnisotropyDensity::m_fold(3, 1.0 / 7.0, 0.0).unwrap();
        let table = k_min_table(&mf, 0.0).unwrap();
        let nodes = table_nodes();
        for (j, theta) in nodes.iter().enumerate() {
            assert_relative_eq!(table.eval(*theta), table.values()[j], epsilon = 1e-12);
        }
        // Periodic: the two end nodes carry the same value, and evaluation
        // wraps.
        assert_relative_eq!(table.values()[0], table.values()[TABLE_NODES - 1], epsilon = 1e-12);
        for theta in [-2.9, -0.3, 1.7] {
            assert_relative_eq!(table.eval(theta), table.eval(theta + 2.0 * PI), epsilon = 1e-12);
            assert_relative_eq!(table.eval(theta), table.eval(theta - 2.0 * PI), epsilon = 1e-12);
        }
        // Midpoint of a segment is the average of its endpoints.
        let mid = 0.5 * (nodes[3] + nodes[4]);
        assert_relative_eq!(
            table.eval(mid),
            0.5 * (table.values()[3] + table.values()[4]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn k_min_table_round_trips_through_csv() {
        let mf = AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap();
        let table = k_min_table(&mf, -1.0).unwrap();
        let dir = std::env::temp_dir().join("sppfem-stabilizer-roundtrip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("kmin.csv");
        table.write_csv(&path).unwrap();
        let back = StabilizerTable::read_csv(&path).unwrap();
        assert_eq!(table, back);
    }

    #[test]
    fn upper_bound_matches_frozen_isotropic_value_and_dominates_k0() {
        let iso = AnisotropyDensity::isotropic();
        // c = 2, gamma = 1, derivatives vanish: A = pi^2/8 and the bound is
        // (A^2 + 4A)/4 = pi^4/256 + pi^2/8 = 1.6142...
        let bound = k0_upper_bound(&iso, -1.0, 0.0).unwrap();
        assert_relative_eq!(bound, PI.powi(4) / 256.0 + PI * PI / 8.0, epsilon = 1e-12);
        assert!((bound - 1.614_204_8).abs() < 1e-6);

        for (density, alphas) in [
            (AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap(), [-1.0, 0.0, 1.0]),
            (AnisotropyDensity::l4_norm(), [-1.0, 0.5, 2.0]),
        ] {
            for alpha in alphas {
                for theta in table_nodes() {
                    let k0 = k0_at(&density, alpha, theta).value();
                    let bound = k0_upper_bound(&density, alpha, theta).unwrap();
                    assert!(
                        k0 <= bound + 1e-9,
                        "{} alpha={alpha} theta={theta}: k0={k0} bound={bound}",
                        density.name()
                    );
                }
            }
        }
    }

    #[test]
    fn upper_bound_requires_positive_margin() {
        let mf = AnisotropyDensity::m_fold(3, 0.6, 0.0).unwrap();
        assert!(matches!(
            k0_upper_bound(&mf, 0.0, 0.0),
            Err(StabilizerError::MarginNotPositive { .. })
        ));
    }

    #[test]
    fn local_energy_estimate_holds_with_minimal_stabiliser() {
        // For random vector pairs p, q and k = k_min(theta_q):
        // 1/|q| * (G_k(theta_q) p) . (p - q) >= gamma(theta_p)|p| - gamma(theta_q)|q|.
        let mut rng = ChaCha8Rng::seed_from_u64(0xE5);
        let cases = [
            (AnisotropyDensity::m_fold(3, 1.0 / 9.0, 0.0).unwrap(), -1.0),
            (AnisotropyDensity::m_fold(3, 1.0 / 7.0, 0.0).unwrap(), 1.0),
            (AnisotropyDensity::l4_norm(), 0.0),
        ];
        for (density, alpha) in cases {
            for _ in 0..10_000 {
                let p = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                let q = Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if p.norm() < 1e-3 || q.norm() < 1e-3 {
                    continue;
                }
                // Normal angle of a tangent direction v: atan2(v_y, v_x).
                let theta_p = p.y.atan2(p.x);
                let theta_q = q.y.atan2(q.x);
                let k = k_min_at(&density, alpha, theta_q).value();
                let m = energy_matrix(&density, theta_q, alpha, k);
                let lhs = (m * p).dot(&(p - q)) / q.norm();
                let rhs = density.gamma(theta_p) * p.norm() - density.gamma(theta_q) * q.norm();
                assert!(
                    lhs >= rhs - 1e-8,
                    "{} alpha={alpha}: lhs={lhs} rhs={rhs}",
                    density.name()
                );
            }
        }
    }
}
