//! Linear solves for the implicit time steps.
//!
//! The Newton systems couple each node only to its two neighbours around the
//! loop, so they are periodic block-tridiagonal.  They are solved directly:
//! the last node is split off as a dense border, the remaining banded matrix
//! is factored by LU with partial pivoting (LAPACK band layout), and the
//! border is recovered through a small Schur complement.  A rank-one wrapper
//! (Sherman-Morrison) covers the area-conserving flow's Lagrange-multiplier
//! coupling, which is dense but rank one.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub(crate) enum LinalgError {
    #[error("matrix is numerically singular at column {0}")]
    Singular(usize),
}

/// Banded matrix in LAPACK `dgbtrf` storage: entry `(i, j)` lives at
/// `ab[j * ldab + kl + ku + i - j]`, with `kl` extra super-diagonals of
/// head-room for pivoting fill.
pub(crate) struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![0.0; ldab * n],
        }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.n && j < self.n);
        debug_assert!(i + self.ku >= j && j + self.kl >= i, "({i},{j}) outside band");
        j * self.ldab + self.kl + self.ku + i - j
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let at = self.idx(i, j);
        self.ab[at] += v;
    }

    /// Entry `(i, j)`, zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i < self.n && j < self.n && i + self.ku >= j && j + self.kl >= i {
            self.ab[j * self.ldab + self.kl + self.ku + i - j]
        } else {
            0.0
        }
    }

    /// LU factorisation with partial pivoting (unblocked `dgbtf2`).
    pub fn factor(mut self) -> Result<BandedLu, LinalgError> {
        let (n, kl, ku, ldab) = (self.n, self.kl, self.ku, self.ldab);
        let kv = kl + ku;
        let mut ipiv = vec![0usize; n];
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            // Pivot search down column j.
            let mut jp = 0;
            let mut best = self.ab[j * ldab + kv].abs();
            for t in 1..=km {
                let a = self.ab[j * ldab + kv + t].abs();
                if a > best {
                    best = a;
                    jp = t;
                }
            }
            ipiv[j] = j + jp;
            if best == 0.0 {
                return Err(LinalgError::Singular(j));
            }
            let ju = (j + ku + kl).min(n - 1);
            if jp != 0 {
                for k in j..=ju {
                    let a = k * ldab + kv + (j + jp) - k;
                    let b = k * ldab + kv + j - k;
                    self.ab.swap(a, b);
                }
            }
            if km > 0 {
                let pivot = self.ab[j * ldab + kv];
                for t in 1..=km {
                    self.ab[j * ldab + kv + t] /= pivot;
                }
                for k in (j + 1)..=ju {
                    let akj = self.ab[k * ldab + kv + j - k];
                    if akj != 0.0 {
                        for t in 1..=km {
                            self.ab[k * ldab + kv + j + t - k] -=
                                self.ab[j * ldab + kv + t] * akj;
                        }
                    }
                }
            }
        }
        Ok(BandedLu {
            n,
            kl,
            ku,
            ldab,
            ab: self.ab,
            ipiv,
        })
    }
}

/// Factored banded matrix; solves overwrite the right-hand side.
pub(crate) struct BandedLu {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<f64>,
    ipiv: Vec<usize>,
}

impl BandedLu {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        let kv = self.kl + self.ku;
        // Forward: apply row swaps and the unit-lower-triangular multipliers.
        for j in 0..self.n {
            if self.ipiv[j] != j {
                b.swap(j, self.ipiv[j]);
            }
            let km = self.kl.min(self.n - 1 - j);
            let bj = b[j];
            if bj != 0.0 {
                for t in 1..=km {
                    b[j + t] -= self.ab[j * self.ldab + kv + t] * bj;
                }
            }
        }
        // Backward: U x = y, with U's upper bandwidth ku + kl after pivoting.
        for j in (0..self.n).rev() {
            b[j] /= self.ab[j * self.ldab + kv];
            let bj = b[j];
            if bj != 0.0 {
                let top = j.saturating_sub(kv);
                for i in top..j {
                    b[i] -= self.ab[j * self.ldab + kv + i - j] * bj;
                }
            }
        }
    }
}

/// Periodic block-tridiagonal matrix: `n_nodes` nodes of `block` unknowns,
/// each node coupled only to itself and its two loop neighbours.  Unknown
/// `(node, comp)` has flat index `node * block + comp`.
pub(crate) struct PeriodicBlockTridiagonal {
    n_nodes: usize,
    block: usize,
    interior: BandedMatrix,
    right: DMatrix<f64>,
    bottom: DMatrix<f64>,
    corner: DMatrix<f64>,
}

impl PeriodicBlockTridiagonal {
    pub fn zeros(n_nodes: usize, block: usize) -> Self {
        assert!(n_nodes >= 3, "periodic structure needs at least 3 nodes");
        let m = (n_nodes - 1) * block;
        let band = 2 * block - 1;
        Self {
            n_nodes,
            block,
            interior: BandedMatrix::zeros(m, band, band),
            right: DMatrix::zeros(m, block),
            bottom: DMatrix::zeros(block, m),
            corner: DMatrix::zeros(block, block),
        }
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_nodes * self.block
    }

    /// Accumulate `v` into the coupling of unknown `(node_i, comp_i)` with
    /// `(node_j, comp_j)`; `node_j` must be `node_i` or a loop neighbour.
    pub fn add(&mut self, node_i: usize, comp_i: usize, node_j: usize, comp_j: usize, v: f64) {
        let n = self.n_nodes;
        debug_assert!(comp_i < self.block && comp_j < self.block);
        debug_assert!(
            node_j == node_i || node_j == (node_i + 1) % n || node_j == (node_i + n - 1) % n,
            "coupling ({node_i},{node_j}) is not block-tridiagonal"
        );
        let last = n - 1;
        let b = self.block;
        match (node_i == last, node_j == last) {
            (false, false) => self
                .interior
                .add(node_i * b + comp_i, node_j * b + comp_j, v),
            (false, true) => self.right[(node_i * b + comp_i, comp_j)] += v,
            (true, false) => self.bottom[(comp_i, node_j * b + comp_j)] += v,
            (true, true) => self.corner[(comp_i, comp_j)] += v,
        }
    }

    /// Expand to a dense matrix (small systems: oracle tests, inspection).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let total = self.n_nodes * self.block;
        let m = (self.n_nodes - 1) * self.block;
        let mut dense = DMatrix::zeros(total, total);
        for i in 0..m {
            for j in i.saturating_sub(2 * self.block - 1)..(i + 2 * self.block).min(m) {
                dense[(i, j)] = self.interior.get(i, j);
            }
        }
        for i in 0..m {
            for c in 0..self.block {
                dense[(i, m + c)] = self.right[(i, c)];
                dense[(m + c, i)] = self.bottom[(c, i)];
            }
        }
        for r in 0..self.block {
            for c in 0..self.block {
                dense[(m + r, m + c)] = self.corner[(r, c)];
            }
        }
        dense
    }

    pub fn factor(self) -> Result<PeriodicFactor, LinalgError> {
        let lu = self.interior.factor()?;
        // A^{-1} B, one banded solve per border column.
        let m = self.right.nrows();
        let b = self.block;
        let mut right_solved = self.right;
        for c in 0..b {
            let mut col: Vec<f64> = (0..m).map(|r| right_solved[(r, c)]).collect();
            lu.solve_in_place(&mut col);
            for r in 0..m {
                right_solved[(r, c)] = col[r];
            }
        }
        // Schur complement D - C A^{-1} B, factored dense.
        let schur = (&self.corner - &self.bottom * &right_solved).lu();
        if !schur.is_invertible() {
            return Err(LinalgError::Singular(m));
        }
        Ok(PeriodicFactor {
            n_nodes: self.n_nodes,
            block: b,
            lu,
            right_solved,
            bottom: self.bottom,
            schur,
        })
    }
}

pub(crate) struct PeriodicFactor {
    n_nodes: usize,
    block: usize,
    lu: BandedLu,
    right_solved: DMatrix<f64>,
    bottom: DMatrix<f64>,
    schur: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl PeriodicFactor {
    /// Solve in place; `rhs` is ordered `(node, comp)` flat.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let b = self.block;
        let m = (self.n_nodes - 1) * b;
        assert_eq!(rhs.len(), m + b);
        let (interior_rhs, border_rhs) = rhs.split_at_mut(m);
        self.lu.solve_in_place(interior_rhs);
        // Border unknowns from the Schur system.
        let mut s = DVector::from_column_slice(border_rhs);
        s -= &self.bottom * DVector::from_column_slice(interior_rhs);
        let border = self.schur.solve(&s).expect("factor() checked invertibility");
        for i in 0..m {
            let mut acc = interior_rhs[i];
            for c in 0..b {
                acc -= self.right_solved[(i, c)] * border[c];
            }
            interior_rhs[i] = acc;
        }
        border_rhs.copy_from_slice(border.as_slice());
    }
}

/// Sherman-Morrison solve for `(M + u v^T) x = r` given a factored `M`.
pub(crate) struct RankOneCorrected {
    base: PeriodicFactor,
    u_solved: Vec<f64>,
    v: Vec<f64>,
    denom: f64,
}

impl RankOneCorrected {
    pub fn new(base: PeriodicFactor, u: Vec<f64>, v: Vec<f64>) -> Result<Self, LinalgError> {
        let mut u_solved = u;
        base.solve_in_place(&mut u_solved);
        let denom = 1.0 + dot(&v, &u_solved);
        if denom == 0.0 || !denom.is_finite() {
            return Err(LinalgError::Singular(0));
        }
        Ok(Self {
            base,
            u_solved,
            v,
            denom,
        })
    }

    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        self.base.solve_in_place(rhs);
        let scale = dot(&self.v, rhs) / self.denom;
        for (x, u) in rhs.iter_mut().zip(self.u_solved.iter()) {
            *x -= scale * u;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}
