//! Banded SPD storage and Cholesky, block-diagonal Hessians, and the spectral
//! diagnostics used for the `[[A, v], [vᵀ, α]]` Hessian blocks.

use nalgebra::{DMatrix, DVector, DVectorView};
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

/// Symmetric matrix with only the lower band stored, packed column by column:
/// entry `(i, j)` with `j ≤ i ≤ j + kd` lives at `j * (kd + 1) + (i - j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BandedSpd {
    order: usize,
    half_bandwidth: usize,
    band: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(order: usize, half_bandwidth: usize) -> Self {
        Self { order, half_bandwidth, band: vec![0.0; order * (half_bandwidth + 1)] }
    }

    pub fn identity(order: usize, half_bandwidth: usize) -> Self {
        let mut m = Self::zeros(order, half_bandwidth);
        for i in 0..order {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Copies the lower band of a dense symmetric matrix.
    pub fn from_dense(m: &DMatrix<f64>, half_bandwidth: usize) -> Self {
        assert!(m.is_square());
        let mut b = Self::zeros(m.nrows(), half_bandwidth);
        for j in 0..m.ncols() {
            for i in j..(j + half_bandwidth + 1).min(m.nrows()) {
                b.set(i, j, m[(i, j)]);
            }
        }
        b
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn half_bandwidth(&self) -> usize {
        self.half_bandwidth
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        (i - j <= self.half_bandwidth && i < self.order)
            .then_some(j * (self.half_bandwidth + 1) + (i - j))
    }

    /// Symmetric access; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |k| self.band[k])
    }

    /// Sets `(i, j)` and, implicitly, `(j, i)`.
    ///
    /// Panics if the entry lies outside the band.
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        let k = self.slot(i, j).unwrap_or_else(|| {
            panic!("({i}, {j}) outside half-bandwidth {}", self.half_bandwidth)
        });
        self.band[k] = value;
    }

    pub fn add(&mut self, i: usize, j: usize, value: f64) {
        let k = self.slot(i, j).unwrap_or_else(|| {
            panic!("({i}, {j}) outside half-bandwidth {}", self.half_bandwidth)
        });
        self.band[k] += value;
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.order, self.order, |i, j| self.get(i, j))
    }

    /// Largest `|i - j|` over nonzero stored entries.
    pub fn occupied_bandwidth(&self) -> usize {
        let mut w = 0;
        for j in 0..self.order {
            for d in 0..=self.half_bandwidth.min(self.order - 1 - j) {
                if self.band[j * (self.half_bandwidth + 1) + d] != 0.0 {
                    w = w.max(d);
                }
            }
        }
        w
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.order);
        let mut y = DVector::zeros(self.order);
        let kd = self.half_bandwidth;
        for j in 0..self.order {
            let col = &self.band[j * (kd + 1)..];
            y[j] += col[0] * x[j];
            for d in 1..=kd.min(self.order - 1 - j) {
                let a = col[d];
                y[j + d] += a * x[j];
                y[j] += a * x[j + d];
            }
        }
        y
    }

    /// Band Cholesky `M = L Lᵀ`. The factor occupies the same band as `M`.
    pub fn cholesky(&self) -> Result<BandedCholesky> {
        let n = self.order;
        let kd = self.half_bandwidth;
        let mut l = self.band.clone();
        let w = kd + 1;
        for j in 0..n {
            let last = (j + kd).min(n - 1);
            let mut diag = l[j * w];
            for k in j.saturating_sub(kd)..j {
                let ljk = l[k * w + (j - k)];
                diag -= ljk * ljk;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite { pivot: j, value: diag });
            }
            let djj = diag.sqrt();
            l[j * w] = djj;
            for i in (j + 1)..=last {
                let mut s = l[j * w + (i - j)];
                // L[i,k] nonzero needs i - k ≤ kd; L[j,k] needs j - k ≤ kd.
                for k in i.saturating_sub(kd)..j {
                    s -= l[k * w + (i - k)] * l[k * w + (j - k)];
                }
                l[j * w + (i - j)] = s / djj;
            }
        }
        Ok(BandedCholesky {
            factor: BandedSpd { order: n, half_bandwidth: kd, band: l },
        })
    }
}

/// Lower band Cholesky factor of a [`BandedSpd`].
#[derive(Debug, Clone, PartialEq)]
pub struct BandedCholesky {
    factor: BandedSpd,
}

impl BandedCholesky {
    pub fn order(&self) -> usize {
        self.factor.order
    }

    pub fn half_bandwidth(&self) -> usize {
        self.factor.half_bandwidth
    }

    /// Dense lower-triangular `L`.
    pub fn to_dense_lower(&self) -> DMatrix<f64> {
        let n = self.order();
        DMatrix::from_fn(n, n, |i, j| if i >= j { self.factor.get(i, j) } else { 0.0 })
    }

    /// Nonzero entries of `L`.
    pub fn nnz(&self) -> usize {
        self.factor.band.iter().filter(|v| **v != 0.0).count()
    }

    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.order();
        let kd = self.half_bandwidth();
        let w = kd + 1;
        let l = &self.factor.band;
        assert_eq!(b.len(), n);
        // L y = b
        for j in 0..n {
            b[j] /= l[j * w];
            let bj = b[j];
            for d in 1..=kd.min(n - 1 - j) {
                b[j + d] -= l[j * w + d] * bj;
            }
        }
        // Lᵀ x = y
        for j in (0..n).rev() {
            let mut s = b[j];
            for d in 1..=kd.min(n - 1 - j) {
                s -= l[j * w + d] * b[j + d];
            }
            b[j] = s / l[j * w];
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        self.solve_in_place(x.as_mut_slice());
        x
    }
}

/// Block-diagonal Hessian with `N` symmetric blocks of order `n + 1`, block `i` acting on
/// `(x₀ⁱ, tᵢ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagHessian {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockDiagHessian {
    pub fn identity(segments: usize, n: usize) -> Self {
        Self { blocks: vec![DMatrix::identity(n + 1, n + 1); segments] }
    }

    pub fn zeros(segments: usize, n: usize) -> Self {
        Self { blocks: vec![DMatrix::zeros(n + 1, n + 1); segments] }
    }

    pub fn segments(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_order(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.nrows())
    }

    pub fn order(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.order());
        let mut y = DVector::zeros(x.len());
        let mut off = 0;
        for b in &self.blocks {
            let k = b.nrows();
            let xs = x.rows(off, k);
            y.rows_mut(off, k).gemv(1.0, b, &xs, 0.0);
            off += k;
        }
        y
    }

    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&self.mul_vec(x))
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let k = self.order();
        let mut m = DMatrix::zeros(k, k);
        let mut off = 0;
        for b in &self.blocks {
            m.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
            off += b.nrows();
        }
        m
    }

    /// Largest `|B - Bᵀ|` entry over all blocks.
    pub fn asymmetry(&self) -> f64 {
        self.blocks.iter().map(|b| (b - b.transpose()).amax()).fold(0.0, f64::max)
    }

    pub fn symmetrize(&mut self) {
        for b in &mut self.blocks {
            let s = (&*b + b.transpose()) * 0.5;
            *b = s;
        }
    }
}

/// Spectrum of `[[0, v], [vᵀ, α]]`: `n - 1` zeros plus `λ± = (α ± √(α² + 4vᵀv)) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroBlockSpectrum {
    pub zero_count: usize,
    pub lambda_plus: f64,
    pub lambda_minus: f64,
}

impl ZeroBlockSpectrum {
    /// All `n + 1` eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev = vec![0.0; self.zero_count];
        ev.push(self.lambda_plus);
        ev.push(self.lambda_minus);
        ev.sort_by(f64::total_cmp);
        ev
    }
}

pub fn block_eigs_zero_a(v: DVectorView<'_, f64>, alpha: f64) -> ZeroBlockSpectrum {
    assert!(!v.is_empty(), "block needs n >= 1");
    let vtv = v.norm_squared();
    let root = (alpha * alpha + 4.0 * vtv).sqrt();
    // Cancellation-free pair: λ+ λ- = -vᵀv.
    let (plus, minus) = if alpha >= 0.0 {
        let p = 0.5 * (alpha + root);
        (p, if p == 0.0 { 0.0 } else { -vtv / p })
    } else {
        let m = 0.5 * (alpha - root);
        (if m == 0.0 { 0.0 } else { -vtv / m }, m)
    };
    ZeroBlockSpectrum { zero_count: v.len() - 1, lambda_plus: plus, lambda_minus: minus }
}

/// Counts of positive, negative and zero eigenvalues.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

/// Inertia of `[[A, v], [vᵀ, α]]` for definite `A`, via the Schur complement `α - vᵀA⁻¹v`.
pub fn block_inertia(a: &DMatrix<f64>, v: &DVector<f64>, alpha: f64) -> Result<Inertia> {
    let n = a.nrows();
    dim_check(a.is_square() && v.len() == n, || {
        format!("block_inertia: A is {}x{}, v has length {}", a.nrows(), a.ncols(), v.len())
    })?;
    let (sign, chol) = if let Some(c) = a.clone().cholesky() {
        (1.0, c)
    } else if let Some(c) = (-a).cholesky() {
        (-1.0, c)
    } else {
        return Err(Error::Indefinite);
    };
    // A⁻¹ = sign · (sign A)⁻¹
    let schur = alpha - sign * v.dot(&chol.solve(v));
    let mut inertia = if sign > 0.0 {
        Inertia { positive: n, negative: 0, zero: 0 }
    } else {
        Inertia { positive: 0, negative: n, zero: 0 }
    };
    if schur.abs() <= 1e-12 * (1.0 + alpha.abs()) {
        inertia.zero += 1;
    } else if schur > 0.0 {
        inertia.positive += 1;
    } else {
        inertia.negative += 1;
    }
    Ok(inertia)
}

/// Singular values in descending order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Dimension of the null space: columns minus the number of singular values above
/// `rel_tol · σ_max`.
pub fn numerical_nullity(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    let sv = singular_values(m);
    let smax = sv.first().copied().unwrap_or(0.0);
    let rank = sv.iter().filter(|s| **s > rel_tol * smax).count();
    m.ncols() - rank
}

/// Relative threshold used for numerical rank decisions.
pub const RANK_REL_TOL: f64 = 1e-8;
