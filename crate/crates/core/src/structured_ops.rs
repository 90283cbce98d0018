//! Delay-Doppler atoms and the two-level (block) Toeplitz machinery.
//!
//! Index conventions: a vectorized grid has length `N_b N_d` with entry
//! `k * N_b + n` holding sub-carrier (delay) index `k` and block (Doppler)
//! index `n`. A matrix `U` over such vectors is viewed as `N_d × N_d` blocks
//! of size `N_b × N_b`; the "block lag" of entry `(k1 N_b + n1, k2 N_b + n2)`
//! is `i = k1 − k2` and its "entry lag" is `j = n1 − n2`.
//!
//! [`FactorKernel`] evaluates the same operators on a low-rank factor
//! `U = W Wᴴ` without materializing `U`, using zero-padded 2-D FFTs.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::{CMatrix, CVector};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// `a(τ, f) = conj(d(τ)) ⊗ s(f)`: entry `k N_b + n` is `e^{−i2πkτ} e^{i2πnf}`.
pub fn atom(tau: f64, doppler: f64, n_b: usize, n_d: usize) -> CVector {
    let mut a = DVector::zeros(n_b * n_d);
    for k in 0..n_d {
        for n in 0..n_b {
            let phase = 2.0 * PI * (n as f64 * doppler - k as f64 * tau);
            a[k * n_b + n] = Complex64::from_polar(1.0, phase);
        }
    }
    a
}

/// Number of entries sharing block lag `i` and entry lag `j`.
pub fn beta(n_b: usize, n_d: usize, i: isize, j: isize) -> usize {
    (n_b - j.unsigned_abs()) * (n_d - i.unsigned_abs())
}

/// Lag coefficients `Q` of a block-Toeplitz matrix, `(2N_b − 1) × (2N_d − 1)`.
/// Row `j + N_b − 1` holds entry lag `j`, column `i + N_d − 1` block lag `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToeplitzCoeffs {
    pub n_b: usize,
    pub n_d: usize,
    pub q: CMatrix,
}

impl ToeplitzCoeffs {
    pub fn zeros(n_b: usize, n_d: usize) -> Self {
        Self { n_b, n_d, q: DMatrix::zeros(2 * n_b - 1, 2 * n_d - 1) }
    }

    pub fn from_matrix(n_b: usize, n_d: usize, q: CMatrix) -> Self {
        assert_eq!((q.nrows(), q.ncols()), (2 * n_b - 1, 2 * n_d - 1), "lag matrix shape");
        Self { n_b, n_d, q }
    }

    /// Coefficient for block lag `i` and entry lag `j`.
    pub fn get(&self, i: isize, j: isize) -> Complex64 {
        self.q[self.index(i, j)]
    }

    pub fn set(&mut self, i: isize, j: isize, v: Complex64) {
        let idx = self.index(i, j);
        self.q[idx] = v;
    }

    fn index(&self, i: isize, j: isize) -> (usize, usize) {
        (
            (j + self.n_b as isize - 1) as usize,
            (i + self.n_d as isize - 1) as usize,
        )
    }

    pub fn lags(&self) -> impl Iterator<Item = (isize, isize)> {
        let (nb, nd) = (self.n_b as isize, self.n_d as isize);
        (1 - nd..nd).flat_map(move |i| (1 - nb..nb).map(move |j| (i, j)))
    }
}

/// `T(Q)`: block `(k1, k2)`, entry `(n1, n2)` equals `q_{k1−k2}(n1 − n2)`.
pub fn toeplitz_embed(q: &ToeplitzCoeffs) -> CMatrix {
    let (nb, nd) = (q.n_b, q.n_d);
    let n = nb * nd;
    DMatrix::from_fn(n, n, |r, c| {
        let (k1, n1) = (r / nb, r % nb);
        let (k2, n2) = (c / nb, c % nb);
        q.get(k1 as isize - k2 as isize, n1 as isize - n2 as isize)
    })
}

/// `P(U)`: average of `U` over each (block lag, entry lag) class.
pub fn toeplitz_project(u: &CMatrix, n_b: usize, n_d: usize) -> ToeplitzCoeffs {
    let mut out = ToeplitzCoeffs::zeros(n_b, n_d);
    let n = n_b * n_d;
    assert_eq!((u.nrows(), u.ncols()), (n, n), "U must be N_bN_d square");
    for c in 0..n {
        let (k2, n2) = (c / n_b, c % n_b);
        for r in 0..n {
            let (k1, n1) = (r / n_b, r % n_b);
            let (i, j) = (k1 as isize - k2 as isize, n1 as isize - n2 as isize);
            let idx = out.index(i, j);
            out.q[idx] += u[(r, c)];
        }
    }
    for (i, j) in out.lags().collect::<Vec<_>>() {
        let idx = out.index(i, j);
        out.q[idx] /= beta(n_b, n_d, i, j) as f64;
    }
    out
}

/// `‖T(P(U)) − U‖_F²`, evaluated by explicit re-embedding.
pub fn structure_penalty(u: &CMatrix, n_b: usize, n_d: usize) -> f64 {
    let projected = toeplitz_embed(&toeplitz_project(u, n_b, n_d));
    (projected - u).norm_squared()
}

/// Row/column (zero-based) of the `k`-th (zero-based) element of the lag
/// class `(i, j)`, following the ceiling-based enumeration: outer index over
/// blocks along the block diagonal, inner index along the entry diagonal.
fn diagonal_position(n_b: usize, i: isize, j: isize, k: usize) -> (usize, usize) {
    let run = n_b - j.unsigned_abs();
    // one-based: κ̄ = ⌈(k+1) / run⌉, κ̃ = (k+1) − (κ̄ − 1) run
    let kbar = (k + 1).div_ceil(run);
    let ktil = (k + 1) - (kbar - 1) * run;
    let (d1, d2) = if i >= 0 { (kbar + i as usize, kbar) } else { (kbar, kbar + i.unsigned_abs()) };
    let (b1, b2) = if j >= 0 { (ktil + j as usize, ktil) } else { (ktil, ktil + j.unsigned_abs()) };
    ((d1 - 1) * n_b + (b1 - 1), (d2 - 1) * n_b + (b2 - 1))
}

/// The lag-class vector `u_{i,j}` of length `β_{i,j}`.
pub fn diagonal_vector(u: &CMatrix, n_b: usize, n_d: usize, i: isize, j: isize) -> Vec<Complex64> {
    (0..beta(n_b, n_d, i, j)).map(|k| u[diagonal_position(n_b, i, j, k)]).collect()
}

/// `‖T(P(U)) − U‖_F²` as `Σ_{i,j} (u_{i,j}ᴴ u_{i,j} − |1ᵀ u_{i,j}|² / β_{i,j})`.
pub fn structure_penalty_by_diagonals(u: &CMatrix, n_b: usize, n_d: usize) -> f64 {
    let shape = ToeplitzCoeffs::zeros(n_b, n_d);
    shape
        .lags()
        .map(|(i, j)| {
            let v = diagonal_vector(u, n_b, n_d, i, j);
            let energy: f64 = v.iter().map(|z| z.norm_sqr()).sum();
            let sum: Complex64 = v.iter().sum();
            energy - sum.norm_sqr() / v.len() as f64
        })
        .sum()
}

/// `Π(U) = (ρ/2) Σ_{i,j} diag(2(u_{i,j} − mean(u_{i,j})), i, j)`: each lag
/// class's deviation from its mean, embedded back on its diagonal. This is
/// the gradient of `(ρ/2) ‖T(P(U)) − U‖_F²` with respect to `U`.
pub fn pi_operator(u: &CMatrix, n_b: usize, n_d: usize, rho: f64) -> CMatrix {
    let n = n_b * n_d;
    let mut out = DMatrix::zeros(n, n);
    let shape = ToeplitzCoeffs::zeros(n_b, n_d);
    for (i, j) in shape.lags() {
        let v = diagonal_vector(u, n_b, n_d, i, j);
        let mean = v.iter().sum::<Complex64>() / v.len() as f64;
        for (k, z) in v.iter().enumerate() {
            out[diagonal_position(n_b, i, j, k)] = (rho / 2.0) * 2.0 * (z - mean);
        }
    }
    out
}

/// Blocks of `Θ = Z Zᴴ`: top-left `U`, top-right column `φ`, corner `ν`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaView {
    pub u: CMatrix,
    pub phi: CVector,
    pub nu: f64,
}

pub fn theta_blocks(z: &CMatrix) -> ThetaView {
    let n = z.nrows() - 1;
    let theta = z * z.adjoint();
    ThetaView {
        u: theta.view((0, 0), (n, n)).into_owned(),
        phi: theta.view((0, n), (n, 1)).column(0).into_owned(),
        nu: theta[(n, n)].re,
    }
}

/// Matrix-free block-Toeplitz operators on factors `W` with `U = W Wᴴ`.
///
/// Columns are reshaped to `N_d × N_b` arrays and zero padded to
/// `2N_d × 2N_b`, which is large enough for circular correlation and
/// convolution to reproduce every linear lag in `(−N_d, N_d) × (−N_b, N_b)`.
pub struct FactorKernel {
    n_b: usize,
    n_d: usize,
    pad_b: usize,
    pad_d: usize,
    fwd_b: Arc<dyn Fft<f64>>,
    inv_b: Arc<dyn Fft<f64>>,
    fwd_d: Arc<dyn Fft<f64>>,
    inv_d: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FactorKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FactorKernel").field("n_b", &self.n_b).field("n_d", &self.n_d).finish()
    }
}

impl Clone for FactorKernel {
    fn clone(&self) -> Self {
        Self::new(self.n_b, self.n_d)
    }
}

impl FactorKernel {
    pub fn new(n_b: usize, n_d: usize) -> Self {
        let (pad_b, pad_d) = (2 * n_b, 2 * n_d);
        let mut planner = FftPlanner::new();
        Self {
            n_b,
            n_d,
            pad_b,
            pad_d,
            fwd_b: planner.plan_fft_forward(pad_b),
            inv_b: planner.plan_fft_inverse(pad_b),
            fwd_d: planner.plan_fft_forward(pad_d),
            inv_d: planner.plan_fft_inverse(pad_d),
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n_b, self.n_d)
    }

    fn padded_len(&self) -> usize {
        self.pad_b * self.pad_d
    }

    fn fft2(&self, data: &mut [Complex64], inverse: bool) {
        self.fft2_rows(data, inverse, self.pad_d);
    }

    /// 2-D FFT when only the first `active_rows` rows are nonzero.
    fn fft2_rows(&self, data: &mut [Complex64], inverse: bool, active_rows: usize) {
        let (fb, fd) = if inverse { (&self.inv_b, &self.inv_d) } else { (&self.fwd_b, &self.fwd_d) };
        // rows: contiguous runs of length pad_b
        fb.process(&mut data[..active_rows * self.pad_b]);
        self.column_pass(data, fd.as_ref());
    }

    fn column_pass(&self, data: &mut [Complex64], fd: &dyn Fft<f64>) {
        let mut column = vec![ZERO; self.pad_d];
        for c in 0..self.pad_b {
            for (r, slot) in column.iter_mut().enumerate() {
                *slot = data[r * self.pad_b + c];
            }
            fd.process(&mut column);
            for (r, v) in column.iter().enumerate() {
                data[r * self.pad_b + c] = *v;
            }
        }
    }

    /// Inverse 2-D FFT that is only read back on the first `N_d` rows.
    fn ifft2_head(&self, data: &mut [Complex64]) {
        self.column_pass(data, self.inv_d.as_ref());
        self.inv_b.process(&mut data[..self.n_d * self.pad_b]);
    }

    fn spectrum(&self, w: impl Iterator<Item = Complex64>) -> Vec<Complex64> {
        let mut buf = vec![ZERO; self.padded_len()];
        for (idx, v) in w.enumerate() {
            let (k, n) = (idx / self.n_b, idx % self.n_b);
            buf[k * self.pad_b + n] = v;
        }
        self.fft2_rows(&mut buf, false, self.n_d);
        buf
    }

    fn lag_slot(&self, i: isize, j: isize) -> usize {
        let r = i.rem_euclid(self.pad_d as isize) as usize;
        let c = j.rem_euclid(self.pad_b as isize) as usize;
        r * self.pad_b + c
    }

    /// Column spectra of `W` (one padded 2-D FFT per column).
    pub fn spectra(&self, w: &CMatrix) -> Vec<Vec<Complex64>> {
        w.column_iter().map(|col| self.spectrum(col.iter().copied())).collect()
    }

    /// `P(W Wᴴ)` from precomputed column spectra.
    pub fn project_from_spectra(&self, spectra: &[Vec<Complex64>]) -> ToeplitzCoeffs {
        let mut acc = vec![ZERO; self.padded_len()];
        for s in spectra {
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v.norm_sqr();
            }
        }
        self.fft2(&mut acc, true);
        let scale = 1.0 / self.padded_len() as f64;
        let mut out = ToeplitzCoeffs::zeros(self.n_b, self.n_d);
        for (i, j) in out.lags().collect::<Vec<_>>() {
            let b = beta(self.n_b, self.n_d, i, j) as f64;
            out.set(i, j, acc[self.lag_slot(i, j)] * (scale / b));
        }
        out
    }

    /// `P(W Wᴴ)`.
    pub fn project(&self, w: &CMatrix) -> ToeplitzCoeffs {
        self.project_from_spectra(&self.spectra(w))
    }

    /// `T(Q) W` using precomputed column spectra of `W`.
    pub fn apply_with_spectra(&self, q: &ToeplitzCoeffs, spectra: &[Vec<Complex64>]) -> CMatrix {
        let mut kernel = vec![ZERO; self.padded_len()];
        for (i, j) in q.lags() {
            kernel[self.lag_slot(i, j)] = q.get(i, j);
        }
        self.fft2(&mut kernel, false);
        let scale = 1.0 / self.padded_len() as f64;
        let n = self.n_b * self.n_d;
        let mut out = DMatrix::zeros(n, spectra.len());
        let mut buf = vec![ZERO; self.padded_len()];
        for (l, s) in spectra.iter().enumerate() {
            for ((b, x), h) in buf.iter_mut().zip(s).zip(&kernel) {
                *b = x * h;
            }
            self.ifft2_head(&mut buf);
            for idx in 0..n {
                let (k, nn) = (idx / self.n_b, idx % self.n_b);
                out[(idx, l)] = buf[k * self.pad_b + nn] * scale;
            }
        }
        out
    }

    /// `T(Q) W`.
    pub fn apply(&self, q: &ToeplitzCoeffs, w: &CMatrix) -> CMatrix {
        self.apply_with_spectra(q, &self.spectra(w))
    }

    /// `‖T(P(U)) − U‖_F²` for `U = W Wᴴ`, via `‖U‖_F² − Σ β |P(U)|²`.
    pub fn penalty(&self, w: &CMatrix) -> f64 {
        self.penalty_with_spectra(w, &self.spectra(w))
    }

    pub fn penalty_with_spectra(&self, w: &CMatrix, spectra: &[Vec<Complex64>]) -> f64 {
        let gram = w.adjoint() * w;
        penalty_from_parts(&gram, &self.project_from_spectra(spectra))
    }

    /// Penalty value and `(U − T(P(U))) W`.
    pub fn penalty_and_residual_product(&self, w: &CMatrix) -> (f64, CMatrix) {
        self.penalty_and_residual_product_with_spectra(w, &self.spectra(w))
    }

    pub fn penalty_and_residual_product_with_spectra(&self, w: &CMatrix, spectra: &[Vec<Complex64>]) -> (f64, CMatrix) {
        let gram = w.adjoint() * w;
        let q = self.project_from_spectra(spectra);
        let value = penalty_from_parts(&gram, &q);
        let product = w * &gram - self.apply_with_spectra(&q, spectra);
        (value, product)
    }

    /// Coefficients `c_k` (ascending powers) of the quartic
    /// `μ ↦ ‖T(P(U(μ))) − U(μ)‖_F²` with `U(μ) = (W + μV)(W + μV)ᴴ`.
    pub fn penalty_polynomial(&self, w: &CMatrix, v: &CMatrix) -> [f64; 5] {
        self.penalty_polynomial_with_spectra(w, &self.spectra(w), v)
    }

    pub fn penalty_polynomial_with_spectra(&self, w: &CMatrix, sw: &[Vec<Complex64>], v: &CMatrix) -> [f64; 5] {
        let sv = self.spectra(v);
        let len = self.padded_len();
        let mut lag = [vec![ZERO; len], vec![ZERO; len], vec![ZERO; len]];
        for (a, b) in sw.iter().zip(&sv) {
            for idx in 0..len {
                let (x, y) = (a[idx], b[idx]);
                lag[0][idx] += x.norm_sqr();
                lag[1][idx] += 2.0 * (x * y.conj()).re;
                lag[2][idx] += y.norm_sqr();
            }
        }
        for arr in lag.iter_mut() {
            self.fft2(arr, true);
        }
        let scale = 1.0 / len as f64;
        let mut projected = [0.0; 5];
        let shape = ToeplitzCoeffs::zeros(self.n_b, self.n_d);
        for (i, j) in shape.lags() {
            let slot = self.lag_slot(i, j);
            let s = [lag[0][slot] * scale, lag[1][slot] * scale, lag[2][slot] * scale];
            let weight = 1.0 / beta(self.n_b, self.n_d, i, j) as f64;
            add_square_poly(&mut projected, &s, weight, |a, b| (a * b.conj()).re);
        }
        let g0 = w.adjoint() * w;
        let cross = w.adjoint() * v;
        let g1 = &cross + cross.adjoint();
        let g2 = v.adjoint() * v;
        let mut gram = [0.0; 5];
        add_square_poly(&mut gram, &[g0, g1, g2], 1.0, |a, b| a.dotc(b).re);
        let mut out = [0.0; 5];
        for k in 0..5 {
            out[k] = gram[k] - projected[k];
        }
        out
    }
}

/// Adds `weight · ‖x_0 + μ x_1 + μ² x_2‖²` to `acc` given a real inner product.
fn add_square_poly<T>(acc: &mut [f64; 5], x: &[T; 3], weight: f64, inner: impl Fn(&T, &T) -> f64) {
    for a in 0..3 {
        for b in 0..3 {
            acc[a + b] += weight * inner(&x[a], &x[b]);
        }
    }
}

fn penalty_from_parts(gram: &CMatrix, q: &ToeplitzCoeffs) -> f64 {
    let projected: f64 = q
        .lags()
        .map(|(i, j)| beta(q.n_b, q.n_d, i, j) as f64 * q.get(i, j).norm_sqr())
        .sum();
    (gram.norm_squared() - projected).max(0.0)
}
