//! 2-D MUSIC extraction of delay-Doppler paths from the solver output.
//!
//! The signal subspace comes from `Û_m` (via its factor `W_m` when
//! available); the pseudospectrum `1 / ‖E_nᴴ a(τ, f)‖²` is scanned on an
//! oversampled periodic grid and its peaks are polished by Newton steps on
//! the denominator `n − ‖E_sᴴ a‖²`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::cgd_solver::SolveReport;
use crate::error::{Error, Result};
use crate::geometry::wrap_unit;
use crate::structured_ops::atom;
use crate::{CMatrix, CVector};

const MAX_CONDITION: f64 = 1e10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MusicConfig {
    pub oversample: usize,
    pub threshold: f64,
    pub newton_iters: usize,
    pub max_peaks: usize,
}

impl Default for MusicConfig {
    fn default() -> Self {
        Self { oversample: 4, threshold: 1e-3, newton_iters: 10, max_peaks: 16 }
    }
}

impl MusicConfig {
    pub fn validate(&self) -> Result<()> {
        if self.oversample < 2 {
            return Err(Error::Config("MUSIC oversampling must be at least 2".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("MUSIC eigenvalue threshold must lie in (0, 1)".into()));
        }
        if self.max_peaks == 0 {
            return Err(Error::Config("max_peaks must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub tau: f64,
    pub doppler: f64,
    pub gain: Complex64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReceiverEstimate {
    /// Sorted by `|ĉ|` descending.
    pub paths: Vec<PathEstimate>,
    /// Least-squares residual `‖φ̂ − A ĉ‖₂`.
    pub residual: f64,
}

impl ReceiverEstimate {
    pub fn order(&self) -> usize {
        self.paths.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DelayDopplerEstimate {
    pub receivers: Vec<ReceiverEstimate>,
}

impl DelayDopplerEstimate {
    pub fn max_order(&self) -> usize {
        self.receivers.iter().map(ReceiverEstimate::order).max().unwrap_or(0)
    }

    /// CSV with header `receiver,tau,f,re_c,im_c`.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "receiver,tau,f,re_c,im_c")?;
        for (m, rx) in self.receivers.iter().enumerate() {
            for p in &rx.paths {
                writeln!(w, "{m},{:.12},{:.12},{:e},{:e}", p.tau, p.doppler, p.gain.re, p.gain.im)?;
            }
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut receivers: Vec<ReceiverEstimate> = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 5 {
                return Err(Error::Format(format!("line {}: expected 5 fields", lineno + 1)));
            }
            let bad = |_| Error::Format(format!("line {}: bad number", lineno + 1));
            let m: usize = fields[0].parse().map_err(|_| Error::Format(format!("line {}: bad receiver", lineno + 1)))?;
            let nums: Vec<f64> = fields[1..].iter().map(|f| f.parse::<f64>().map_err(bad)).collect::<Result<_>>()?;
            if receivers.len() <= m {
                receivers.resize_with(m + 1, ReceiverEstimate::default);
            }
            receivers[m].paths.push(PathEstimate {
                tau: nums[0],
                doppler: nums[1],
                gain: Complex64::new(nums[2], nums[3]),
            });
        }
        Ok(Self { receivers })
    }
}

fn count_above(eigs: &[f64], threshold: f64) -> usize {
    let max = eigs.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0;
    }
    eigs.iter().filter(|&&l| l >= threshold * max).count()
}

/// Eigenvalue count of `U` at `threshold · λ_max`; zero for `U = 0`.
pub fn estimate_model_order(u: &CMatrix, cfg: &MusicConfig) -> usize {
    let eig = u.clone().symmetric_eigenvalues();
    count_above(eig.as_slice(), cfg.threshold)
}

/// Model order of `U = W Wᴴ` from the small Gram matrix `Wᴴ W`.
pub fn model_order_from_factor(w: &CMatrix, threshold: f64) -> usize {
    let eig = (w.adjoint() * w).symmetric_eigenvalues();
    count_above(eig.as_slice(), threshold)
}

fn sorted_eigen(m: CMatrix) -> (Vec<f64>, CMatrix) {
    let SymmetricEigen { eigenvalues, eigenvectors } = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    let vals = order.iter().map(|&i| eigenvalues[i]).collect();
    let vecs = CMatrix::from_columns(&order.iter().map(|&i| eigenvectors.column(i)).collect::<Vec<_>>());
    (vals, vecs)
}

/// Orthonormal basis of the dominant `order`-dimensional eigenspace of `U`.
pub fn signal_subspace(u: &CMatrix, order: usize) -> CMatrix {
    let (_, vecs) = sorted_eigen(u.clone());
    vecs.columns(0, order.min(vecs.ncols())).into_owned()
}

/// Same subspace computed from a factor `W` (`U = W Wᴴ`): `W v_k / √λ_k`.
pub fn signal_subspace_from_factor(w: &CMatrix, order: usize) -> CMatrix {
    let (vals, vecs) = sorted_eigen(w.adjoint() * w);
    let order = order.min(vals.iter().filter(|&&l| l > 0.0).count());
    let mut out = CMatrix::zeros(w.nrows(), order);
    for k in 0..order {
        let col = w * vecs.column(k) / Complex64::new(vals[k].sqrt(), 0.0);
        out.set_column(k, &col);
    }
    out
}

/// Spatially smoothed covariance from a single snapshot `φ̂`: averages the
/// outer products of all `sub_d × sub_b` sub-grids. Returns the covariance
/// over vectors of length `sub_b · sub_d` (same index layout as atoms).
pub fn smoothed_covariance(phi: &CVector, n_b: usize, n_d: usize, sub_b: usize, sub_d: usize) -> Result<CMatrix> {
    if sub_b == 0 || sub_d == 0 || sub_b > n_b || sub_d > n_d || phi.len() != n_b * n_d {
        return Err(Error::Dimension(format!(
            "sub-grid {sub_b}x{sub_d} of a {n_b}x{n_d} grid with {} samples",
            phi.len()
        )));
    }
    let len = sub_b * sub_d;
    let mut r = CMatrix::zeros(len, len);
    let mut count = 0.0;
    for k0 in 0..=(n_d - sub_d) {
        for n0 in 0..=(n_b - sub_b) {
            let x = CVector::from_fn(len, |idx, _| {
                let (k, n) = (idx / sub_b, idx % sub_b);
                phi[(k0 + k) * n_b + n0 + n]
            });
            r += &x * x.adjoint();
            count += 1.0;
        }
    }
    Ok(r / Complex64::new(count, 0.0))
}

/// Pseudospectrum denominator `n − ‖E_sᴴ a(τ, f)‖²` and its derivatives.
struct Denominator<'a> {
    es: &'a CMatrix,
    n_b: usize,
    n_d: usize,
}

impl Denominator<'_> {
    fn value(&self, tau: f64, f: f64) -> f64 {
        let a = atom(tau, f, self.n_b, self.n_d);
        let proj = self.es.adjoint() * a;
        (self.n_b * self.n_d) as f64 - proj.norm_squared()
    }

    /// Value, gradient and Hessian in `(τ, f)`.
    fn second_order(&self, tau: f64, f: f64) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        let a = atom(tau, f, self.n_b, self.n_d);
        let n = a.len();
        let kd = CVector::from_fn(n, |i, _| Complex64::new(0.0, -2.0 * PI * (i / self.n_b) as f64));
        let nb = CVector::from_fn(n, |i, _| Complex64::new(0.0, 2.0 * PI * (i % self.n_b) as f64));
        let a_t = a.component_mul(&kd);
        let a_f = a.component_mul(&nb);
        let a_tt = a_t.component_mul(&kd);
        let a_ff = a_f.component_mul(&nb);
        let a_tf = a_t.component_mul(&nb);
        let eh = self.es.adjoint();
        let (s, st, sf) = (&eh * &a, &eh * &a_t, &eh * &a_f);
        let (stt, sff, stf) = (&eh * &a_tt, &eh * &a_ff, &eh * &a_tf);
        let re = |x: &CVector, y: &CVector| x.dotc(y).re;
        let value = n as f64 - s.norm_squared();
        let grad = [-2.0 * re(&s, &st), -2.0 * re(&s, &sf)];
        let htt = -2.0 * (st.norm_squared() + re(&s, &stt));
        let hff = -2.0 * (sf.norm_squared() + re(&s, &sff));
        let htf = -2.0 * (re(&st, &sf) + re(&s, &stf));
        (value, grad, [[htt, htf], [htf, hff]])
    }
}

/// Denominator on the `(K_d = os·N_d) × (K_b = os·N_b)` grid, row-major in τ.
fn grid_denominator(es: &CMatrix, n_b: usize, n_d: usize, oversample: usize) -> (Vec<f64>, usize, usize) {
    let (kd, kb) = (oversample * n_d, oversample * n_b);
    let mut planner = FftPlanner::new();
    let fwd_tau = planner.plan_fft_forward(kd);
    let inv_f = planner.plan_fft_inverse(kb);
    let mut power = vec![0.0; kd * kb];
    let mut buf = vec![Complex64::new(0.0, 0.0); kd * kb];
    let mut column = vec![Complex64::new(0.0, 0.0); kd];
    for e in es.column_iter() {
        buf.fill(Complex64::new(0.0, 0.0));
        for (idx, v) in e.iter().enumerate() {
            let (k, n) = (idx / n_b, idx % n_b);
            buf[k * kb + n] = v.conj();
        }
        // Σ_n conj(e) e^{+i2πnq/K_b}: unnormalized inverse along rows
        inv_f.process(&mut buf);
        // Σ_k ... e^{−i2πkp/K_d}: forward along columns
        for q in 0..kb {
            for (p, slot) in column.iter_mut().enumerate() {
                *slot = buf[p * kb + q];
            }
            fwd_tau.process(&mut column);
            for (p, v) in column.iter().enumerate() {
                power[p * kb + q] += v.norm_sqr();
            }
        }
    }
    let n = (n_b * n_d) as f64;
    (power.into_iter().map(|p| n - p).collect(), kd, kb)
}

fn circular_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(1.0);
    d.min(1.0 - d)
}

/// Peak locations `(τ̂, f̂)` from an orthonormal signal-subspace basis.
pub fn music_from_subspace(es: &CMatrix, n_b: usize, n_d: usize, cfg: &MusicConfig) -> Result<Vec<(f64, f64)>> {
    cfg.validate()?;
    let order = es.ncols();
    let dim = n_b * n_d;
    if order >= dim {
        return Err(Error::DegenerateSubspace { order, dim });
    }
    if order == 0 {
        return Ok(Vec::new());
    }
    let (grid, kd, kb) = grid_denominator(es, n_b, n_d, cfg.oversample);
    let at = |p: isize, q: isize| grid[p.rem_euclid(kd as isize) as usize * kb + q.rem_euclid(kb as isize) as usize];
    let mut candidates = Vec::new();
    for p in 0..kd as isize {
        for q in 0..kb as isize {
            let v = at(p, q);
            let mut is_min = true;
            'nb: for dp in -1..=1isize {
                for dq in -1..=1isize {
                    if dp == 0 && dq == 0 {
                        continue;
                    }
                    let w = at(p + dp, q + dq);
                    // plateau ties go to the earliest grid index
                    let earlier = (p + dp, q + dq) < (p, q);
                    if w < v || (w == v && earlier) {
                        is_min = false;
                        break 'nb;
                    }
                }
            }
            if is_min {
                candidates.push((v, p as usize, q as usize));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let den = Denominator { es, n_b, n_d };
    let cell = (1.0 / kd as f64, 1.0 / kb as f64);
    let mut peaks: Vec<(f64, f64)> = Vec::new();
    for &(_, p, q) in candidates.iter().take(order.min(cfg.max_peaks)) {
        let (tau, f) = newton_refine(&den, p as f64 * cell.0, q as f64 * cell.1, cell, cfg.newton_iters);
        let dup = peaks
            .iter()
            .any(|&(t, g)| circular_distance(t, tau) < 1e-6 && circular_distance(g, f) < 1e-6);
        if !dup {
            peaks.push((tau, f));
        }
    }
    Ok(peaks)
}

fn newton_refine(den: &Denominator<'_>, mut tau: f64, mut f: f64, cell: (f64, f64), iters: usize) -> (f64, f64) {
    for _ in 0..iters {
        let (value, g, h) = den.second_order(tau, f);
        let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
        let mut step = if h[0][0] > 0.0 && det > 0.0 {
            [-(h[1][1] * g[0] - h[0][1] * g[1]) / det, -(h[0][0] * g[1] - h[1][0] * g[0]) / det]
        } else {
            // not locally convex: small gradient step
            let gn = (g[0] * g[0] + g[1] * g[1]).sqrt().max(f64::MIN_POSITIVE);
            [-0.25 * cell.0 * g[0] / gn, -0.25 * cell.1 * g[1] / gn]
        };
        // stay within half a grid cell per step
        let scale = (step[0].abs() / (0.5 * cell.0)).max(step[1].abs() / (0.5 * cell.1)).max(1.0);
        step = [step[0] / scale, step[1] / scale];
        let mut accepted = false;
        for _ in 0..20 {
            let (t2, f2) = (wrap_unit(tau + step[0]), wrap_unit(f + step[1]));
            if den.value(t2, f2) <= value {
                tau = t2;
                f = f2;
                accepted = true;
                break;
            }
            step = [step[0] / 2.0, step[1] / 2.0];
        }
        if !accepted || step[0].abs() + step[1].abs() < 1e-15 {
            break;
        }
    }
    (wrap_unit(tau), wrap_unit(f))
}

/// MUSIC on a covariance `U` with model order `order`.
pub fn music_extract(u: &CMatrix, order: usize, n_b: usize, n_d: usize, cfg: &MusicConfig) -> Result<Vec<(f64, f64)>> {
    let dim = n_b * n_d;
    if order >= dim {
        return Err(Error::DegenerateSubspace { order, dim });
    }
    music_from_subspace(&signal_subspace(u, order), n_b, n_d, cfg)
}

/// Least-squares gains of `φ ≈ Σ ĉ_ℓ a(τ̂_ℓ, f̂_ℓ)` and the residual norm.
pub fn estimate_gains(phi: &CVector, atoms: &[(f64, f64)], n_b: usize, n_d: usize) -> Result<(Vec<Complex64>, f64)> {
    if atoms.is_empty() {
        return Ok((Vec::new(), phi.norm()));
    }
    let cols: Vec<CVector> = atoms.iter().map(|&(t, f)| atom(t, f, n_b, n_d)).collect();
    let a = DMatrix::from_columns(&cols);
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { (smax / smin).powi(2) } else { f64::INFINITY };
    if cond > MAX_CONDITION {
        return Err(Error::IllConditioned(cond));
    }
    let c = svd.solve(phi, 0.0).map_err(|e| Error::Dimension(e.to_string()))?;
    let residual = (phi - &a * &c).norm();
    Ok((c.iter().copied().collect(), residual))
}

/// Keeps the `l` largest-`|ĉ|` paths; ties broken by `(τ̂, f̂)`.
pub fn select_top_l(paths: &[PathEstimate], l: usize) -> Vec<PathEstimate> {
    let mut out = paths.to_vec();
    sort_paths(&mut out);
    out.truncate(l);
    out
}

fn sort_paths(paths: &mut [PathEstimate]) {
    paths.sort_by(|a, b| {
        b.gain
            .norm()
            .total_cmp(&a.gain.norm())
            .then(a.tau.total_cmp(&b.tau))
            .then(a.doppler.total_cmp(&b.doppler))
    });
}

/// Peaks plus least-squares gains; drops the weakest peaks while the atom
/// Gram matrix is ill-conditioned.
pub fn paths_from_peaks(phi: &CVector, mut peaks: Vec<(f64, f64)>, n_b: usize, n_d: usize) -> Result<ReceiverEstimate> {
    loop {
        match estimate_gains(phi, &peaks, n_b, n_d) {
            Ok((gains, residual)) => {
                let mut paths: Vec<PathEstimate> = peaks
                    .iter()
                    .zip(gains)
                    .map(|(&(tau, doppler), gain)| PathEstimate { tau, doppler, gain })
                    .collect();
                sort_paths(&mut paths);
                return Ok(ReceiverEstimate { paths, residual });
            }
            Err(Error::IllConditioned(_)) if peaks.len() > 1 => {
                peaks.pop();
            }
            Err(e) => return Err(e),
        }
    }
}

/// Per-receiver extraction from a solver report, using the factor subspace.
pub fn extract_from_report(report: &SolveReport, n_b: usize, n_d: usize, cfg: &MusicConfig) -> Result<DelayDopplerEstimate> {
    let n = n_b * n_d;
    let mut receivers = Vec::with_capacity(report.factors.len());
    for (m, z) in report.factors.iter().enumerate() {
        let w = z.rows(0, n).into_owned();
        let order = model_order_from_factor(&w, cfg.threshold);
        let es = signal_subspace_from_factor(&w, order);
        let peaks = music_from_subspace(&es, n_b, n_d, cfg)?;
        let phi = report.phi.column(m).into_owned();
        receivers.push(paths_from_peaks(&phi, peaks, n_b, n_d)?);
    }
    Ok(DelayDopplerEstimate { receivers })
}

/// Alternative extraction from `φ̂` alone via a smoothed covariance over
/// `⌈N_b/2⌉ × ⌈N_d/2⌉` sub-grids.
pub fn extract_from_phi(phi: &CVector, n_b: usize, n_d: usize, cfg: &MusicConfig) -> Result<ReceiverEstimate> {
    let (sub_b, sub_d) = (n_b.div_ceil(2), n_d.div_ceil(2));
    let r = smoothed_covariance(phi, n_b, n_d, sub_b, sub_d)?;
    let order = estimate_model_order(&r, cfg).min(sub_b * sub_d - 1);
    let peaks = music_extract(&r, order, sub_b, sub_d, cfg)?;
    paths_from_peaks(phi, peaks, n_b, n_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn gram_of(atoms: &[(f64, f64, Complex64)], nb: usize, nd: usize) -> CMatrix {
        let n = nb * nd;
        let mut u = CMatrix::zeros(n, n);
        for &(t, f, g) in atoms {
            let a = atom(t, f, nb, nd);
            u += &a * a.adjoint() * c(g.norm(), 0.0);
        }
        u
    }

    fn close(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
        circular_distance(a.0, b.0) < tol && circular_distance(a.1, b.1) < tol
    }

    #[test]
    fn model_order_cases() {
        let cfg = MusicConfig::default();
        let u = gram_of(&[(0.1, 0.2, c(1.0, 0.0)), (0.6, 0.7, c(0.0, 2.0))], 8, 8);
        assert_eq!(estimate_model_order(&u, &cfg), 2);
        assert_eq!(estimate_model_order(&CMatrix::zeros(16, 16), &cfg), 0);
        assert_eq!(estimate_model_order(&CMatrix::identity(16, 16), &cfg), 16);
        let w = CMatrix::from_columns(&[atom(0.1, 0.2, 8, 8), atom(0.6, 0.7, 8, 8) * c(2.0, 0.0)]);
        assert_eq!(model_order_from_factor(&w, 1e-3), 2);
    }

    #[test]
    fn factor_subspace_spans_dense_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = CMatrix::from_fn(16, 3, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let u = &w * w.adjoint();
        let a = signal_subspace(&u, 3);
        let b = signal_subspace_from_factor(&w, 3);
        let pa = &a * a.adjoint();
        let pb = &b * b.adjoint();
        assert!((pa - pb).norm() < 1e-10);
    }

    #[test]
    fn single_atom_recovered_off_grid() {
        let cfg = MusicConfig::default();
        let u = gram_of(&[(0.3, 0.7, c(1.0, 0.0))], 8, 8);
        let peaks = music_extract(&u, 1, 8, 8, &cfg).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!(close(peaks[0], (0.3, 0.7), 1e-6), "{peaks:?}");
        let u = gram_of(&[(0.3137, 0.7093, c(1.0, 0.0))], 8, 8);
        let peaks = music_extract(&u, 1, 8, 8, &cfg).unwrap();
        assert!(close(peaks[0], (0.3137, 0.7093), 1e-6), "{peaks:?}");
    }

    #[test]
    fn atom_at_origin() {
        let u = gram_of(&[(0.0, 0.0, c(1.0, 0.0))], 8, 8);
        let peaks = music_extract(&u, 1, 8, 8, &MusicConfig::default()).unwrap();
        assert!(close(peaks[0], (0.0, 0.0), 1e-9), "{peaks:?}");
    }

    #[test]
    fn separated_atoms_recovered() {
        let sep = 4.76 / 64.0;
        let truth = [(0.2, 0.4), (0.2 + sep, 0.4 + sep), (0.75, 0.1)];
        let atoms: Vec<_> = truth.iter().map(|&(t, f)| (t, f, c(1.0, 0.3))).collect();
        let u = gram_of(&atoms, 8, 8);
        let peaks = music_extract(&u, 3, 8, 8, &MusicConfig::default()).unwrap();
        assert_eq!(peaks.len(), 3);
        for t in truth {
            assert!(peaks.iter().any(|&p| close(p, t, 1e-4)), "{t:?} not in {peaks:?}");
        }
    }

    #[test]
    fn degenerate_subspace_rejected() {
        let u = CMatrix::identity(4, 4);
        assert!(matches!(
            music_extract(&u, 4, 2, 2, &MusicConfig::default()),
            Err(Error::DegenerateSubspace { order: 4, dim: 4 })
        ));
    }

    #[test]
    fn gains_by_least_squares() {
        let phi = atom(0.3, 0.7, 8, 8) * c(2.5, 0.0);
        let (g, res) = estimate_gains(&phi, &[(0.3, 0.7)], 8, 8).unwrap();
        assert!((g[0] - c(2.5, 0.0)).norm() < 1e-10);
        assert!(res < 1e-10);
        let (g, _) = estimate_gains(&CVector::zeros(64), &[(0.3, 0.7)], 8, 8).unwrap();
        assert_eq!(g[0], c(0.0, 0.0));

        let truth = [(0.1, 0.2, c(1.0, 0.5)), (0.45, 0.8, c(-0.7, 0.2)), (0.8, 0.5, c(0.0, 1.0))];
        let mut phi = CVector::zeros(256);
        for &(t, f, g) in &truth {
            phi += atom(t, f, 16, 16) * g;
        }
        let atoms: Vec<_> = truth.iter().map(|&(t, f, _)| (t, f)).collect();
        let (g, _) = estimate_gains(&phi, &atoms, 16, 16).unwrap();
        for (got, want) in g.iter().zip(truth.iter().map(|t| t.2)) {
            assert!((got - want).norm() <= 1e-8 * want.norm());
        }
        assert!(matches!(
            estimate_gains(&phi, &[(0.1, 0.2), (0.1, 0.2)], 16, 16),
            Err(Error::IllConditioned(_))
        ));
    }

    #[test]
    fn select_top_l_rules() {
        let p = |g: f64, tau: f64| PathEstimate { tau, doppler: 0.0, gain: c(g, 0.0) };
        let paths = [p(3.0, 0.1), p(1.0, 0.2), p(2.0, 0.3)];
        let top = select_top_l(&paths, 2);
        assert_eq!(top.iter().map(|x| x.gain.re).collect::<Vec<_>>(), vec![3.0, 2.0]);
        assert_eq!(select_top_l(&paths[..1], 5).len(), 1);
        let tied = [p(1.0, 0.5), p(1.0, 0.2), p(1.0, 0.9)];
        let top = select_top_l(&tied, 2);
        assert_eq!(top.iter().map(|x| x.tau).collect::<Vec<_>>(), vec![0.2, 0.5]);
    }

    #[test]
    fn phi_fallback_recovers_atoms() {
        let truth = [(0.2, 0.3, c(1.0, 0.0)), (0.6, 0.75, c(0.5, 0.5))];
        let mut phi = CVector::zeros(256);
        for &(t, f, g) in &truth {
            phi += atom(t, f, 16, 16) * g;
        }
        let est = extract_from_phi(&phi, 16, 16, &MusicConfig::default()).unwrap();
        assert_eq!(est.order(), 2);
        for &(t, f, g) in &truth {
            let hit = est.paths.iter().find(|p| close((p.tau, p.doppler), (t, f), 1e-6)).expect("atom found");
            assert!((hit.gain - g).norm() < 1e-6);
        }
    }

    #[test]
    fn csv_roundtrip() {
        let est = DelayDopplerEstimate {
            receivers: vec![
                ReceiverEstimate { paths: vec![PathEstimate { tau: 0.25, doppler: 0.5, gain: c(1.0, -2.0) }], residual: 0.0 },
                ReceiverEstimate::default(),
                ReceiverEstimate { paths: vec![PathEstimate { tau: 0.125, doppler: 0.0, gain: c(0.5, 0.0) }], residual: 0.0 },
            ],
        };
        let mut buf = Vec::new();
        est.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("receiver,tau,f,re_c,im_c\n"));
        let back = DelayDopplerEstimate::read_csv(&text).unwrap();
        assert_eq!(back.receivers.len(), 3);
        assert_eq!(back.receivers[0].paths, est.receivers[0].paths);
        assert_eq!(back.receivers[2].paths, est.receivers[2].paths);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Up to three atoms, pairwise separated by at least `4.76/(N_b N_d)` on both axes.
    fn separated_atoms(seed: u64, count: usize) -> Vec<(f64, f64, Complex64)> {
        let sep = 4.76 / 64.0;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out: Vec<(f64, f64, Complex64)> = Vec::new();
        while out.len() < count {
            let (t, f) = (rng.gen::<f64>(), rng.gen::<f64>());
            if out.iter().all(|a| circular_distance(a.0, t) >= sep && circular_distance(a.1, f) >= sep) {
                let g = Complex64::from_polar(rng.gen_range(0.5..2.0), rng.gen_range(0.0..std::f64::consts::TAU));
                out.push((t, f, g));
            }
        }
        out
    }

    fn gram(atoms: &[(f64, f64, Complex64)]) -> CMatrix {
        let mut u = CMatrix::zeros(64, 64);
        for &(t, f, g) in atoms {
            let a = atom(t, f, 8, 8);
            u += &a * a.adjoint() * Complex64::new(g.norm(), 0.0);
        }
        u
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn music_recovers_separated_atoms(seed in any::<u64>(), count in 1usize..=3) {
            let atoms = separated_atoms(seed, count);
            let u = gram(&atoms);
            let cfg = MusicConfig::default();
            let peaks = music_extract(&u, count, 8, 8, &cfg).unwrap();
            prop_assert_eq!(peaks.len(), count);
            for &(t, f, _) in &atoms {
                prop_assert!(
                    peaks.iter().any(|p| circular_distance(p.0, t) < 1e-4 && circular_distance(p.1, f) < 1e-4),
                    "({}, {}) not in {:?}", t, f, peaks
                );
            }
            prop_assert_eq!(music_extract(&u, count, 8, 8, &cfg).unwrap(), peaks);
        }

        #[test]
        fn gains_exact_on_noiseless_mixtures(seed in any::<u64>(), count in 1usize..=3) {
            let atoms = separated_atoms(seed, count);
            let mut phi = CVector::zeros(64);
            for &(t, f, g) in &atoms {
                phi += atom(t, f, 8, 8) * g;
            }
            let locs: Vec<_> = atoms.iter().map(|a| (a.0, a.1)).collect();
            let (gains, _) = estimate_gains(&phi, &locs, 8, 8).unwrap();
            for (got, a) in gains.iter().zip(&atoms) {
                prop_assert!((got - a.2).norm() <= 1e-8 * a.2.norm());
            }
        }
    }
}
