//! Factorized atomic-norm program with joint demodulation-error estimation.
//!
//! Each receiver's lifted variable `Θ_m` is parameterized as `Z_m Z_mᴴ` with
//! `Z_m = [W_m; w_m]`, so `U_m = W_m W_mᴴ`, `φ_m = W_m w_mᴴ` and
//! `ν_m = ‖w_m‖²`. Gradients are returned in the paired-real convention
//! `∂f/∂Re + i ∂f/∂Im`, so the directional derivative along `Δ` is
//! `Re⟨∇f, Δ⟩`.

use std::f64::consts::LN_2;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Duration;
use web_time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::model_order_from_factor;
use crate::structured_ops::{theta_blocks, FactorKernel, ThetaView};
use crate::waveform::{complex_noise, nearest_qpsk, ObservationSet};
use crate::{CMatrix, CVector};

/// Noise level assumed when forming `γ`, `η` for (near) noiseless data.
pub const DEFAULT_SIGMA_FLOOR: f64 = 1e-2;

/// Line-search halvings before giving up.
pub const MAX_STEP_REDUCTIONS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub gamma: f64,
    pub eta: f64,
    pub rho: f64,
    pub varpi: f64,
    pub epsilon: f64,
    /// Factor rank bound `L̄`.
    pub rank: usize,
    pub max_iter: usize,
    /// Step shrink factor `ϱ`.
    pub ls_shrink: f64,
    /// Sufficient-decrease constant `ϱ̄`.
    pub ls_armijo: f64,
    /// Re-demodulate when some receiver's model order exceeds this.
    pub redemod_trigger: usize,
    /// Total solves allowed, the first one included.
    pub max_redemod_rounds: usize,
    pub init_scale: f64,
    /// Eigenvalue ratio used for the model-order count.
    pub order_threshold: f64,
}

impl SolverConfig {
    /// Weights derived from the noise level, other constants at their defaults.
    /// `sigma` below `sigma_floor` is raised to it so the regularizers never vanish.
    pub fn from_noise(sigma: f64, sigma_floor: f64, n_b: usize, n_d: usize) -> Self {
        let s = sigma.max(sigma_floor);
        let log_n = ((n_b * n_d) as f64).ln();
        Self {
            gamma: s * (2.0 * log_n).sqrt(),
            eta: s * (n_d as f64 * log_n).sqrt(),
            rho: 5.0,
            varpi: 0.01,
            epsilon: 1e-6,
            rank: 10,
            max_iter: 2000,
            ls_shrink: 0.5,
            ls_armijo: 0.01,
            redemod_trigger: 6,
            max_redemod_rounds: 3,
            init_scale: 1e-2,
            order_threshold: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("rho", self.rho),
            ("varpi", self.varpi),
            ("epsilon", self.epsilon),
            ("init_scale", self.init_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.ls_shrink > 0.0 && self.ls_shrink < 1.0) {
            return Err(Error::Config(format!("ls_shrink must lie in (0, 1), got {}", self.ls_shrink)));
        }
        if !(self.ls_armijo > 0.0 && self.ls_armijo < 0.5) {
            return Err(Error::Config(format!("ls_armijo must lie in (0, 1/2), got {}", self.ls_armijo)));
        }
        if !(self.order_threshold > 0.0 && self.order_threshold < 1.0) {
            return Err(Error::Config("order_threshold must lie in (0, 1)".into()));
        }
        if self.rank == 0 || self.max_iter == 0 || self.max_redemod_rounds == 0 {
            return Err(Error::Config("rank, max_iter and max_redemod_rounds must be at least 1".into()));
        }
        Ok(())
    }
}

/// Solver variables; also used for gradients and search directions.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorState {
    pub z: Vec<CMatrix>,
    pub e: CVector,
}

impl FactorState {
    pub fn zeros(n: usize, rank: usize, num_receivers: usize) -> Self {
        Self { z: vec![CMatrix::zeros(n + 1, rank); num_receivers], e: DVector::zeros(n) }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, rank: usize, num_receivers: usize, scale: f64) -> Self {
        let z = (0..num_receivers).map(|_| complex_noise(rng, n + 1, rank, scale)).collect();
        let e = complex_noise(rng, n, 1, scale).column(0).into_owned();
        Self { z, e }
    }

    /// `Σ_m Re⟨A_m, B_m⟩ + Re⟨a, b⟩`.
    pub fn inner(&self, other: &Self) -> f64 {
        let z: f64 = self.z.iter().zip(&other.z).map(|(a, b)| a.dotc(b).re).sum();
        z + self.e.dotc(&other.e).re
    }

    pub fn norm_squared(&self) -> f64 {
        self.z.iter().map(|a| a.norm_squared()).sum::<f64>() + self.e.norm_squared()
    }

    /// `Σ_m ‖Z_m‖_F + ‖e‖₂`, the stopping measure when applied to a gradient.
    pub fn block_norm_sum(&self) -> f64 {
        self.z.iter().map(|a| a.norm()).sum::<f64>() + self.e.norm()
    }

    /// `self + mu · other`.
    pub fn step(&self, mu: f64, other: &Self) -> Self {
        let s = Complex64::new(mu, 0.0);
        Self {
            z: self.z.iter().zip(&other.z).map(|(a, b)| a + b * s).collect(),
            e: &self.e + &other.e * s,
        }
    }

    fn scaled(&self, mu: f64) -> Self {
        let s = Complex64::new(mu, 0.0);
        Self { z: self.z.iter().map(|a| a * s).collect(), e: &self.e * s }
    }

    fn sub(&self, other: &Self) -> Self {
        self.step(-1.0, other)
    }
}

/// `ϖ Σ log cosh(|e_n| / ϖ)`, computed in the overflow-free form
/// `x + log(1 + e^{−2x}) − log 2`.
pub fn smoothed_l1(e: &CVector, varpi: f64) -> f64 {
    e.iter().map(|z| varpi * log_cosh(z.norm() / varpi)).sum()
}

fn log_cosh(x: f64) -> f64 {
    x + (-2.0 * x).exp().ln_1p() - LN_2
}

/// Gradient of `smoothed_l1`; zero at `e_n = 0`.
pub fn smoothed_l1_gradient(e: &CVector, varpi: f64) -> CVector {
    e.map(|z| {
        let r = z.norm();
        if r == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            z * ((r / varpi).tanh() / r)
        }
    })
}

/// Individual objective terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveTerms {
    pub data: f64,
    pub trace: f64,
    pub nu: f64,
    pub sparsity: f64,
    pub penalty: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.data + self.trace + self.nu + self.sparsity + self.penalty
    }
}

/// Whether the error vector is optimized or frozen at zero (the convex
/// relaxation baseline, which also drops the sparsity term).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMode {
    Joint,
    Frozen,
}

type Spectra = Vec<Vec<Complex64>>;

/// Objective terms, optional gradient and the column spectra of each `W_m`.
struct Evaluation {
    terms: ObjectiveTerms,
    grad: Option<FactorState>,
    spectra: Vec<Spectra>,
}

/// Objective and gradient evaluation for fixed data `Y`, `b̂`.
pub struct Evaluator<'a> {
    y: &'a CMatrix,
    b_hat: &'a CVector,
    cfg: &'a SolverConfig,
    mode: ErrorMode,
    kernel: FactorKernel,
    n: usize,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        y: &'a CMatrix,
        b_hat: &'a CVector,
        n_b: usize,
        n_d: usize,
        cfg: &'a SolverConfig,
        mode: ErrorMode,
    ) -> Result<Self> {
        let n = n_b * n_d;
        if y.nrows() != n || b_hat.len() != n {
            return Err(Error::Dimension(format!(
                "Y is {}x{}, b̂ has {} entries, grid has {n}",
                y.nrows(),
                y.ncols(),
                b_hat.len()
            )));
        }
        Ok(Self { y, b_hat, cfg, mode, kernel: FactorKernel::new(n_b, n_d), n })
    }

    pub fn for_observations(obs: &'a ObservationSet, cfg: &'a SolverConfig, mode: ErrorMode) -> Result<Self> {
        Self::new(&obs.y, &obs.b_hat, obs.n_b, obs.n_d, cfg, mode)
    }

    pub fn num_receivers(&self) -> usize {
        self.y.ncols()
    }

    fn check(&self, state: &FactorState) {
        assert_eq!(state.z.len(), self.num_receivers(), "one factor per receiver");
        assert_eq!(state.e.len(), self.n, "error vector length");
    }

    fn symbols(&self, state: &FactorState) -> CVector {
        match self.mode {
            ErrorMode::Joint => self.b_hat + &state.e,
            ErrorMode::Frozen => self.b_hat.clone(),
        }
    }

    fn split<'z>(&self, z: &'z CMatrix) -> (nalgebra::DMatrixView<'z, Complex64>, nalgebra::DMatrixView<'z, Complex64>) {
        (z.rows(0, self.n), z.rows(self.n, 1))
    }

    pub fn objective(&self, state: &FactorState) -> ObjectiveTerms {
        self.evaluate(state, false).terms
    }

    pub fn value_and_gradient(&self, state: &FactorState) -> (ObjectiveTerms, FactorState) {
        let ev = self.evaluate(state, true);
        (ev.terms, ev.grad.expect("gradient requested"))
    }

    fn evaluate(&self, state: &FactorState, want_grad: bool) -> Evaluation {
        self.check(state);
        let cfg = self.cfg;
        let d = self.symbols(state);
        let inv_n = 1.0 / self.n as f64;
        let mut terms = ObjectiveTerms::default();
        let mut grad_z = Vec::with_capacity(state.z.len());
        let mut grad_e = CVector::zeros(self.n);
        let mut spectra = Vec::with_capacity(state.z.len());
        for (m, z) in state.z.iter().enumerate() {
            let (w_big, w_row) = self.split(z);
            let phi = w_big * w_row.adjoint();
            let residual = d.component_mul(&phi) - self.y.column(m);
            terms.data += 0.5 * residual.norm_squared();
            terms.trace += 0.5 * cfg.gamma * inv_n * w_big.norm_squared();
            terms.nu += 0.5 * cfg.gamma * w_row.norm_squared();
            let w_owned = w_big.into_owned();
            let sw = self.kernel.spectra(&w_owned);
            if !want_grad {
                terms.penalty += 0.5 * cfg.rho * self.kernel.penalty_with_spectra(&w_owned, &sw);
                spectra.push(sw);
                continue;
            }
            let (pen, product) = self.kernel.penalty_and_residual_product_with_spectra(&w_owned, &sw);
            spectra.push(sw);
            terms.penalty += 0.5 * cfg.rho * pen;

            let g = d.conjugate().component_mul(&residual);
            let mut gz = CMatrix::zeros(self.n + 1, z.ncols());
            let top = &w_owned * Complex64::new(cfg.gamma * inv_n, 0.0)
                + product * Complex64::new(2.0 * cfg.rho, 0.0)
                + &g * w_row;
            gz.rows_mut(0, self.n).copy_from(&top);
            let bottom = g.adjoint() * &w_owned + w_row * Complex64::new(cfg.gamma, 0.0);
            gz.rows_mut(self.n, 1).copy_from(&bottom);
            grad_z.push(gz);

            if self.mode == ErrorMode::Joint {
                grad_e += residual.component_mul(&phi.conjugate());
            }
        }
        if self.mode == ErrorMode::Joint {
            terms.sparsity = cfg.eta * smoothed_l1(&state.e, cfg.varpi);
            if want_grad {
                grad_e += smoothed_l1_gradient(&state.e, cfg.varpi) * Complex64::new(cfg.eta, 0.0);
            }
        }
        let grad = want_grad.then_some(FactorState { z: grad_z, e: grad_e });
        Evaluation { terms, grad, spectra }
    }

    /// `μ ↦ ζ(state + μ dir)` as a degree-6 polynomial in `μ` plus the
    /// sparsity term, which is evaluated directly.
    pub fn line_model(&self, state: &FactorState, dir: &FactorState) -> LineModel {
        let spectra = self.evaluate(state, false).spectra;
        self.line_model_with_spectra(state, dir, &spectra)
    }

    fn line_model_with_spectra(&self, state: &FactorState, dir: &FactorState, spectra: &[Spectra]) -> LineModel {
        self.check(state);
        self.check(dir);
        let cfg = self.cfg;
        let inv_n = 1.0 / self.n as f64;
        let d0 = self.symbols(state);
        let d1 = match self.mode {
            ErrorMode::Joint => dir.e.clone(),
            ErrorMode::Frozen => CVector::zeros(self.n),
        };
        let mut coeffs = [0.0; 7];
        for (m, (z, v)) in state.z.iter().zip(&dir.z).enumerate() {
            let (wb, wr) = self.split(z);
            let (vb, vr) = self.split(v);
            let phi0 = wb * wr.adjoint();
            let phi1 = wb * vr.adjoint() + vb * wr.adjoint();
            let phi2 = vb * vr.adjoint();
            let r = [
                d0.component_mul(&phi0) - self.y.column(m),
                d0.component_mul(&phi1) + d1.component_mul(&phi0),
                d0.component_mul(&phi2) + d1.component_mul(&phi1),
                d1.component_mul(&phi2),
            ];
            for a in 0..4 {
                for b in 0..4 {
                    coeffs[a + b] += 0.5 * r[a].dotc(&r[b]).re;
                }
            }
            let trace_w = 0.5 * cfg.gamma * inv_n;
            coeffs[0] += trace_w * wb.norm_squared();
            coeffs[1] += trace_w * 2.0 * wb.dotc(&vb).re;
            coeffs[2] += trace_w * vb.norm_squared();
            let nu_w = 0.5 * cfg.gamma;
            coeffs[0] += nu_w * wr.norm_squared();
            coeffs[1] += nu_w * 2.0 * wr.dotc(&vr).re;
            coeffs[2] += nu_w * vr.norm_squared();
            let pen = self.kernel.penalty_polynomial_with_spectra(&wb.into_owned(), &spectra[m], &vb.into_owned());
            for (k, p) in pen.iter().enumerate() {
                coeffs[k] += 0.5 * cfg.rho * p;
            }
        }
        let sparsity = match self.mode {
            ErrorMode::Joint => Some((state.e.clone(), dir.e.clone(), cfg.eta, cfg.varpi)),
            ErrorMode::Frozen => None,
        };
        LineModel { coeffs, sparsity }
    }
}

/// Objective restricted to a line; see [`Evaluator::line_model`].
#[derive(Debug, Clone)]
pub struct LineModel {
    coeffs: [f64; 7],
    sparsity: Option<(CVector, CVector, f64, f64)>,
}

impl LineModel {
    pub fn eval(&self, mu: f64) -> f64 {
        let poly = self.coeffs.iter().rev().fold(0.0, |acc, c| acc * mu + c);
        let sparse = match &self.sparsity {
            Some((e, g, eta, varpi)) => eta * smoothed_l1(&(e + g * Complex64::new(mu, 0.0)), *varpi),
            None => 0.0,
        };
        poly + sparse
    }
}

/// Hestenes–Stiefel direction update over all blocks jointly.
///
/// Returns the new direction and the `β̄` used. `β̄` is reset to zero (pure
/// steepest descent) when its denominator is below `1e−14` in magnitude or
/// when the resulting direction fails `−Re⟨∇, G⟩ > ϱ̄ ‖G‖²`, the slope the
/// sufficient-decrease test needs for small steps.
pub fn search_directions(
    grad: &FactorState,
    previous: Option<(&FactorState, &FactorState)>,
    armijo: f64,
) -> (FactorState, f64) {
    let steepest = grad.scaled(-1.0);
    let Some((prev_grad, prev_dir)) = previous else {
        return (steepest, 0.0);
    };
    let delta = grad.sub(prev_grad);
    let num = grad.inner(&delta);
    let den = prev_dir.inner(&delta);
    if den.abs() < 1e-14 || num == 0.0 {
        return (steepest, 0.0);
    }
    let beta = num / den;
    let dir = steepest.step(beta, prev_dir);
    let slope = -grad.inner(&dir);
    if !(slope > armijo * dir.norm_squared()) || !beta.is_finite() {
        return (steepest, 0.0);
    }
    (dir, beta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineStep {
    pub mu: f64,
    pub reductions: usize,
    /// Objective at the accepted point, evaluated directly.
    pub objective: f64,
}

/// Backtracking: the largest `μ = ϱ^k`, `k = 0..=60`, with
/// `ζ(x + μ d) ≤ ζ(x) − ϱ̄ μ ‖d‖²`.
///
/// Candidates are screened with the line polynomial and confirmed with a
/// direct objective evaluation; only the direct value decides acceptance.
pub fn line_search(eval: &Evaluator<'_>, state: &FactorState, dir: &FactorState, f0: f64) -> Result<LineStep> {
    let spectra = eval.evaluate(state, false).spectra;
    Ok(backtrack(eval, state, dir, f0, &spectra)?.0)
}

/// Backtracking that also returns the full evaluation at the accepted point.
fn backtrack(
    eval: &Evaluator<'_>,
    state: &FactorState,
    dir: &FactorState,
    f0: f64,
    spectra: &[Spectra],
) -> Result<(LineStep, Option<Evaluation>)> {
    let cfg = eval.cfg;
    let dir_sq = dir.norm_squared();
    if dir_sq == 0.0 {
        return Ok((LineStep { mu: 1.0, reductions: 0, objective: f0 }, None));
    }
    let model = eval.line_model_with_spectra(state, dir, spectra);
    let slack = 1e-9 * f0.abs().max(1.0);
    let mut mu = 1.0;
    for k in 0..=MAX_STEP_REDUCTIONS {
        let bound = f0 - cfg.ls_armijo * mu * dir_sq;
        if model.eval(mu) <= bound + slack {
            let ev = eval.evaluate(&state.step(mu, dir), true);
            let f = ev.terms.total();
            if f <= bound {
                return Ok((LineStep { mu, reductions: k, objective: f }, Some(ev)));
            }
        }
        mu *= cfg.ls_shrink;
    }
    Err(Error::LineSearchFailure { reductions: MAX_STEP_REDUCTIONS })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
}

/// One accepted step: objective before and after, step size, `‖d‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub before: f64,
    pub after: f64,
    pub mu: f64,
    pub dir_norm_sq: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub phi: CMatrix,
    pub e: CVector,
    pub factors: Vec<CMatrix>,
    /// Symbol estimate used in the final solve (refined after re-demodulation).
    pub b_hat: CVector,
    pub iterations: usize,
    pub wall_time: Duration,
    pub converged: bool,
    /// The line search failed on a steepest-descent direction before the
    /// tolerance was met (typically rounding-limited).
    pub stalled: bool,
    pub redemod_rounds: usize,
    pub model_orders: Vec<usize>,
    pub trace: Vec<TraceEntry>,
    pub steps: Vec<StepRecord>,
}

impl SolveReport {
    pub fn theta(&self, m: usize) -> ThetaView {
        theta_blocks(&self.factors[m])
    }

    pub fn final_grad_norm(&self) -> f64 {
        self.trace.last().map_or(f64::NAN, |t| t.grad_norm)
    }

    /// `trace.csv`, `phi_hat.csv`, `e_hat.csv` under `dir`.
    pub fn write_run_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join("trace.csv"))?;
        writeln!(f, "iter,objective,grad_norm")?;
        for t in &self.trace {
            writeln!(f, "{},{:e},{:e}", t.iter, t.objective, t.grad_norm)?;
        }
        let mut f = fs::File::create(dir.join("phi_hat.csv"))?;
        writeln!(f, "index,receiver,re,im")?;
        for m in 0..self.phi.ncols() {
            for (i, v) in self.phi.column(m).iter().enumerate() {
                writeln!(f, "{i},{m},{:e},{:e}", v.re, v.im)?;
            }
        }
        let mut f = fs::File::create(dir.join("e_hat.csv"))?;
        writeln!(f, "index,re,im")?;
        for (i, v) in self.e.iter().enumerate() {
            writeln!(f, "{i},{:e},{:e}", v.re, v.im)?;
        }
        Ok(())
    }
}

/// Runs the CGD iterations from `init` and packages the result.
pub fn run_cgd(eval: &Evaluator<'_>, init: FactorState) -> Result<SolveReport> {
    let cfg = eval.cfg;
    cfg.validate()?;
    let start = Instant::now();
    let mut state = init;
    if eval.mode == ErrorMode::Frozen {
        state.e.fill(Complex64::new(0.0, 0.0));
    }
    let first = eval.evaluate(&state, true);
    let mut f = first.terms.total();
    let mut spectra = first.spectra;
    let mut grad = first.grad.expect("gradient requested");
    let mut grad_norm = grad.block_norm_sum();
    let mut trace = vec![TraceEntry { iter: 0, objective: f, grad_norm }];
    let mut steps = Vec::new();
    let mut previous: Option<(FactorState, FactorState)> = None;
    let mut converged = grad_norm < cfg.epsilon;
    let mut stalled = false;
    let mut iterations = 0;

    while !converged && iterations < cfg.max_iter {
        let (dir, beta) =
            search_directions(&grad, previous.as_ref().map(|(g, d)| (g, d)), cfg.ls_armijo);
        let attempt = match backtrack(eval, &state, &dir, f, &spectra) {
            Err(Error::LineSearchFailure { .. }) if beta != 0.0 => {
                let steepest = grad.scaled(-1.0);
                backtrack(eval, &state, &steepest, f, &spectra).map(|r| (steepest, r))
            }
            other => other.map(|r| (dir, r)),
        };
        let (dir, (step, accepted)) = match attempt {
            Ok(x) => x,
            Err(Error::LineSearchFailure { .. }) => {
                stalled = true;
                break;
            }
            Err(e) => return Err(e),
        };
        state = state.step(step.mu, &dir);
        if eval.mode == ErrorMode::Frozen {
            state.e.fill(Complex64::new(0.0, 0.0));
        }
        let accepted = accepted.unwrap_or_else(|| eval.evaluate(&state, true));
        steps.push(StepRecord { before: f, after: step.objective, mu: step.mu, dir_norm_sq: dir.norm_squared() });
        f = accepted.terms.total();
        spectra = accepted.spectra;
        let new_grad = accepted.grad.expect("gradient requested");
        iterations += 1;
        grad_norm = new_grad.block_norm_sum();
        trace.push(TraceEntry { iter: iterations, objective: f, grad_norm });
        previous = Some((std::mem::replace(&mut grad, new_grad), dir));
        converged = grad_norm < cfg.epsilon;
    }

    let n = eval.n;
    let mut phi = CMatrix::zeros(n, state.z.len());
    let mut model_orders = Vec::with_capacity(state.z.len());
    for (m, z) in state.z.iter().enumerate() {
        let (wb, wr) = eval.split(z);
        phi.set_column(m, &(wb * wr.adjoint()).column(0));
        model_orders.push(model_order_from_factor(&wb.into_owned(), cfg.order_threshold));
    }
    Ok(SolveReport {
        phi,
        e: state.e,
        factors: state.z,
        b_hat: eval.b_hat.clone(),
        iterations,
        wall_time: start.elapsed(),
        converged,
        stalled,
        redemod_rounds: 1,
        model_orders,
        trace,
        steps,
    })
}

fn random_init<R: Rng + ?Sized>(obs: &ObservationSet, cfg: &SolverConfig, rng: &mut R) -> FactorState {
    FactorState::random(rng, obs.grid_len(), cfg.rank, obs.num_receivers(), cfg.init_scale)
}

/// Single CGD solve from a random start.
pub fn cgd_solve<R: Rng + ?Sized>(obs: &ObservationSet, cfg: &SolverConfig, rng: &mut R) -> Result<SolveReport> {
    obs.validate()?;
    let eval = Evaluator::for_observations(obs, cfg, ErrorMode::Joint)?;
    run_cgd(&eval, random_init(obs, cfg, rng))
}

/// Entrywise nearest-QPSK projection of `b̂ + ê`.
pub fn refine_demodulation(b_hat: &CVector, e_hat: &CVector) -> CVector {
    (b_hat + e_hat).map(nearest_qpsk)
}

/// CGD, then re-demodulate and re-solve while some receiver's model order
/// exceeds the trigger. Later rounds start from the previous factors with
/// the error vector reset to zero, since `b̃` already absorbs `ê`.
pub fn solve_with_redemodulation<R: Rng + ?Sized>(
    obs: &ObservationSet,
    cfg: &SolverConfig,
    rng: &mut R,
) -> Result<SolveReport> {
    obs.validate()?;
    let mut report = cgd_solve(obs, cfg, rng)?;
    let mut rounds = 1;
    let mut total_iters = report.iterations;
    let mut wall = report.wall_time;
    while rounds < cfg.max_redemod_rounds
        && report.model_orders.iter().copied().max().unwrap_or(0) > cfg.redemod_trigger
    {
        let b_tilde = refine_demodulation(&report.b_hat, &report.e);
        let eval = Evaluator::new(&obs.y, &b_tilde, obs.n_b, obs.n_d, cfg, ErrorMode::Joint)?;
        let init = FactorState { z: report.factors.clone(), e: DVector::zeros(obs.grid_len()) };
        report = run_cgd(&eval, init)?;
        rounds += 1;
        total_iters += report.iterations;
        wall += report.wall_time;
    }
    report.redemod_rounds = rounds;
    report.iterations = total_iters;
    report.wall_time = wall;
    Ok(report)
}

/// Convex-relaxation baseline: same machinery with `e` frozen at zero and
/// the sparsity term dropped; `γ̄` is `cfg.gamma`.
pub fn cr_solve<R: Rng + ?Sized>(obs: &ObservationSet, cfg: &SolverConfig, rng: &mut R) -> Result<SolveReport> {
    obs.validate()?;
    let eval = Evaluator::for_observations(obs, cfg, ErrorMode::Frozen)?;
    run_cgd(&eval, random_init(obs, cfg, rng))
}

/// `ζ` for observations `obs` in the joint mode.
pub fn objective(state: &FactorState, obs: &ObservationSet, cfg: &SolverConfig) -> Result<f64> {
    Ok(Evaluator::for_observations(obs, cfg, ErrorMode::Joint)?.objective(state).total())
}

pub fn grad_e(state: &FactorState, obs: &ObservationSet, cfg: &SolverConfig) -> Result<CVector> {
    Ok(Evaluator::for_observations(obs, cfg, ErrorMode::Joint)?.value_and_gradient(state).1.e)
}

pub fn grad_z(state: &FactorState, obs: &ObservationSet, cfg: &SolverConfig, m: usize) -> Result<CMatrix> {
    if m >= obs.num_receivers() {
        return Err(Error::Dimension(format!("receiver {m} of {}", obs.num_receivers())));
    }
    let (_, mut grad) = Evaluator::for_observations(obs, cfg, ErrorMode::Joint)?.value_and_gradient(state);
    Ok(grad.z.swap_remove(m))
}
