//! Cross-receiver association, TDOA position solves and velocity recovery.
//!
//! Receiver indices are zero-based; receiver 0 is the TDOA reference.

use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{delay_differences_from_normalized, unwrap_signed, GeometryConfig, Point3, TimingConfig, Velocity3};
use crate::spectral::{DelayDopplerEstimate, PathEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub multistarts: usize,
    /// Per-equation residual (m) below which a group solution is accepted.
    pub residual_tol: f64,
    pub clutter_speed: f64,
    pub max_lm_iters: usize,
    /// Relative `|ĉ|` window treated as a tie during association. Wide enough
    /// that two unresolved paths interfering in one cell do not reorder ranks.
    pub gain_tie: f64,
    /// Weight of circular Doppler distance against `|ln(|ĉ_m| / |ĉ_ref|)|`
    /// when breaking ties.
    pub doppler_weight: f64,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self { multistarts: 8, residual_tol: 1.0, clutter_speed: 3.0, max_lm_iters: 100, gain_tie: 0.35, doppler_weight: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AssociationTable {
    /// `rows[ℓ][m]` indexes receiver `m`'s path list.
    pub rows: Vec<Vec<usize>>,
    /// Set when a Doppler tie-break was decided by less than `1/(2N_b)`.
    pub ambiguous: bool,
}

fn doppler_distance(a: f64, b: f64) -> f64 {
    unwrap_signed(a - b).abs()
}

/// Greedy matching in descending-gain order. For each reference path, every
/// other receiver contributes its strongest unused path; paths within the
/// relative gain window of that strongest one compete on gain mismatch to
/// the reference path plus weighted circular Doppler distance. A moving
/// target's Doppler differs between receivers, so neither cue alone is safe.
pub fn associate_across_receivers(
    est: &DelayDopplerEstimate,
    n_b: usize,
    cfg: &LocalizeConfig,
) -> Result<AssociationTable> {
    let receivers = &est.receivers;
    if receivers.is_empty() || receivers.iter().any(|r| r.paths.is_empty()) {
        return Err(Error::Config("association needs at least one path per receiver".into()));
    }
    let count = receivers.iter().map(|r| r.paths.len()).min().unwrap_or(0);
    let mut used: Vec<Vec<bool>> = receivers.iter().map(|r| vec![false; r.paths.len()]).collect();
    let mut table = AssociationTable::default();
    let ambiguity = 1.0 / (2.0 * n_b as f64);
    for l in 0..count {
        let reference: &PathEstimate = &receivers[0].paths[l];
        used[0][l] = true;
        let mut row = vec![l];
        for (m, rx) in receivers.iter().enumerate().skip(1) {
            let free: Vec<usize> = (0..rx.paths.len()).filter(|&i| !used[m][i]).collect();
            let top = free
                .iter()
                .map(|&i| rx.paths[i].gain.norm())
                .fold(0.0, f64::max);
            let ref_gain = reference.gain.norm();
            let mut window: Vec<(f64, f64, usize)> = free
                .iter()
                .filter(|&&i| rx.paths[i].gain.norm() >= (1.0 - cfg.gain_tie) * top)
                .map(|&i| {
                    let p = &rx.paths[i];
                    let df = doppler_distance(p.doppler, reference.doppler);
                    ((p.gain.norm() / ref_gain).ln().abs() + cfg.doppler_weight * df, df, i)
                })
                .collect();
            window.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
            if window.len() > 1 && (window[1].1 - window[0].1).abs() < ambiguity {
                log::warn!(
                    "ambiguous association at receiver {m} for path {l}: Doppler distances {:.4} and {:.4}",
                    window[0].1,
                    window[1].1
                );
                table.ambiguous = true;
            }
            let pick = window[0].2;
            used[m][pick] = true;
            row.push(pick);
        }
        table.rows.push(row);
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionEstimate {
    pub position: Point3,
    pub feasible: bool,
    /// RMS of all `M − 1` range-difference residuals at `position` (m).
    pub residual: f64,
    pub groups_used: usize,
}

/// Range-difference residuals `d_m − ‖p_m − x‖ + ‖p_0 − x‖` for receivers `ms`.
fn residuals(geom: &GeometryConfig, d: &[f64], ms: &[usize], x: Point3) -> Vec<f64> {
    let r0 = geom.receivers[0].distance(x);
    ms.iter().map(|&m| d[m - 1] - geom.receivers[m].distance(x) + r0).collect()
}

fn unit(v: Point3) -> Vector3<f64> {
    let n = v.norm();
    if n == 0.0 {
        Vector3::zeros()
    } else {
        Vector3::new(v.x / n, v.y / n, v.z / n)
    }
}

/// Levenberg–Marquardt on three range-difference equations.
fn lm_solve(geom: &GeometryConfig, d: &[f64], ms: &[usize; 3], start: Point3, max_iters: usize) -> Point3 {
    let mut x = start;
    let cost = |x: Point3| residuals(geom, d, ms, x).iter().map(|r| r * r).sum::<f64>();
    let mut f = cost(x);
    let mut lambda = 1e-3;
    for _ in 0..max_iters {
        let r = residuals(geom, d, ms, x);
        let u0 = unit(x - geom.receivers[0]);
        let mut j = Matrix3::zeros();
        for (row, &m) in ms.iter().enumerate() {
            let g = u0 - unit(x - geom.receivers[m]);
            j.set_row(row, &g.transpose());
        }
        let rv = Vector3::new(r[0], r[1], r[2]);
        let jtj = j.transpose() * j;
        let jtr = j.transpose() * rv;
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj;
            for k in 0..3 {
                a[(k, k)] += lambda * (jtj[(k, k)] + 1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let trial = x + Point3::new(step[0], step[1], step[2]);
            let ft = cost(trial);
            if ft < f {
                let moved = step.norm();
                x = trial;
                f = ft;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if moved < 1e-9 {
                    return x;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved || f < 1e-20 {
            break;
        }
    }
    x
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|r| r * r).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

/// TDOA position from normalized delays (one per receiver), solving the
/// equations in groups of three consecutive non-reference receivers.
pub fn solve_position_equations(
    taus: &[f64],
    geom: &GeometryConfig,
    timing: &TimingConfig,
    cfg: &LocalizeConfig,
) -> Result<PositionEstimate> {
    let m_total = geom.num_receivers();
    if m_total < 4 || taus.len() != m_total {
        return Err(Error::Dimension(format!(
            "need one delay per receiver and at least 4 receivers, got {} delays for {m_total}",
            taus.len()
        )));
    }
    let d = delay_differences_from_normalized(taus, geom, timing);
    Ok(solve_from_differences(&d, geom, cfg))
}

/// Same as [`solve_position_equations`] given range differences (m).
pub fn solve_from_differences(d: &[f64], geom: &GeometryConfig, cfg: &LocalizeConfig) -> PositionEstimate {
    let m_total = geom.num_receivers();
    let bx = &geom.surveillance_box;
    let center = bx.center();
    let starts: Vec<Point3> = bx
        .corners()
        .iter()
        .cycle()
        .take(cfg.multistarts)
        .map(|&c| center + (c - center) * 0.5)
        .collect();
    let all: Vec<usize> = (1..m_total).collect();
    let mut accepted = Vec::new();
    let mut fallback: Option<(f64, Point3)> = None;
    for first in 1..=(m_total - 3) {
        let ms = [first, first + 1, first + 2];
        let mut best: Option<(f64, Point3)> = None;
        for &s in &starts {
            let x = lm_solve(geom, d, &ms, s, cfg.max_lm_iters);
            let group = residuals(geom, d, &ms, x);
            let overall = rms(&residuals(geom, d, &all, x));
            if fallback.is_none_or(|(r, _)| overall < r) {
                fallback = Some((overall, x));
            }
            let ok = group.iter().all(|r| r.abs() < cfg.residual_tol) && bx.contains(x) && x.is_finite();
            if ok && best.is_none_or(|(r, _)| overall < r) {
                best = Some((overall, x));
            }
        }
        if let Some((_, x)) = best {
            accepted.push(x);
        }
    }
    if accepted.is_empty() {
        let (residual, position) = fallback.unwrap_or((f64::INFINITY, center));
        return PositionEstimate { position, feasible: false, residual, groups_used: 0 };
    }
    let n = accepted.len() as f64;
    let sum = accepted.iter().fold(Point3::new(0.0, 0.0, 0.0), |a, &b| a + b);
    let position = sum * (1.0 / n);
    PositionEstimate {
        position,
        feasible: bx.contains(position),
        residual: rms(&residuals(geom, d, &all, position)),
        groups_used: accepted.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VelocityEstimate {
    pub velocity: Velocity3,
    pub clutter: bool,
}

pub fn classify_clutter(v: Velocity3, threshold: f64) -> bool {
    v.speed() < threshold
}

/// `Γ` with rows `(NT/λ)(unit(p_tx − x) + unit(p_m − x))ᵀ`.
pub fn doppler_matrix(x: Point3, geom: &GeometryConfig, timing: &TimingConfig) -> DMatrix<f64> {
    let k = timing.block_duration() / geom.wavelength();
    let tx = unit(geom.illuminator - x);
    DMatrix::from_fn(geom.num_receivers(), 3, |m, c| k * (tx[c] + unit(geom.receivers[m] - x)[c]))
}

/// Least-squares velocity from normalized Doppler shifts (one per receiver),
/// each first mapped to its signed representative in `(−0.5, 0.5]`.
pub fn estimate_velocity(
    x: Point3,
    dopplers: &[f64],
    geom: &GeometryConfig,
    timing: &TimingConfig,
    clutter_speed: f64,
) -> Result<VelocityEstimate> {
    if dopplers.len() != geom.num_receivers() {
        return Err(Error::Dimension(format!(
            "{} Doppler values for {} receivers",
            dopplers.len(),
            geom.num_receivers()
        )));
    }
    let gamma = doppler_matrix(x, geom, timing);
    let f = DVector::from_iterator(dopplers.len(), dopplers.iter().map(|&v| unwrap_signed(v)));
    let svd = gamma.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < 3 {
        return Err(Error::RankDeficient(rank));
    }
    let v = svd.solve(&f, tol).map_err(|e| Error::Dimension(e.to_string()))?;
    let velocity = Velocity3::new(v[0], v[1], v[2]);
    Ok(VelocityEstimate { velocity, clutter: classify_clutter(velocity, clutter_speed) })
}

/// Maps a delay vector (one normalized delay per receiver) to a position.
pub trait PositionLocator: Send + Sync {
    fn locate(&self, taus: &[f64]) -> Result<PositionEstimate>;
}

/// The equation-solving locator.
#[derive(Debug, Clone)]
pub struct EquationLocator {
    pub geom: GeometryConfig,
    pub timing: TimingConfig,
    pub cfg: LocalizeConfig,
}

impl PositionLocator for EquationLocator {
    fn locate(&self, taus: &[f64]) -> Result<PositionEstimate> {
        solve_position_equations(taus, &self.geom, &self.timing, &self.cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetStateEstimate {
    pub id: usize,
    pub position: PositionEstimate,
    /// `None` when the position is infeasible or the velocity system is degenerate.
    pub velocity: Option<VelocityEstimate>,
}

impl TargetStateEstimate {
    pub fn feasible(&self) -> bool {
        self.position.feasible
    }

    pub fn clutter(&self) -> bool {
        self.velocity.is_some_and(|v| v.clutter)
    }
}

/// Associates paths, then locates every associated reflector.
pub fn localize_targets(
    est: &DelayDopplerEstimate,
    n_b: usize,
    geom: &GeometryConfig,
    timing: &TimingConfig,
    cfg: &LocalizeConfig,
    locator: &dyn PositionLocator,
) -> Result<(Vec<TargetStateEstimate>, AssociationTable)> {
    if est.receivers.len() != geom.num_receivers() {
        return Err(Error::Dimension(format!(
            "estimates for {} receivers, geometry has {}",
            est.receivers.len(),
            geom.num_receivers()
        )));
    }
    if est.receivers.iter().any(|r| r.paths.is_empty()) {
        return Ok((Vec::new(), AssociationTable::default()));
    }
    let table = associate_across_receivers(est, n_b, cfg)?;
    let mut out = Vec::with_capacity(table.rows.len());
    for (id, row) in table.rows.iter().enumerate() {
        let paths: Vec<&PathEstimate> = row.iter().enumerate().map(|(m, &i)| &est.receivers[m].paths[i]).collect();
        let taus: Vec<f64> = paths.iter().map(|p| p.tau).collect();
        let dopplers: Vec<f64> = paths.iter().map(|p| p.doppler).collect();
        let position = locator.locate(&taus)?;
        let velocity = if position.feasible {
            match estimate_velocity(position.position, &dopplers, geom, timing, cfg.clutter_speed) {
                Ok(v) => Some(v),
                Err(Error::RankDeficient(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        out.push(TargetStateEstimate { id, position, velocity });
    }
    Ok((out, table))
}

/// CSV with header `id,x,y,z,vx,vy,vz,clutter,feasible,residual_m`.
pub fn write_targets_csv<W: Write>(targets: &[TargetStateEstimate], w: &mut W) -> Result<()> {
    writeln!(w, "id,x,y,z,vx,vy,vz,clutter,feasible,residual_m")?;
    for t in targets {
        let p = t.position.position;
        let v = t.velocity.map_or(Velocity3::new(f64::NAN, f64::NAN, f64::NAN), |v| v.velocity);
        writeln!(
            w,
            "{},{:.3},{:.3},{:.3},{:.6},{:.6},{:.6},{},{},{:.6}",
            t.id,
            p.x,
            p.y,
            p.z,
            v.vx,
            v.vy,
            v.vz,
            t.clutter(),
            t.feasible(),
            t.position.residual
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{bistatic_delay, bistatic_doppler, normalize_delay, normalize_doppler};
    use crate::spectral::ReceiverEstimate;
    use num_complex::Complex64;

    fn geom() -> GeometryConfig {
        GeometryConfig::reference()
    }

    fn exact_taus(x: Point3) -> Vec<f64> {
        let (g, t) = (geom(), TimingConfig::reference());
        (0..4).map(|m| normalize_delay(bistatic_delay(&g, m, x), &t).unwrap()).collect()
    }

    fn exact_dopplers(x: Point3, v: Velocity3) -> Vec<f64> {
        let (g, t) = (geom(), TimingConfig::reference());
        (0..4).map(|m| normalize_doppler(bistatic_doppler(&g, m, x, v).unwrap(), &t)).collect()
    }

    #[test]
    fn exact_position_recovered() {
        let x = Point3::new(2500.0, 3000.0, 750.0);
        let est = solve_position_equations(&exact_taus(x), &geom(), &TimingConfig::reference(), &LocalizeConfig::default())
            .unwrap();
        assert!(est.feasible);
        assert_eq!(est.groups_used, 1);
        assert!(est.position.distance(x) < 1.0, "{:?}", est.position);
    }

    #[test]
    fn shift_invariance() {
        let x = Point3::new(1800.0, 5500.0, 450.0);
        let taus = exact_taus(x);
        let shifted: Vec<f64> = taus.iter().map(|t| t + 0.01).collect();
        let (g, t, c) = (geom(), TimingConfig::reference(), LocalizeConfig::default());
        let a = solve_position_equations(&taus, &g, &t, &c).unwrap();
        let b = solve_position_equations(&shifted, &g, &t, &c).unwrap();
        assert!(a.position.distance(b.position) < 1e-6);
    }

    #[test]
    fn inconsistent_differences_infeasible() {
        let g = geom();
        // receiver 1 is 1000+ m from receiver 0: a larger range difference is impossible
        let baseline = g.receivers[1].distance(g.receivers[0]);
        let d = vec![baseline + 500.0, 0.0, 0.0];
        let est = solve_from_differences(&d, &g, &LocalizeConfig::default());
        assert!(!est.feasible);
        assert_eq!(est.groups_used, 0);
    }

    #[test]
    fn group_count_for_more_receivers() {
        let mut g = geom();
        g.receivers.push(Point3::new(3000.0, 200.0, 100.0));
        g.receivers.push(Point3::new(500.0, 100.0, 900.0));
        let x = Point3::new(3000.0, 2000.0, 500.0);
        let r0 = g.receivers[0].distance(x);
        let d: Vec<f64> = g.receivers[1..].iter().map(|p| p.distance(x) - r0).collect();
        let est = solve_from_differences(&d, &g, &LocalizeConfig::default());
        assert!(est.feasible);
        assert_eq!(est.groups_used, 3);
        assert!(est.position.distance(x) < 1.0);
    }

    #[test]
    fn velocity_cases() {
        let (g, t) = (geom(), TimingConfig::reference());
        let x = Point3::new(800.0, 1200.0, 650.0);
        let est = estimate_velocity(x, &[0.0; 4], &g, &t, 3.0).unwrap();
        assert_eq!(est.velocity, Velocity3::ZERO);
        assert!(est.clutter);

        let v = Velocity3::new(20.0, 80.0, 50.0);
        let est = estimate_velocity(x, &exact_dopplers(x, v), &g, &t, 3.0).unwrap();
        let err = (est.velocity.vx - v.vx).abs().max((est.velocity.vy - v.vy).abs()).max((est.velocity.vz - v.vz).abs());
        assert!(err < 1e-8, "{:?}", est.velocity);
        assert!(!est.clutter);

        // linearity in f̂ (within the unwrap range)
        let f: Vec<f64> = exact_dopplers(x, v).iter().map(|&f| unwrap_signed(f)).collect();
        let half: Vec<f64> = f.iter().map(|&f| wrap(0.5 * f)).collect();
        let a = estimate_velocity(x, &half, &g, &t, 3.0).unwrap().velocity;
        assert!((a.vx - 0.5 * est.velocity.vx).abs() < 1e-9);
    }

    fn wrap(f: f64) -> f64 {
        crate::geometry::wrap_unit(f)
    }

    #[test]
    fn collinear_geometry_rank_deficient() {
        let mut g = geom();
        g.illuminator = Point3::new(-1000.0, 0.0, 0.0);
        g.receivers = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1000.0, 0.0, 0.0),
            Point3::new(2000.0, 0.0, 0.0),
            Point3::new(3000.0, 0.0, 0.0),
        ];
        let x = Point3::new(5000.0, 0.0, 0.0);
        let err = estimate_velocity(x, &[0.1; 4], &g, &TimingConfig::reference(), 3.0).unwrap_err();
        assert!(matches!(err, Error::RankDeficient(r) if r < 3));
    }

    #[test]
    fn clutter_threshold_is_strict() {
        assert!(classify_clutter(Velocity3::ZERO, 3.0));
        assert!(!classify_clutter(Velocity3::new(3.0, 0.0, 0.0), 3.0));
        assert!(!classify_clutter(Velocity3::new(20.0, 80.0, 50.0), 3.0));
    }

    fn path(tau: f64, doppler: f64, gain: f64) -> PathEstimate {
        PathEstimate { tau, doppler, gain: Complex64::new(gain, 0.0) }
    }

    #[test]
    fn association_by_gain_rank() {
        let est = DelayDopplerEstimate {
            receivers: vec![
                ReceiverEstimate { paths: vec![path(0.1, 0.0, 3.0), path(0.2, 0.1, 2.0), path(0.3, 0.2, 1.0)], residual: 0.0 },
                ReceiverEstimate { paths: vec![path(0.4, 0.05, 2.9), path(0.5, 0.3, 1.95), path(0.6, 0.2, 1.05)], residual: 0.0 },
            ],
        };
        let t = associate_across_receivers(&est, 16, &LocalizeConfig::default()).unwrap();
        assert_eq!(t.rows, vec![vec![0, 0], vec![1, 1], vec![2, 2]]);
        let single = DelayDopplerEstimate {
            receivers: vec![
                ReceiverEstimate { paths: vec![path(0.1, 0.0, 1.0)], residual: 0.0 },
                ReceiverEstimate { paths: vec![path(0.2, 0.5, 1.0), path(0.3, 0.1, 0.1)], residual: 0.0 },
            ],
        };
        let t = associate_across_receivers(&single, 16, &LocalizeConfig::default()).unwrap();
        assert_eq!(t.rows, vec![vec![0, 0]]);
    }

    #[test]
    fn association_survives_reordered_gains() {
        // receiver 1's strongest path lost gain to interference and now
        // ranks below the moving target
        let est = DelayDopplerEstimate {
            receivers: vec![
                ReceiverEstimate { paths: vec![path(0.5, 0.0, 1.4), path(0.6, 0.1, 1.0)], residual: 0.0 },
                ReceiverEstimate { paths: vec![path(0.6, 0.13, 0.97), path(0.4, 0.999, 0.87)], residual: 0.0 },
            ],
        };
        let t = associate_across_receivers(&est, 16, &LocalizeConfig::default()).unwrap();
        assert_eq!(t.rows, vec![vec![0, 1], vec![1, 0]]);
    }

    #[test]
    fn association_tolerates_doppler_drift() {
        // the moving target's Doppler drifts from 0.06 to 0.125; a weaker
        // static path sits slightly nearer in Doppler
        let est = DelayDopplerEstimate {
            receivers: vec![
                ReceiverEstimate { paths: vec![path(0.5, 0.0, 1.4), path(0.6, 0.062, 1.0), path(0.4, 0.0, 0.7)], residual: 0.0 },
                ReceiverEstimate { paths: vec![path(0.4, 0.0, 1.4), path(0.6, 0.125, 1.0), path(0.5, 0.0, 0.7)], residual: 0.0 },
            ],
        };
        let t = associate_across_receivers(&est, 16, &LocalizeConfig::default()).unwrap();
        assert_eq!(t.rows, vec![vec![0, 0], vec![1, 1], vec![2, 2]]);
    }

    #[test]
    fn association_doppler_tie_break() {
        let est = DelayDopplerEstimate {
            receivers: vec![
                ReceiverEstimate { paths: vec![path(0.1, 0.30, 1.0), path(0.2, 0.70, 1.0)], residual: 0.0 },
                ReceiverEstimate { paths: vec![path(0.4, 0.72, 1.0), path(0.5, 0.31, 1.0)], residual: 0.0 },
            ],
        };
        let t = associate_across_receivers(&est, 16, &LocalizeConfig::default()).unwrap();
        assert_eq!(t.rows, vec![vec![0, 1], vec![1, 0]]);
        assert!(!t.ambiguous);
        let close = DelayDopplerEstimate {
            receivers: vec![
                ReceiverEstimate { paths: vec![path(0.1, 0.30, 1.0)], residual: 0.0 },
                ReceiverEstimate { paths: vec![path(0.4, 0.31, 1.0), path(0.5, 0.32, 1.0)], residual: 0.0 },
            ],
        };
        assert!(associate_across_receivers(&close, 16, &LocalizeConfig::default()).unwrap().ambiguous);
    }

    #[test]
    fn full_chain_on_exact_inputs() {
        let (g, t) = (geom(), TimingConfig::reference());
        let targets = [
            (Point3::new(1800.0, 5500.0, 450.0), Velocity3::ZERO, 3.0),
            (Point3::new(800.0, 1200.0, 650.0), Velocity3::new(20.0, 80.0, 50.0), 2.0),
            (Point3::new(2500.0, 3200.0, 120.0), Velocity3::new(-10.0, -90.0, -20.0), 1.0),
        ];
        let receivers = (0..4)
            .map(|m| ReceiverEstimate {
                paths: targets
                    .iter()
                    .map(|&(x, v, a)| path(exact_taus(x)[m], exact_dopplers(x, v)[m], a))
                    .collect(),
                residual: 0.0,
            })
            .collect();
        let est = DelayDopplerEstimate { receivers };
        let locator = EquationLocator { geom: g.clone(), timing: t, cfg: LocalizeConfig::default() };
        let (out, _) = localize_targets(&est, 16, &g, &t, &LocalizeConfig::default(), &locator).unwrap();
        for (res, &(x, v, _)) in out.iter().zip(&targets) {
            assert!(res.position.position.distance(x) < 1.0);
            let got = res.velocity.unwrap().velocity;
            assert!((got.vx - v.vx).abs() < 1e-6 && (got.vy - v.vy).abs() < 1e-6 && (got.vz - v.vz).abs() < 1e-6);
        }
        assert!(out[0].clutter() && !out[1].clutter() && !out[2].clutter());
        let mut buf = Vec::new();
        write_targets_csv(&out, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("id,x,y,z,vx,vy,vz,clutter,feasible,residual_m\n"));
        assert_eq!(text.lines().count(), 4);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::geometry::{bistatic_delay, bistatic_doppler, normalize_delay, normalize_doppler};
    use proptest::prelude::*;

    fn interior() -> impl Strategy<Value = Point3> {
        (50.0..4950.0f64, 1050.0..5950.0f64, 50.0..1450.0f64).prop_map(|(x, y, z)| Point3::new(x, y, z))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn position_ignores_common_delay_offset(x in interior(), shift in -0.05..0.05f64) {
            let (g, t) = (GeometryConfig::reference(), TimingConfig::reference());
            let taus: Vec<f64> = (0..4).map(|m| normalize_delay(bistatic_delay(&g, m, x), &t).unwrap()).collect();
            let cfg = LocalizeConfig::default();
            let a = solve_position_equations(&taus, &g, &t, &cfg).unwrap();
            let moved: Vec<f64> = taus.iter().map(|v| v + shift).collect();
            let b = solve_position_equations(&moved, &g, &t, &cfg).unwrap();
            prop_assert!(a.feasible && b.feasible);
            prop_assert!(a.position.distance(x) < 1.0);
            prop_assert!(a.position.distance(b.position) < 1e-6);
        }

        #[test]
        fn velocity_is_linear_in_doppler(
            x in interior(),
            v in (-100.0..100.0f64, -100.0..100.0f64, -30.0..30.0f64),
            alpha in -3.0..3.0f64,
        ) {
            let (g, t) = (GeometryConfig::reference(), TimingConfig::reference());
            let v = Velocity3::new(v.0, v.1, v.2);
            let f: Vec<f64> = (0..4)
                .map(|m| unwrap_signed(normalize_doppler(bistatic_doppler(&g, m, x, v).unwrap(), &t)))
                .collect();
            let scaled: Vec<f64> = f.iter().map(|d| alpha * d).collect();
            let base = estimate_velocity(x, &f, &g, &t, 3.0).unwrap().velocity.to_array();
            let got = estimate_velocity(x, &scaled, &g, &t, 3.0).unwrap().velocity.to_array();
            for k in 0..3 {
                prop_assert!((got[k] - alpha * base[k]).abs() < 1e-9 * (1.0 + base[k].abs()));
                prop_assert!((base[k] - v.to_array()[k]).abs() < 1e-6);
            }
        }
    }
}
