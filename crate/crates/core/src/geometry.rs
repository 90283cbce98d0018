//! Bistatic geometry: path delays, Doppler shifts, their normalization to
//! the OFDM grid, and the receiver-to-receiver delay differences used for
//! localization.
//!
//! Receiver indices are zero-based throughout the crate: receiver `0` is the
//! reference receiver against which delay differences are formed.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default propagation speed (m/s).
pub const DEFAULT_PROPAGATION_SPEED: f64 = 3.0e8;

/// A position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A velocity in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Velocity3 {
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, other: Point3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn distance(self, other: Point3) -> f64 {
        (self - other).norm()
    }

    pub fn midpoint(self, other: Point3) -> Point3 {
        (self + other) * 0.5
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Velocity3 {
    pub const ZERO: Velocity3 = Velocity3::new(0.0, 0.0, 0.0);

    pub const fn new(vx: f64, vy: f64, vz: f64) -> Self {
        Self { vx, vy, vz }
    }

    pub fn speed(self) -> f64 {
        (self.vx * self.vx + self.vy * self.vy + self.vz * self.vz).sqrt()
    }

    /// Projection onto a direction given as a point-difference vector.
    pub fn dot(self, d: Point3) -> f64 {
        self.vx * d.x + self.vy * d.y + self.vz * d.z
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.vx, self.vy, self.vz]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn is_finite(self) -> bool {
        self.vx.is_finite() && self.vy.is_finite() && self.vz.is_finite()
    }
}

/// Axis-aligned surveillance region with half-open `(min, max]` semantics
/// on every axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurveillanceBox {
    pub min: Point3,
    pub max: Point3,
}

impl SurveillanceBox {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.x > self.min.x
            && p.x <= self.max.x
            && p.y > self.min.y
            && p.y <= self.max.y
            && p.z > self.min.z
            && p.z <= self.max.z
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn center(&self) -> Point3 {
        self.min.midpoint(self.max)
    }

    pub fn corners(&self) -> [Point3; 8] {
        let (a, b) = (self.min, self.max);
        [
            Point3::new(a.x, a.y, a.z),
            Point3::new(b.x, a.y, a.z),
            Point3::new(a.x, b.y, a.z),
            Point3::new(b.x, b.y, a.z),
            Point3::new(a.x, a.y, b.z),
            Point3::new(b.x, a.y, b.z),
            Point3::new(a.x, b.y, b.z),
            Point3::new(b.x, b.y, b.z),
        ]
    }

    fn is_degenerate(&self) -> bool {
        let e = self.extent();
        !(e.x > 0.0 && e.y > 0.0 && e.z > 0.0) || !self.min.is_finite() || !self.max.is_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryConfig {
    pub illuminator: Point3,
    pub receivers: Vec<Point3>,
    pub surveillance_box: SurveillanceBox,
    /// Propagation speed (m/s).
    #[serde(default = "default_c")]
    pub c: f64,
    /// Carrier frequency (Hz).
    pub carrier_freq: f64,
}

fn default_c() -> f64 {
    DEFAULT_PROPAGATION_SPEED
}

impl GeometryConfig {
    /// Illuminator, four receivers and surveillance region of the reference
    /// simulation scenario, with a 2 GHz carrier.
    pub fn reference() -> Self {
        Self {
            illuminator: Point3::new(5000.0, 300.0, 200.0),
            receivers: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1000.0, 0.0, 350.0),
                Point3::new(2500.0, 0.0, 1500.0),
                Point3::new(4000.0, 0.0, 780.0),
            ],
            surveillance_box: SurveillanceBox::new(
                Point3::new(0.0, 1000.0, 0.0),
                Point3::new(5000.0, 6000.0, 1500.0),
            ),
            c: DEFAULT_PROPAGATION_SPEED,
            carrier_freq: 2.0e9,
        }
    }

    pub fn num_receivers(&self) -> usize {
        self.receivers.len()
    }

    pub fn wavelength(&self) -> f64 {
        self.c / self.carrier_freq
    }

    pub fn validate(&self) -> Result<()> {
        if self.receivers.len() < 4 {
            return Err(Error::Config(format!(
                "at least 4 receivers are required, got {}",
                self.receivers.len()
            )));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::Config(format!("propagation speed must be positive, got {}", self.c)));
        }
        if !(self.carrier_freq > 0.0 && self.carrier_freq.is_finite()) {
            return Err(Error::Config("carrier frequency must be positive".into()));
        }
        if self.surveillance_box.is_degenerate() {
            return Err(Error::Config("surveillance box is degenerate".into()));
        }
        if !self.illuminator.is_finite() || self.receivers.iter().any(|p| !p.is_finite()) {
            return Err(Error::Config("non-finite site coordinates".into()));
        }
        Ok(())
    }
}

/// OFDM frame timing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    /// Sub-pulse duration `T` (s).
    pub sub_pulse: f64,
    /// Data sub-carriers per symbol.
    pub n_d: usize,
    /// Cyclic-prefix length in sub-pulses.
    pub n_p: usize,
    /// Number of OFDM blocks.
    pub n_b: usize,
    /// Transmitter/receiver synchronization error (s).
    pub sync_error: f64,
}

impl TimingConfig {
    /// 320 kHz bandwidth, `N_b = N_d = N_p = 16`, 0.1 µs sync error.
    pub fn reference() -> Self {
        Self {
            sub_pulse: 1.0 / 320.0e3,
            n_d: 16,
            n_p: 16,
            n_b: 16,
            sync_error: 0.1e-6,
        }
    }

    pub fn block_len(&self) -> usize {
        self.n_d + self.n_p
    }

    /// `N_d T`.
    pub fn symbol_duration(&self) -> f64 {
        self.n_d as f64 * self.sub_pulse
    }

    /// `N T = (N_d + N_p) T`.
    pub fn block_duration(&self) -> f64 {
        self.block_len() as f64 * self.sub_pulse
    }

    pub fn prefix_duration(&self) -> f64 {
        self.n_p as f64 * self.sub_pulse
    }

    /// Length of the vectorized observation per receiver, `N_b N_d`.
    pub fn grid_len(&self) -> usize {
        self.n_b * self.n_d
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_b < 2 || self.n_d < 2 {
            return Err(Error::Config(format!(
                "N_b and N_d must be at least 2 (got {} and {})",
                self.n_b, self.n_d
            )));
        }
        if !(self.sub_pulse > 0.0 && self.sub_pulse.is_finite()) {
            return Err(Error::Config("sub-pulse duration must be positive".into()));
        }
        if !(self.sync_error >= 0.0 && self.sync_error.is_finite()) {
            return Err(Error::Config("sync error must be a finite non-negative time".into()));
        }
        Ok(())
    }
}

/// Illuminator → `x` → receiver `m` travel time (s).
pub fn bistatic_delay(geom: &GeometryConfig, m: usize, x: Point3) -> f64 {
    (geom.illuminator.distance(x) + geom.receivers[m].distance(x)) / geom.c
}

/// Bistatic Doppler shift (Hz) seen at receiver `m` for a scatterer at `x`
/// moving with velocity `v`.
pub fn bistatic_doppler(geom: &GeometryConfig, m: usize, x: Point3, v: Velocity3) -> Result<f64> {
    let to_tx = geom.illuminator - x;
    let to_rx = geom.receivers[m] - x;
    let (d_tx, d_rx) = (to_tx.norm(), to_rx.norm());
    if d_tx == 0.0 || d_rx == 0.0 {
        return Err(Error::DegenerateGeometry(format!(
            "scatterer coincides with the illuminator or receiver {m}"
        )));
    }
    Ok((v.dot(to_tx) / d_tx + v.dot(to_rx) / d_rx) / geom.wavelength())
}

/// `(τ̄ − Δτ) / (N_d T)`, required to land in `[0, 1)`.
pub fn normalize_delay(delay: f64, timing: &TimingConfig) -> Result<f64> {
    let value = (delay - timing.sync_error) / timing.symbol_duration();
    if (0.0..1.0).contains(&value) {
        Ok(value)
    } else {
        Err(Error::DelayOutOfRange { value })
    }
}

/// Inverse of [`normalize_delay`].
pub fn denormalize_delay(tau: f64, timing: &TimingConfig) -> f64 {
    tau * timing.symbol_duration() + timing.sync_error
}

/// `f̄ N T` wrapped into `[0, 1)`.
pub fn normalize_doppler(doppler: f64, timing: &TimingConfig) -> f64 {
    wrap_unit(doppler * timing.block_duration())
}

/// Reduce modulo 1 into `[0, 1)`.
pub fn wrap_unit(v: f64) -> f64 {
    let r = v.rem_euclid(1.0);
    // rem_euclid can round up to exactly 1.0 for tiny negative inputs
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Signed representative of a normalized frequency in `(-0.5, 0.5]`.
pub fn unwrap_signed(v: f64) -> f64 {
    let w = wrap_unit(v);
    if w > 0.5 {
        w - 1.0
    } else {
        w
    }
}

/// Range differences `‖p_m − x‖ − ‖p_0 − x‖` for every non-reference
/// receiver (length `M − 1`, meters).
pub fn delay_difference_vector(geom: &GeometryConfig, x: Point3) -> Vec<f64> {
    let reference = geom.receivers[0].distance(x);
    geom.receivers[1..].iter().map(|p| p.distance(x) - reference).collect()
}

/// Range differences recovered from normalized delays, `c N_d T (τ_m − τ_0)`.
pub fn delay_differences_from_normalized(
    taus: &[f64],
    geom: &GeometryConfig,
    timing: &TimingConfig,
) -> Vec<f64> {
    let scale = geom.c * timing.symbol_duration();
    taus[1..].iter().map(|t| scale * (t - taus[0])).collect()
}

/// Largest `τ̄ − Δτ` over the surveillance box and all receivers. The sum of
/// two distances is convex in `x`, so the maximum sits at a box corner.
pub fn max_excess_delay(geom: &GeometryConfig, timing: &TimingConfig) -> f64 {
    geom.surveillance_box
        .corners()
        .iter()
        .flat_map(|&x| (0..geom.num_receivers()).map(move |m| (x, m)))
        .map(|(x, m)| bistatic_delay(geom, m, x) - timing.sync_error)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Scenario-load check: every in-box path must fit inside the cyclic prefix
/// and map to a normalized delay in `[0, 1)`.
pub fn check_prefix_covers_box(geom: &GeometryConfig, timing: &TimingConfig) -> Result<()> {
    let worst = max_excess_delay(geom, timing);
    if worst >= timing.prefix_duration() {
        return Err(Error::Config(format!(
            "cyclic prefix {:.3} µs shorter than maximum path delay {:.3} µs",
            timing.prefix_duration() * 1e6,
            worst * 1e6
        )));
    }
    if worst >= timing.symbol_duration() {
        return Err(Error::DelayOutOfRange { value: worst / timing.symbol_duration() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> GeometryConfig {
        GeometryConfig::reference()
    }

    // Independent oracle: plain component arithmetic, no Point3 helpers.
    fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    #[test]
    fn delay_at_receiver_is_illuminator_range() {
        let d = bistatic_delay(&geom(), 0, Point3::new(0.0, 0.0, 0.0));
        let expected = (5000f64.powi(2) + 300f64.powi(2) + 200f64.powi(2)).sqrt() / 3e8;
        assert!((d - expected).abs() < 1e-18);
        assert!((d * 1e6 - 16.71).abs() < 0.01, "{}", d * 1e6);
    }

    #[test]
    fn delay_at_baseline_midpoint_is_baseline() {
        let g = geom();
        let mid = g.illuminator.midpoint(g.receivers[0]);
        let d = bistatic_delay(&g, 0, mid);
        assert!((d - g.illuminator.distance(g.receivers[0]) / g.c).abs() < 1e-18);
    }

    #[test]
    fn delay_matches_norm_oracle() {
        let g = geom();
        let x = [2500.0, 3000.0, 750.0];
        let expected = (dist([5000.0, 300.0, 200.0], x) + dist([0.0, 0.0, 0.0], x)) / 3e8;
        let d = bistatic_delay(&g, 0, Point3::from_array(x));
        assert!((d - expected).abs() <= 1e-15 * expected);
    }

    #[test]
    fn doppler_zero_velocity_and_orthogonal() {
        let g = geom();
        let x = Point3::new(800.0, 1200.0, 650.0);
        assert_eq!(bistatic_doppler(&g, 0, x, Velocity3::ZERO).unwrap(), 0.0);
        // Normal of the plane spanned by both line-of-sight vectors.
        let a = g.illuminator - x;
        let b = g.receivers[0] - x;
        let n = Velocity3::new(a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x);
        let scale = 50.0 / n.speed();
        let v = Velocity3::new(n.vx * scale, n.vy * scale, n.vz * scale);
        assert!(bistatic_doppler(&g, 0, x, v).unwrap().abs() < 1e-9);
    }

    #[test]
    fn doppler_matches_dot_product_oracle() {
        let g = geom();
        let x = [800.0, 1200.0, 650.0];
        let v = [20.0, 80.0, 50.0];
        let lambda = 0.15;
        for m in 0..4 {
            let p = g.receivers[m].to_array();
            let p0 = [5000.0, 300.0, 200.0];
            let mut acc = 0.0;
            for site in [p0, p] {
                let d = dist(site, x);
                acc += (0..3).map(|k| v[k] * (site[k] - x[k])).sum::<f64>() / d;
            }
            let expected = acc / lambda;
            let got =
                bistatic_doppler(&g, m, Point3::from_array(x), Velocity3::from_array(v)).unwrap();
            assert!((got - expected).abs() < 1e-9 * expected.abs().max(1.0), "m={m}");
        }
    }

    #[test]
    fn doppler_degenerate_geometry() {
        let g = geom();
        let err = bistatic_doppler(&g, 1, g.receivers[1], Velocity3::new(1.0, 0.0, 0.0));
        assert!(matches!(err, Err(Error::DegenerateGeometry(_))));
        let err = bistatic_doppler(&g, 1, g.illuminator, Velocity3::new(1.0, 0.0, 0.0));
        assert!(matches!(err, Err(Error::DegenerateGeometry(_))));
    }

    fn timing_50us() -> TimingConfig {
        TimingConfig::reference()
    }

    #[test]
    fn delay_normalization_examples() {
        let t = timing_50us();
        assert!((t.symbol_duration() - 50e-6).abs() < 1e-18);
        let v = normalize_delay(25.1e-6, &t).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert_eq!(normalize_delay(t.sync_error, &t).unwrap(), 0.0);
        assert!(matches!(normalize_delay(50.2e-6, &t), Err(Error::DelayOutOfRange { .. })));
        assert!(matches!(normalize_delay(0.0, &t), Err(Error::DelayOutOfRange { .. })));
    }

    #[test]
    fn doppler_normalization_examples() {
        let t = timing_50us();
        assert!((t.block_duration() - 100e-6).abs() < 1e-18);
        assert_eq!(normalize_doppler(0.0, &t), 0.0);
        assert!((normalize_doppler(4000.0, &t) - 0.4).abs() < 1e-12);
        assert!((normalize_doppler(-1000.0, &t) - 0.9).abs() < 1e-12);
        assert_eq!(wrap_unit(-1e-20), 0.0);
        assert!((unwrap_signed(0.9) + 0.1).abs() < 1e-12);
        assert_eq!(unwrap_signed(0.5), 0.5);
    }

    #[test]
    fn delay_differences_two_paths_agree() {
        let g = geom();
        let t = timing_50us();
        for x in [
            Point3::new(2500.0, 3000.0, 750.0),
            Point3::new(800.0, 1200.0, 650.0),
            Point3::new(4900.0, 5900.0, 1400.0),
        ] {
            let direct = delay_difference_vector(&g, x);
            let taus: Vec<f64> = (0..4)
                .map(|m| normalize_delay(bistatic_delay(&g, m, x), &t).unwrap())
                .collect();
            let via_tau = delay_differences_from_normalized(&taus, &g, &t);
            for (a, b) in direct.iter().zip(&via_tau) {
                assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn delay_difference_special_points() {
        let g = geom();
        // Equidistant from receivers 0 and 1: on their perpendicular bisector plane.
        let (p0, p1) = (g.receivers[0], g.receivers[1]);
        let mid = p0.midpoint(p1);
        let dir = p1 - p0;
        // any vector orthogonal to dir
        let ortho = Point3::new(-dir.z, 0.0, dir.x);
        let x = mid + ortho * 2.0 + Point3::new(0.0, 2000.0, 0.0);
        assert!(delay_difference_vector(&g, x)[0].abs() < 1e-9);

        let at_ref = delay_difference_vector(&g, p0);
        for (m, d) in at_ref.iter().enumerate() {
            assert!((d - g.receivers[m + 1].distance(p0)).abs() < 1e-12);
        }
    }

    #[test]
    fn delay_difference_ignores_sync_error_and_illuminator() {
        let mut g = geom();
        let mut t = timing_50us();
        let x = Point3::new(1800.0, 5500.0, 450.0);
        let base = delay_difference_vector(&g, x);
        let taus_for = |g: &GeometryConfig, t: &TimingConfig| -> Vec<f64> {
            (0..4).map(|m| normalize_delay(bistatic_delay(g, m, x), t).unwrap()).collect()
        };
        let d1 = delay_differences_from_normalized(&taus_for(&g, &t), &g, &t);
        t.sync_error = 3.0e-6;
        let d2 = delay_differences_from_normalized(&taus_for(&g, &t), &g, &t);
        g.illuminator = g.illuminator + Point3::new(-300.0, 200.0, 50.0);
        let d3 = delay_differences_from_normalized(&taus_for(&g, &t), &g, &t);
        for i in 0..3 {
            assert!((d1[i] - base[i]).abs() < 1e-6);
            assert!((d2[i] - base[i]).abs() < 1e-6);
            assert!((d3[i] - base[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn reference_box_fits_prefix() {
        let g = geom();
        let t = timing_50us();
        check_prefix_covers_box(&g, &t).unwrap();
        let worst = max_excess_delay(&g, &t);
        assert!(worst < 50e-6 && worst > 40e-6);

        let mut short = t;
        short.n_p = 8;
        assert!(check_prefix_covers_box(&g, &short).is_err());
    }

    #[test]
    fn validation() {
        let mut g = geom();
        g.validate().unwrap();
        g.receivers.truncate(3);
        assert!(g.validate().is_err());
        let mut g = geom();
        g.surveillance_box.max.z = g.surveillance_box.min.z;
        assert!(g.validate().is_err());
        let mut t = TimingConfig::reference();
        t.validate().unwrap();
        t.n_b = 1;
        assert!(t.validate().is_err());
    }

    #[test]
    fn box_is_half_open() {
        let b = geom().surveillance_box;
        assert!(!b.contains(Point3::new(0.0, 2000.0, 100.0)));
        assert!(b.contains(Point3::new(5000.0, 6000.0, 1500.0)));
        assert!(!b.contains(Point3::new(5000.1, 6000.0, 1500.0)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn in_box() -> impl Strategy<Value = Point3> {
            (1.0..5000.0f64, 1001.0..6000.0f64, 1.0..1500.0f64)
                .prop_map(|(x, y, z)| Point3::new(x, y, z))
        }

        proptest! {
            #[test]
            fn delay_bounded_below_by_baseline(x in in_box(), m in 0usize..4) {
                let g = GeometryConfig::reference();
                let d = bistatic_delay(&g, m, x);
                let floor = g.illuminator.distance(g.receivers[m]) / g.c;
                prop_assert!(d >= floor * (1.0 - 1e-15));
            }

            #[test]
            fn normalized_delays_of_box_points_in_unit_interval(x in in_box(), m in 0usize..4) {
                let g = GeometryConfig::reference();
                let t = TimingConfig::reference();
                let v = normalize_delay(bistatic_delay(&g, m, x), &t).unwrap();
                prop_assert!((0.0..1.0).contains(&v));
            }

            #[test]
            fn delay_differences_ignore_sync_error_and_illuminator(
                x in in_box(),
                sync in 0.0..5e-6f64,
                shift in (-500.0..500.0f64, -200.0..200.0f64, -100.0..100.0f64),
            ) {
                let mut g = GeometryConfig::reference();
                let mut t = TimingConfig::reference();
                t.sync_error = sync;
                g.illuminator = g.illuminator + Point3::new(shift.0, shift.1, shift.2);
                let taus: Vec<f64> = (0..4).map(|m| normalize_delay(bistatic_delay(&g, m, x), &t).unwrap()).collect();
                let via_tau = delay_differences_from_normalized(&taus, &g, &t);
                let direct = delay_difference_vector(&GeometryConfig::reference(), x);
                for (a, b) in via_tau.iter().zip(&direct) {
                    prop_assert!((a - b).abs() < 1e-6 * (1.0 + b.abs()));
                }
            }

            #[test]
            fn delay_normalization_roundtrip(tau in 0.0..1.0f64) {
                let t = TimingConfig::reference();
                let back = normalize_delay(denormalize_delay(tau, &t), &t);
                // values within an ulp of 1.0 can round out of range
                if let Ok(back) = back {
                    prop_assert!((back - tau).abs() < 1e-12);
                }
            }
        }
    }
}
