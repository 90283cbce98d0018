//! Observation synthesis at the post-matched-filter level: QPSK symbol
//! grids, demodulation errors, reflector responses and receiver noise.
//!
//! Grids are stored vectorized in column-major order of the `N_b × N_d`
//! symbol matrix, so entry `k * N_b + n` is block `n`, sub-carrier `k`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bistatic_delay, bistatic_doppler, normalize_delay, normalize_doppler, GeometryConfig, Point3,
    TimingConfig, Velocity3,
};
use crate::io;
use crate::structured_ops::atom;
use crate::{CMatrix, CVector};

/// Unit-energy QPSK constellation, Gray mapped: bit 0 drives the sign of the
/// real part, bit 1 the sign of the imaginary part.
pub const QPSK: [Complex64; 4] = [
    Complex64::new(FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    Complex64::new(FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
    Complex64::new(-FRAC_1_SQRT_2, FRAC_1_SQRT_2),
    Complex64::new(-FRAC_1_SQRT_2, -FRAC_1_SQRT_2),
];

fn qpsk_from_bits(b0: bool, b1: bool) -> Complex64 {
    QPSK[(b0 as usize) << 1 | b1 as usize]
}

/// Nearest QPSK point; ties on an axis resolve to the positive half-plane.
pub fn nearest_qpsk(z: Complex64) -> Complex64 {
    let re = if z.re >= 0.0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    let im = if z.im >= 0.0 { FRAC_1_SQRT_2 } else { -FRAC_1_SQRT_2 };
    Complex64::new(re, im)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymbolGrid {
    pub n_b: usize,
    pub n_d: usize,
    /// Vectorized grid, length `N_b N_d`.
    pub symbols: CVector,
}

impl SymbolGrid {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Symbol of block `n` on sub-carrier `k`.
    pub fn get(&self, n: usize, k: usize) -> Complex64 {
        self.symbols[k * self.n_b + n]
    }
}

pub fn draw_qpsk_symbols<R: Rng + ?Sized>(rng: &mut R, n_b: usize, n_d: usize) -> SymbolGrid {
    let symbols = DVector::from_fn(n_b * n_d, |_, _| QPSK[rng.gen_range(0..4)]);
    SymbolGrid { n_b, n_d, symbols }
}

/// Flip each of the two bits of every symbol independently with probability
/// `ber`. Returns the demodulated grid `B̂` and the error `e = vec(B) − vec(B̂)`.
pub fn inject_demod_errors<R: Rng + ?Sized>(
    rng: &mut R,
    truth: &SymbolGrid,
    ber: f64,
) -> Result<(SymbolGrid, CVector)> {
    if !(0.0..=0.5).contains(&ber) {
        return Err(Error::Config(format!("BER must lie in [0, 0.5], got {ber}")));
    }
    let estimated = truth.symbols.map(|b| {
        let mut b0 = b.re < 0.0;
        let mut b1 = b.im < 0.0;
        if ber > 0.0 {
            b0 ^= rng.gen_bool(ber);
            b1 ^= rng.gen_bool(ber);
        }
        qpsk_from_bits(b0, b1)
    });
    let error = &truth.symbols - &estimated;
    Ok((SymbolGrid { n_b: truth.n_b, n_d: truth.n_d, symbols: estimated }, error))
}

/// One bistatic path: normalized delay, normalized Doppler and complex gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathParams {
    pub tau: f64,
    pub doppler: f64,
    pub gain: Complex64,
}

/// Path parameters indexed `[reflector][receiver]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReflectorParams {
    pub paths: Vec<Vec<PathParams>>,
}

impl ReflectorParams {
    pub fn num_reflectors(&self) -> usize {
        self.paths.len()
    }

    pub fn receiver(&self, m: usize) -> impl Iterator<Item = &PathParams> + '_ {
        self.paths.iter().map(move |per_rx| &per_rx[m])
    }

    /// `Σ_ℓ E|c_ℓ|²` as seen by one receiver (all receivers share magnitudes).
    pub fn signal_power(&self) -> f64 {
        self.paths.iter().map(|p| p.first().map_or(0.0, |q| q.gain.norm_sqr())).sum()
    }
}

/// A point scatterer in the scene. `amplitude` overrides the scene-wide
/// gain magnitude for this object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub position: Point3,
    #[serde(default)]
    pub velocity: Velocity3,
    #[serde(default)]
    pub amplitude: Option<f64>,
}

impl SceneObject {
    pub fn new(position: Point3, velocity: Velocity3) -> Self {
        Self { position, velocity, amplitude: None }
    }

    pub fn with_amplitude(mut self, a: f64) -> Self {
        self.amplitude = Some(a);
        self
    }
}

/// Map scene objects to per-receiver delay/Doppler/gain triples. Gains have
/// fixed magnitude and i.i.d. uniform phases.
pub fn scene_to_reflector_params<R: Rng + ?Sized>(
    geom: &GeometryConfig,
    timing: &TimingConfig,
    scene: &[SceneObject],
    c0: f64,
    rng: &mut R,
) -> Result<ReflectorParams> {
    let mut paths = Vec::with_capacity(scene.len());
    for obj in scene {
        if !geom.surveillance_box.contains(obj.position) {
            return Err(Error::Config(format!(
                "scene object at {:?} lies outside the surveillance box",
                obj.position
            )));
        }
        let magnitude = obj.amplitude.unwrap_or(c0);
        let mut per_rx = Vec::with_capacity(geom.num_receivers());
        for m in 0..geom.num_receivers() {
            let tau = normalize_delay(bistatic_delay(geom, m, obj.position), timing)?;
            let doppler =
                normalize_doppler(bistatic_doppler(geom, m, obj.position, obj.velocity)?, timing);
            let phase = rng.gen_range(0.0..2.0 * PI);
            per_rx.push(PathParams { tau, doppler, gain: Complex64::from_polar(magnitude, phase) });
        }
        paths.push(per_rx);
    }
    Ok(ReflectorParams { paths })
}

/// `Φ` with column `m` equal to `Σ_ℓ c_{ℓ,m} a(τ_{ℓ,m}, f_{ℓ,m})`.
pub fn ground_truth_phi(params: &ReflectorParams, num_receivers: usize, n_b: usize, n_d: usize) -> CMatrix {
    let mut phi = DMatrix::zeros(n_b * n_d, num_receivers);
    for per_rx in &params.paths {
        for (m, p) in per_rx.iter().enumerate() {
            let a = atom(p.tau, p.doppler, n_b, n_d);
            let mut col = phi.column_mut(m);
            col.axpy(p.gain, &a, Complex64::new(1.0, 0.0));
        }
    }
    phi
}

/// Noise standard deviation for `L` paths of magnitude `c0` at the given SNR.
pub fn snr_to_sigma(num_paths: usize, c0: f64, snr_db: f64) -> f64 {
    sigma_for_power(num_paths as f64 * c0 * c0, snr_db)
}

/// Noise standard deviation for a total per-entry signal power `Σ|c_ℓ|²`.
pub fn sigma_for_power(signal_power: f64, snr_db: f64) -> f64 {
    (signal_power / 10f64.powf(snr_db / 10.0)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// True symbols `vec(B)`.
    pub symbols: CVector,
    pub error: CVector,
    pub phi: CMatrix,
    pub params: ReflectorParams,
}

/// Receiver observations `Y = diag(b̂ + e) Φ + W` together with the
/// demodulated symbols available to the radar.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub n_b: usize,
    pub n_d: usize,
    /// `N_b N_d × M`.
    pub y: CMatrix,
    pub b_hat: CVector,
    pub truth: Option<GroundTruth>,
}

const OBS_MAGIC: &[u8; 8] = b"PBROBS\0\x01";

impl ObservationSet {
    pub fn num_receivers(&self) -> usize {
        self.y.ncols()
    }

    pub fn grid_len(&self) -> usize {
        self.n_b * self.n_d
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid_len();
        if self.y.nrows() != n || self.b_hat.len() != n {
            return Err(Error::Dimension(format!(
                "observation rows {} / symbols {} do not match N_b N_d = {n}",
                self.y.nrows(),
                self.b_hat.len()
            )));
        }
        if self.y.ncols() == 0 {
            return Err(Error::Dimension("observation has no receivers".into()));
        }
        Ok(())
    }

    /// Binary dump: magic, `N_b`, `N_d`, `M`, flags, then column-major
    /// `(re, im)` f64 pairs for `Y`, `b̂` and (if flagged) `e`, `Φ`, `vec(B)`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(OBS_MAGIC)?;
        io::write_u32(w, self.n_b as u32)?;
        io::write_u32(w, self.n_d as u32)?;
        io::write_u32(w, self.num_receivers() as u32)?;
        io::write_u32(w, self.truth.is_some() as u32)?;
        io::write_complex(w, self.y.iter().copied())?;
        io::write_complex(w, self.b_hat.iter().copied())?;
        if let Some(t) = &self.truth {
            io::write_complex(w, t.error.iter().copied())?;
            io::write_complex(w, t.phi.iter().copied())?;
            io::write_complex(w, t.symbols.iter().copied())?;
        }
        Ok(())
    }

    /// Inverse of [`ObservationSet::write_to`]. Reflector parameters are not
    /// part of the dump and come back empty.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        io::expect_magic(r, OBS_MAGIC)?;
        let n_b = io::read_u32(r)? as usize;
        let n_d = io::read_u32(r)? as usize;
        let m = io::read_u32(r)? as usize;
        let flags = io::read_u32(r)?;
        let n = n_b * n_d;
        if n == 0 || m == 0 || n.saturating_mul(m) > 1 << 26 {
            return Err(Error::Format(format!("implausible dimensions {n_b}x{n_d}x{m}")));
        }
        let y = DMatrix::from_vec(n, m, io::read_complex(r, n * m)?);
        let b_hat = DVector::from_vec(io::read_complex(r, n)?);
        let truth = if flags & 1 == 1 {
            let error = DVector::from_vec(io::read_complex(r, n)?);
            let phi = DMatrix::from_vec(n, m, io::read_complex(r, n * m)?);
            let symbols = DVector::from_vec(io::read_complex(r, n)?);
            Some(GroundTruth { symbols, error, phi, params: ReflectorParams::default() })
        } else {
            None
        };
        Ok(Self { n_b, n_d, y, b_hat, truth })
    }
}

/// Draw complex circular Gaussian noise with total variance `sigma²` per entry.
pub fn complex_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, sigma: f64) -> CMatrix {
    let s = sigma * FRAC_1_SQRT_2;
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(s * re, s * im)
    })
}

/// Form `Y = diag(vec(B)) Φ + W` where `vec(B) = b̂ + e`.
pub fn synthesize_observations<R: Rng + ?Sized>(
    truth_symbols: &SymbolGrid,
    estimated: &SymbolGrid,
    params: &ReflectorParams,
    num_receivers: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<ObservationSet> {
    let (n_b, n_d) = (truth_symbols.n_b, truth_symbols.n_d);
    if estimated.n_b != n_b || estimated.n_d != n_d {
        return Err(Error::Dimension("true and demodulated symbol grids differ in shape".into()));
    }
    if params.paths.iter().any(|p| p.len() != num_receivers) {
        return Err(Error::Dimension("reflector parameters do not cover every receiver".into()));
    }
    let phi = ground_truth_phi(params, num_receivers, n_b, n_d);
    let noise = complex_noise(rng, n_b * n_d, num_receivers, sigma);
    let mut y = phi.clone();
    for (row, b) in truth_symbols.symbols.iter().enumerate() {
        for m in 0..num_receivers {
            y[(row, m)] *= b;
        }
    }
    y += noise;
    let error = &truth_symbols.symbols - &estimated.symbols;
    Ok(ObservationSet {
        n_b,
        n_d,
        y,
        b_hat: estimated.symbols.clone(),
        truth: Some(GroundTruth {
            symbols: truth_symbols.symbols.clone(),
            error,
            phi,
            params: params.clone(),
        }),
    })
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::geometry::{GeometryConfig, Point3, TimingConfig, Velocity3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn symbols_split_into_estimate_and_error(seed in any::<u64>(), ber in 0.0..=0.5f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = draw_qpsk_symbols(&mut rng, 4, 6);
            let (est, e) = inject_demod_errors(&mut rng, &b, ber).unwrap();
            prop_assert_eq!(&est.symbols + &e, b.symbols);
        }

        #[test]
        fn synthesis_repeats_under_a_seed(seed in any::<u64>(), sigma in 0.0..2.0f64) {
            let (g, t) = (GeometryConfig::reference(), TimingConfig::reference());
            let scene = [SceneObject::new(Point3::new(2500.0, 3200.0, 120.0), Velocity3::new(-10.0, -90.0, -20.0))];
            let run = || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = scene_to_reflector_params(&g, &t, &scene, 1.0, &mut rng).unwrap();
                let b = draw_qpsk_symbols(&mut rng, 4, 4);
                let (est, _) = inject_demod_errors(&mut rng, &b, 0.05).unwrap();
                synthesize_observations(&b, &est, &params, 4, sigma, &mut rng).unwrap()
            };
            prop_assert_eq!(run(), run());
        }
    }
}
