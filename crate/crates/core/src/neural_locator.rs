//! Feed-forward position locator: range differences in, position out.
//!
//! A fully connected network with tanh after every layer, trained on
//! positions sampled on a uniform grid over the surveillance box.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    delay_difference_vector, delay_differences_from_normalized, GeometryConfig, Point3, SurveillanceBox,
    TimingConfig,
};
use crate::io::{expect_magic, read_f64, read_u32, write_f64, write_u32};
use crate::localize::{PositionEstimate, PositionLocator};

const MODEL_MAGIC: &[u8; 8] = b"PBRMLP\0\0";
const MODEL_VERSION: u32 = 1;

/// One dense layer, `out = tanh(W in + b)` with `W` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub n_in: usize,
    pub n_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weights: vec![0.0; n_in * n_out], bias: vec![0.0; n_out] }
    }

    fn forward_into(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out.iter_mut().zip(self.weights.chunks_exact(self.n_in).zip(&self.bias)) {
            let s: f64 = row.iter().zip(input).map(|(w, x)| w * x).sum();
            *o = (s + b).tanh();
        }
    }

    fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_out, self.n_in, &self.weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// `sizes` lists every layer width, input first.
    pub fn zeros(sizes: &[usize]) -> Self {
        Self { layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize]) -> Self {
        let mut p = Self::zeros(sizes);
        for layer in &mut p.layers {
            let a = (6.0 / (layer.n_in + layer.n_out) as f64).sqrt();
            for w in &mut layer.weights {
                *w = rng.gen_range(-a..a);
            }
        }
        p
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers.first().map_or(0, |l| l.n_in)];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        for layer in &self.layers {
            let mut next = vec![0.0; layer.n_out];
            layer.forward_into(&cur, &mut next);
            cur = next;
        }
        cur
    }

    /// Upper bound on the Lipschitz constant: tanh is 1-Lipschitz, so the
    /// product of layer spectral norms bounds the whole map.
    pub fn lipschitz_bound(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.as_matrix().singular_values().max())
            .product()
    }

    fn all_values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    fn all_values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }
}

/// Affine maps of inputs and outputs onto `[−1, 1]` per component.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub in_min: Vec<f64>,
    pub in_max: Vec<f64>,
    pub out_min: [f64; 3],
    pub out_max: [f64; 3],
}

fn to_unit(v: f64, lo: f64, hi: f64) -> f64 {
    2.0 * (v - lo) / (hi - lo) - 1.0
}

fn from_unit(u: f64, lo: f64, hi: f64) -> f64 {
    lo + (u + 1.0) * 0.5 * (hi - lo)
}

impl Normalizer {
    pub fn fit(inputs: &[Vec<f64>], bx: &SurveillanceBox) -> Result<Self> {
        let dim = inputs.first().map_or(0, Vec::len);
        let mut in_min = vec![f64::INFINITY; dim];
        let mut in_max = vec![f64::NEG_INFINITY; dim];
        for v in inputs {
            for (k, &x) in v.iter().enumerate() {
                in_min[k] = in_min[k].min(x);
                in_max[k] = in_max[k].max(x);
            }
        }
        if in_min.iter().zip(&in_max).any(|(a, b)| !(b > a)) {
            return Err(Error::Config("training inputs are constant along some component".into()));
        }
        Ok(Self { in_min, in_max, out_min: bx.min.to_array(), out_max: bx.max.to_array() })
    }

    pub fn normalize_input(&self, d: &[f64]) -> Vec<f64> {
        d.iter().enumerate().map(|(k, &v)| to_unit(v, self.in_min[k], self.in_max[k])).collect()
    }

    pub fn normalize_output(&self, x: Point3) -> [f64; 3] {
        let a = x.to_array();
        [0, 1, 2].map(|k| to_unit(a[k], self.out_min[k], self.out_max[k]))
    }

    pub fn denormalize_output(&self, u: &[f64]) -> Point3 {
        Point3::from_array([0, 1, 2].map(|k| from_unit(u[k], self.out_min[k], self.out_max[k])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub counts: [usize; 3],
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { counts: [20, 20, 10] }
    }
}

impl GridSpec {
    pub fn steps(&self, bx: &SurveillanceBox) -> Point3 {
        let e = bx.extent().to_array();
        Point3::from_array([0, 1, 2].map(|k| e[k] / self.counts[k] as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_h: usize,
    pub hidden_layers: usize,
    pub max_epochs: usize,
    /// Validation MSE target in normalized output units.
    pub goal: f64,
    pub validation_fraction: f64,
    pub batch_size: usize,
    /// Learning rate decays geometrically from `learning_rate` to
    /// `final_learning_rate` over `max_epochs`.
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub grid: GridSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_h: 25,
            hidden_layers: 2,
            max_epochs: 1000,
            goal: 1e-8,
            validation_fraction: 0.1,
            batch_size: 16,
            learning_rate: 1e-2,
            final_learning_rate: 3e-5,
            grid: GridSpec::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.goal > 0.0) {
            return bad("goal must be positive");
        }
        if self.grid.counts.iter().any(|&c| c < 2) {
            return bad("grid counts must be at least 2 per axis");
        }
        if self.n_h == 0 || self.hidden_layers == 0 || self.batch_size == 0 {
            return bad("n_h, hidden_layers and batch_size must be positive");
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad("validation_fraction must lie in (0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.final_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    fn layer_sizes(&self, n_in: usize) -> Vec<usize> {
        let mut s = vec![n_in];
        s.extend(std::iter::repeat_n(self.n_h, self.hidden_layers));
        s.push(3);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub input: Vec<f64>,
    pub position: Point3,
}

/// Grid positions `min + step·k` for `k = 1..=count` along each axis, so the
/// open lower face of the box is excluded and the upper face included.
pub fn grid_positions(bx: &SurveillanceBox, grid: &GridSpec) -> Vec<Point3> {
    let step = grid.steps(bx);
    let [nx, ny, nz] = grid.counts;
    let mut out = Vec::with_capacity(nx * ny * nz);
    for i in 1..=nx {
        for j in 1..=ny {
            for k in 1..=nz {
                out.push(Point3::new(
                    bx.min.x + step.x * i as f64,
                    bx.min.y + step.y * j as f64,
                    bx.min.z + step.z * k as f64,
                ));
            }
        }
    }
    out
}

pub fn generate_training_set(geom: &GeometryConfig, grid: &GridSpec) -> Result<Vec<TrainingSample>> {
    if grid.counts.iter().any(|&c| c < 2) {
        return Err(Error::Config("grid counts must be at least 2 per axis".into()));
    }
    Ok(grid_positions(&geom.surveillance_box, grid)
        .into_iter()
        .map(|x| TrainingSample { input: delay_difference_vector(geom, x), position: x })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub best_val_mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub reached_goal: bool,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs.last().map_or(f64::INFINITY, |e| e.best_val_mse)
    }
}

/// Network plus its normalizer; the unit that gets saved and loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    pub params: MlpParams,
    pub normalizer: Normalizer,
}

impl NeuralModel {
    pub fn predict(&self, d: &[f64]) -> Point3 {
        let out = self.params.forward(&self.normalizer.normalize_input(d));
        self.normalizer.denormalize_output(&out)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        write_u32(w, MODEL_VERSION)?;
        let sizes = self.params.sizes();
        write_u32(w, sizes.len() as u32)?;
        for s in &sizes {
            write_u32(w, *s as u32)?;
        }
        let n = &self.normalizer;
        for v in n.in_min.iter().chain(&n.in_max).chain(&n.out_min).chain(&n.out_max) {
            write_f64(w, *v)?;
        }
        for v in self.params.all_values() {
            write_f64(w, *v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        expect_magic(r, MODEL_MAGIC)?;
        let version = read_u32(r)?;
        if version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let count = read_u32(r)? as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let sizes: Vec<usize> = (0..count).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
        if sizes[count - 1] != 3 || sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
            return Err(Error::Format(format!("bad layer sizes {sizes:?}")));
        }
        let mut read_vec = |n: usize| (0..n).map(|_| read_f64(r)).collect::<Result<Vec<f64>>>();
        let in_min = read_vec(sizes[0])?;
        let in_max = read_vec(sizes[0])?;
        let out_min = read_vec(3)?;
        let out_max = read_vec(3)?;
        let mut params = MlpParams::zeros(&sizes);
        let values = read_vec(params.num_params())?;
        for (dst, src) in params.all_values_mut().zip(values) {
            *dst = src;
        }
        let normalizer = Normalizer {
            in_min,
            in_max,
            out_min: [out_min[0], out_min[1], out_min[2]],
            out_max: [out_max[0], out_max[1], out_max[2]],
        };
        Ok(Self { params, normalizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Per-layer gradient buffers shaped like [`MlpParams`].
fn zeros_like(p: &MlpParams) -> MlpParams {
    MlpParams::zeros(&p.sizes())
}

/// Accumulates the gradient of `Σ ‖out − target‖² / (3·batch)` into `grad`
/// and returns the unscaled squared error.
fn backprop(p: &MlpParams, input: &[f64], target: &[f64; 3], scale: f64, grad: &mut MlpParams) -> f64 {
    let mut acts = vec![input.to_vec()];
    for layer in &p.layers {
        let mut next = vec![0.0; layer.n_out];
        layer.forward_into(acts.last().unwrap(), &mut next);
        acts.push(next);
    }
    let out = acts.last().unwrap();
    let mut sq = 0.0;
    let mut delta: Vec<f64> = out
        .iter()
        .zip(target)
        .map(|(o, t)| {
            sq += (o - t) * (o - t);
            2.0 * scale * (o - t) * (1.0 - o * o)
        })
        .collect();
    for l in (0..p.layers.len()).rev() {
        let layer = &p.layers[l];
        let a_in = &acts[l];
        let g = &mut grad.layers[l];
        for (r, &dr) in delta.iter().enumerate() {
            g.bias[r] += dr;
            for (gw, &a) in g.weights[r * layer.n_in..(r + 1) * layer.n_in].iter_mut().zip(a_in) {
                *gw += dr * a;
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; layer.n_in];
            for (r, &dr) in delta.iter().enumerate() {
                for (pv, &w) in prev.iter_mut().zip(&layer.weights[r * layer.n_in..(r + 1) * layer.n_in]) {
                    *pv += w * dr;
                }
            }
            for (pv, &a) in prev.iter_mut().zip(a_in) {
                *pv *= 1.0 - a * a;
            }
            delta = prev;
        }
    }
    sq
}

fn mse(p: &MlpParams, inputs: &[Vec<f64>], targets: &[[f64; 3]]) -> f64 {
    let total: f64 = inputs
        .iter()
        .zip(targets)
        .map(|(x, t)| p.forward(x).iter().zip(t).map(|(o, t)| (o - t) * (o - t)).sum::<f64>())
        .sum();
    total / (3 * inputs.len().max(1)) as f64
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut MlpParams, grad: &MlpParams, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for (((p, &g), m), v) in params.all_values_mut().zip(grad.all_values()).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::B1 * *m + (1.0 - Self::B1) * g;
            *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NeuralModel,
    pub history: TrainHistory,
}

/// Minibatch Adam on normalized MSE. Keeps the parameters with the best
/// validation MSE and stops at the epoch cap or once that MSE reaches the goal.
pub fn train<R: Rng + ?Sized>(
    dataset: &[TrainingSample],
    bx: &SurveillanceBox,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.len() < 100 {
        return Err(Error::Config(format!("need at least 100 training samples, got {}", dataset.len())));
    }
    let n_in = dataset[0].input.len();
    if dataset.iter().any(|s| s.input.len() != n_in) {
        return Err(Error::Dimension("training inputs differ in length".into()));
    }
    let inputs: Vec<Vec<f64>> = dataset.iter().map(|s| s.input.clone()).collect();
    let normalizer = Normalizer::fit(&inputs, bx)?;
    let xs: Vec<Vec<f64>> = inputs.iter().map(|d| normalizer.normalize_input(d)).collect();
    let ys: Vec<[f64; 3]> = dataset.iter().map(|s| normalizer.normalize_output(s.position)).collect();

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(rng);
    let n_val = ((dataset.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, dataset.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |idx: &[usize]| -> (Vec<Vec<f64>>, Vec<[f64; 3]>) {
        (idx.iter().map(|&i| xs[i].clone()).collect(), idx.iter().map(|&i| ys[i]).collect())
    };
    let (val_x, val_y) = pick(val_idx);
    let mut train_idx = train_idx.to_vec();

    let mut params = MlpParams::init(rng, &cfg.layer_sizes(n_in));
    let mut best = params.clone();
    let mut adam = Adam::new(params.num_params());
    let mut history = TrainHistory::default();
    let mut best_val = f64::INFINITY;
    let decay = (cfg.final_learning_rate / cfg.learning_rate).powf(1.0 / cfg.max_epochs.max(1) as f64);
    let mut grad = zeros_like(&params);
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate * decay.powi(epoch as i32);
        train_idx.shuffle(rng);
        let mut sq = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            grad.all_values_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / (3 * batch.len()) as f64;
            for &i in batch {
                sq += backprop(&params, &xs[i], &ys[i], scale, &mut grad);
            }
            adam.step(&mut params, &grad, lr);
        }
        let train_mse = sq / (3 * train_idx.len()) as f64;
        let val_mse = mse(&params, &val_x, &val_y);
        if val_mse.is_finite() && val_mse < best_val {
            best_val = val_mse;
            best = params.clone();
            history.best_epoch = epoch;
        }
        history.epochs.push(EpochRecord { epoch, train_mse, val_mse, best_val_mse: best_val });
        if best_val <= cfg.goal {
            history.reached_goal = true;
            break;
        }
    }
    Ok(TrainOutcome { model: NeuralModel { params: best, normalizer }, history })
}

/// Network-backed [`PositionLocator`].
#[derive(Debug, Clone)]
pub struct NeuralLocator {
    pub model: NeuralModel,
    pub geom: GeometryConfig,
    pub timing: TimingConfig,
}

impl PositionLocator for NeuralLocator {
    fn locate(&self, taus: &[f64]) -> Result<PositionEstimate> {
        if taus.len() != self.geom.num_receivers() || taus.len() != self.model.normalizer.in_min.len() + 1 {
            return Err(Error::Dimension(format!("{} delays for a {}-input model", taus.len(), self.model.normalizer.in_min.len())));
        }
        let d = delay_differences_from_normalized(taus, &self.geom, &self.timing);
        let x = self.model.predict(&d);
        let model = delay_difference_vector(&self.geom, x);
        let residual = (model.iter().zip(&d).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / d.len() as f64).sqrt();
        Ok(PositionEstimate {
            position: x,
            feasible: self.geom.surveillance_box.contains(x),
            residual,
            groups_used: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn paper_grid_shape() {
        let g = GeometryConfig::reference();
        let set = generate_training_set(&g, &GridSpec::default()).unwrap();
        assert_eq!(set.len(), 4000);
        let step = GridSpec::default().steps(&g.surveillance_box);
        assert_eq!((step.x, step.y, step.z), (250.0, 250.0, 150.0));
        for s in set.iter().step_by(97) {
            assert_eq!(s.input, delay_difference_vector(&g, s.position));
            assert!(g.surveillance_box.contains(s.position));
        }
        assert!(generate_training_set(&g, &GridSpec { counts: [1, 20, 10] }).is_err());
    }

    #[test]
    fn zero_network_predicts_center() {
        let g = GeometryConfig::reference();
        let model = NeuralModel {
            params: MlpParams::zeros(&[3, 25, 25, 3]),
            normalizer: Normalizer {
                in_min: vec![-1.0; 3],
                in_max: vec![1.0; 3],
                out_min: g.surveillance_box.min.to_array(),
                out_max: g.surveillance_box.max.to_array(),
            },
        };
        let x = model.predict(&[123.0, -40.0, 7.0]);
        assert_eq!(x, g.surveillance_box.center());
    }

    #[test]
    fn forward_matches_matrix_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = MlpParams::init(&mut rng, &[3, 25, 25, 3]);
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut h = nalgebra::DVector::from_vec(x.clone());
            for l in &p.layers {
                h = (l.as_matrix() * h + nalgebra::DVector::from_vec(l.bias.clone())).map(f64::tanh);
            }
            let got = p.forward(&x);
            for k in 0..3 {
                assert!((got[k] - h[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = MlpParams::init(&mut rng, &[3, 6, 5, 3]);
        let x = vec![0.3, -0.7, 0.2];
        let t = [0.1, -0.4, 0.8];
        let mut g = zeros_like(&p);
        backprop(&p, &x, &t, 1.0 / 3.0, &mut g);
        let loss = |q: &MlpParams| mse(q, std::slice::from_ref(&x), &[t]);
        let grads: Vec<f64> = g.all_values().copied().collect();
        for (k, &gk) in grads.iter().enumerate() {
            let h = 1e-6;
            let mut plus = p.clone();
            *plus.all_values_mut().nth(k).unwrap() += h;
            let mut minus = p.clone();
            *minus.all_values_mut().nth(k).unwrap() -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - gk).abs() < 1e-8 * (1.0 + gk.abs()), "param {k}: {fd} vs {gk}");
        }
    }

    #[test]
    fn lipschitz_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = MlpParams::init(&mut rng, &[3, 25, 25, 3]);
        let bound = p.lipschitz_bound();
        assert!(bound.is_finite() && bound > 0.0);
        for _ in 0..200 {
            let a: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dist = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            assert!(dist(&p.forward(&a), &p.forward(&b)) <= bound * dist(&a, &b) + 1e-12);
        }
    }

    #[test]
    fn model_file_roundtrip_and_rejects_garbage() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = NeuralModel {
            params: MlpParams::init(&mut rng, &[3, 4, 4, 3]),
            normalizer: Normalizer {
                in_min: vec![-1.0, -2.0, -3.0],
                in_max: vec![1.0, 2.0, 3.0],
                out_min: [0.0, 1000.0, 0.0],
                out_max: [5000.0, 6000.0, 1500.0],
            },
        };
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        assert_eq!(NeuralModel::read_from(&mut buf.as_slice()).unwrap(), model);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(NeuralModel::read_from(&mut bad.as_slice()).is_err());
        assert!(NeuralModel::read_from(&mut &buf[..buf.len() - 8]).is_err());
    }

    #[test]
    fn short_training_is_deterministic_and_checkpointed() {
        let g = GeometryConfig::reference();
        let grid = GridSpec { counts: [6, 6, 4] };
        let set = generate_training_set(&g, &grid).unwrap();
        let cfg = TrainConfig { max_epochs: 30, grid, ..TrainConfig::default() };
        let run = || train(&set, &g.surveillance_box, &cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.model, b.model);
        let h = &a.history;
        assert_eq!(h.epochs.len(), 30);
        for w in h.epochs.windows(2) {
            assert!(w[1].best_val_mse <= w[0].best_val_mse);
            assert!(w[1].val_mse.is_finite());
        }
        assert!(h.epochs[29].best_val_mse < h.epochs[0].val_mse);
        let small = &set[..50];
        assert!(train(small, &g.surveillance_box, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn normalizer_roundtrip() {
        let g = GeometryConfig::reference();
        let n = Normalizer {
            in_min: vec![0.0; 3],
            in_max: vec![1.0; 3],
            out_min: g.surveillance_box.min.to_array(),
            out_max: g.surveillance_box.max.to_array(),
        };
        for x in grid_positions(&g.surveillance_box, &GridSpec { counts: [5, 5, 5] }) {
            let back = n.denormalize_output(&n.normalize_output(x));
            assert!(back.distance(x) < 1e-12 * 1e4);
        }
    }
}
