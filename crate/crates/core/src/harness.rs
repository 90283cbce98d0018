//! Scenario configs, the end-to-end trial pipeline, Monte-Carlo sweeps,
//! tracking runs and error metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;
use web_time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgd_solver::{cgd_solve, cr_solve, solve_with_redemodulation, SolveReport, SolverConfig, DEFAULT_SIGMA_FLOOR};
use crate::error::{Error, Result};
use crate::geometry::{check_prefix_covers_box, GeometryConfig, Point3, TimingConfig, Velocity3};
use crate::localize::{localize_targets, EquationLocator, LocalizeConfig, PositionLocator, TargetStateEstimate};
use crate::neural_locator::{generate_training_set, train, NeuralLocator, NeuralModel, TrainConfig};
use crate::spectral::{extract_from_report, select_top_l, DelayDopplerEstimate, MusicConfig};
use crate::waveform::{
    draw_qpsk_symbols, inject_demod_errors, scene_to_reflector_params, sigma_for_power, synthesize_observations,
    ObservationSet, SceneObject,
};
use crate::CMatrix;

const PAPER_TOML: &str = include_str!("../../../scenarios/paper.toml");
const TRACK1_TOML: &str = include_str!("../../../scenarios/track1.toml");
const TRACK1_CSV: &str = include_str!("../../../scenarios/track1.csv");
const TRACK2_TOML: &str = include_str!("../../../scenarios/track2.toml");
const TRACK2_CSV: &str = include_str!("../../../scenarios/track2.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    #[default]
    Cgd,
    Cr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LocatorKind {
    #[default]
    Solver,
    Nn,
}

/// Solver settings; unset fields take the noise-derived defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub kind: SolverKind,
    pub sigma_floor: f64,
    pub redemodulate: bool,
    pub rank: Option<usize>,
    pub max_iter: Option<usize>,
    pub rho: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_redemod_rounds: Option<usize>,
}

impl Default for SolverParams {
    fn default() -> Self {
        Self {
            kind: SolverKind::Cgd,
            sigma_floor: DEFAULT_SIGMA_FLOOR,
            redemodulate: true,
            rank: None,
            max_iter: None,
            rho: None,
            epsilon: None,
            max_redemod_rounds: None,
        }
    }
}

impl SolverParams {
    pub fn build(&self, sigma: f64, n_b: usize, n_d: usize) -> SolverConfig {
        let mut cfg = SolverConfig::from_noise(sigma, self.sigma_floor, n_b, n_d);
        if let Some(v) = self.rank {
            cfg.rank = v;
        }
        if let Some(v) = self.max_iter {
            cfg.max_iter = v;
        }
        if let Some(v) = self.rho {
            cfg.rho = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.max_redemod_rounds {
            cfg.max_redemod_rounds = v;
        }
        cfg
    }

    pub fn solve<R: Rng + ?Sized>(&self, obs: &ObservationSet, cfg: &SolverConfig, rng: &mut R) -> Result<SolveReport> {
        match (self.kind, self.redemodulate) {
            (SolverKind::Cr, _) => cr_solve(obs, cfg, rng),
            (SolverKind::Cgd, true) => solve_with_redemodulation(obs, cfg, rng),
            (SolverKind::Cgd, false) => cgd_solve(obs, cfg, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "GeometryConfig::reference")]
    pub geometry: GeometryConfig,
    #[serde(default = "TimingConfig::reference")]
    pub timing: TimingConfig,
    /// Default gain magnitude for objects without their own amplitude.
    #[serde(default = "one")]
    pub c0: f64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
    /// Per-second waypoint CSV, relative to the config file.
    #[serde(default)]
    pub trajectory: Option<PathBuf>,
    #[serde(skip)]
    pub waypoints: Option<Trajectory>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub snr_db: Vec<f64>,
    pub ber: Vec<f64>,
}

impl Default for SweepAxes {
    fn default() -> Self {
        Self { snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0], ber: vec![0.01] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_snr")]
    pub snr_db: f64,
    #[serde(default = "default_ber")]
    pub ber: f64,
    #[serde(default)]
    pub locator: LocatorKind,
    /// Trained network for the `nn` locator; trained on the fly when unset.
    #[serde(default)]
    pub model_path: Option<PathBuf>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub music: MusicConfig,
    #[serde(default)]
    pub localize: LocalizeConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepAxes,
}

fn default_trials() -> usize {
    1
}

fn default_snr() -> f64 {
    15.0
}

fn default_ber() -> f64 {
    0.01
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    /// Parses a config; a trajectory path is resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        if let Some(rel) = &cfg.scenario.trajectory {
            let path = base_dir.map_or_else(|| rel.clone(), |b| b.join(rel));
            let text = std::fs::read_to_string(&path)
                .map_err(|e| Error::Config(format!("trajectory {}: {e}", path.display())))?;
            cfg.scenario.waypoints = Some(Trajectory::parse(&text)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent())
    }

    /// Shipped scenarios: `paper`, `track1`, `track2`.
    pub fn builtin(name: &str) -> Result<Self> {
        let (toml_text, csv) = match name {
            "paper" => (PAPER_TOML, None),
            "track1" => (TRACK1_TOML, Some(TRACK1_CSV)),
            "track2" => (TRACK2_TOML, Some(TRACK2_CSV)),
            _ => return Err(Error::Config(format!("unknown built-in scenario {name:?}"))),
        };
        let mut cfg: RunConfig = toml::from_str(toml_text)?;
        if let Some(csv) = csv {
            cfg.scenario.waypoints = Some(Trajectory::parse(csv)?);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scenario;
        s.geometry.validate()?;
        s.timing.validate()?;
        check_prefix_covers_box(&s.geometry, &s.timing)?;
        self.music.validate()?;
        self.train.validate()?;
        if s.objects.is_empty() && s.waypoints.is_none() {
            return Err(Error::Config("scenario needs objects or a trajectory".into()));
        }
        if s.trajectory.is_some() && s.waypoints.is_none() {
            return Err(Error::Config("trajectory file was not loaded".into()));
        }
        if let Some(w) = &s.waypoints {
            for (t, objs) in w.seconds.iter().enumerate() {
                if let Some(o) = objs.iter().find(|o| !s.geometry.surveillance_box.contains(o.position)) {
                    return Err(Error::Config(format!("waypoint at second {t} leaves the box: {:?}", o.position)));
                }
            }
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ber) || self.sweep.ber.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::Config("BER values must lie in [0, 1]".into()));
        }
        if !(s.c0 > 0.0) {
            return Err(Error::Config("c0 must be positive".into()));
        }
        if let Some(p) = &self.model_path {
            if self.locator == LocatorKind::Nn && !p.exists() {
                return Err(Error::Config(format!("model file {} does not exist", p.display())));
            }
        }
        self.solver.build(1.0, s.timing.n_b, s.timing.n_d).validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).unwrap_or_default()
    }

    /// Static scene: the configured objects, or the first waypoint second.
    pub fn scene(&self) -> Vec<SceneObject> {
        match &self.scenario.waypoints {
            Some(w) if self.scenario.objects.is_empty() => w.seconds[0].clone(),
            _ => self.scenario.objects.clone(),
        }
    }
}

/// Object states per second, `seconds[t][object]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    pub seconds: Vec<Vec<SceneObject>>,
}

impl Trajectory {
    /// CSV with header `second,object,x,y,z,vx,vy,vz,amplitude`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Format("empty trajectory".into()))?;
        if header.trim() != "second,object,x,y,z,vx,vy,vz,amplitude" {
            return Err(Error::Format(format!("unexpected trajectory header {header:?}")));
        }
        let mut seconds: Vec<Vec<SceneObject>> = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 9 {
                return Err(Error::Format(format!("trajectory row needs 9 fields: {line:?}")));
            }
            let int = |s: &str| s.parse::<usize>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}")));
            let (t, k) = (int(f[0])?, int(f[1])?);
            if t != seconds.len() && t + 1 != seconds.len() {
                return Err(Error::Format(format!("trajectory seconds must be consecutive, got {t}")));
            }
            if t == seconds.len() {
                seconds.push(Vec::new());
            }
            if k != seconds[t].len() {
                return Err(Error::Format(format!("objects must be listed in order at second {t}")));
            }
            let obj = SceneObject::new(
                Point3::new(num(f[2])?, num(f[3])?, num(f[4])?),
                Velocity3::new(num(f[5])?, num(f[6])?, num(f[7])?),
            )
            .with_amplitude(num(f[8])?);
            seconds[t].push(obj);
        }
        if seconds.is_empty() || seconds.iter().any(|s| s.len() != seconds[0].len()) {
            return Err(Error::Format("every second must list the same objects".into()));
        }
        Ok(Self { seconds })
    }
}

/// Per-trial generator keyed by `(master seed, trial index)`.
pub fn trial_rng(master: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(trial);
    rng
}

pub fn rmse_phi(phi: &CMatrix, phi_hat: &CMatrix) -> f64 {
    (phi - phi_hat).norm()
}

/// Normalizers for position and velocity errors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBounds {
    pub position: [f64; 3],
    pub velocity: f64,
}

impl ErrorBounds {
    pub fn for_geometry(geom: &GeometryConfig) -> Self {
        Self { position: geom.surveillance_box.extent().to_array(), velocity: 600.0 }
    }
}

/// Greedy nearest-position assignment, truth index to estimate index.
pub fn match_targets(truth: &[SceneObject], est: &[TargetStateEstimate]) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, t) in truth.iter().enumerate() {
        for (j, e) in est.iter().enumerate() {
            pairs.push((t.position.distance(e.position.position), i, j));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut out = vec![None; truth.len()];
    let mut taken = vec![false; est.len()];
    for (d, i, j) in pairs {
        if out[i].is_none() && !taken[j] && d.is_finite() {
            out[i] = Some(j);
            taken[j] = true;
        }
    }
    out
}

/// Normalized absolute per-axis position and velocity errors, each capped
/// at 1; a missing or infeasible estimate scores exactly 1.
pub fn target_errors(truth: &SceneObject, est: Option<&TargetStateEstimate>, b: &ErrorBounds) -> ([f64; 3], [f64; 3]) {
    let Some(e) = est.filter(|e| e.feasible()) else {
        return ([1.0; 3], [1.0; 3]);
    };
    let p = e.position.position.to_array();
    let tp = truth.position.to_array();
    let pos = [0, 1, 2].map(|k| ((p[k] - tp[k]).abs() / b.position[k]).min(1.0));
    let vel = match e.velocity {
        Some(v) => {
            let (v, tv) = (v.velocity.to_array(), truth.velocity.to_array());
            [0, 1, 2].map(|k| ((v[k] - tv[k]).abs() / b.velocity).min(1.0))
        }
        None => [1.0; 3],
    };
    (pos, vel)
}

/// Averages of [`target_errors`] over every target of every trial.
pub fn rmpe_rmve(trials: &[(Vec<SceneObject>, Vec<TargetStateEstimate>)], b: &ErrorBounds) -> ([f64; 3], [f64; 3]) {
    let mut pos = [0.0; 3];
    let mut vel = [0.0; 3];
    let mut count = 0usize;
    for (truth, est) in trials {
        let matches = match_targets(truth, est);
        for (t, m) in truth.iter().zip(matches) {
            let (p, v) = target_errors(t, m.map(|j| &est[j]), b);
            for k in 0..3 {
                pos[k] += p[k];
                vel[k] += v[k];
            }
            count += 1;
        }
    }
    let n = count.max(1) as f64;
    (pos.map(|v| v / n), vel.map(|v| v / n))
}

/// Everything one trial produces.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub truth: Vec<SceneObject>,
    pub phi: CMatrix,
    pub report: SolveReport,
    pub paths: DelayDopplerEstimate,
    pub targets: Vec<TargetStateEstimate>,
}

impl TrialOutput {
    pub fn rmse_phi(&self) -> f64 {
        rmse_phi(&self.phi, &self.report.phi)
    }
}

/// Noise level for a scene at the given SNR; `+∞` dB means noiseless.
pub fn scene_sigma(params: &crate::waveform::ReflectorParams, snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        sigma_for_power(params.signal_power(), snr_db)
    }
}

/// Synthesize observations for `scene` using `rng`.
pub fn simulate<R: Rng + ?Sized>(
    scenario: &ScenarioConfig,
    scene: &[SceneObject],
    snr_db: f64,
    ber: f64,
    rng: &mut R,
) -> Result<(ObservationSet, f64)> {
    let (g, t) = (&scenario.geometry, &scenario.timing);
    let params = scene_to_reflector_params(g, t, scene, scenario.c0, rng)?;
    let symbols = draw_qpsk_symbols(rng, t.n_b, t.n_d);
    let (b_hat, _) = inject_demod_errors(rng, &symbols, ber)?;
    let sigma = scene_sigma(&params, snr_db);
    let obs = synthesize_observations(&symbols, &b_hat, &params, g.num_receivers(), sigma, rng)?;
    Ok((obs, sigma))
}

/// Solve, extract and localize given observations; keeps the `num_targets`
/// strongest paths per receiver.
pub fn estimate_and_localize<R: Rng + ?Sized>(
    cfg: &RunConfig,
    obs: &ObservationSet,
    sigma: f64,
    num_targets: usize,
    locator: &dyn PositionLocator,
    rng: &mut R,
) -> Result<(SolveReport, DelayDopplerEstimate, Vec<TargetStateEstimate>)> {
    let s = &cfg.scenario;
    let solver_cfg = cfg.solver.build(sigma, obs.n_b, obs.n_d);
    let report = cfg.solver.solve(obs, &solver_cfg, rng)?;
    let mut paths = extract_from_report(&report, obs.n_b, obs.n_d, &cfg.music)?;
    for r in &mut paths.receivers {
        r.paths = select_top_l(&r.paths, num_targets);
    }
    let (targets, _) = localize_targets(&paths, obs.n_b, &s.geometry, &s.timing, &cfg.localize, locator)?;
    Ok((report, paths, targets))
}

/// One full pipeline run: synthesize, solve, extract, localize.
pub fn run_trial(
    cfg: &RunConfig,
    scene: &[SceneObject],
    snr_db: f64,
    ber: f64,
    trial: u64,
    locator: &dyn PositionLocator,
) -> Result<TrialOutput> {
    let mut rng = trial_rng(cfg.seed, trial);
    let (obs, sigma) = simulate(&cfg.scenario, scene, snr_db, ber, &mut rng)?;
    let (report, paths, targets) = estimate_and_localize(cfg, &obs, sigma, scene.len(), locator, &mut rng)?;
    let phi = obs.truth.map(|t| t.phi).unwrap_or_else(|| report.phi.clone());
    Ok(TrialOutput { truth: scene.to_vec(), phi, report, paths, targets })
}

/// The locator selected by `cfg`: the equation solver, a saved network, or
/// a network trained on the spot.
pub fn build_locator(cfg: &RunConfig) -> Result<Box<dyn PositionLocator>> {
    let s = &cfg.scenario;
    match cfg.locator {
        LocatorKind::Solver => Ok(Box::new(EquationLocator {
            geom: s.geometry.clone(),
            timing: s.timing,
            cfg: cfg.localize.clone(),
        })),
        LocatorKind::Nn => {
            let model = match &cfg.model_path {
                Some(p) => NeuralModel::load(p)?,
                None => train_locator(cfg)?.0,
            };
            Ok(Box::new(NeuralLocator { model, geom: s.geometry.clone(), timing: s.timing }))
        }
    }
}

pub fn train_locator(cfg: &RunConfig) -> Result<(NeuralModel, crate::neural_locator::TrainHistory)> {
    let g = &cfg.scenario.geometry;
    let set = generate_training_set(g, &cfg.train.grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let out = train(&set, &g.surveillance_box, &cfg.train, &mut rng)?;
    Ok((out.model, out.history))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub rmse_phi: f64,
    pub iterations: usize,
    pub redemod_rounds: usize,
    pub converged: bool,
    pub pos_err: [f64; 3],
    pub vel_err: [f64; 3],
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub snr_db: f64,
    pub ber: f64,
    pub rmpe: [f64; 3],
    pub rmve: [f64; 3],
    pub mean_rmse_phi: f64,
    pub failures: usize,
    pub trials: Vec<TrialRecord>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Monte-Carlo trials at one operating point; trials run on the rayon pool
/// and results are collected in trial order.
pub fn run_point(cfg: &RunConfig, snr_db: f64, ber: f64, locator: &dyn PositionLocator) -> MetricReport {
    let start = Instant::now();
    let scene = cfg.scene();
    let bounds = ErrorBounds::for_geometry(&cfg.scenario.geometry);
    let outcomes: Vec<(usize, Result<TrialOutput>)> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| (t, run_trial(cfg, &scene, snr_db, ber, t as u64, locator)))
        .collect();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut pairs = Vec::with_capacity(outcomes.len());
    let mut failures = 0;
    for (trial, out) in outcomes {
        match out {
            Ok(o) => {
                let (pos_err, vel_err) = rmpe_rmve(&[(o.truth.clone(), o.targets.clone())], &bounds);
                records.push(TrialRecord {
                    trial,
                    rmse_phi: o.rmse_phi(),
                    iterations: o.report.iterations,
                    redemod_rounds: o.report.redemod_rounds,
                    converged: o.report.converged,
                    pos_err,
                    vel_err,
                    error: None,
                });
                pairs.push((o.truth, o.targets));
            }
            Err(e) => {
                log::warn!("trial {trial} at {snr_db} dB, BER {ber} failed: {e}");
                failures += 1;
                records.push(TrialRecord {
                    trial,
                    rmse_phi: f64::NAN,
                    iterations: 0,
                    redemod_rounds: 0,
                    converged: false,
                    pos_err: [1.0; 3],
                    vel_err: [1.0; 3],
                    error: Some(e.to_string()),
                });
                pairs.push((scene.clone(), Vec::new()));
            }
        }
    }
    let (rmpe, rmve) = rmpe_rmve(&pairs, &bounds);
    let ok: Vec<f64> = records.iter().map(|r| r.rmse_phi).filter(|v| v.is_finite()).collect();
    let mean_rmse_phi = if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 };
    MetricReport { snr_db, ber, rmpe, rmve, mean_rmse_phi, failures, trials: records, wall_time: start.elapsed() }
}

/// Every (SNR, BER) combination of the sweep axes.
pub fn run_sweep(cfg: &RunConfig, locator: &dyn PositionLocator) -> Vec<MetricReport> {
    let mut out = Vec::new();
    for &ber in &cfg.sweep.ber {
        for &snr in &cfg.sweep.snr_db {
            out.push(run_point(cfg, snr, ber, locator));
        }
    }
    out
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v}")
    }
}

pub fn summary_csv(points: &[MetricReport]) -> String {
    let mut s = String::from("snr_db,ber,trials,failures,rmpe_x,rmpe_y,rmpe_z,rmve_x,rmve_y,rmve_z,mean_rmse_phi\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            fmt_db(p.snr_db),
            p.ber,
            p.trials.len(),
            p.failures,
            p.rmpe[0],
            p.rmpe[1],
            p.rmpe[2],
            p.rmve[0],
            p.rmve[1],
            p.rmve[2],
            p.mean_rmse_phi
        );
    }
    s
}

pub fn trials_csv(p: &MetricReport) -> String {
    let mut s = String::from(
        "trial,rmse_phi,iterations,redemod_rounds,converged,pos_err_x,pos_err_y,pos_err_z,vel_err_x,vel_err_y,vel_err_z,error\n",
    );
    for r in &p.trials {
        let _ = writeln!(
            s,
            "{},{:.9},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.trial,
            r.rmse_phi,
            r.iterations,
            r.redemod_rounds,
            r.converged,
            r.pos_err[0],
            r.pos_err[1],
            r.pos_err[2],
            r.vel_err[0],
            r.vel_err[1],
            r.vel_err[2],
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    s
}

/// Writes the config snapshot, seed and per-point CSVs. Wall times go to a
/// separate text file so the CSVs stay reproducible.
pub fn write_sweep(dir: &Path, cfg: &RunConfig, points: &[MetricReport]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_snapshot(dir, cfg)?;
    std::fs::write(dir.join("summary.csv"), summary_csv(points))?;
    let mut timing = String::new();
    for p in points {
        let name = format!("point_snr{}_ber{}.csv", fmt_db(p.snr_db), p.ber);
        std::fs::write(dir.join(name), trials_csv(p))?;
        let _ = writeln!(timing, "snr {} ber {}: {:.3} s", fmt_db(p.snr_db), p.ber, p.wall_time.as_secs_f64());
    }
    std::fs::write(dir.join("wall_time.txt"), timing)?;
    Ok(())
}

pub fn write_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    std::fs::write(dir.join("seed.txt"), format!("{}\n", cfg.seed))?;
    Ok(())
}

/// One tracked second: truth, estimates and the truth-to-estimate matching.
#[derive(Debug, Clone)]
pub struct TrackingSecond {
    pub second: usize,
    pub truth: Vec<SceneObject>,
    pub targets: Vec<TargetStateEstimate>,
    pub matches: Vec<Option<usize>>,
    pub error: Option<String>,
}

impl TrackingSecond {
    pub fn matched(&self, object: usize) -> Option<&TargetStateEstimate> {
        self.matches[object].map(|j| &self.targets[j])
    }
}

/// Independent estimation once per waypoint second at the config's SNR/BER.
pub fn run_tracking(cfg: &RunConfig, locator: &dyn PositionLocator) -> Result<Vec<TrackingSecond>> {
    let w = cfg
        .scenario
        .waypoints
        .as_ref()
        .ok_or_else(|| Error::Config("tracking needs a trajectory".into()))?;
    let out = w
        .seconds
        .par_iter()
        .enumerate()
        .map(|(t, truth)| {
            let (targets, error) = match run_trial(cfg, truth, cfg.snr_db, cfg.ber, t as u64, locator) {
                Ok(o) => (o.targets, None),
                Err(e) => {
                    log::warn!("second {t} failed: {e}");
                    (Vec::new(), Some(e.to_string()))
                }
            };
            let matches = match_targets(truth, &targets);
            TrackingSecond { second: t, truth: truth.clone(), targets, matches, error }
        })
        .collect();
    Ok(out)
}

/// One row per second; columns repeat per true object.
pub fn tracking_csv(rows: &[TrackingSecond]) -> String {
    let objects = rows.first().map_or(0, |r| r.truth.len());
    let mut s = String::from("second");
    for k in 0..objects {
        for c in ["x", "y", "z", "vx", "vy", "vz", "clutter", "feasible", "true_x", "true_y", "true_z"] {
            let _ = write!(s, ",{c}{k}");
        }
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{}", r.second);
        for (k, t) in r.truth.iter().enumerate() {
            let (p, v, clutter, feasible) = match r.matched(k) {
                Some(e) => (
                    e.position.position,
                    e.velocity.map_or(Velocity3::new(f64::NAN, f64::NAN, f64::NAN), |v| v.velocity),
                    e.clutter(),
                    e.feasible(),
                ),
                None => (
                    Point3::new(f64::NAN, f64::NAN, f64::NAN),
                    Velocity3::new(f64::NAN, f64::NAN, f64::NAN),
                    false,
                    false,
                ),
            };
            let _ = write!(
                s,
                ",{:.3},{:.3},{:.3},{:.4},{:.4},{:.4},{},{},{:.3},{:.3},{:.3}",
                p.x, p.y, p.z, v.vx, v.vy, v.vz, clutter, feasible, t.position.x, t.position.y, t.position.z
            );
        }
        s.push('\n');
    }
    s
}

/// Fast invariant checks, one named result per check.
pub fn selftest() -> Vec<(&'static str, bool)> {
    use crate::cgd_solver::{Evaluator, ErrorMode, FactorState};
    use crate::geometry::{bistatic_delay, bistatic_doppler, normalize_delay, normalize_doppler};
    use crate::localize::{estimate_velocity, solve_position_equations};
    use crate::structured_ops::{toeplitz_embed, toeplitz_project, ToeplitzCoeffs};
    use num_complex::Complex64;

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut out = Vec::new();

    let operator_ok = (0..10).all(|_| {
        let (nb, nd) = (4, 4);
        let mut q = ToeplitzCoeffs::zeros(nb, nd);
        for (i, j) in q.lags() {
            q.set(i, j, Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        }
        let back = toeplitz_project(&toeplitz_embed(&q), nb, nd);
        q.lags().all(|(i, j)| (back.get(i, j) - q.get(i, j)).norm() < 1e-12)
    });
    out.push(("embedding/projection identity", operator_ok));

    let grad_ok = {
        let (nb, nd) = (3, 3);
        let n = nb * nd;
        let y = crate::waveform::complex_noise(&mut rng, n, 2, 1.0);
        let b = draw_qpsk_symbols(&mut rng, nb, nd).symbols;
        let mut cfg = SolverConfig::from_noise(0.1, DEFAULT_SIGMA_FLOOR, nb, nd);
        cfg.rank = 2;
        let eval = Evaluator::new(&y, &b, nb, nd, &cfg, ErrorMode::Joint);
        eval.is_ok_and(|eval| {
            let x = FactorState::random(&mut rng, n, 2, 2, 0.5);
            let d = FactorState::random(&mut rng, n, 2, 2, 1.0);
            let (_, g) = eval.value_and_gradient(&x);
            let h = 1e-6;
            let fd = (eval.objective(&x.step(h, &d)).total() - eval.objective(&x.step(-h, &d)).total()) / (2.0 * h);
            let an = g.inner(&d);
            (fd - an).abs() <= 1e-5 * an.abs().max(1.0)
        })
    };
    out.push(("objective gradient vs finite differences", grad_ok));

    let (g, t) = (GeometryConfig::reference(), TimingConfig::reference());
    let x = Point3::new(2500.0, 3200.0, 120.0);
    let v = Velocity3::new(-10.0, -90.0, -20.0);
    let taus: Vec<f64> = (0..4).map(|m| normalize_delay(bistatic_delay(&g, m, x), &t).unwrap_or(f64::NAN)).collect();
    let pos = solve_position_equations(&taus, &g, &t, &LocalizeConfig::default());
    let pos_ok = pos.as_ref().is_ok_and(|p| p.feasible && p.position.distance(x) < 1.0);
    out.push(("exact-delay position recovery", pos_ok));

    let f: Vec<f64> = (0..4)
        .map(|m| bistatic_doppler(&g, m, x, v).map_or(f64::NAN, |d| normalize_doppler(d, &t)))
        .collect();
    let vel_ok = estimate_velocity(x, &f, &g, &t, 3.0).is_ok_and(|e| {
        let d = e.velocity.to_array();
        d.iter().zip(v.to_array()).all(|(a, b)| (a - b).abs() < 1e-6)
    });
    out.push(("exact-Doppler velocity recovery", vel_ok));

    let mut rng_a = trial_rng(1, 3);
    let mut rng_b = trial_rng(1, 3);
    out.push(("seeded streams repeat", rng_a.gen::<u64>() == rng_b.gen::<u64>()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localize::{PositionEstimate, VelocityEstimate};
    use num_complex::Complex64;

    fn estimate(p: Point3, v: Option<Velocity3>, feasible: bool) -> TargetStateEstimate {
        TargetStateEstimate {
            id: 0,
            position: PositionEstimate { position: p, feasible, residual: 0.0, groups_used: 1 },
            velocity: v.map(|velocity| VelocityEstimate { velocity, clutter: velocity.speed() < 3.0 }),
        }
    }

    fn bounds() -> ErrorBounds {
        ErrorBounds::for_geometry(&GeometryConfig::reference())
    }

    #[test]
    fn rmse_phi_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = crate::waveform::complex_noise(&mut rng, 12, 3, 1.0);
        let b = crate::waveform::complex_noise(&mut rng, 12, 3, 1.0);
        assert_eq!(rmse_phi(&a, &a), 0.0);
        assert!((rmse_phi(&a, &CMatrix::zeros(12, 3)) - a.norm()).abs() < 1e-12);
        let brute: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
        assert!((rmse_phi(&a, &b) - brute).abs() < 1e-12);
        let _ = Complex64::new(0.0, 0.0);
    }

    #[test]
    fn metric_cases() {
        let t = SceneObject::new(Point3::new(1000.0, 2000.0, 300.0), Velocity3::new(10.0, 0.0, 0.0));
        let perfect = estimate(t.position, Some(t.velocity), true);
        let (p, v) = rmpe_rmve(&[(vec![t], vec![perfect])], &bounds());
        assert_eq!((p, v), ([0.0; 3], [0.0; 3]));

        let bad = estimate(t.position, Some(t.velocity), false);
        assert_eq!(rmpe_rmve(&[(vec![t], vec![bad])], &bounds()), ([1.0; 3], [1.0; 3]));
        assert_eq!(rmpe_rmve(&[(vec![t, t], vec![])], &bounds()), ([1.0; 3], [1.0; 3]));

        let off = estimate(t.position + Point3::new(500.0, 0.0, 0.0), Some(t.velocity), true);
        let (p, _) = rmpe_rmve(&[(vec![t], vec![off])], &bounds());
        assert!((p[0] - 0.1).abs() < 1e-12 && p[1] == 0.0 && p[2] == 0.0);

        let far = estimate(t.position, Some(Velocity3::new(5000.0, 0.0, 0.0)), true);
        let (_, v) = rmpe_rmve(&[(vec![t], vec![far])], &bounds());
        assert_eq!(v[0], 1.0);
    }

    #[test]
    fn matching_is_greedy_nearest() {
        let a = SceneObject::new(Point3::new(0.0, 0.0, 0.0), Velocity3::ZERO);
        let b = SceneObject::new(Point3::new(100.0, 0.0, 0.0), Velocity3::ZERO);
        let est = vec![
            estimate(Point3::new(90.0, 0.0, 0.0), None, true),
            estimate(Point3::new(5.0, 0.0, 0.0), None, true),
        ];
        assert_eq!(match_targets(&[a, b], &est), vec![Some(1), Some(0)]);
        assert_eq!(match_targets(&[a, b], &est[..1]), vec![None, Some(0)]);
    }

    #[test]
    fn builtin_scenarios_load() {
        let paper = RunConfig::builtin("paper").unwrap();
        assert_eq!(paper.scene().len(), 3);
        for name in ["track1", "track2"] {
            let cfg = RunConfig::builtin(name).unwrap();
            let w = cfg.scenario.waypoints.as_ref().unwrap();
            assert_eq!(w.seconds.len(), 30);
        }
        let t1 = RunConfig::builtin("track1").unwrap();
        let first = &t1.scenario.waypoints.as_ref().unwrap().seconds[0];
        assert_eq!(first[0].position, Point3::new(500.0, 4000.0, 1350.0));
        assert!(RunConfig::builtin("nope").is_err());
    }

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = RunConfig::builtin("paper").unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml(), None).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.clone();
        bad.trials = 0;
        assert!(bad.validate().is_err());
        assert!(RunConfig::from_toml("seed = 1\n[scenario]\nobjects = []\n", None).is_err());
        assert!(RunConfig::from_toml("bogus = 1\n[scenario]\n", None).is_err());
    }

    #[test]
    fn trajectory_parse_errors() {
        assert!(Trajectory::parse("").is_err());
        assert!(Trajectory::parse("a,b\n").is_err());
        let h = "second,object,x,y,z,vx,vy,vz,amplitude\n";
        assert!(Trajectory::parse(&format!("{h}0,0,1,2,3,0,0,0,1\n2,0,1,2,3,0,0,0,1\n")).is_err());
        assert!(Trajectory::parse(&format!("{h}0,0,1,2,3,0,0,0,1\n0,0,1,2,3,0,0,0,1\n")).is_err());
        let ok = Trajectory::parse(&format!("{h}0,0,1,2,3,0,0,0,1\n1,0,1,2,3,0,0,0,1\n")).unwrap();
        assert_eq!(ok.seconds.len(), 2);
    }

    #[test]
    fn selftest_passes() {
        for (name, ok) in selftest() {
            assert!(ok, "{name}");
        }
    }

    #[test]
    fn trial_streams_differ_by_index() {
        let a: u64 = trial_rng(5, 0).gen();
        let b: u64 = trial_rng(5, 1).gen();
        let c: u64 = trial_rng(5, 0).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }
}
