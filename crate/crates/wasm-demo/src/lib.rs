//! Browser bindings: forward-model localization and a short end-to-end run.

use pbr_core::geometry::{
    bistatic_delay, bistatic_doppler, normalize_delay, normalize_doppler, GeometryConfig, Point3, TimingConfig,
    Velocity3,
};
use pbr_core::harness::{estimate_and_localize, match_targets, simulate, trial_rng, RunConfig, SolverKind};
use pbr_core::localize::{estimate_velocity, solve_position_equations, LocalizeConfig, TargetStateEstimate, EquationLocator};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct ReceiverView {
    tau: f64,
    doppler: f64,
}

#[derive(Serialize)]
struct LocateView {
    receivers: Vec<ReceiverView>,
    position: Point3,
    feasible: bool,
    residual_m: f64,
    velocity: Option<Velocity3>,
    clutter: Option<bool>,
    position_error_m: f64,
}

/// Forward-models one reflector, perturbs each delay by up to `delay_noise_m`
/// of range, then inverts. Returns JSON.
pub fn locate_json(target: [f64; 6], delay_noise_m: f64, seed: u64) -> Result<String, String> {
    use rand::Rng;
    let (g, t) = (GeometryConfig::reference(), TimingConfig::reference());
    let x = Point3::new(target[0], target[1], target[2]);
    let v = Velocity3::new(target[3], target[4], target[5]);
    if !g.surveillance_box.contains(x) {
        return Err("position lies outside the surveillance box".into());
    }
    let mut rng = trial_rng(seed, 0);
    let scale = g.c * t.symbol_duration();
    let mut receivers = Vec::new();
    for m in 0..g.num_receivers() {
        let tau = normalize_delay(bistatic_delay(&g, m, x), &t).map_err(|e| e.to_string())?;
        let doppler = normalize_doppler(bistatic_doppler(&g, m, x, v).map_err(|e| e.to_string())?, &t);
        let jitter = if delay_noise_m > 0.0 { rng.gen_range(-delay_noise_m..delay_noise_m) / scale } else { 0.0 };
        receivers.push(ReceiverView { tau: tau + jitter, doppler });
    }
    let taus: Vec<f64> = receivers.iter().map(|r| r.tau).collect();
    let cfg = LocalizeConfig::default();
    let pos = solve_position_equations(&taus, &g, &t, &cfg).map_err(|e| e.to_string())?;
    let vel = if pos.feasible {
        let f: Vec<f64> = receivers.iter().map(|r| r.doppler).collect();
        estimate_velocity(pos.position, &f, &g, &t, cfg.clutter_speed).ok()
    } else {
        None
    };
    let view = LocateView {
        receivers,
        position: pos.position,
        feasible: pos.feasible,
        residual_m: pos.residual,
        velocity: vel.map(|v| v.velocity),
        clutter: vel.map(|v| v.clutter),
        position_error_m: pos.position.distance(x),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct TargetView {
    truth_position: Point3,
    truth_velocity: Velocity3,
    estimate: Option<TargetStateEstimate>,
}

#[derive(Serialize)]
struct SceneView {
    iterations: usize,
    rmse_phi: f64,
    model_orders: Vec<usize>,
    paths: Vec<Vec<[f64; 3]>>,
    targets: Vec<TargetView>,
}

/// Simulates the three-reflector scene and runs a shortened solve, path
/// extraction and localization. Returns JSON.
pub fn estimate_scene_json(seed: u64, snr_db: f64, ber: f64, max_iter: usize, cr: bool) -> Result<String, String> {
    let mut cfg = RunConfig::builtin("paper").map_err(|e| e.to_string())?;
    cfg.solver.max_iter = Some(max_iter.clamp(10, 5000));
    cfg.solver.redemodulate = false;
    if cr {
        cfg.solver.kind = SolverKind::Cr;
    }
    if !(0.0..=0.5).contains(&ber) {
        return Err("BER must lie in [0, 0.5]".into());
    }
    let scene = cfg.scene();
    let mut rng = trial_rng(seed, 0);
    let (obs, sigma) = simulate(&cfg.scenario, &scene, snr_db, ber, &mut rng).map_err(|e| e.to_string())?;
    let locator = EquationLocator { geom: cfg.scenario.geometry.clone(), timing: cfg.scenario.timing, cfg: cfg.localize.clone() };
    let (report, paths, targets) =
        estimate_and_localize(&cfg, &obs, sigma, scene.len(), &locator, &mut rng).map_err(|e| e.to_string())?;
    let phi = obs.truth.as_ref().map(|t| t.phi.clone()).unwrap_or_else(|| report.phi.clone());
    let matches = match_targets(&scene, &targets);
    let view = SceneView {
        iterations: report.iterations,
        rmse_phi: (&phi - &report.phi).norm(),
        model_orders: report.model_orders.clone(),
        paths: paths
            .receivers
            .iter()
            .map(|r| r.paths.iter().map(|p| [p.tau, p.doppler, p.gain.norm()]).collect())
            .collect(),
        targets: scene
            .iter()
            .zip(matches)
            .map(|(o, m)| TargetView {
                truth_position: o.position,
                truth_velocity: o.velocity,
                estimate: m.map(|j| targets[j].clone()),
            })
            .collect(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn locate(x: f64, y: f64, z: f64, vx: f64, vy: f64, vz: f64, delay_noise_m: f64, seed: u32) -> Result<String, JsValue> {
    locate_json([x, y, z, vx, vy, vz], delay_noise_m, seed as u64).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn estimate_scene(seed: u32, snr_db: f64, ber: f64, max_iter: u32, cr: bool) -> Result<String, JsValue> {
    estimate_scene_json(seed as u64, snr_db, ber, max_iter as usize, cr).map_err(|e| JsValue::from_str(&e))
}
