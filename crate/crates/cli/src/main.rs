use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pbr_core::harness::{
    build_locator, run_sweep, run_tracking, selftest, simulate, tracking_csv, train_locator,
    trial_rng, write_snapshot, write_sweep, LocatorKind, RunConfig, SolverKind,
};
use pbr_core::localize::{localize_targets, write_targets_csv};
use pbr_core::spectral::{extract_from_report, select_top_l, DelayDopplerEstimate};
use pbr_core::waveform::ObservationSet;

#[derive(Parser)]
#[command(name = "pbr", version, about = "OFDM passive radar: delay/Doppler estimation and localization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Run config (TOML); defaults to the built-in scenario for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    solver: Option<SolverArg>,
    #[arg(long, global = true, value_enum)]
    locator: Option<LocatorArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolverArg {
    Cgd,
    Cr,
}

#[derive(Clone, Copy, ValueEnum)]
enum LocatorArg {
    Solver,
    Nn,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize one observation set and write it as a binary dump.
    Simulate {
        #[arg(long)]
        snr: Option<f64>,
        #[arg(long)]
        ber: Option<f64>,
    },
    /// Run the solver and path extraction on an observation dump.
    Estimate {
        /// Observation dump written by `simulate`.
        #[arg(long)]
        input: PathBuf,
        /// Noise standard deviation; read from `meta.toml` next to the input when omitted.
        #[arg(long)]
        sigma: Option<f64>,
        /// Paths kept per receiver; defaults to the scene size.
        #[arg(long)]
        paths: Option<usize>,
    },
    /// Associate per-receiver paths and locate reflectors.
    Localize {
        /// `paths.csv` written by `estimate`.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the neural locator and save it.
    TrainLocator,
    /// Per-second estimation over a tracking scenario.
    Track {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        scenario: u8,
    },
    /// Monte-Carlo sweep over SNR and BER values.
    Sweep {
        #[arg(long, value_delimiter = ',')]
        snr: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        ber: Vec<f64>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

type AnyResult<T> = Result<T, Box<dyn std::error::Error>>;

fn load_config(common: &Common, builtin: &str) -> AnyResult<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::builtin(builtin)?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = common.solver {
        cfg.solver.kind = match s {
            SolverArg::Cgd => SolverKind::Cgd,
            SolverArg::Cr => SolverKind::Cr,
        };
    }
    if let Some(l) = common.locator {
        cfg.locator = match l {
            LocatorArg::Solver => LocatorKind::Solver,
            LocatorArg::Nn => LocatorKind::Nn,
        };
    }
    Ok(cfg)
}

fn read_meta_sigma(input: &Path) -> Option<f64> {
    let text = fs::read_to_string(input.parent()?.join("meta.toml")).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("sigma = "))
        .and_then(|v| v.trim().parse().ok())
}

fn run(cli: Cli) -> AnyResult<bool> {
    let common = &cli.common;
    match cli.cmd {
        Command::Simulate { snr, ber } => {
            let cfg = load_config(common, "paper")?;
            let scene = cfg.scene();
            let mut rng = trial_rng(cfg.seed, 0);
            let (obs, sigma) = simulate(&cfg.scenario, &scene, snr.unwrap_or(cfg.snr_db), ber.unwrap_or(cfg.ber), &mut rng)?;
            let dir = &cfg.out_dir;
            write_snapshot(dir, &cfg)?;
            let mut f = BufWriter::new(fs::File::create(dir.join("observations.bin"))?);
            obs.write_to(&mut f)?;
            f.flush()?;
            fs::write(dir.join("meta.toml"), format!("sigma = {sigma:e}\ntargets = {}\n", scene.len()))?;
            println!("wrote {}", dir.join("observations.bin").display());
        }
        Command::Estimate { input, sigma, paths } => {
            let cfg = load_config(common, "paper")?;
            let obs = ObservationSet::read_from(&mut BufReader::new(fs::File::open(&input)?))?;
            let sigma = sigma.or_else(|| read_meta_sigma(&input)).unwrap_or(0.0);
            let solver_cfg = cfg.solver.build(sigma, obs.n_b, obs.n_d);
            let mut rng = trial_rng(cfg.seed, 0);
            let report = cfg.solver.solve(&obs, &solver_cfg, &mut rng)?;
            let mut est = extract_from_report(&report, obs.n_b, obs.n_d, &cfg.music)?;
            let keep = paths.unwrap_or(cfg.scene().len());
            for r in &mut est.receivers {
                r.paths = select_top_l(&r.paths, keep);
            }
            let dir = &cfg.out_dir;
            report.write_run_dir(dir)?;
            let mut f = BufWriter::new(fs::File::create(dir.join("paths.csv"))?);
            est.write_csv(&mut f)?;
            f.flush()?;
            println!(
                "{} iterations, {} solve(s), converged {}, model orders {:?}; wrote {}",
                report.iterations,
                report.redemod_rounds,
                report.converged,
                report.model_orders,
                dir.display()
            );
        }
        Command::Localize { input } => {
            let cfg = load_config(common, "paper")?;
            let est = DelayDopplerEstimate::read_csv(&fs::read_to_string(&input)?)?;
            let locator = build_locator(&cfg)?;
            let s = &cfg.scenario;
            let (targets, table) =
                localize_targets(&est, s.timing.n_b, &s.geometry, &s.timing, &cfg.localize, locator.as_ref())?;
            if table.ambiguous {
                eprintln!("warning: association was ambiguous");
            }
            fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join("targets.csv");
            let mut f = BufWriter::new(fs::File::create(&path)?);
            write_targets_csv(&targets, &mut f)?;
            f.flush()?;
            let mut stdout = std::io::stdout().lock();
            write_targets_csv(&targets, &mut stdout)?;
        }
        Command::TrainLocator => {
            let cfg = load_config(common, "paper")?;
            let (model, history) = train_locator(&cfg)?;
            fs::create_dir_all(&cfg.out_dir)?;
            model.save(&cfg.out_dir.join("locator.bin"))?;
            let mut h = String::from("epoch,train_mse,val_mse,best_val_mse\n");
            for e in &history.epochs {
                h.push_str(&format!("{},{:e},{:e},{:e}\n", e.epoch, e.train_mse, e.val_mse, e.best_val_mse));
            }
            fs::write(cfg.out_dir.join("history.csv"), h)?;
            println!(
                "best validation MSE {:.3e} at epoch {}; wrote {}",
                history.best_val_mse(),
                history.best_epoch,
                cfg.out_dir.join("locator.bin").display()
            );
        }
        Command::Track { scenario } => {
            let cfg = load_config(common, &format!("track{scenario}"))?;
            let locator = build_locator(&cfg)?;
            let rows = run_tracking(&cfg, locator.as_ref())?;
            write_snapshot(&cfg.out_dir, &cfg)?;
            let path = cfg.out_dir.join("tracking.csv");
            fs::write(&path, tracking_csv(&rows))?;
            println!("{} seconds; wrote {}", rows.len(), path.display());
        }
        Command::Sweep { snr, ber, trials } => {
            let mut cfg = load_config(common, "paper")?;
            if !snr.is_empty() {
                cfg.sweep.snr_db = snr;
            }
            if !ber.is_empty() {
                cfg.sweep.ber = ber;
            }
            if let Some(t) = trials {
                cfg.trials = t;
            }
            cfg.validate()?;
            let locator = build_locator(&cfg)?;
            let points = run_sweep(&cfg, locator.as_ref());
            write_sweep(&cfg.out_dir, &cfg, &points)?;
            print!("{}", pbr_core::harness::summary_csv(&points));
        }
        Command::Selftest => {
            let results = selftest();
            let mut ok = true;
            for (name, pass) in &results {
                println!("{} {name}", if *pass { "PASS" } else { "FAIL" });
                ok &= pass;
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
