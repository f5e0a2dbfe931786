use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use solenoid_r2r::config::Config;
use solenoid_r2r::flatctrl::FlatController;
use solenoid_r2r::harness::{run_montecarlo, sample_device, write_run_dir};
use solenoid_r2r::model::{rho_to_theta, IdentParams, PhysState, PhysicalParams};
use solenoid_r2r::r2r::{compute_cost_im, position_reference, run_r2r, CostMode};
use solenoid_r2r::sensitivity::{predictor_sensitivity, tracking_sensitivity, write_table};
use solenoid_r2r::simulator::{compute_nrmse, simulate_operation, ConstantVoltage, VoltageSource};
use solenoid_r2r::{Error, Result};

#[derive(Parser)]
#[command(name = "solenoid-r2r", version, about = "Run-to-run soft-landing experiments for reluctance actuators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one switching operation.
    Simulate(Common),
    /// Adapt one device over a sequence of operations.
    R2r {
        #[command(flatten)]
        common: Common,
        /// Population member to use as the device.
        #[arg(long, default_value_t = 0)]
        trial: usize,
    },
    /// Run a Monte Carlo study over a perturbed population.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        parallelism: Option<usize>,
        #[arg(long)]
        no_plots: bool,
    },
    /// Parameter sensitivity table of the predicted current and the tracked output.
    Sensitivity(Common),
    /// Dump the position reference.
    Reference(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    operations: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Im,
    Dm,
}

impl From<Mode> for CostMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Im => CostMode::Im,
            Mode::Dm => CostMode::Dm,
        }
    }
}

impl Common {
    fn load(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = self.seed {
            c.montecarlo.seed = s;
            c.sim.noise_seed = s;
        }
        if let Some(m) = self.mode {
            c.r2r.mode = m.into();
            c.montecarlo.modes = vec![m.into()];
        }
        if let Some(n) = self.trials {
            c.montecarlo.n_trials = n;
        }
        if let Some(n) = self.operations {
            c.r2r.n_operations = n;
        }
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self, command: &str) -> Result<PathBuf> {
        let dir = self.out_dir.clone().unwrap_or_else(|| Path::new("runs").join(command));
        std::fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join(name), text)?;
    Ok(())
}

fn simulate(common: &Common) -> Result<serde_json::Value> {
    let c = common.load()?;
    let dir = common.out_dir("simulate")?;
    std::fs::write(dir.join("effective_config.toml"), c.to_toml()?)?;
    let cfg = c.r2r_config();
    let nominal = c.nominal().to_array();
    let mut a = [0.0; 9];
    for i in 0..9 {
        a[i] = nominal[i] * c.simulate.device_scale[i];
    }
    let device = PhysicalParams::from_array(a);
    device.validate(&c.geometry)?;
    let theta = c.simulate.theta_hat.map(IdentParams::new).unwrap_or_else(|| rho_to_theta(&device));
    let sim = cfg.sim_config();
    let grid = cfg.grid();

    let controller = match c.simulate.voltage {
        Some(_) => None,
        None => Some(FlatController::new(cfg.reference, theta, cfg.timing)?),
    };
    let constant = ConstantVoltage(c.simulate.voltage.unwrap_or(0.0));
    let source: &dyn VoltageSource = match &controller {
        Some(ctrl) => ctrl,
        None => &constant,
    };
    let mut rec = simulate_operation(&device, &c.geometry, source, &sim, PhysState::open(&c.geometry))?;
    if let Some(ctrl) = &controller {
        let signal = ctrl.control_signal(&grid)?;
        signal.write_csv(create(&dir, "control.csv")?)?;
        rec.y2_hat = signal.y2_hat;
    }
    let z_ref = position_reference(&cfg, &grid);
    let nrmse = compute_nrmse(&rec.t, &rec.z, &z_ref, (sim.t0, sim.tf)).ok();
    let j_im = if rec.y2_hat.len() == rec.t.len() {
        Some(compute_cost_im(&rec.t, &rec.y2, &rec.y2_hat, (sim.t0, sim.tf))?)
    } else {
        None
    };
    rec.write_csv(create(&dir, "record.csv")?)?;
    let t_land = cfg.timing.precharge + cfg.reference.duration;
    let metrics = json!({
        "v_c": rec.impact.velocity,
        "t_c": rec.impact.time,
        "tc_error": rec.impact.time.map(|t| t - t_land),
        "nrmse_z": nrmse,
        "J_im": j_im,
        "events": rec.events.len(),
        "out_dir": dir,
    });
    write_json(&dir, "metrics.json", &metrics)?;
    Ok(metrics)
}

fn r2r(common: &Common, trial: usize) -> Result<serde_json::Value> {
    let c = common.load()?;
    let dir = common.out_dir("r2r")?;
    std::fs::write(dir.join("effective_config.toml"), c.to_toml()?)?;
    let cfg = c.r2r_config();
    let device = sample_device(&cfg.nominal, c.montecarlo.epsilon, c.montecarlo.seed, trial);
    let run = run_r2r(&device, &c.geometry, &cfg, trial)?;
    run.write_log(create(&dir, "log.csv")?, true)?;
    for (k, rec) in &run.records {
        rec.write_csv(create(&dir, &format!("operation_{k:04}.csv"))?)?;
    }
    let first = run.ops.first();
    let last = run.ops.last();
    let summary = json!({
        "trial": trial,
        "mode": cfg.mode,
        "device": device,
        "r_hat": run.r_hat,
        "first": first,
        "last": last,
        "best_cost": run.final_best.1,
        "best_normalized": run.final_best.0,
        "audit": run.audit,
        "simulations": run.simulations,
        "out_dir": dir,
    });
    write_json(&dir, "summary.json", &summary)?;
    Ok(json!({ "trial": trial, "mode": cfg.mode, "last": last, "out_dir": dir }))
}

fn montecarlo(common: &Common, parallelism: Option<usize>, no_plots: bool) -> Result<serde_json::Value> {
    let mut c = common.load()?;
    if let Some(p) = parallelism {
        c.montecarlo.parallelism = p;
    }
    let dir = common.out_dir("montecarlo")?;
    let result = run_montecarlo(&c.montecarlo_spec())?;
    write_run_dir(&result, &dir, &c.to_toml()?, c.montecarlo.trial_logs, c.montecarlo.plots && !no_plots)?;
    let finals: Vec<_> = result
        .modes
        .iter()
        .map(|m| {
            let op = m.series.last_operation();
            json!({
                "mode": m.mode,
                "trials": m.runs.len(),
                "v_c_p50": m.series.get(op, "v_c", 50.0),
                "nrmse_z_p50": m.series.get(op, "nrmse_z", 50.0),
            })
        })
        .collect();
    Ok(json!({
        "baseline_mean_vc": result.baseline_mean_vc(),
        "failures": result.failures.len(),
        "final_iteration": finals,
        "out_dir": dir,
    }))
}

fn sensitivity(common: &Common) -> Result<serde_json::Value> {
    let c = common.load()?;
    let dir = common.out_dir("sensitivity")?;
    std::fs::write(dir.join("effective_config.toml"), c.to_toml()?)?;
    let cfg = c.r2r_config();
    let theta = rho_to_theta(&cfg.nominal);
    let dt = c.sensitivity.sample_period;
    let n = (cfg.reference.duration / dt).round() as usize;
    let grid: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let pred = predictor_sensitivity(&theta, &cfg.reference, &grid, c.sensitivity.rel_step)?;
    let track = tracking_sensitivity(
        &theta,
        &cfg.nominal,
        &c.geometry,
        &cfg.reference,
        &cfg.timing,
        &cfg.sim,
        c.sensitivity.rel_step,
    )?;
    write_table(create(&dir, "sensitivity.csv")?, &[pred.clone(), track.clone()])?;
    let value = json!({ "predictor": pred, "tracking": track, "out_dir": dir });
    write_json(&dir, "sensitivity.json", &value)?;
    Ok(value)
}

fn reference(common: &Common) -> Result<serde_json::Value> {
    let c = common.load()?;
    let dir = common.out_dir("reference")?;
    let cfg = c.r2r_config();
    cfg.reference.write_csv(create(&dir, "reference.csv")?, c.sim.sample_period)?;
    Ok(json!({ "duration": cfg.reference.duration, "out_dir": dir }))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Simulate(c) => simulate(c),
        Command::R2r { common, trial } => r2r(common, *trial),
        Command::Montecarlo { common, parallelism, no_plots } => montecarlo(common, *parallelism, *no_plots),
        Command::Sensitivity(c) => sensitivity(c),
        Command::Reference(c) => reference(c),
    };
    match outcome {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::from(e.exit_code())
        }
    }
}
