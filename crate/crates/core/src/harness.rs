//! Monte Carlo studies over perturbed device populations.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Geometry, PhysState, PhysicalParams};
use crate::r2r::{run_r2r, CostMode, R2RConfig, R2RRun};
use crate::simulator::{simulate_operation, ConstantVoltage, Impact};

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloSpec {
    pub n_trials: usize,
    /// Half-width of the uniform relative perturbation of each parameter.
    pub epsilon: f64,
    pub seed: u64,
    pub modes: Vec<CostMode>,
    /// Levels in percent.
    pub percentiles: Vec<f64>,
    /// Worker threads; 0 uses all available cores.
    pub parallelism: usize,
    pub baseline_voltage: f64,
    pub geometry: Geometry,
    /// Per-trial settings; its `mode` is replaced by each entry of `modes`.
    pub r2r: R2RConfig,
}

impl Default for MonteCarloSpec {
    fn default() -> Self {
        crate::config::Config::default().montecarlo_spec()
    }
}

impl MonteCarloSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return Err(Error::InvalidParameter("n_trials must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::InvalidParameter(format!("epsilon {} must lie in [0, 1)", self.epsilon)));
        }
        if self.modes.is_empty() {
            return Err(Error::InvalidParameter("at least one cost mode is required".into()));
        }
        if self.percentiles.is_empty() || self.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(Error::InvalidParameter("percentile levels must lie in [0, 100]".into()));
        }
        self.r2r.validate(&self.geometry)
    }
}

/// Device for one trial. Each trial owns an independent ChaCha stream, so the
/// draw does not depend on which other trials are sampled or in what order.
pub fn sample_device(nominal: &PhysicalParams, epsilon: f64, seed: u64, trial: usize) -> PhysicalParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    let mut a = nominal.to_array();
    for x in a.iter_mut() {
        let e = if epsilon > 0.0 { rng.gen_range(-epsilon..=epsilon) } else { 0.0 };
        *x *= 1.0 + e;
    }
    PhysicalParams::from_array(a)
}

pub fn sample_devices(nominal: &PhysicalParams, n: usize, epsilon: f64, seed: u64) -> Vec<PhysicalParams> {
    (0..n).map(|i| sample_device(nominal, epsilon, seed, i)).collect()
}

/// Linear interpolation between order statistics at rank `p/100 (n - 1)`.
pub fn percentiles(values: &[f64], levels: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    levels
        .iter()
        .map(|&p| {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("percentile level {p} outside [0, 100]")));
            }
            let h = p / 100.0 * (n - 1) as f64;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
        })
        .collect()
}

pub const QUANTILE_METHOD: &str = "linear interpolation between order statistics, rank p/100*(n-1)";

pub const METRICS: [&str; 10] = [
    "v_c",
    "nrmse_z",
    "tc_error",
    "J",
    "theta1_ratio",
    "theta2_ratio",
    "theta3_ratio",
    "theta4_ratio",
    "theta5_ratio",
    "theta6_ratio",
];

/// Value of `metric` at operation `op` (0-based) of `run`; `None` when undefined.
pub fn metric_value(run: &R2RRun, op: usize, metric: &str) -> Option<f64> {
    let s = &run.ops[op];
    match metric {
        "v_c" => s.v_c,
        "nrmse_z" => s.nrmse_z,
        "tc_error" => s.tc_error,
        "J" => Some(s.cost),
        m => {
            let i: usize = m.strip_prefix("theta")?.strip_suffix("_ratio")?.parse().ok()?;
            Some(s.theta_hat[i - 1] / run.theta_true.theta[i - 1])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercentileRow {
    /// 1-based operation index.
    pub operation: usize,
    pub metric: &'static str,
    /// Trials contributing a defined value.
    pub count: usize,
    /// One value per level; empty when `count` is zero.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PercentileSeries {
    pub mode: CostMode,
    pub levels: Vec<f64>,
    pub rows: Vec<PercentileRow>,
}

impl PercentileSeries {
    pub fn build(mode: CostMode, runs: &[R2RRun], levels: &[f64]) -> Result<Self> {
        let n_ops = runs.iter().map(|r| r.ops.len()).min().unwrap_or(0);
        let mut rows = Vec::with_capacity(n_ops * METRICS.len());
        for op in 0..n_ops {
            for metric in METRICS {
                let sample: Vec<f64> =
                    runs.iter().filter_map(|r| metric_value(r, op, metric)).filter(|v| v.is_finite()).collect();
                let values = if sample.is_empty() { Vec::new() } else { percentiles(&sample, levels)? };
                rows.push(PercentileRow { operation: op + 1, metric, count: sample.len(), values });
            }
        }
        Ok(Self { mode, levels: levels.to_vec(), rows })
    }

    pub fn row(&self, operation: usize, metric: &str) -> Option<&PercentileRow> {
        self.rows.iter().find(|r| r.operation == operation && r.metric == metric)
    }

    /// Value at `level` percent of `metric` at `operation`.
    pub fn get(&self, operation: usize, metric: &str, level: f64) -> Option<f64> {
        let j = self.levels.iter().position(|&l| l == level)?;
        self.row(operation, metric)?.values.get(j).copied()
    }

    pub fn last_operation(&self) -> usize {
        self.rows.last().map_or(0, |r| r.operation)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        write!(w, "operation,metric,count")?;
        for l in &self.levels {
            write!(w, ",p{l}")?;
        }
        writeln!(w)?;
        for r in &self.rows {
            write!(w, "{},{},{}", r.operation, r.metric, r.count)?;
            if r.values.is_empty() {
                for _ in &self.levels {
                    write!(w, ",")?;
                }
            }
            for v in &r.values {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Shape(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialFailure {
    pub trial: usize,
    pub mode: Option<CostMode>,
    pub kind: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BaselineRecord {
    pub trial: usize,
    pub v_c: Option<f64>,
    pub t_c: Option<f64>,
}

pub fn run_baseline(device: &PhysicalParams, g: &Geometry, voltage: f64, cfg: &R2RConfig) -> Result<Impact> {
    let rec = simulate_operation(device, g, &ConstantVoltage(voltage), &cfg.sim_config(), PhysState::open(g))?;
    Ok(rec.impact)
}

#[derive(Debug, Clone)]
pub struct ModeResult {
    pub mode: CostMode,
    /// Successful runs, ordered by trial id.
    pub runs: Vec<R2RRun>,
    pub series: PercentileSeries,
}

#[derive(Debug, Clone)]
pub struct MonteCarloResult {
    pub spec: MonteCarloSpec,
    pub devices: Vec<PhysicalParams>,
    pub modes: Vec<ModeResult>,
    pub baseline: Vec<BaselineRecord>,
    pub failures: Vec<TrialFailure>,
}

impl MonteCarloResult {
    pub fn mode(&self, mode: CostMode) -> Option<&ModeResult> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    /// Mean impact velocity of the uncontrolled runs that reached the stop.
    pub fn baseline_mean_vc(&self) -> Option<f64> {
        let v: Vec<f64> = self.baseline.iter().filter_map(|b| b.v_c).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn run_montecarlo(spec: &MonteCarloSpec) -> Result<MonteCarloResult> {
    spec.validate()?;
    let devices = sample_devices(&spec.r2r.nominal, spec.n_trials, spec.epsilon, spec.seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.parallelism)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?;

    let mut failures = Vec::new();
    let baseline_raw: Vec<Result<Impact>> = pool.install(|| {
        devices.par_iter().map(|d| run_baseline(d, &spec.geometry, spec.baseline_voltage, &spec.r2r)).collect()
    });
    let mut baseline = Vec::new();
    for (trial, r) in baseline_raw.into_iter().enumerate() {
        match r {
            Ok(imp) => baseline.push(BaselineRecord { trial, v_c: imp.velocity, t_c: imp.time }),
            Err(e) => failures.push(TrialFailure { trial, mode: None, kind: e.kind(), message: e.to_string() }),
        }
    }

    let mut modes = Vec::new();
    for &mode in &spec.modes {
        let cfg = R2RConfig { mode, ..spec.r2r };
        let results: Vec<Result<R2RRun>> = pool.install(|| {
            devices
                .par_iter()
                .enumerate()
                .map(|(trial, d)| {
                    let mut c = cfg;
                    c.sim.noise_seed = spec.seed.wrapping_add(trial as u64);
                    run_r2r(d, &spec.geometry, &c, trial)
                })
                .collect()
        });
        let mut runs = Vec::new();
        for (trial, r) in results.into_iter().enumerate() {
            match r {
                Ok(run) => runs.push(run),
                Err(e) => failures.push(TrialFailure { trial, mode: Some(mode), kind: e.kind(), message: e.to_string() }),
            }
        }
        let series = PercentileSeries::build(mode, &runs, &spec.percentiles)?;
        modes.push(ModeResult { mode, runs, series });
    }
    Ok(MonteCarloResult { spec: spec.clone(), devices, modes, baseline, failures })
}

#[derive(Debug, Serialize)]
struct FinalSummary {
    mode: CostMode,
    trials: usize,
    operation: usize,
    median: BTreeMap<&'static str, Option<f64>>,
    p10: BTreeMap<&'static str, Option<f64>>,
    p90: BTreeMap<&'static str, Option<f64>>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    seed: u64,
    n_trials: usize,
    n_operations: usize,
    epsilon: f64,
    quantile_method: &'static str,
    baseline_voltage: f64,
    baseline_mean_vc: Option<f64>,
    baseline_impacts: usize,
    failures: &'a [TrialFailure],
    final_iteration: Vec<FinalSummary>,
}

/// Writes the run directory: effective config, percentile tables, per-trial
/// logs, baseline, summary and optional SVG charts.
pub fn write_run_dir(result: &MonteCarloResult, dir: &Path, effective_config: &str, trial_logs: bool, plots: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("effective_config.toml"), effective_config)?;
    for m in &result.modes {
        m.series.write_csv(std::io::BufWriter::new(std::fs::File::create(dir.join(format!("percentiles_{}.csv", m.mode.as_str())))?))?;
        if trial_logs {
            let sub = dir.join("trials").join(m.mode.as_str());
            std::fs::create_dir_all(&sub)?;
            for run in &m.runs {
                let f = std::fs::File::create(sub.join(format!("trial_{:04}.csv", run.trial)))?;
                run.write_log(std::io::BufWriter::new(f), true)?;
            }
        }
        if plots {
            let sub = dir.join("plots");
            std::fs::create_dir_all(&sub)?;
            for metric in METRICS {
                let svg = band_chart(&m.series, metric);
                std::fs::write(sub.join(format!("{}_{metric}.svg", m.mode.as_str())), svg)?;
            }
        }
    }
    let mut b = std::io::BufWriter::new(std::fs::File::create(dir.join("baseline.csv"))?);
    writeln!(b, "trial,v_c,t_c")?;
    for r in &result.baseline {
        writeln!(b, "{},{},{}", r.trial, crate::r2r::opt(r.v_c), crate::r2r::opt(r.t_c))?;
    }
    b.flush()?;

    let final_iteration = result
        .modes
        .iter()
        .map(|m| {
            let op = m.series.last_operation();
            let pick = |level| METRICS.iter().map(|&k| (k, m.series.get(op, k, level))).collect();
            FinalSummary { mode: m.mode, trials: m.runs.len(), operation: op, median: pick(50.0), p10: pick(10.0), p90: pick(90.0) }
        })
        .collect();
    let summary = Summary {
        seed: result.spec.seed,
        n_trials: result.spec.n_trials,
        n_operations: result.spec.r2r.n_operations,
        epsilon: result.spec.epsilon,
        quantile_method: QUANTILE_METHOD,
        baseline_voltage: result.spec.baseline_voltage,
        baseline_mean_vc: result.baseline_mean_vc(),
        baseline_impacts: result.baseline.iter().filter(|b| b.v_c.is_some()).count(),
        failures: &result.failures,
        final_iteration,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// Static SVG with the outer and inner percentile bands and the median line.
/// Uses the first, second, middle, second-to-last and last configured levels.
pub fn band_chart(series: &PercentileSeries, metric: &str) -> String {
    let (w, h, pad) = (720.0, 360.0, 50.0);
    let rows: Vec<&PercentileRow> =
        series.rows.iter().filter(|r| r.metric == metric && !r.values.is_empty()).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{} {metric}</text>\n",
        series.mode.as_str()
    );
    let nl = series.levels.len();
    if rows.is_empty() || nl == 0 {
        svg.push_str("</svg>\n");
        return svg;
    }
    let x_max = rows.last().map_or(1, |r| r.operation).max(2) as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &rows {
        for v in &r.values {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if hi <= lo {
        hi = lo + 1.0;
    }
    let sx = |op: usize| pad + (op as f64 - 1.0) / (x_max - 1.0) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v - lo) / (hi - lo) * (h - 2.0 * pad);
    let band = |a: usize, b: usize, fill: &str| {
        let mut pts = String::new();
        for r in &rows {
            let _ = write!(pts, "{:.2},{:.2} ", sx(r.operation), sy(r.values[a]));
        }
        for r in rows.iter().rev() {
            let _ = write!(pts, "{:.2},{:.2} ", sx(r.operation), sy(r.values[b]));
        }
        format!("<polygon points=\"{}\" fill=\"{fill}\" stroke=\"none\"/>\n", pts.trim_end())
    };
    svg.push_str(&band(0, nl - 1, "#c6dbef"));
    if nl >= 4 {
        svg.push_str(&band(1, nl - 2, "#6baed6"));
    }
    let mid = nl / 2;
    let mut line = String::new();
    for r in &rows {
        let _ = write!(line, "{:.2},{:.2} ", sx(r.operation), sy(r.values[mid]));
    }
    let _ = writeln!(svg, "<polyline points=\"{}\" fill=\"none\" stroke=\"#08306b\" stroke-width=\"1.5\"/>", line.trim_end());
    let _ = writeln!(
        svg,
        "<line x1=\"{pad}\" y1=\"{y}\" x2=\"{x2}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{y}\" stroke=\"black\"/>\n\
         <text x=\"{pad}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\">1</text>\n\
         <text x=\"{x2}\" y=\"{ty}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{x_max}</text>\n\
         <text x=\"4\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"11\">{lo:.3e}</text>\n\
         <text x=\"4\" y=\"{pad}\" font-family=\"sans-serif\" font-size=\"11\">{hi:.3e}</text>",
        y = h - pad,
        x2 = w - pad,
        ty = h - pad + 16.0,
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_examples() {
        assert_eq!(percentiles(&[1.0, 2.0, 3.0, 4.0, 5.0], &[50.0]).unwrap(), vec![3.0]);
        assert_eq!(percentiles(&[7.0], &[10.0, 50.0, 90.0]).unwrap(), vec![7.0; 3]);
        assert_eq!(percentiles(&[4.0, 1.0, 3.0, 2.0], &[0.0, 100.0, 50.0]).unwrap(), vec![1.0, 4.0, 2.5]);
        assert!(matches!(percentiles(&[], &[50.0]), Err(Error::EmptySample)));
        assert!(percentiles(&[1.0], &[101.0]).is_err());
    }

    #[test]
    fn zero_epsilon_gives_nominal_devices() {
        let nom = PhysicalParams::nominal();
        assert!(sample_devices(&nom, 5, 0.0, 1).iter().all(|d| *d == nom));
    }

    #[test]
    fn population_is_seeded_and_order_independent() {
        let nom = PhysicalParams::nominal();
        let a = sample_devices(&nom, 20, 0.05, 9);
        assert_eq!(a, sample_devices(&nom, 20, 0.05, 9));
        assert_ne!(a, sample_devices(&nom, 20, 0.05, 10));
        assert_eq!(a[13], sample_device(&nom, 0.05, 9, 13));
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn spec_validation() {
        let mut s = MonteCarloSpec::default();
        s.validate().unwrap();
        s.n_trials = 0;
        assert!(s.validate().is_err());
        s.n_trials = 1;
        s.epsilon = 1.0;
        assert!(s.validate().is_err());
    }
}
