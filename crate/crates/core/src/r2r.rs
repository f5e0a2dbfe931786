//! Run-to-run adaptation: costs, resistance pre-estimation, an online
//! Nelder–Mead state machine and the single-device experiment driver.
//!
//! The optimizer proposes exactly one candidate per switching operation and
//! consumes exactly one cost per proposal. Parameters θ₁..θ₆ are searched in
//! coordinates normalized by their nominal values; θ₇ is the coil resistance
//! measured before the first operation.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatctrl::{ControlTiming, FlatController};
use crate::model::{rho_to_theta, Geometry, IdentParams, PhysState, PhysicalParams};
use crate::reference::{build_reference, ReferenceTrajectory};
use crate::simulator::{simulate_operation, trapezoid_window, ConstantVoltage, OperationRecord, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Integral of the squared current prediction error.
    #[default]
    Im,
    /// Squared impact velocity.
    Dm,
}

impl CostMode {
    pub fn as_str(self) -> &'static str {
        match self {
            CostMode::Im => "im",
            CostMode::Dm => "dm",
        }
    }
}

impl std::str::FromStr for CostMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "im" => Ok(CostMode::Im),
            "dm" => Ok(CostMode::Dm),
            other => Err(Error::Config(format!("unknown cost mode '{other}' (expected im or dm)"))),
        }
    }
}

/// `∫ (y2 - ŷ2)^2 dt` over `window`, trapezoidal on the shared grid.
pub fn compute_cost_im(t: &[f64], y2: &[f64], y2_hat: &[f64], window: (f64, f64)) -> Result<f64> {
    if t.len() != y2.len() || t.len() != y2_hat.len() {
        return Err(Error::Shape(format!(
            "grid has {} samples, y2 {} and y2_hat {}",
            t.len(),
            y2.len(),
            y2_hat.len()
        )));
    }
    Ok(trapezoid_window(t, window.0, window.1, |k| (y2[k] - y2_hat[k]).powi(2)))
}

/// Cost assigned to an operation without impact: far above any physical `v_c^2`.
pub fn dm_no_impact_penalty(z_max: f64, duration: f64) -> f64 {
    1e6 * (z_max / duration).powi(2)
}

pub fn compute_cost_dm(v_c: Option<f64>, no_impact_penalty: f64) -> f64 {
    match v_c {
        Some(v) => v * v,
        None => no_impact_penalty,
    }
}

/// Ohm's law on a steady-state hold.
pub fn estimate_resistance(u_ss: f64, i_ss: f64) -> Result<f64> {
    if i_ss == 0.0 || !i_ss.is_finite() || !u_ss.is_finite() {
        return Err(Error::NoResistanceEstimate);
    }
    Ok(u_ss / i_ss)
}

/// Constant-voltage hold used to measure the coil resistance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResistanceProbe {
    pub voltage: f64,
    pub duration: f64,
}

impl Default for ResistanceProbe {
    fn default() -> Self {
        // Low enough that the armature stays latched open.
        Self { voltage: 5.0, duration: 20e-3 }
    }
}

/// Applies the probe voltage to the open device and estimates `R` from the final current.
pub fn measure_resistance(device: &PhysicalParams, g: &Geometry, probe: &ResistanceProbe) -> Result<f64> {
    let cfg = SimConfig { tf: probe.duration, dt_max: 1e-4, sample_period: 1e-4, ..Default::default() };
    let rec = simulate_operation(device, g, &ConstantVoltage(probe.voltage), &cfg, PhysState::open(g))?;
    estimate_resistance(probe.voltage, *rec.y2.last().ok_or(Error::NoResistanceEstimate)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmCoefficients {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
}

impl Default for NmCoefficients {
    fn default() -> Self {
        Self { reflection: 1.0, expansion: 2.0, contraction: 0.5, shrink: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    InitEval(usize),
    Reflect,
    Expand,
    ContractOut,
    ContractIn,
    ShrinkEval(usize),
}

/// Online Nelder–Mead: one [`propose`](OptimizerState::propose) per
/// [`update`](OptimizerState::update).
#[derive(Debug, Clone)]
pub struct OptimizerState {
    simplex: Vec<Vec<f64>>,
    costs: Vec<f64>,
    phase: Phase,
    pending: Option<Vec<f64>>,
    reflected: Option<(Vec<f64>, f64)>,
    centroid: Vec<f64>,
    coeffs: NmCoefficients,
    positive: Vec<bool>,
    last_projected: bool,
    restart_delta: Option<f64>,
    iterations: usize,
    proposals: usize,
    updates: usize,
    best_history: Vec<f64>,
}

/// Coordinates that must stay positive are floored here when a proposal crosses zero.
pub const POSITIVITY_FLOOR: f64 = 1e-6;
/// Simplex diameter below which an enabled restart fires.
pub const COLLAPSE_DIAMETER: f64 = 1e-6;

/// Standard initial simplex around the all-ones point: vertex `i` scales coordinate `i - 1` by `1 + delta`.
pub fn nm_init(dim: usize, delta: f64, coeffs: NmCoefficients) -> Result<OptimizerState> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!("initial spread {delta} must be positive")));
    }
    OptimizerState::new(axis_simplex(&vec![1.0; dim], delta), coeffs)
}

fn axis_simplex(center: &[f64], delta: f64) -> Vec<Vec<f64>> {
    let mut simplex = vec![center.to_vec()];
    for i in 0..center.len() {
        let mut v = center.to_vec();
        v[i] = if v[i] != 0.0 { v[i] * (1.0 + delta) } else { delta };
        simplex.push(v);
    }
    simplex
}

impl OptimizerState {
    pub fn new(simplex: Vec<Vec<f64>>, coeffs: NmCoefficients) -> Result<Self> {
        let dim = simplex.len().saturating_sub(1);
        if dim == 0 || simplex.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape(format!("simplex needs n + 1 vertices of length n, got {}", simplex.len())));
        }
        Ok(Self {
            costs: vec![f64::MAX; dim + 1],
            centroid: vec![0.0; dim],
            simplex,
            phase: Phase::InitEval(0),
            pending: None,
            reflected: None,
            coeffs,
            positive: vec![false; dim],
            last_projected: false,
            restart_delta: None,
            iterations: 0,
            proposals: 0,
            updates: 0,
            best_history: Vec::new(),
        })
    }

    /// Coordinates flagged here are projected to [`POSITIVITY_FLOOR`] when a proposal makes them non-positive.
    pub fn with_positive(mut self, coords: &[usize]) -> Self {
        for &i in coords {
            self.positive[i] = true;
        }
        self
    }

    /// Re-initializes the simplex around the best vertex when it collapses.
    pub fn with_restart(mut self, delta: f64) -> Self {
        self.restart_delta = Some(delta);
        self
    }

    pub fn dim(&self) -> usize {
        self.centroid.len()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn simplex(&self) -> &[Vec<f64>] {
        &self.simplex
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn proposals(&self) -> usize {
        self.proposals
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    pub fn awaiting_cost(&self) -> bool {
        self.pending.is_some()
    }

    pub fn last_projected(&self) -> bool {
        self.last_projected
    }

    /// Best cost after the initial simplex and after each completed iteration.
    pub fn best_history(&self) -> &[f64] {
        &self.best_history
    }

    /// Best evaluated vertex. Before any cost is known this is vertex 0 with cost `f64::MAX`.
    pub fn best(&self) -> (&[f64], f64) {
        let mut b = 0;
        for i in 1..self.costs.len() {
            if self.costs[i] < self.costs[b] {
                b = i;
            }
        }
        (&self.simplex[b], self.costs[b])
    }

    /// Largest distance from the best vertex to any other vertex.
    pub fn diameter(&self) -> f64 {
        let (best, _) = self.best();
        self.simplex
            .iter()
            .map(|v| v.iter().zip(best).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    fn toward(&self, from: &[f64], coeff: f64) -> Vec<f64> {
        self.centroid.iter().zip(from).map(|(c, x)| c + coeff * (x - c)).collect()
    }

    pub fn propose(&mut self) -> Result<Vec<f64>> {
        if self.pending.is_some() {
            return Err(Error::Protocol("a proposal is already awaiting its cost"));
        }
        let n = self.dim();
        let mut x = match self.phase {
            Phase::InitEval(k) | Phase::ShrinkEval(k) => self.simplex[k].clone(),
            Phase::Reflect => self.toward(&self.simplex[n], -self.coeffs.reflection),
            Phase::Expand => {
                let xr = &self.reflected.as_ref().ok_or(Error::Protocol("expansion without reflection"))?.0;
                self.toward(xr, self.coeffs.expansion)
            }
            Phase::ContractOut => {
                let xr = &self.reflected.as_ref().ok_or(Error::Protocol("contraction without reflection"))?.0;
                self.toward(xr, self.coeffs.contraction)
            }
            Phase::ContractIn => self.toward(&self.simplex[n], self.coeffs.contraction),
        };
        self.last_projected = false;
        for (xi, &pos) in x.iter_mut().zip(&self.positive) {
            if pos && !(*xi > 0.0) {
                *xi = POSITIVITY_FLOOR;
                self.last_projected = true;
            }
        }
        if let Phase::InitEval(k) | Phase::ShrinkEval(k) = self.phase {
            self.simplex[k] = x.clone();
        }
        self.proposals += 1;
        self.pending = Some(x.clone());
        Ok(x)
    }

    /// Consumes the cost of the pending proposal. Non-finite costs rank as worst.
    pub fn update(&mut self, cost: f64) -> Result<()> {
        let x = self.pending.take().ok_or(Error::Protocol("no proposal is awaiting a cost"))?;
        self.updates += 1;
        let f = if cost.is_finite() { cost } else { f64::MAX };
        let n = self.dim();
        match self.phase {
            Phase::InitEval(k) => {
                self.costs[k] = f;
                if k < n {
                    self.phase = Phase::InitEval(k + 1);
                } else {
                    self.finish_iteration(false);
                }
            }
            Phase::Reflect => {
                let (best, second_worst, worst) = (self.costs[0], self.costs[n - 1], self.costs[n]);
                self.reflected = Some((x.clone(), f));
                if f < best {
                    self.phase = Phase::Expand;
                } else if f < second_worst {
                    self.replace_worst(x, f);
                } else if f < worst {
                    self.phase = Phase::ContractOut;
                } else {
                    self.phase = Phase::ContractIn;
                }
            }
            Phase::Expand => {
                let (xr, fr) = self.reflected.take().ok_or(Error::Protocol("expansion without reflection"))?;
                if f < fr {
                    self.replace_worst(x, f);
                } else {
                    self.replace_worst(xr, fr);
                }
            }
            Phase::ContractOut => {
                let fr = self.reflected.as_ref().map_or(f64::MAX, |r| r.1);
                if f <= fr {
                    self.replace_worst(x, f);
                } else {
                    self.start_shrink();
                }
            }
            Phase::ContractIn => {
                if f < self.costs[n] {
                    self.replace_worst(x, f);
                } else {
                    self.start_shrink();
                }
            }
            Phase::ShrinkEval(k) => {
                self.costs[k] = f;
                if k < n {
                    self.phase = Phase::ShrinkEval(k + 1);
                } else {
                    self.finish_iteration(true);
                }
            }
        }
        Ok(())
    }

    fn replace_worst(&mut self, x: Vec<f64>, f: f64) {
        let n = self.dim();
        self.simplex[n] = x;
        self.costs[n] = f;
        self.finish_iteration(true);
    }

    fn start_shrink(&mut self) {
        let sigma = self.coeffs.shrink;
        let best = self.simplex[0].clone();
        for v in self.simplex.iter_mut().skip(1) {
            for (vi, bi) in v.iter_mut().zip(&best) {
                *vi = bi + sigma * (*vi - bi);
            }
        }
        self.phase = Phase::ShrinkEval(1);
    }

    fn sort(&mut self) {
        let mut order: Vec<usize> = (0..self.costs.len()).collect();
        order.sort_by(|&a, &b| self.costs[a].total_cmp(&self.costs[b]));
        self.simplex = order.iter().map(|&i| self.simplex[i].clone()).collect();
        self.costs = order.iter().map(|&i| self.costs[i]).collect();
    }

    fn finish_iteration(&mut self, counts: bool) {
        if counts {
            self.iterations += 1;
        }
        self.reflected = None;
        self.sort();
        self.best_history.push(self.costs[0]);
        if let Some(delta) = self.restart_delta {
            if self.diameter() < COLLAPSE_DIAMETER {
                let center = self.simplex[0].clone();
                let best_cost = self.costs[0];
                self.simplex = axis_simplex(&center, delta);
                self.costs = vec![f64::MAX; self.simplex.len()];
                self.costs[0] = best_cost;
                self.phase = Phase::InitEval(1);
                return;
            }
        }
        let n = self.dim();
        for j in 0..n {
            self.centroid[j] = self.simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64;
        }
        self.phase = Phase::Reflect;
    }
}

/// Counts reads of each measured channel made while computing costs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub current_reads: u64,
    pub position_reads: u64,
    pub velocity_reads: u64,
}

/// What the adaptation law may see of an operation. Every read is audited.
pub struct Measurements<'a> {
    record: &'a OperationRecord,
    audit: &'a mut AccessAudit,
}

impl<'a> Measurements<'a> {
    pub fn new(record: &'a OperationRecord, audit: &'a mut AccessAudit) -> Self {
        Self { record, audit }
    }

    pub fn time(&self) -> &'a [f64] {
        &self.record.t
    }

    pub fn current(&mut self) -> &'a [f64] {
        self.audit.current_reads += 1;
        &self.record.y2
    }

    pub fn position(&mut self) -> &'a [f64] {
        self.audit.position_reads += 1;
        &self.record.z
    }

    pub fn impact_velocity(&mut self) -> Option<f64> {
        self.audit.velocity_reads += 1;
        self.record.impact.velocity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordRetention {
    #[default]
    None,
    FirstAndLast,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct R2RConfig {
    pub n_operations: usize,
    /// Relative spread of the initial simplex.
    pub delta: f64,
    pub coefficients: NmCoefficients,
    pub mode: CostMode,
    pub restart_on_collapse: bool,
    pub sim: SimConfig,
    pub timing: ControlTiming,
    pub reference: ReferenceTrajectory,
    /// Nominal device: source of the initial parameters and of the reference transform.
    pub nominal: PhysicalParams,
    pub probe: ResistanceProbe,
    pub retain: RecordRetention,
}

impl Default for R2RConfig {
    fn default() -> Self {
        let nominal = PhysicalParams::nominal();
        let g = Geometry::default();
        Self {
            n_operations: 600,
            delta: 0.05,
            coefficients: NmCoefficients::default(),
            mode: CostMode::Im,
            restart_on_collapse: false,
            sim: SimConfig::default(),
            timing: ControlTiming::default(),
            reference: nominal_reference(&nominal, &g, 4.5e-3),
            nominal,
            probe: ResistanceProbe::default(),
            retain: RecordRetention::None,
        }
    }
}

/// Reference from the upper to the lower stop, mapped with the nominal transform.
pub fn nominal_reference(nominal: &PhysicalParams, g: &Geometry, duration: f64) -> ReferenceTrajectory {
    build_reference(g.z_max, g.z_min, duration)
        .map(|r| r.with_transform(nominal.r_g0, nominal.k_g))
        .unwrap_or_else(|_| panic!("reference duration {duration} must be positive"))
}

impl R2RConfig {
    pub fn validate(&self, g: &Geometry) -> Result<()> {
        if self.n_operations < 7 {
            return Err(Error::InvalidParameter("n_operations must be at least 7".into()));
        }
        if !(self.delta > 0.0) {
            return Err(Error::InvalidParameter("delta must be positive".into()));
        }
        self.sim.validate()?;
        self.timing.validate()?;
        self.nominal.validate(g)
    }

    pub fn sim_config(&self) -> SimConfig {
        self.timing.sim_config(&self.reference, &self.sim)
    }

    pub fn grid(&self) -> Vec<f64> {
        let sim = self.sim_config();
        (0..sim.n_samples()).map(|k| sim.sample_time(k)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationStatus {
    Ok,
    /// The candidate's inversion was infeasible; the penalty cost was used.
    Infeasible,
    /// The device simulation failed; the penalty cost was used.
    SimulationFailed,
}

impl OperationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            OperationStatus::Ok => "ok",
            OperationStatus::Infeasible => "infeasible",
            OperationStatus::SimulationFailed => "simulation_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationSummary {
    /// 1-based operation index.
    pub index: usize,
    pub status: OperationStatus,
    pub cost: f64,
    pub v_c: Option<f64>,
    /// Impact time on the simulation clock.
    pub t_c: Option<f64>,
    /// `t_c` minus the scheduled end of the reference.
    pub tc_error: Option<f64>,
    pub nrmse_z: Option<f64>,
    pub theta_hat: [f64; 7],
    /// θ̂₁..θ̂₆ divided by the nominal values.
    pub normalized: [f64; 6],
    pub projected: bool,
}

#[derive(Debug, Clone)]
pub struct R2RRun {
    pub trial: usize,
    pub mode: CostMode,
    pub device: PhysicalParams,
    pub theta_true: IdentParams,
    pub r_hat: f64,
    pub penalty: f64,
    pub ops: Vec<OperationSummary>,
    pub records: Vec<(usize, OperationRecord)>,
    pub audit: AccessAudit,
    /// Device simulations run for operations (the resistance probe excluded).
    pub simulations: usize,
    pub best_history: Vec<f64>,
    pub final_best: (Vec<f64>, f64),
}

impl R2RRun {
    pub fn write_log<W: Write>(&self, mut w: W, header: bool) -> Result<()> {
        if header {
            writeln!(w, "{}", LOG_HEADER)?;
        }
        for op in &self.ops {
            write!(w, "{},{},{},{},", self.trial, op.index, self.mode.as_str(), op.cost)?;
            write!(w, "{},{},{}", opt(op.v_c), opt(op.t_c), opt(op.nrmse_z))?;
            for x in op.normalized {
                write!(w, ",{x}")?;
            }
            writeln!(w, ",{}", op.status.as_str())?;
        }
        Ok(())
    }
}

pub const LOG_HEADER: &str =
    "trial,operation,mode,J,v_c,t_c,nrmse_z,theta1_n,theta2_n,theta3_n,theta4_n,theta5_n,theta6_n,status";

pub(crate) fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Outcome of applying one candidate to the device.
pub struct Operation {
    pub controller: Option<FlatController>,
    pub record: Option<OperationRecord>,
    pub status: OperationStatus,
}

/// Builds the controller for `theta_hat`, simulates the device under it and
/// attaches the predicted current to the record.
pub fn apply_candidate(device: &PhysicalParams, g: &Geometry, theta_hat: &IdentParams, cfg: &R2RConfig) -> Operation {
    let failed = |status| Operation { controller: None, record: None, status };
    let Ok(ctrl) = FlatController::new(cfg.reference, *theta_hat, cfg.timing) else {
        return failed(OperationStatus::Infeasible);
    };
    let sim = cfg.sim_config();
    let grid: Vec<f64> = (0..sim.n_samples()).map(|k| sim.sample_time(k)).collect();
    let Ok(signal) = ctrl.control_signal(&grid) else {
        return failed(OperationStatus::Infeasible);
    };
    match simulate_operation(device, g, &ctrl, &sim, PhysState::open(g)) {
        Ok(mut rec) => {
            rec.y2_hat = signal.y2_hat;
            Operation { controller: Some(ctrl), record: Some(rec), status: OperationStatus::Ok }
        }
        Err(Error::InfeasibleReference { .. }) => failed(OperationStatus::Infeasible),
        Err(_) => failed(OperationStatus::SimulationFailed),
    }
}

/// Cost of an operation as seen by the adaptation law.
pub fn operation_cost(mode: CostMode, meas: &mut Measurements<'_>, y2_hat: &[f64], window: (f64, f64), penalty: f64) -> f64 {
    let j = match mode {
        CostMode::Im => {
            let t = meas.time();
            let y2 = meas.current();
            compute_cost_im(t, y2, y2_hat, window).unwrap_or(penalty)
        }
        CostMode::Dm => compute_cost_dm(meas.impact_velocity(), penalty),
    };
    if j.is_finite() {
        j.min(penalty)
    } else {
        penalty
    }
}

/// Position reference on the simulation grid of `cfg`.
pub fn position_reference(cfg: &R2RConfig, t: &[f64]) -> Vec<f64> {
    t.iter().map(|&ti| cfg.reference.derivatives(ti - cfg.timing.precharge)[0]).collect()
}

/// Runs `cfg.n_operations` adapted operations on one device.
pub fn run_r2r(device: &PhysicalParams, g: &Geometry, cfg: &R2RConfig, trial: usize) -> Result<R2RRun> {
    cfg.validate(g)?;
    device.validate(g)?;
    let theta_nom = rho_to_theta(&cfg.nominal);
    let r_hat = measure_resistance(device, g, &cfg.probe)?;
    let sim = cfg.sim_config();
    let window = (sim.t0, sim.tf);
    let grid = cfg.grid();
    let z_ref = position_reference(cfg, &grid);
    let t_land = cfg.timing.precharge + cfg.reference.duration;

    let mut nominal_hat = theta_nom;
    nominal_hat.theta[6] = r_hat;
    let penalty = match cfg.mode {
        CostMode::Im => {
            let ctrl = FlatController::new(cfg.reference, nominal_hat, cfg.timing)?;
            let y2_hat = ctrl.control_signal(&grid)?.y2_hat;
            1e6 * trapezoid_window(&grid, window.0, window.1, |k| y2_hat[k] * y2_hat[k])
        }
        CostMode::Dm => dm_no_impact_penalty(g.z_max, cfg.reference.duration),
    };

    let mut opt = nm_init(6, cfg.delta, cfg.coefficients)?.with_positive(&[0, 3, 4, 5]);
    if cfg.restart_on_collapse {
        opt = opt.with_restart(cfg.delta);
    }
    let mut audit = AccessAudit::default();
    let mut ops = Vec::with_capacity(cfg.n_operations);
    let mut records = Vec::new();
    let mut simulations = 0;

    for k in 1..=cfg.n_operations {
        let x = opt.propose()?;
        let theta_hat = IdentParams::denormalize(&x, &theta_nom, r_hat);
        let op = apply_candidate(device, g, &theta_hat, cfg);
        if op.status != OperationStatus::Infeasible {
            simulations += 1;
        }
        let mut summary = OperationSummary {
            index: k,
            status: op.status,
            cost: penalty,
            v_c: None,
            t_c: None,
            tc_error: None,
            nrmse_z: None,
            theta_hat: theta_hat.theta,
            normalized: theta_hat.normalized(&theta_nom),
            projected: opt.last_projected(),
        };
        if let Some(mut rec) = op.record {
            let y2_hat = std::mem::take(&mut rec.y2_hat);
            summary.cost = operation_cost(cfg.mode, &mut Measurements::new(&rec, &mut audit), &y2_hat, window, penalty);
            rec.y2_hat = y2_hat;
            // Evaluation metrics only; the adaptation law never sees these.
            summary.v_c = rec.impact.velocity;
            summary.t_c = rec.impact.time;
            summary.tc_error = rec.impact.time.map(|t| t - t_land);
            summary.nrmse_z = crate::simulator::compute_nrmse(&rec.t, &rec.z, &z_ref, window).ok();
            rec.cost = Some(summary.cost);
            rec.nrmse_z = summary.nrmse_z;
            let keep = match cfg.retain {
                RecordRetention::None => false,
                RecordRetention::FirstAndLast => k == 1 || k == cfg.n_operations,
                RecordRetention::All => true,
            };
            if keep {
                records.push((k, rec));
            }
        }
        opt.update(summary.cost)?;
        ops.push(summary);
    }

    let (best_x, best_cost) = opt.best();
    Ok(R2RRun {
        trial,
        mode: cfg.mode,
        device: *device,
        theta_true: rho_to_theta(device),
        r_hat,
        penalty,
        ops,
        records,
        audit,
        simulations,
        best_history: opt.best_history().to_vec(),
        final_best: (best_x.to_vec(), best_cost),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn im_cost_closed_forms() {
        let t: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let y = vec![0.3; t.len()];
        assert_eq!(compute_cost_im(&t, &y, &y, (0.0, 1.0)).unwrap(), 0.0);
        let shifted = vec![0.5; t.len()];
        assert_relative_eq!(compute_cost_im(&t, &shifted, &y, (0.0, 1.0)).unwrap(), 0.04, max_relative = 1e-12);
        assert!(matches!(compute_cost_im(&t, &y, &y[..10], (0.0, 1.0)), Err(Error::Shape(_))));
    }

    #[test]
    fn im_cost_agrees_with_fine_riemann_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // Smooth random traces: sums of a few sinusoids, sampled on a fine grid.
        let coeffs: Vec<(f64, f64)> = (0..4).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(1.0..8.0))).collect();
        let e = |t: f64| coeffs.iter().map(|(a, w)| a * (w * t).sin()).sum::<f64>();
        let t: Vec<f64> = (0..=20_000).map(|k| k as f64 * 1e-4).collect();
        let y2: Vec<f64> = t.iter().map(|&x| 1.0 + e(x)).collect();
        let y2_hat = vec![1.0; t.len()];
        let j = compute_cost_im(&t, &y2, &y2_hat, (0.0, 2.0)).unwrap();
        let n = 2_000_000;
        let h = 2.0 / n as f64;
        let riemann: f64 = (0..n).map(|k| e((k as f64 + 0.5) * h).powi(2) * h).sum();
        assert_relative_eq!(j, riemann, max_relative = 1e-6);
    }

    #[test]
    fn dm_cost_and_penalty() {
        let pen = dm_no_impact_penalty(1e-3, 4.5e-3);
        assert_eq!(compute_cost_dm(Some(0.0), pen), 0.0);
        assert_relative_eq!(compute_cost_dm(Some(0.1), pen), 0.01, max_relative = 1e-15);
        assert_relative_eq!(compute_cost_dm(None, pen), 1e6 * (1e-3f64 / 4.5e-3).powi(2), max_relative = 1e-15);
        assert!(pen > 100.0);
    }

    #[test]
    fn resistance_estimates() {
        assert_relative_eq!(estimate_resistance(30.0, 0.6).unwrap(), 50.0, max_relative = 1e-15);
        assert_eq!(estimate_resistance(60.0, 1.2).unwrap(), estimate_resistance(30.0, 0.6).unwrap());
        assert!(matches!(estimate_resistance(30.0, 0.0), Err(Error::NoResistanceEstimate)));
    }

    #[test]
    fn simulated_hold_recovers_perturbed_resistance() {
        let g = Geometry::default();
        let device = PhysicalParams { r: 52.3, k_g: 7.67e3 * 0.97, ..PhysicalParams::nominal() };
        let r_hat = measure_resistance(&device, &g, &ResistanceProbe::default()).unwrap();
        assert_relative_eq!(r_hat, 52.3, max_relative = 1e-3);
    }

    #[test]
    fn initial_simplex_layout() {
        let mut s = nm_init(6, 0.05, NmCoefficients::default()).unwrap();
        assert_eq!(s.simplex().len(), 7);
        assert_eq!(s.simplex()[3], vec![1.0, 1.0, 1.05, 1.0, 1.0, 1.0]);
        assert_eq!(s.propose().unwrap(), vec![1.0; 6]);
        assert!(nm_init(6, 0.0, NmCoefficients::default()).is_err());
        // Affine independence: edge vectors from vertex 0 are scaled unit vectors.
        for i in 1..7 {
            for j in 0..6 {
                let d = s.simplex()[i][j] - s.simplex()[0][j];
                assert_eq!(d != 0.0, j == i - 1);
            }
        }
    }

    #[test]
    fn protocol_errors() {
        let mut s = nm_init(2, 0.1, NmCoefficients::default()).unwrap();
        assert!(matches!(s.update(1.0), Err(Error::Protocol(_))));
        s.propose().unwrap();
        assert!(matches!(s.propose(), Err(Error::Protocol(_))));
        s.update(1.0).unwrap();
        assert!(s.propose().is_ok());
    }

    #[test]
    fn hand_computed_reflection_in_two_dimensions() {
        let simplex = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut s = OptimizerState::new(simplex, NmCoefficients::default()).unwrap();
        for (k, cost) in [0.0, 1.0, 2.0].into_iter().enumerate() {
            assert_eq!(s.phase(), Phase::InitEval(k));
            s.propose().unwrap();
            s.update(cost).unwrap();
        }
        assert_eq!(s.phase(), Phase::Reflect);
        // Centroid of (0,0) and (1,0) is (0.5, 0); reflecting (0,1) through it gives (1, -1).
        assert_eq!(s.propose().unwrap(), vec![1.0, -1.0]);
        // Better than the best: expansion c + 2 (xr - c) = (1.5, -2).
        s.update(-1.0).unwrap();
        assert_eq!(s.phase(), Phase::Expand);
        assert_eq!(s.propose().unwrap(), vec![1.5, -2.0]);
        s.update(-0.5).unwrap();
        // Expansion was worse than the reflection: the reflection is kept.
        assert_eq!(s.best(), (&[1.0, -1.0][..], -1.0));
    }

    #[test]
    fn worst_reflection_leads_to_inside_contraction() {
        let simplex = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let mut s = OptimizerState::new(simplex, NmCoefficients::default()).unwrap();
        for cost in [0.0, 1.0, 2.0] {
            s.propose().unwrap();
            s.update(cost).unwrap();
        }
        s.propose().unwrap();
        s.update(5.0).unwrap();
        assert_eq!(s.phase(), Phase::ContractIn);
        // c + 0.5 (x_worst - c) = (0.25, 0.5).
        assert_eq!(s.propose().unwrap(), vec![0.25, 0.5]);
        // Still worse than the worst vertex: shrink towards the best.
        s.update(9.0).unwrap();
        assert_eq!(s.phase(), Phase::ShrinkEval(1));
        assert_eq!(s.propose().unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn non_finite_costs_rank_worst() {
        let mut s = nm_init(2, 0.1, NmCoefficients::default()).unwrap();
        for cost in [f64::NAN, 1.0, 2.0] {
            s.propose().unwrap();
            s.update(cost).unwrap();
        }
        assert!(s.costs().iter().all(|c| c.is_finite()));
        assert_eq!(s.best().1, 1.0);
        assert_eq!(*s.costs().last().unwrap(), f64::MAX);
    }

    #[test]
    fn positivity_projection() {
        let simplex = vec![vec![1.0, 1.0], vec![0.1, 1.0], vec![1.0, 2.0]];
        let mut s = OptimizerState::new(simplex, NmCoefficients::default()).unwrap().with_positive(&[0]);
        for cost in [5.0, 1.0, 2.0] {
            s.propose().unwrap();
            s.update(cost).unwrap();
        }
        // Best (0.1,1), then (1,2), worst (1,1): centroid (0.55, 1.5), reflection (0.1, 2).
        s.propose().unwrap();
        s.update(0.5).unwrap();
        // Expansion c + 2 (xr - c) = (-0.35, 2.5) gets its first coordinate floored.
        let x = s.propose().unwrap();
        assert_eq!(x[0], POSITIVITY_FLOOR);
        assert!(s.last_projected());
    }

    fn quadratic(x: &[f64], target: &[f64]) -> f64 {
        x.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum()
    }

    #[test]
    fn best_cost_is_nonincreasing_on_quadratic() {
        let target = [1.03, 0.98, 1.02, 0.97, 1.01, 1.04];
        let mut s = nm_init(6, 0.05, NmCoefficients::default()).unwrap();
        for _ in 0..300 {
            let x = s.propose().unwrap();
            s.update(quadratic(&x, &target)).unwrap();
        }
        assert_eq!(s.proposals(), 300);
        assert_eq!(s.updates(), 300);
        assert!(s.best_history().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn restart_reinitializes_collapsed_simplex() {
        let mut s = nm_init(2, 0.05, NmCoefficients::default()).unwrap().with_restart(0.05);
        let mut restarted = false;
        for _ in 0..400 {
            let x = s.propose().unwrap();
            s.update(quadratic(&x, &[1.0, 1.0])).unwrap();
            if s.phase() == Phase::InitEval(1) {
                restarted = true;
            }
        }
        assert!(restarted);
        assert!(s.diameter() > 0.0);
    }
}
