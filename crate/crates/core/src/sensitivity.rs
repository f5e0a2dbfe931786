//! Integrated-squared parameter sensitivities of the predicted current and of
//! the tracked flat output.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flatctrl::{flat_states, ControlTiming, FlatController};
use crate::model::{ident_output, Geometry, IdentParams, PhysState, PhysicalParams};
use crate::reference::ReferenceTrajectory;
use crate::simulator::{simulate_operation, trapezoid_window, SimConfig};

pub const DEFAULT_REL_STEP: f64 = 1e-4;
/// Halvings tried when a perturbed evaluation is infeasible.
const MAX_SHRINKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzedOutput {
    PredictedCurrent,
    FlatOutput,
}

impl AnalyzedOutput {
    pub fn label(self) -> &'static str {
        match self {
            AnalyzedOutput::PredictedCurrent => "y2_hat",
            AnalyzedOutput::FlatOutput => "y1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub output: AnalyzedOutput,
    /// `θᵢ² ∫ (∂out/∂θᵢ)² dt`
    pub raw: [f64; 6],
    pub normalized: [f64; 6],
    /// Relative finite-difference step actually used for each parameter.
    pub steps: [f64; 6],
}

impl SensitivityReport {
    /// Parameter indices (0-based) from most to least sensitive.
    pub fn ranking(&self) -> [usize; 6] {
        let mut idx = [0, 1, 2, 3, 4, 5];
        idx.sort_by(|&a, &b| self.normalized[b].total_cmp(&self.normalized[a]));
        idx
    }
}

/// Divides by the maximum; all-zero or non-finite input is rejected.
pub fn normalize(raw: &[f64; 6]) -> Result<[f64; 6]> {
    if raw.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::InvalidParameter(format!("sensitivities must be finite and nonnegative: {raw:?}")));
    }
    let max = raw.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return Err(Error::ZeroSensitivity);
    }
    Ok(raw.map(|s| s / max))
}

/// `θ² ∫ (∂out/∂θ)² dt` from outputs at `θ (1 ± rel_step)`; the θ factors cancel.
pub fn integrated_sensitivity(t: &[f64], plus: &[f64], minus: &[f64], rel_step: f64, window: (f64, f64)) -> f64 {
    let scale = 1.0 / (2.0 * rel_step);
    trapezoid_window(t, window.0, window.1, |k| ((plus[k] - minus[k]) * scale).powi(2))
}

/// Central differences for every control parameter, shrinking the step on
/// infeasible evaluations.
fn stencil<F>(theta: &IdentParams, rel_step: f64, mut eval: F) -> Result<([(Vec<f64>, Vec<f64>); 6], [f64; 6])>
where
    F: FnMut(&IdentParams) -> Result<Vec<f64>>,
{
    if !(rel_step > 0.0) {
        return Err(Error::InvalidParameter(format!("relative step {rel_step} must be positive")));
    }
    let mut steps = [0.0; 6];
    let mut pairs: [(Vec<f64>, Vec<f64>); 6] = Default::default();
    for i in 0..6 {
        let mut h = rel_step;
        let mut last_err = None;
        for _ in 0..=MAX_SHRINKS {
            let shifted = |sign: f64| {
                let mut p = *theta;
                p.theta[i] *= 1.0 + sign * h;
                p
            };
            match (eval(&shifted(1.0)), eval(&shifted(-1.0))) {
                (Ok(plus), Ok(minus)) => {
                    pairs[i] = (plus, minus);
                    steps[i] = h;
                    last_err = None;
                    break;
                }
                (Err(e), _) | (_, Err(e)) => {
                    last_err = Some(e);
                    h *= 0.5;
                }
            }
        }
        if let Some(e) = last_err {
            return Err(e);
        }
    }
    Ok((pairs, steps))
}

fn report(
    output: AnalyzedOutput,
    t: &[f64],
    pairs: &[(Vec<f64>, Vec<f64>); 6],
    steps: [f64; 6],
    window: (f64, f64),
) -> Result<SensitivityReport> {
    let mut raw = [0.0; 6];
    for i in 0..6 {
        let (plus, minus) = &pairs[i];
        raw[i] = integrated_sensitivity(t, plus, minus, steps[i], window);
    }
    Ok(SensitivityReport { output, normalized: normalize(&raw)?, raw, steps })
}

/// Pure inversion of the reference: predicted current on `grid` (reference time).
pub fn predicted_current_trace(theta: &IdentParams, reference: &ReferenceTrajectory, grid: &[f64]) -> Result<Vec<f64>> {
    grid.iter()
        .map(|&t| {
            let d = reference.flat_derivatives(t);
            let x = flat_states(&[d[0], d[1], d[2]], theta).map_err(|e| match e {
                Error::InfeasibleReference { radicand, .. } => Error::InfeasibleReference { t, radicand },
                other => other,
            })?;
            Ok(ident_output(&x, theta)?.1)
        })
        .collect()
}

/// Sensitivity of the algebraic current predictor over the reference window.
pub fn predictor_sensitivity(
    theta: &IdentParams,
    reference: &ReferenceTrajectory,
    grid: &[f64],
    rel_step: f64,
) -> Result<SensitivityReport> {
    predicted_current_trace(theta, reference, grid)?;
    let (pairs, steps) = stencil(theta, rel_step, |p| predicted_current_trace(p, reference, grid))?;
    let window = match (grid.first(), grid.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Err(Error::EmptySample),
    };
    report(AnalyzedOutput::PredictedCurrent, grid, &pairs, steps, window)
}

/// Sensitivity of the device's flat output `R_g0 + k_g z` to the controller's
/// parameters, through full simulation. The integral stops at the earliest
/// first landing among all perturbed runs.
pub fn tracking_sensitivity(
    theta: &IdentParams,
    device: &PhysicalParams,
    g: &Geometry,
    reference: &ReferenceTrajectory,
    timing: &ControlTiming,
    base: &SimConfig,
    rel_step: f64,
) -> Result<SensitivityReport> {
    let sim = timing.sim_config(reference, base);
    let grid: Vec<f64> = (0..sim.n_samples()).map(|k| sim.sample_time(k)).collect();
    let mut end = sim.tf;
    let mut run = |p: &IdentParams| -> Result<Vec<f64>> {
        let ctrl = FlatController::new(*reference, *p, *timing)?;
        let rec = simulate_operation(device, g, &ctrl, &sim, PhysState::open(g))?;
        if let Some(t) = rec.first_landing() {
            end = end.min(t);
        }
        Ok(rec.z.iter().map(|z| device.r_g0 + device.k_g * z).collect())
    };
    run(theta)?;
    let (pairs, steps) = stencil(theta, rel_step, &mut run)?;
    report(AnalyzedOutput::FlatOutput, &grid, &pairs, steps, (sim.t0, end))
}

/// Two-row table: one row per report, one column per parameter.
pub fn write_table<W: Write>(mut w: W, reports: &[SensitivityReport]) -> Result<()> {
    writeln!(w, "output,theta1,theta2,theta3,theta4,theta5,theta6")?;
    for r in reports {
        write!(w, "{}", r.output.label())?;
        for s in r.normalized {
            write!(w, ",{s:e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}
