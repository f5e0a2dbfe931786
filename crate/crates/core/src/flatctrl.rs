//! Feedforward voltage and current predictor by inversion of the identifiable model.
//!
//! With the flat output `y1 = x1` fixed to the reference, the mechanical row
//! of the identifiable model gives the flux
//! `x3^2 = -(2/θ4) (ÿ1 + θ1 y1 + θ2 ẏ1 + θ3)` and the electrical row gives
//! the voltage `u = ẋ3 + θ7 x3 (x1 + θ5 / (1 - |x3|/θ6))`. The predicted
//! current is the output map evaluated on the same states; nothing is
//! integrated.
//!
//! An operation runs on the simulation clock `t_sim ∈ [0, tf]` and has three
//! segments: a pre-charge that ramps the flux to its value at the start of
//! the reference with the armature still latched open, the tracking segment,
//! and a hold segment in which the reference is frozen at its end value.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{saturation_term, IdentParams, IdentState};
use crate::reference::ReferenceTrajectory;
use crate::simulator::{SimConfig, VoltageSource};

/// Flux below which the flux-rate inversion is considered singular (Wb).
pub const X3_EPS: f64 = 1e-6;

/// States along the flat reference. `y` holds `y1ref` and its first two derivatives.
pub fn flat_states(y: &[f64; 3], th: &IdentParams) -> Result<IdentState> {
    let t = &th.theta;
    let radicand = -(2.0 / t[3]) * (y[2] + t[0] * y[0] + t[1] * y[1] + t[2]);
    if !(radicand >= 0.0) {
        return Err(Error::InfeasibleReference { t: f64::NAN, radicand });
    }
    Ok(IdentState { x1: y[0], x2: y[1], x3: radicand.sqrt() })
}

/// Time derivative of the flux along the reference. `y` holds orders 0..=3.
pub fn flux_rate(y: &[f64; 4], th: &IdentParams, x3: f64) -> Result<f64> {
    if !(x3 > X3_EPS) {
        return Err(Error::SingularInversion { x3 });
    }
    let t = &th.theta;
    Ok(-(y[3] + t[0] * y[1] + t[1] * y[2]) / (t[3] * x3))
}

#[inline]
fn resistive_voltage(th: &IdentParams, x1: f64, x3: f64) -> Result<f64> {
    Ok(th.theta[6] * x3 * (x1 + saturation_term(th.theta[4], x3, th.theta[5])?))
}

#[inline]
fn predicted(th: &IdentParams, x1: f64, x3: f64) -> Result<f64> {
    Ok(x3 * (x1 + saturation_term(th.theta[4], x3, th.theta[5])?))
}

#[inline]
fn smoothstep(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    (s * s * (3.0 - 2.0 * s), 6.0 * s * (1.0 - s))
}

/// Flux ramp that energizes the coil before motion. Times are relative to
/// the start of the reference, so the segment covers `[-duration, 0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precharge {
    pub duration: f64,
    pub x3_target: f64,
    /// Flat output while latched open, `y1ref(0)`.
    pub x1: f64,
    pub theta: IdentParams,
}

pub fn build_precharge(th: &IdentParams, duration: f64, x3_target: f64, x1: f64) -> Result<Precharge> {
    if !(duration > 0.0) {
        return Err(Error::InvalidParameter(format!("pre-charge duration {duration} must be positive")));
    }
    if !(x3_target.abs() < th.theta[5]) {
        return Err(Error::SaturationDomain { lambda: x3_target, lambda_sat: th.theta[5] });
    }
    Ok(Precharge { duration, x3_target, x1, theta: *th })
}

impl Precharge {
    /// Flux and its rate at reference time `tau`.
    pub fn flux(&self, tau: f64) -> (f64, f64) {
        let (w, dw) = smoothstep((tau + self.duration) / self.duration);
        (self.x3_target * w, self.x3_target * dw / self.duration)
    }

    pub fn voltage(&self, tau: f64) -> Result<f64> {
        let (x3, dx3) = self.flux(tau);
        Ok(dx3 + resistive_voltage(&self.theta, self.x1, x3)?)
    }

    pub fn predicted_current(&self, tau: f64) -> Result<f64> {
        let (x3, _) = self.flux(tau);
        predicted(&self.theta, self.x1, x3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlTiming {
    /// Pre-charge duration (s).
    pub precharge: f64,
    /// Window kept after the end of the reference (s).
    pub settle: f64,
    /// Duration of the flux ramp into the hold level (s).
    pub hold_ramp: f64,
    /// Relative flux increase applied while holding the armature closed.
    pub hold_margin: f64,
}

impl Default for ControlTiming {
    fn default() -> Self {
        Self { precharge: 1e-3, settle: 1e-3, hold_ramp: 2e-4, hold_margin: 0.1 }
    }
}

impl ControlTiming {
    pub fn validate(&self) -> Result<()> {
        if !(self.precharge > 0.0) || !(self.settle >= 0.0) || !(self.hold_ramp > 0.0) || !(self.hold_margin >= 0.0) {
            return Err(Error::InvalidParameter(format!("invalid control timing {self:?}")));
        }
        Ok(())
    }

    /// Simulation window covering pre-charge, reference and settle margin.
    pub fn sim_config(&self, reference: &ReferenceTrajectory, base: &SimConfig) -> SimConfig {
        SimConfig { t0: 0.0, tf: self.precharge + reference.duration + self.settle, ..*base }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Idle,
    Precharge,
    Tracking,
    Hold,
}

/// Flat states and flux rate at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatPoint {
    pub x1: f64,
    pub x3: f64,
    pub dx3: f64,
}

/// Feedforward controller and predictor for one parameter candidate.
#[derive(Debug, Clone)]
pub struct FlatController {
    reference: ReferenceTrajectory,
    theta: IdentParams,
    timing: ControlTiming,
    precharge: Precharge,
    x3_end: f64,
    x1_end: f64,
}

impl FlatController {
    pub fn new(reference: ReferenceTrajectory, theta: IdentParams, timing: ControlTiming) -> Result<Self> {
        timing.validate()?;
        let start = reference.flat_derivatives(0.0);
        let x3_start = flat_states(&[start[0], start[1], start[2]], &theta)
            .map_err(|e| with_time(e, timing.precharge))?
            .x3;
        let precharge =
            build_precharge(&theta, timing.precharge, x3_start, start[0]).map_err(|e| with_time(e, 0.0))?;
        let end = reference.flat_derivatives(reference.duration);
        let x3_end = flat_states(&[end[0], end[1], end[2]], &theta)
            .map_err(|e| with_time(e, timing.precharge + reference.duration))?
            .x3;
        let hold_peak = x3_end * (1.0 + timing.hold_margin);
        if !(hold_peak < theta.theta[5]) {
            return Err(Error::InfeasibleReference { t: timing.precharge + reference.duration, radicand: hold_peak });
        }
        Ok(Self { reference, theta, timing, precharge, x3_end, x1_end: end[0] })
    }

    pub fn theta(&self) -> &IdentParams {
        &self.theta
    }

    pub fn reference(&self) -> &ReferenceTrajectory {
        &self.reference
    }

    pub fn timing(&self) -> &ControlTiming {
        &self.timing
    }

    /// Simulation time at which the reference starts.
    pub fn reference_start(&self) -> f64 {
        self.timing.precharge
    }

    pub fn reference_end(&self) -> f64 {
        self.timing.precharge + self.reference.duration
    }

    pub fn segment(&self, t: f64) -> Segment {
        let tau = t - self.timing.precharge;
        if t < 0.0 {
            Segment::Idle
        } else if tau < 0.0 {
            Segment::Precharge
        } else if tau <= self.reference.duration {
            Segment::Tracking
        } else {
            Segment::Hold
        }
    }

    /// Flat states on the simulation clock.
    pub fn flat_point(&self, t: f64) -> Result<FlatPoint> {
        let tau = t - self.timing.precharge;
        match self.segment(t) {
            Segment::Idle => Ok(FlatPoint { x1: self.precharge.x1, x3: 0.0, dx3: 0.0 }),
            Segment::Precharge => {
                let (x3, dx3) = self.precharge.flux(tau);
                Ok(FlatPoint { x1: self.precharge.x1, x3, dx3 })
            }
            Segment::Tracking => {
                let y = self.reference.flat_derivatives(tau);
                let x = flat_states(&[y[0], y[1], y[2]], &self.theta).map_err(|e| with_time(e, t))?;
                let dx3 = flux_rate(&y, &self.theta, x.x3)?;
                Ok(FlatPoint { x1: x.x1, x3: x.x3, dx3 })
            }
            Segment::Hold => {
                let (w, dw) = smoothstep((tau - self.reference.duration) / self.timing.hold_ramp);
                let m = self.timing.hold_margin * self.x3_end;
                Ok(FlatPoint { x1: self.x1_end, x3: self.x3_end + m * w, dx3: m * dw / self.timing.hold_ramp })
            }
        }
    }

    pub fn feedforward_input(&self, t: f64) -> Result<f64> {
        let fp = self.flat_point(t)?;
        Ok(fp.dx3 + resistive_voltage(&self.theta, fp.x1, fp.x3).map_err(|e| with_time(e, t))?)
    }

    pub fn predict_current(&self, t: f64) -> Result<f64> {
        let fp = self.flat_point(t)?;
        predicted(&self.theta, fp.x1, fp.x3).map_err(|e| with_time(e, t))
    }

    /// Predicted flat output; equals the flat reference by construction.
    pub fn predict_flat_output(&self, t: f64) -> f64 {
        self.reference.flat_derivatives(t - self.timing.precharge)[0]
    }

    /// Nominal position reference on the simulation clock.
    pub fn position_reference(&self, t: f64) -> f64 {
        self.reference.derivatives(t - self.timing.precharge)[0]
    }

    /// Evaluates voltage and predicted current on a sample grid. Fails at the
    /// first grid point where the inversion is infeasible.
    pub fn control_signal(&self, grid: &[f64]) -> Result<ControlSignal> {
        let mut u_ff = Vec::with_capacity(grid.len());
        let mut y2_hat = Vec::with_capacity(grid.len());
        for &t in grid {
            let fp = self.flat_point(t)?;
            u_ff.push(fp.dx3 + resistive_voltage(&self.theta, fp.x1, fp.x3).map_err(|e| with_time(e, t))?);
            y2_hat.push(predicted(&self.theta, fp.x1, fp.x3).map_err(|e| with_time(e, t))?);
        }
        Ok(ControlSignal {
            t: grid.to_vec(),
            u_ff,
            y2_hat,
            precharge_start: 0.0,
            tracking_start: self.reference_start(),
            hold_start: self.reference_end(),
        })
    }
}

impl VoltageSource for FlatController {
    fn voltage(&self, t: f64) -> Result<f64> {
        self.feedforward_input(t)
    }

    fn breakpoints(&self) -> Vec<f64> {
        let end = self.reference_end();
        vec![self.reference_start(), end, end + self.timing.hold_ramp]
    }
}

fn with_time(e: Error, t: f64) -> Error {
    match e {
        Error::InfeasibleReference { radicand, .. } => Error::InfeasibleReference { t, radicand },
        Error::SaturationDomain { .. } => Error::InfeasibleReference { t, radicand: f64::NAN },
        other => other,
    }
}

/// Sampled feedforward voltage and predicted current.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub t: Vec<f64>,
    pub u_ff: Vec<f64>,
    pub y2_hat: Vec<f64>,
    pub precharge_start: f64,
    pub tracking_start: f64,
    pub hold_start: f64,
}

impl ControlSignal {
    /// CSV with columns `t,u_ff,y2_hat`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u_ff,y2_hat")?;
        for k in 0..self.t.len() {
            writeln!(w, "{},{},{}", self.t[k], self.u_ff[k], self.y2_hat[k])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ident_derivatives, ident_output, rho_to_theta, PhysicalParams};
    use crate::ode::Step;
    use crate::reference::build_reference;
    use approx::assert_relative_eq;

    fn setup() -> (ReferenceTrajectory, IdentParams) {
        let p = PhysicalParams::nominal();
        let r = build_reference(1e-3, 0.0, 4.5e-3).unwrap().with_transform(p.r_g0, p.k_g);
        (r, rho_to_theta(&p))
    }

    #[test]
    fn initial_flux_closed_form() {
        let (r, th) = setup();
        let y = r.flat_derivatives(0.0);
        let x = flat_states(&[y[0], y[1], y[2]], &th).unwrap();
        let p = PhysicalParams::nominal();
        let expected = (2.0 * p.k_s * (p.z_s - 1e-3) / p.k_g).sqrt();
        assert_relative_eq!(x.x3, expected, max_relative = 1e-12);
        assert_relative_eq!(x.x3, 1.566e-2, max_relative = 1e-3);
    }

    #[test]
    fn flux_stays_below_saturation_on_reference() {
        let (r, th) = setup();
        for k in 0..=4500 {
            let y = r.flat_derivatives(k as f64 * 1e-6);
            let x = flat_states(&[y[0], y[1], y[2]], &th).unwrap();
            assert!(x.x3 < th.theta[5] && x.x3 > 0.01);
        }
    }

    #[test]
    fn static_equilibrium_has_zero_flux_and_voltage() {
        let (_, th) = setup();
        let x1 = -th.theta[2] / th.theta[0];
        let x = flat_states(&[x1, 0.0, 0.0], &th).unwrap();
        assert!(x.x3 < 1e-6 * th.theta[5]);
        assert_eq!(resistive_voltage(&th, x1, 0.0).unwrap(), 0.0);
        assert_eq!(predicted(&th, x1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn infeasible_and_singular_errors() {
        let (_, th) = setup();
        // Flat output above the mechanical equilibrium with no acceleration needs negative force.
        let x1 = -th.theta[2] / th.theta[0] * 1.1;
        assert!(matches!(flat_states(&[x1, 0.0, 0.0], &th), Err(Error::InfeasibleReference { .. })));
        assert!(matches!(flux_rate(&[0.0; 4], &th, 0.0), Err(Error::SingularInversion { .. })));
        assert_eq!(flux_rate(&[5.0, 0.0, 0.0, 0.0], &th, 0.01).unwrap(), 0.0);
    }

    #[test]
    fn flux_rate_matches_finite_difference() {
        let (r, th) = setup();
        let x3_at = |tau: f64| {
            let y = r.flat_derivatives(tau);
            flat_states(&[y[0], y[1], y[2]], &th).unwrap().x3
        };
        for k in 1..45 {
            let tau = k as f64 * 1e-4;
            let h = 1e-9;
            let fd = (x3_at(tau + h) - x3_at(tau - h)) / (2.0 * h);
            let y = r.flat_derivatives(tau);
            let exact = flux_rate(&y, &th, x3_at(tau)).unwrap();
            assert!((fd - exact).abs() <= 1e-5 * exact.abs().max(1e-3), "tau {tau}: {fd} vs {exact}");
        }
    }

    #[test]
    fn flux_rises_at_start_of_motion() {
        let (r, th) = setup();
        let mut rising = 0;
        for k in 1..50 {
            let y = r.flat_derivatives(k as f64 * 1e-5);
            let x = flat_states(&[y[0], y[1], y[2]], &th).unwrap();
            if flux_rate(&y, &th, x.x3).unwrap() > 0.0 {
                rising += 1;
            }
        }
        assert_eq!(rising, 49);
    }

    #[test]
    fn hold_voltage_is_constant_after_ramp() {
        let (r, th) = setup();
        let c = FlatController::new(r, th, ControlTiming { hold_margin: 0.0, ..Default::default() }).unwrap();
        let end = r.flat_derivatives(r.duration);
        let x3 = flat_states(&[end[0], end[1], end[2]], &th).unwrap().x3;
        let expected = th.theta[6] * x3 * (end[0] + th.theta[4] / (1.0 - x3 / th.theta[5]));
        for t in [c.reference_end() + 1e-5, c.reference_end() + 5e-4] {
            assert_relative_eq!(c.feedforward_input(t).unwrap(), expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn precharge_boundaries() {
        let (r, th) = setup();
        let c = FlatController::new(r, th, ControlTiming::default()).unwrap();
        let pre = c.precharge;
        let (x3, _) = pre.flux(-pre.duration);
        assert_eq!(x3, 0.0);
        assert_eq!(pre.voltage(-pre.duration).unwrap(), 0.0);
        // Continuity into the tracking segment.
        let left = pre.voltage(-1e-12).unwrap();
        let right = c.feedforward_input(c.reference_start()).unwrap();
        assert_relative_eq!(left, right, max_relative = 1e-6);
        assert_relative_eq!(
            c.predict_current(c.reference_start() - 1e-12).unwrap(),
            c.predict_current(c.reference_start()).unwrap(),
            max_relative = 1e-6
        );
        assert!(build_precharge(&th, 0.0, 0.01, 1.0).is_err());
        assert!(build_precharge(&th, 1e-3, th.theta[5], 1.0).is_err());
    }

    #[test]
    fn flat_output_prediction_is_the_reference() {
        let (r, th) = setup();
        let c = FlatController::new(r, th, ControlTiming::default()).unwrap();
        for k in 0..65 {
            let t = k as f64 * 1e-4;
            assert_eq!(c.predict_flat_output(t), r.flat_derivatives(t - 1e-3)[0]);
        }
    }

    /// Integrates the identifiable model without end stops from the exact flat
    /// state at the start of the reference, under the feedforward voltage.
    fn integrate_ident(c: &FlatController, th: &IdentParams, t0: f64, t1: f64, n: usize) -> Vec<(f64, [f64; 3])> {
        let fp = c.flat_point(t0).unwrap();
        let mut y = [fp.x1, 0.0, fp.x3];
        let mut f = |t: f64, y: &[f64; 3]| -> Result<[f64; 3]> {
            let u = c.feedforward_input(t)?;
            ident_derivatives(&IdentState { x1: y[0], x2: y[1], x3: y[2] }, u, th)
        };
        let h = (t1 - t0) / n as f64;
        let mut out = vec![(t0, y)];
        for k in 0..n {
            let t = t0 + k as f64 * h;
            let k1 = f(t, &y).unwrap();
            y = Step::try_new(&mut f, t, &y, &k1, h).unwrap().y1;
            out.push((t + h, y));
        }
        out
    }

    #[test]
    fn inversion_round_trip_reproduces_reference_and_current() {
        let (r, th) = setup();
        let c = FlatController::new(r, th, ControlTiming::default()).unwrap();
        let traj = integrate_ident(&c, &th, c.reference_start(), c.reference_end(), 9000);
        let range = r.flat_derivatives(0.0)[0] - r.flat_derivatives(r.duration)[0];
        let mut max_i: f64 = 0.0;
        let mut worst_y1: f64 = 0.0;
        let mut worst_y2: f64 = 0.0;
        for (t, y) in &traj {
            let x = IdentState { x1: y[0], x2: y[1], x3: y[2] };
            let (y1, y2) = ident_output(&x, &th).unwrap();
            max_i = max_i.max(y2.abs());
            worst_y1 = worst_y1.max((y1 - c.predict_flat_output(*t)).abs());
            worst_y2 = worst_y2.max((y2 - c.predict_current(*t).unwrap()).abs());
        }
        assert!(worst_y1 < 1e-6 * range, "{worst_y1}");
        assert!(worst_y2 < 1e-6 * max_i, "{worst_y2}");
    }

    #[test]
    fn control_signal_grid_and_csv() {
        let (r, th) = setup();
        let c = FlatController::new(r, th, ControlTiming::default()).unwrap();
        let grid: Vec<f64> = (0..=650).map(|k| k as f64 * 1e-5).collect();
        let sig = c.control_signal(&grid).unwrap();
        assert_eq!(sig.u_ff.len(), grid.len());
        assert_eq!(sig.u_ff[0], 0.0);
        let mut buf = Vec::new();
        sig.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,u_ff,y2_hat\n"));
        assert_eq!(text.lines().count(), grid.len() + 1);
    }

    #[test]
    fn infeasible_candidate_is_reported_with_time() {
        let (r, mut th) = setup();
        // A stiffer spring model than the magnet can beat at the end of the stroke.
        th.theta[3] *= 0.2;
        match FlatController::new(r, th, ControlTiming::default()) {
            Err(Error::InfeasibleReference { t, .. }) => assert!(t.is_finite()),
            Ok(c) => {
                let grid: Vec<f64> = (0..=650).map(|k| k as f64 * 1e-5).collect();
                assert!(matches!(c.control_signal(&grid), Err(Error::InfeasibleReference { .. })));
            }
            Err(e) => panic!("unexpected {e}"),
        }
    }
}
