//! Hybrid simulation of one switching operation.
//!
//! The armature moves freely between the end stops. Reaching a stop with
//! outward velocity is a perfectly inelastic impact that latches the armature;
//! it is released once the net mechanical force points back into the stroke.
//! Contact instants are located by bisection on the step length.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Contact, Geometry, PhysState, PhysicalParams};
use crate::ode::Step;

const MIN_STEP: f64 = 1e-14;

/// A voltage applied to the coil as a function of time.
pub trait VoltageSource: Sync {
    fn voltage(&self, t: f64) -> Result<f64>;

    /// Times at which the signal is not smooth. The integrator lands on them.
    fn breakpoints(&self) -> Vec<f64> {
        Vec::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantVoltage(pub f64);

impl VoltageSource for ConstantVoltage {
    fn voltage(&self, _t: f64) -> Result<f64> {
        Ok(self.0)
    }
}

/// Uniformly sampled voltage, linearly interpolated and held at the ends.
#[derive(Debug, Clone)]
pub struct SampledVoltage {
    pub t0: f64,
    pub period: f64,
    pub values: Vec<f64>,
}

impl VoltageSource for SampledVoltage {
    fn voltage(&self, t: f64) -> Result<f64> {
        let n = self.values.len();
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let x = (t - self.t0) / self.period;
        if x <= 0.0 {
            return Ok(self.values[0]);
        }
        let k = x.floor() as usize;
        if k + 1 >= n {
            return Ok(self.values[n - 1]);
        }
        let w = x - k as f64;
        Ok(self.values[k] * (1.0 - w) + self.values[k + 1] * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub t0: f64,
    pub tf: f64,
    pub dt_max: f64,
    pub sample_period: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub event_tol: f64,
    /// Standard deviation of additive Gaussian current noise (A); zero disables it.
    pub current_noise_std: f64,
    pub noise_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            t0: 0.0,
            tf: 6.5e-3,
            dt_max: 1e-5,
            sample_period: 1e-6,
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            event_tol: 1e-9,
            current_noise_std: 0.0,
            noise_seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(format!("sim config: {what}")));
        if !(self.t0 < self.tf) {
            return bad("t0 must be below tf");
        }
        if !(self.dt_max > 0.0) || !(self.sample_period > 0.0) {
            return bad("dt_max and sample_period must be positive");
        }
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) || !(self.event_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.current_noise_std >= 0.0) {
            return bad("current_noise_std must be non-negative");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        ((self.tf - self.t0) / self.sample_period).round() as usize + 1
    }

    pub fn sample_time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.sample_period
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    Min,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Landing { bound: Bound, speed: f64 },
    Release { bound: Bound },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactEvent {
    pub t: f64,
    pub kind: EventKind,
}

/// Impact velocity and time; `None` marks no impact.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Impact {
    /// Speed just before the first landing on `z_min`.
    pub velocity: Option<f64>,
    /// Start of the final contact with `z_min` that lasts until the end of the window.
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct OperationRecord {
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub lambda: Vec<f64>,
    pub y2: Vec<f64>,
    /// Predicted current; empty until the caller fills it.
    pub y2_hat: Vec<f64>,
    pub contact: Vec<Contact>,
    pub initial_contact: Option<Contact>,
    pub events: Vec<ContactEvent>,
    pub impact: Impact,
    pub cost: Option<f64>,
    pub nrmse_z: Option<f64>,
}

impl OperationRecord {
    fn with_capacity(n: usize) -> Self {
        Self {
            t: Vec::with_capacity(n),
            u: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            lambda: Vec::with_capacity(n),
            y2: Vec::with_capacity(n),
            contact: Vec::with_capacity(n),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn first_landing(&self) -> Option<f64> {
        self.events.iter().find_map(|e| match e.kind {
            EventKind::Landing { bound: Bound::Min, .. } => Some(e.t),
            _ => None,
        })
    }

    /// CSV with columns `t,u,z,v,lambda,y2,y2_hat`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,u,z,v,lambda,y2,y2_hat")?;
        for k in 0..self.len() {
            write!(w, "{},{},{},{},{},{},", self.t[k], self.u[k], self.z[k], self.v[k], self.lambda[k], self.y2[k])?;
            match self.y2_hat.get(k) {
                Some(p) => writeln!(w, "{p}")?,
                None => writeln!(w)?,
            }
        }
        Ok(())
    }
}

struct Plant<'a> {
    p: &'a PhysicalParams,
    g: &'a Geometry,
    input: &'a dyn VoltageSource,
}

impl Plant<'_> {
    #[inline]
    fn rhs(&self, mode: Contact, t: f64, y: &[f64; 3]) -> Result<[f64; 3]> {
        let u = self.input.voltage(t)?;
        let p = self.p;
        match mode {
            Contact::Free => {
                let rel = p.reluctance(y[0], y[2])?;
                Ok([y[1], p.net_force(y[0], y[1], y[2]) / p.m, -p.r * y[2] * rel + u])
            }
            Contact::HeldAtMin | Contact::HeldAtMax => {
                let z = self.bound_position(mode);
                Ok([0.0, 0.0, -p.r * y[2] * p.reluctance(z, y[2])? + u])
            }
        }
    }

    fn bound_position(&self, mode: Contact) -> f64 {
        match mode {
            Contact::HeldAtMax => self.g.z_max,
            _ => self.g.z_min,
        }
    }

    /// Whether the end-of-step state has crossed the switching surface of `mode`.
    fn triggered(&self, mode: Contact, y: &[f64; 3]) -> bool {
        match mode {
            Contact::Free => y[0] < self.g.z_min || y[0] > self.g.z_max,
            Contact::HeldAtMin => self.p.net_force(self.g.z_min, 0.0, y[2]) > 0.0,
            Contact::HeldAtMax => self.p.net_force(self.g.z_max, 0.0, y[2]) < 0.0,
        }
    }

    /// Applies the contact law at an event. Returns the new mode and the events emitted.
    fn transition(&self, mode: Contact, t: f64, y: &mut [f64; 3], events: &mut Vec<ContactEvent>) -> Contact {
        let landed = match mode {
            Contact::Free => {
                let (bound, held) = if y[0] < self.g.z_min {
                    (Bound::Min, Contact::HeldAtMin)
                } else {
                    (Bound::Max, Contact::HeldAtMax)
                };
                events.push(ContactEvent { t, kind: EventKind::Landing { bound, speed: y[1].abs() } });
                held
            }
            held => {
                let bound = if held == Contact::HeldAtMin { Bound::Min } else { Bound::Max };
                events.push(ContactEvent { t, kind: EventKind::Release { bound } });
                y[0] = self.bound_position(held);
                y[1] = 0.0;
                return Contact::Free;
            }
        };
        y[0] = self.bound_position(landed);
        y[1] = 0.0;
        if self.triggered(landed, y) {
            // Net force already points back into the stroke: the impact is a stop, not a latch.
            let bound = if landed == Contact::HeldAtMin { Bound::Min } else { Bound::Max };
            events.push(ContactEvent { t, kind: EventKind::Release { bound } });
            return Contact::Free;
        }
        landed
    }
}

fn check_initial(s: &PhysState, p: &PhysicalParams, g: &Geometry) -> Result<()> {
    if s.z < g.z_min || s.z > g.z_max {
        return Err(Error::InvalidParameter(format!("initial position {} outside the stroke", s.z)));
    }
    if s.lambda.abs() >= p.lambda_sat {
        return Err(Error::SaturationDomain { lambda: s.lambda, lambda_sat: p.lambda_sat });
    }
    let at_bound = match s.contact {
        Contact::Free => true,
        Contact::HeldAtMin => s.z == g.z_min && s.v == 0.0,
        Contact::HeldAtMax => s.z == g.z_max && s.v == 0.0,
    };
    if !at_bound {
        return Err(Error::InvalidParameter("held initial state must sit at its stop with zero velocity".into()));
    }
    Ok(())
}

fn map_stage_error(e: Error, t: f64) -> Error {
    match e {
        Error::SaturationDomain { .. } => Error::SaturationReached { t },
        other => other,
    }
}

/// Integrates one switching operation and samples it on `cfg`'s grid.
///
/// The returned record carries the state traces, the measured current, the
/// contact events and the impact metrics. Cost and NRMSE are left to callers.
pub fn simulate_operation(
    p: &PhysicalParams,
    g: &Geometry,
    input: &dyn VoltageSource,
    cfg: &SimConfig,
    initial: PhysState,
) -> Result<OperationRecord> {
    cfg.validate()?;
    check_initial(&initial, p, g)?;
    let plant = Plant { p, g, input };
    let n = cfg.n_samples();
    let t_end = cfg.sample_time(n - 1);
    let mut rec = OperationRecord::with_capacity(n);
    rec.initial_contact = Some(initial.contact);

    let mut stops: Vec<f64> = input
        .breakpoints()
        .into_iter()
        .filter(|&b| b > cfg.t0 && b < t_end)
        .collect();
    stops.push(t_end);
    stops.sort_by(f64::total_cmp);
    stops.dedup();
    let mut stop_idx = 0;

    let mut mode = initial.contact;
    let mut t = cfg.t0;
    let mut y = [initial.z, initial.v, initial.lambda];
    let mut k1 = plant.rhs(mode, t, &y).map_err(|e| map_stage_error(e, t))?;
    let mut h = cfg.dt_max;
    let mut next_sample = 0usize;

    let emit = |rec: &mut OperationRecord, next_sample: &mut usize, step: &Step<3>, t_start: f64, t_stop: f64, mode: Contact| -> Result<()> {
        while *next_sample < n {
            let ts = cfg.sample_time(*next_sample);
            if ts > t_stop + 1e-9 * cfg.sample_period {
                break;
            }
            let ys = if step.h > 0.0 { step.dense(((ts - t_start) / step.h).clamp(0.0, 1.0)) } else { step.y0 };
            let current = ys[2] * p.reluctance(ys[0], ys[2]).map_err(|e| map_stage_error(e, ts))?;
            rec.t.push(ts);
            rec.u.push(input.voltage(ts)?);
            rec.z.push(ys[0]);
            rec.v.push(ys[1]);
            rec.lambda.push(ys[2]);
            rec.y2.push(current);
            rec.contact.push(mode);
            *next_sample += 1;
        }
        Ok(())
    };

    // Sample at t0.
    let origin = Step { h: 0.0, y0: y, y1: y, k: [k1; 7] };
    emit(&mut rec, &mut next_sample, &origin, t, t, mode)?;

    while next_sample < n {
        while stop_idx + 1 < stops.len() && stops[stop_idx] <= t {
            stop_idx += 1;
        }
        let t_stop = stops[stop_idx];
        let remaining = t_stop - t;
        let lands_on_stop = h.min(cfg.dt_max) >= remaining;
        let h_try = if lands_on_stop { remaining } else { h.min(cfg.dt_max) };
        if h_try < MIN_STEP && !lands_on_stop {
            return Err(Error::StepUnderflow { t });
        }

        let mut f = |ts: f64, ys: &[f64; 3]| plant.rhs(mode, ts, ys);
        let step = match Step::try_new(&mut f, t, &y, &k1, h_try) {
            Ok(s) => s,
            Err(Error::SaturationDomain { .. }) => {
                h = 0.25 * h_try;
                if h < MIN_STEP {
                    return Err(Error::SaturationReached { t });
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        let err = step.error_norm(cfg.rel_tol, cfg.abs_tol);
        if !(err <= 1.0) {
            let factor = if err.is_finite() { (0.9 * err.powf(-0.2)).max(0.2) } else { 0.2 };
            h = h_try * factor;
            if h < MIN_STEP {
                return Err(Error::StepUnderflow { t });
            }
            continue;
        }

        if plant.triggered(mode, &step.y1) {
            let (mut lo, mut hi) = (0.0, h_try);
            let mut hit = step;
            while hi - lo > cfg.event_tol {
                let mid = 0.5 * (lo + hi);
                let trial = Step::try_new(&mut f, t, &y, &k1, mid).map_err(|e| map_stage_error(e, t + mid))?;
                if plant.triggered(mode, &trial.y1) {
                    hi = mid;
                    hit = trial;
                } else {
                    lo = mid;
                }
            }
            let t_event = t + hi;
            emit(&mut rec, &mut next_sample, &hit, t, t_event, mode)?;
            t = t_event;
            y = hit.y1;
            mode = plant.transition(mode, t, &mut y, &mut rec.events);
            k1 = plant.rhs(mode, t, &y).map_err(|e| map_stage_error(e, t))?;
            continue;
        }

        let t_new = if lands_on_stop { t_stop } else { t + h_try };
        emit(&mut rec, &mut next_sample, &step, t, t_new, mode)?;
        t = t_new;
        y = step.y1;
        k1 = if lands_on_stop {
            plant.rhs(mode, t, &y).map_err(|e| map_stage_error(e, t))?
        } else {
            step.k[6]
        };
        let grow = if err > 0.0 { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) } else { 5.0 };
        // Keep the previous step size across a forced landing on a breakpoint.
        h = if lands_on_stop { h.max(h_try) } else { h_try * grow };
    }

    if cfg.current_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.noise_seed);
        let normal = Normal::new(0.0, cfg.current_noise_std)
            .map_err(|e| Error::InvalidParameter(format!("noise: {e}")))?;
        for i in rec.y2.iter_mut() {
            *i += normal.sample(&mut rng);
        }
    }

    rec.impact = detect_impact(initial.contact, &rec.events, cfg.t0);
    Ok(rec)
}

/// Impact metrics from a contact event log.
///
/// `initial` is the contact state at `t0`; starting latched at `z_min`
/// counts as a zero-speed landing at `t0`.
pub fn detect_impact(initial: Contact, events: &[ContactEvent], t0: f64) -> Impact {
    let mut velocity = None;
    let mut held_since = (initial == Contact::HeldAtMin).then_some(t0);
    if held_since.is_some() {
        velocity = Some(0.0);
    }
    for e in events {
        match e.kind {
            EventKind::Landing { bound: Bound::Min, speed } => {
                velocity.get_or_insert(speed);
                held_since = Some(e.t);
            }
            EventKind::Release { bound: Bound::Min } => held_since = None,
            _ => {}
        }
    }
    Impact { velocity, time: held_since }
}

/// Rebuilds a contact event log from sampled traces. The approach speed of a
/// landing is the speed at the last free sample before it.
pub fn events_from_samples(t: &[f64], v: &[f64], contact: &[Contact]) -> Result<(Contact, Vec<ContactEvent>)> {
    if t.len() != v.len() || t.len() != contact.len() {
        return Err(Error::Shape("t, v and contact must have equal lengths".into()));
    }
    let Some(&initial) = contact.first() else {
        return Err(Error::EmptySample);
    };
    let mut events = Vec::new();
    for k in 1..t.len() {
        let (prev, cur) = (contact[k - 1], contact[k]);
        if prev == cur {
            continue;
        }
        let bound_of = |c: Contact| if c == Contact::HeldAtMin { Bound::Min } else { Bound::Max };
        if prev != Contact::Free {
            events.push(ContactEvent { t: t[k], kind: EventKind::Release { bound: bound_of(prev) } });
        }
        if cur != Contact::Free {
            let speed = if prev == Contact::Free { v[k - 1].abs() } else { 0.0 };
            events.push(ContactEvent { t: t[k], kind: EventKind::Landing { bound: bound_of(cur), speed } });
        }
    }
    Ok((initial, events))
}

/// Trapezoidal integral of `f(k)` over the samples of `t` inside `[lo, hi]`.
pub(crate) fn trapezoid_window<F: Fn(usize) -> f64>(t: &[f64], lo: f64, hi: f64, f: F) -> f64 {
    let mut acc = 0.0;
    let mut prev: Option<(f64, f64)> = None;
    for (k, &tk) in t.iter().enumerate() {
        if tk < lo || tk > hi {
            continue;
        }
        let fk = f(k);
        if let Some((tp, fp)) = prev {
            acc += 0.5 * (tk - tp) * (fk + fp);
        }
        prev = Some((tk, fk));
    }
    acc
}

/// Normalized RMS position error over `window`, trapezoidal quadrature on the grid.
pub fn compute_nrmse(t: &[f64], z: &[f64], z_ref: &[f64], window: (f64, f64)) -> Result<f64> {
    if t.len() != z.len() || t.len() != z_ref.len() {
        return Err(Error::Shape(format!(
            "grid has {} samples, z {} and z_ref {}",
            t.len(),
            z.len(),
            z_ref.len()
        )));
    }
    let num = trapezoid_window(t, window.0, window.1, |k| (z[k] - z_ref[k]).powi(2));
    let den = trapezoid_window(t, window.0, window.1, |k| z_ref[k] * z_ref[k]);
    if !(den > 0.0) {
        return Err(Error::ZeroNormReference);
    }
    Ok((num / den).sqrt())
}
