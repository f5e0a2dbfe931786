//! Reluctance actuator model in physical coordinates and its identifiable
//! realization.
//!
//! The physical state is `(z, v, lambda)`: armature position, velocity and
//! coil flux linkage. The identifiable realization uses the transformed state
//! `x1 = R_g0 + k_g z`, `x2 = k_g v`, `x3 = lambda` and the seven parameters
//! returned by [`rho_to_theta`]. Both realizations describe the same dynamics;
//! the tests in this module check that the two vector fields and output maps
//! commute with the state transform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the printed gap-reluctance slope is read.
///
/// The nominal slope is printed as `7.67`. Read per metre the magnetic force
/// cannot overcome the spring preload, so the default reads it per millimetre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KgInterpretation {
    #[default]
    PerMillimetre,
    AsPrinted,
}

impl KgInterpretation {
    pub fn k_g(self) -> f64 {
        match self {
            KgInterpretation::PerMillimetre => 7.67e3,
            KgInterpretation::AsPrinted => 7.67,
        }
    }
}

/// Default viscous friction coefficient (N s/m).
pub const DEFAULT_FRICTION: f64 = 2e-5;

/// Physical device parameters, SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Armature mass (kg).
    pub m: f64,
    /// Spring stiffness (N/m).
    pub k_s: f64,
    /// Spring rest position (m).
    pub z_s: f64,
    /// Viscous friction (N s/m).
    pub c_f: f64,
    /// Gap reluctance slope (1/(H m)).
    pub k_g: f64,
    /// Gap reluctance at `z = 0` (1/H).
    #[serde(rename = "R_g0")]
    pub r_g0: f64,
    /// Core reluctance constant (1/H).
    #[serde(rename = "R_c0")]
    pub r_c0: f64,
    /// Saturation flux linkage (Wb).
    pub lambda_sat: f64,
    /// Coil resistance (ohm).
    #[serde(rename = "R")]
    pub r: f64,
}

impl Default for PhysicalParams {
    fn default() -> Self {
        Self::nominal()
    }
}

impl PhysicalParams {
    pub const COUNT: usize = 9;
    pub const NAMES: [&'static str; 9] =
        ["m", "k_s", "z_s", "c_f", "k_g", "R_g0", "R_c0", "lambda_sat", "R"];

    pub fn nominal() -> Self {
        Self::nominal_with(KgInterpretation::PerMillimetre)
    }

    pub fn nominal_with(kg: KgInterpretation) -> Self {
        Self {
            m: 1.6e-3,
            k_s: 55.0,
            z_s: 0.0181,
            c_f: DEFAULT_FRICTION,
            k_g: kg.k_g(),
            r_g0: 3.88,
            r_c0: 1.35,
            lambda_sat: 0.0229,
            r: 50.0,
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.m,
            self.k_s,
            self.z_s,
            self.c_f,
            self.k_g,
            self.r_g0,
            self.r_c0,
            self.lambda_sat,
            self.r,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self {
            m: a[0],
            k_s: a[1],
            z_s: a[2],
            c_f: a[3],
            k_g: a[4],
            r_g0: a[5],
            r_c0: a[6],
            lambda_sat: a[7],
            r: a[8],
        }
    }

    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        geometry.validate()?;
        for (name, value) in Self::NAMES.iter().zip(self.to_array()) {
            if !value.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} = {value} is not finite")));
            }
            if *name != "z_s" && value <= 0.0 {
                return Err(Error::InvalidParameter(format!("{name} = {value} must be positive")));
            }
        }
        if self.z_s <= geometry.z_max {
            return Err(Error::InvalidParameter(format!(
                "spring rest position z_s = {} must exceed z_max = {}",
                self.z_s, geometry.z_max
            )));
        }
        Ok(())
    }

    /// Total reluctance seen by the coil.
    pub fn reluctance(&self, z: f64, lambda: f64) -> Result<f64> {
        Ok(self.r_g0 + self.k_g * z + saturation_term(self.r_c0, lambda, self.lambda_sat)?)
    }

    /// Net mechanical force on the armature (N); positive opens the gap.
    pub fn net_force(&self, z: f64, v: f64, lambda: f64) -> f64 {
        -self.k_s * (z - self.z_s) - self.c_f * v - 0.5 * self.k_g * lambda * lambda
    }
}

/// End stops of the armature stroke (m).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Self { z_min: 0.0, z_max: 1e-3 }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_min < self.z_max) {
            return Err(Error::InvalidParameter(format!(
                "z_min = {} must be below z_max = {}",
                self.z_min, self.z_max
            )));
        }
        Ok(())
    }

    pub fn stroke(&self) -> f64 {
        self.z_max - self.z_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Contact {
    Free,
    HeldAtMin,
    HeldAtMax,
}

impl Contact {
    pub fn as_str(self) -> &'static str {
        match self {
            Contact::Free => "free",
            Contact::HeldAtMin => "held_at_min",
            Contact::HeldAtMax => "held_at_max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysState {
    pub z: f64,
    pub v: f64,
    pub lambda: f64,
    pub contact: Contact,
}

impl PhysState {
    pub fn free(z: f64, v: f64, lambda: f64) -> Self {
        Self { z, v, lambda, contact: Contact::Free }
    }

    /// Armature at rest against the upper stop with a demagnetized coil.
    pub fn open(geometry: &Geometry) -> Self {
        Self { z: geometry.z_max, v: 0.0, lambda: 0.0, contact: Contact::HeldAtMax }
    }
}

/// `r_c0 / (1 - |lambda| / lambda_sat)`.
#[inline]
pub fn saturation_term(r_c0: f64, lambda: f64, lambda_sat: f64) -> Result<f64> {
    let ratio = lambda.abs() / lambda_sat;
    if !(ratio < 1.0) {
        return Err(Error::SaturationDomain { lambda, lambda_sat });
    }
    Ok(r_c0 / (1.0 - ratio))
}

/// Pure vector field of the physical model. End-stop contact is not applied.
pub fn phys_derivatives(s: &PhysState, u: f64, p: &PhysicalParams) -> Result<[f64; 3]> {
    let reluctance = p.reluctance(s.z, s.lambda)?;
    Ok([
        s.v,
        p.net_force(s.z, s.v, s.lambda) / p.m,
        -p.r * s.lambda * reluctance + u,
    ])
}

/// Position and coil current.
pub fn phys_output(s: &PhysState, p: &PhysicalParams) -> Result<(f64, f64)> {
    Ok((s.z, s.lambda * p.reluctance(s.z, s.lambda)?))
}

/// Parameters of the identifiable realization. `theta[0]` is θ₁.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentParams {
    pub theta: [f64; 7],
}

impl IdentParams {
    pub const NAMES: [&'static str; 7] = ["theta1", "theta2", "theta3", "theta4", "theta5", "theta6", "theta7"];

    pub fn new(theta: [f64; 7]) -> Self {
        Self { theta }
    }

    /// θ₁..θ₆ divided elementwise by `nominal`.
    pub fn normalized(&self, nominal: &IdentParams) -> [f64; 6] {
        std::array::from_fn(|i| self.theta[i] / nominal.theta[i])
    }

    pub fn denormalize(x: &[f64], nominal: &IdentParams, theta7: f64) -> Self {
        let mut theta = nominal.theta;
        for (i, xi) in x.iter().take(6).enumerate() {
            theta[i] = xi * nominal.theta[i];
        }
        theta[6] = theta7;
        Self { theta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentState {
    pub x1: f64,
    pub x2: f64,
    pub x3: f64,
}

impl IdentState {
    pub fn from_phys(s: &PhysState, p: &PhysicalParams) -> Self {
        Self { x1: p.r_g0 + p.k_g * s.z, x2: p.k_g * s.v, x3: s.lambda }
    }
}

/// Maps a physical derivative `(dz, dv, dlambda)` to `(dx1, dx2, dx3)`.
pub fn transform_derivative(d: [f64; 3], p: &PhysicalParams) -> [f64; 3] {
    [p.k_g * d[0], p.k_g * d[1], d[2]]
}

pub fn ident_derivatives(x: &IdentState, u: f64, th: &IdentParams) -> Result<[f64; 3]> {
    let t = &th.theta;
    let sat = saturation_term(t[4], x.x3, t[5])?;
    Ok([
        x.x2,
        -t[0] * x.x1 - t[1] * x.x2 - 0.5 * t[3] * x.x3 * x.x3 - t[2],
        -t[6] * x.x3 * (x.x1 + sat) + u,
    ])
}

/// Flat output `x1` and coil current.
pub fn ident_output(x: &IdentState, th: &IdentParams) -> Result<(f64, f64)> {
    let sat = saturation_term(th.theta[4], x.x3, th.theta[5])?;
    Ok((x.x1, x.x3 * (x.x1 + sat)))
}

pub fn rho_to_theta(p: &PhysicalParams) -> IdentParams {
    IdentParams::new([
        p.k_s / p.m,
        p.c_f / p.m,
        -p.k_s * (p.k_g * p.z_s + p.r_g0) / p.m,
        p.k_g * p.k_g / p.m,
        p.r_c0,
        p.lambda_sat,
        p.r,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn spring_equilibrium_is_stationary() {
        let p = PhysicalParams::nominal();
        let d = phys_derivatives(&PhysState::free(p.z_s, 0.0, 0.0), 0.0, &p).unwrap();
        assert_eq!(d, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn closed_gap_acceleration_from_preload() {
        let p = PhysicalParams::nominal();
        let d = phys_derivatives(&PhysState::free(0.0, 0.0, 0.0), 30.0, &p).unwrap();
        assert_eq!(d[0], 0.0);
        assert_relative_eq!(d[1], 55.0 * 0.0181 / 0.0016, max_relative = 1e-12);
        assert_relative_eq!(d[1], 622.1875, max_relative = 1e-12);
        assert_eq!(d[2], 30.0);
    }

    #[test]
    fn flux_decay_steepens_towards_saturation() {
        let p = PhysicalParams::nominal();
        let lo = phys_derivatives(&PhysState::free(0.0, 0.0, 0.5 * p.lambda_sat), 0.0, &p).unwrap();
        let hi = phys_derivatives(&PhysState::free(0.0, 0.0, 0.9 * p.lambda_sat), 0.0, &p).unwrap();
        assert!(hi[2] < lo[2]);
        assert!(lo[2] < 0.0);
    }

    #[test]
    fn saturation_violation_is_a_domain_error() {
        let p = PhysicalParams::nominal();
        let s = PhysState::free(0.0, 0.0, p.lambda_sat);
        assert!(matches!(phys_derivatives(&s, 0.0, &p), Err(Error::SaturationDomain { .. })));
        assert!(matches!(phys_output(&s, &p), Err(Error::SaturationDomain { .. })));
        let th = rho_to_theta(&p);
        let x = IdentState { x1: 4.0, x2: 0.0, x3: -1.01 * p.lambda_sat };
        assert!(ident_derivatives(&x, 0.0, &th).is_err());
        assert!(ident_output(&x, &th).is_err());
    }

    #[test]
    fn current_output_values() {
        let p = PhysicalParams::nominal();
        for z in [0.0, 3e-4, 1e-3] {
            assert_eq!(phys_output(&PhysState::free(z, 0.0, 0.0), &p).unwrap().1, 0.0);
        }
        let (_, i) = phys_output(&PhysState::free(0.0, 0.0, 0.01), &p).unwrap();
        assert_relative_eq!(i, 0.01 * (3.88 + 1.35 / (1.0 - 0.01 / 0.0229)), max_relative = 1e-14);
    }

    #[test]
    fn current_increases_with_flux() {
        let p = PhysicalParams::nominal();
        for z in [0.0, 5e-4, 1e-3] {
            let mut prev = -1.0;
            for k in 0..2000 {
                let lambda = p.lambda_sat * k as f64 / 2000.0;
                let (_, i) = phys_output(&PhysState::free(z, 0.0, lambda), &p).unwrap();
                assert!(i > prev);
                prev = i;
            }
        }
    }

    #[test]
    fn ident_equilibrium_and_zero_flux() {
        let p = PhysicalParams::nominal();
        let th = rho_to_theta(&p);
        let x1_eq = -th.theta[2] / th.theta[0];
        assert_relative_eq!(x1_eq, p.k_g * p.z_s + p.r_g0, max_relative = 1e-14);
        let d = ident_derivatives(&IdentState { x1: x1_eq, x2: 0.0, x3: 0.0 }, 0.0, &th).unwrap();
        assert_eq!(d[2], 0.0);
        assert!(d[1].abs() < 1e-9 * th.theta[2].abs());
        let x = IdentState::from_phys(&PhysState::free(1e-3, 0.0, 0.0), &p);
        let (y1, y2) = ident_output(&x, &th).unwrap();
        assert_relative_eq!(y1, 3.88 + 7.67, max_relative = 1e-14);
        assert_eq!(y2, 0.0);
    }

    #[test]
    fn nominal_theta_values() {
        let th = rho_to_theta(&PhysicalParams::nominal());
        assert_relative_eq!(th.theta[0], 34375.0, max_relative = 1e-14);
        assert_eq!(th.theta[5], 0.0229);
        assert_eq!(th.theta[6], 50.0);
        assert!(th.theta[2] < 0.0);
    }

    #[test]
    fn doubling_mass_halves_mass_scaled_thetas() {
        let p = PhysicalParams::nominal();
        let q = PhysicalParams { m: 2.0 * p.m, ..p };
        let (a, b) = (rho_to_theta(&p), rho_to_theta(&q));
        for i in [0, 1, 2, 3] {
            assert_relative_eq!(b.theta[i], 0.5 * a.theta[i], max_relative = 1e-14);
        }
        assert_eq!(a.theta[4..], b.theta[4..]);
    }

    #[test]
    fn validation_rejects_bad_devices() {
        let g = Geometry::default();
        assert!(PhysicalParams::nominal().validate(&g).is_ok());
        assert!(PhysicalParams { z_s: 5e-4, ..PhysicalParams::nominal() }.validate(&g).is_err());
        assert!(PhysicalParams { m: 0.0, ..PhysicalParams::nominal() }.validate(&g).is_err());
        assert!(Geometry { z_min: 1.0, z_max: 0.0 }.validate().is_err());
    }

    fn arb_device() -> impl Strategy<Value = PhysicalParams> {
        proptest::collection::vec(0.5f64..1.5, 9).prop_map(|f| {
            let n = PhysicalParams::nominal().to_array();
            PhysicalParams::from_array(std::array::from_fn(|i| n[i] * f[i]))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn transform_commutes_with_vector_field(
            p in arb_device(),
            z in 0.0f64..1e-3,
            v in -2.0f64..2.0,
            r in -0.99f64..0.99,
            u in -60.0f64..60.0,
        ) {
            let s = PhysState::free(z, v, r * p.lambda_sat);
            let th = rho_to_theta(&p);
            let x = IdentState::from_phys(&s, &p);
            let lhs = ident_derivatives(&x, u, &th).unwrap();
            let rhs = transform_derivative(phys_derivatives(&s, u, &p).unwrap(), &p);
            // Cancellation in dx2 is measured against the magnitude of its terms.
            let scale = [
                rhs[0].abs(),
                th.theta[2].abs() + (th.theta[0] * x.x1).abs() + th.theta[3] * x.x3 * x.x3,
                u.abs() + (th.theta[6] * x.x3 * x.x1).abs() + 1.0,
            ];
            for i in 0..3 {
                prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-10 * scale[i].max(1e-300),
                    "component {i}: {} vs {}", lhs[i], rhs[i]);
            }
            let (_, i_phys) = phys_output(&s, &p).unwrap();
            let (y1, i_ident) = ident_output(&x, &th).unwrap();
            prop_assert!(rel_err(i_phys, i_ident) <= 1e-10 || (i_phys - i_ident).abs() < 1e-300);
            prop_assert_eq!(y1, x.x1);
            prop_assert!(th.theta[2] < 0.0);
        }
    }
}
