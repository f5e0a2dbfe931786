//! Soft-landing position reference.
//!
//! The reference is the degree-7 polynomial in normalized time `s = t / T`
//! whose first three derivatives vanish at both ends. Outside `[0, T]` it is
//! held at the nearest endpoint with zero derivatives.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `35 s^4 - 84 s^5 + 70 s^6 - 20 s^7`
const SHAPE: [f64; 8] = [0.0, 0.0, 0.0, 0.0, 35.0, -84.0, 70.0, -20.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTrajectory {
    pub duration: f64,
    /// Coefficients of `z_ref(s)`, lowest order first.
    pub coeffs: [f64; 8],
    /// Final position, stored so the hold value is exact.
    pub z_end: f64,
    /// Nominal gap reluctance used to map position into flat-output space.
    pub r_g0_nom: f64,
    /// Nominal gap reluctance slope used for the same map.
    pub k_g_nom: f64,
}

/// A value from [`ReferenceTrajectory::eval_checked`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluated {
    pub value: f64,
    /// Set when `t` was outside `[0, T]` and the endpoint hold was used.
    pub clamped: bool,
}

pub fn build_reference(z_max: f64, z_min: f64, duration: f64) -> Result<ReferenceTrajectory> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::InvalidParameter(format!("reference duration {duration} must be positive")));
    }
    let delta = z_min - z_max;
    let mut coeffs = SHAPE.map(|c| c * delta);
    coeffs[0] = z_max;
    Ok(ReferenceTrajectory { duration, coeffs, z_end: z_min, r_g0_nom: 0.0, k_g_nom: 1.0 })
}

impl ReferenceTrajectory {
    pub fn with_transform(mut self, r_g0_nom: f64, k_g_nom: f64) -> Self {
        self.r_g0_nom = r_g0_nom;
        self.k_g_nom = k_g_nom;
        self
    }

    pub fn start(&self) -> f64 {
        self.coeffs[0]
    }

    pub fn end(&self) -> f64 {
        self.z_end
    }

    /// Position and its first three time derivatives at `t`.
    pub fn derivatives(&self, t: f64) -> [f64; 4] {
        if t <= 0.0 {
            return [self.start(), 0.0, 0.0, 0.0];
        }
        if t >= self.duration {
            return [self.end(), 0.0, 0.0, 0.0];
        }
        let s = t / self.duration;
        let c = &self.coeffs;
        // Horner on each derivative polynomial.
        let mut d = [0.0; 4];
        for (order, out) in d.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in (order..8).rev() {
                let falling = (0..order).fold(1.0, |f, j| f * (k - j) as f64);
                acc = acc * s + falling * c[k];
            }
            *out = acc / self.duration.powi(order as i32);
        }
        d
    }

    pub fn eval(&self, t: f64, order: usize) -> Result<f64> {
        Ok(self.eval_checked(t, order)?.value)
    }

    pub fn eval_checked(&self, t: f64, order: usize) -> Result<Evaluated> {
        if order > 3 {
            return Err(Error::InvalidParameter(format!("derivative order {order} exceeds 3")));
        }
        Ok(Evaluated {
            value: self.derivatives(t)[order],
            clamped: !(0.0..=self.duration).contains(&t),
        })
    }

    /// Flat-output reference `R_g0,nom + k_g,nom z_ref` and its derivatives.
    pub fn flat_derivatives(&self, t: f64) -> [f64; 4] {
        let d = self.derivatives(t);
        [
            self.r_g0_nom + self.k_g_nom * d[0],
            self.k_g_nom * d[1],
            self.k_g_nom * d[2],
            self.k_g_nom * d[3],
        ]
    }

    pub fn to_flat_reference(&self, t: f64, order: usize) -> Result<f64> {
        if order > 3 {
            return Err(Error::InvalidParameter(format!("derivative order {order} exceeds 3")));
        }
        Ok(self.flat_derivatives(t)[order])
    }

    /// Inverse of the nominal affine map into flat-output space.
    pub fn position_from_flat(&self, y1: f64) -> f64 {
        (y1 - self.r_g0_nom) / self.k_g_nom
    }

    /// CSV with columns `t,z_ref,dz_ref,ddz_ref,dddz_ref,y1_ref`.
    pub fn write_csv<W: Write>(&self, mut w: W, sample_period: f64) -> Result<()> {
        writeln!(w, "t,z_ref,dz_ref,ddz_ref,dddz_ref,y1_ref")?;
        let n = (self.duration / sample_period).round() as usize;
        for k in 0..=n {
            let t = k as f64 * sample_period;
            let d = self.derivatives(t);
            let y1 = self.r_g0_nom + self.k_g_nom * d[0];
            writeln!(w, "{t},{},{},{},{},{y1}", d[0], d[1], d[2], d[3])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn nominal() -> ReferenceTrajectory {
        build_reference(1e-3, 0.0, 4.5e-3).unwrap().with_transform(3.88, 7670.0)
    }

    #[test]
    fn endpoints_and_midpoint() {
        let r = nominal();
        assert_eq!(r.eval(0.0, 0).unwrap(), 1e-3);
        assert_eq!(r.eval(4.5e-3, 0).unwrap(), 0.0);
        assert!(r.derivatives(4.5e-3 * (1.0 - 1e-12))[0].abs() < 1e-15);
        assert_relative_eq!(r.eval(2.25e-3, 0).unwrap(), 0.5e-3, max_relative = 1e-12);
        assert_eq!(35.0 / 16.0 - 84.0 / 32.0 + 70.0 / 64.0 - 20.0 / 128.0, 0.5);
    }

    #[test]
    fn derivatives_vanish_at_both_ends() {
        let r = nominal();
        let just_inside = [1e-15, r.duration * (1.0 - 1e-15)];
        for t in just_inside {
            let d = r.derivatives(t);
            for order in 1..4 {
                let scale = 1e-3 / r.duration.powi(order as i32);
                assert!(d[order].abs() < 1e-9 * scale, "{d:?}");
            }
        }
        assert_eq!(r.eval(r.duration, 3).unwrap(), 0.0);
        assert_eq!(r.eval(0.0, 1).unwrap(), 0.0);
    }

    #[test]
    fn hold_outside_and_flag() {
        let r = nominal();
        let before = r.eval_checked(-1e-4, 0).unwrap();
        assert!(before.clamped);
        assert_eq!(before.value, 1e-3);
        let after = r.eval_checked(1.0, 1).unwrap();
        assert!(after.clamped);
        assert_eq!(after.value, 0.0);
        assert!(!r.eval_checked(1e-3, 0).unwrap().clamped);
        assert!(r.eval(1e-3, 4).is_err());
        assert!(build_reference(1e-3, 0.0, 0.0).is_err());
    }

    #[test]
    fn monotone_nonincreasing() {
        let r = nominal();
        let mut prev = f64::INFINITY;
        for k in 0..=4500 {
            let z = r.eval(k as f64 * 1e-6, 0).unwrap();
            assert!(z <= prev + 1e-18);
            prev = z;
        }
    }

    #[test]
    fn velocity_matches_central_difference() {
        let r = nominal();
        let t = r.duration / 2.0;
        let h = 1e-7 * r.duration;
        let fd = (r.eval(t + h, 0).unwrap() - r.eval(t - h, 0).unwrap()) / (2.0 * h);
        let analytic = r.eval(t, 1).unwrap();
        assert_relative_eq!(analytic, fd, max_relative = 1e-6);
        // Shape derivative at s = 1/2 is 140/16 - 420/32 + 420/64 - 140/128 = 35/32 * 2.
        assert_relative_eq!(analytic, -1e-3 * 2.1875 / r.duration, max_relative = 1e-12);
    }

    #[test]
    fn flat_reference_round_trip() {
        let r = nominal();
        assert_relative_eq!(r.to_flat_reference(0.0, 0).unwrap(), 3.88 + 7670.0 * 1e-3, max_relative = 1e-15);
        for k in 0..100 {
            let t = k as f64 * r.duration / 99.0;
            let d = r.derivatives(t);
            let f = r.flat_derivatives(t);
            assert_relative_eq!(r.position_from_flat(f[0]), d[0], epsilon = 1e-18, max_relative = 1e-12);
            assert_eq!(f[1], 7670.0 * d[1]);
        }
    }

    proptest! {
        #[test]
        fn endpoint_conditions_hold(
            z_max in 1e-4f64..1e-2,
            gap in 1e-5f64..1e-2,
            duration in 1e-4f64..1e-1,
        ) {
            let z_min = z_max - gap;
            let r = build_reference(z_max, z_min, duration).unwrap();
            prop_assert_eq!(r.eval(0.0, 0).unwrap(), z_max);
            prop_assert!((r.end() - z_min).abs() <= 1e-14 * z_max.abs().max(1e-3));
            // Each derivative polynomial has s^(4-order) as its lowest power, so it
            // vanishes at s = 0; at s = 1 the coefficient sums cancel exactly in rationals.
            for order in 1..4 {
                let near_end = r.derivatives(duration * (1.0 - 1e-12))[order];
                let scale = gap / duration.powi(order as i32);
                prop_assert!(near_end.abs() <= 1e-6 * scale);
            }
        }

        #[test]
        fn analytic_derivatives_match_finite_differences(
            s in 0.05f64..0.95,
            duration in 1e-3f64..1e-2,
        ) {
            let r = build_reference(1e-3, 0.0, duration).unwrap();
            let t = s * duration;
            let h = 1e-7 * duration;
            for order in 1..4 {
                let fd = (r.derivatives(t + h)[order - 1] - r.derivatives(t - h)[order - 1]) / (2.0 * h);
                let exact = r.derivatives(t)[order];
                let scale = 1e-3 / duration.powi(order as i32);
                prop_assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(scale));
            }
        }
    }
}
