//! Dormand–Prince 5(4) step with its 4th-order continuous extension.

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;

const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

pub type Vector<const N: usize> = [f64; N];

#[inline]
fn axpy<const N: usize>(y: &Vector<N>, h: f64, terms: &[(f64, &Vector<N>)]) -> Vector<N> {
    let mut out = *y;
    for (c, k) in terms {
        for i in 0..N {
            out[i] += h * c * k[i];
        }
    }
    out
}

/// One trial step. `k1` must be `f(t, y)`.
#[derive(Debug, Clone)]
pub struct Step<const N: usize> {
    pub h: f64,
    pub y0: Vector<N>,
    pub y1: Vector<N>,
    /// Stage derivatives; `k[6]` is `f(t + h, y1)`.
    pub k: [Vector<N>; 7],
}

impl<const N: usize> Step<N> {
    pub fn try_new<F, E>(f: &mut F, t: f64, y: &Vector<N>, k1: &Vector<N>, h: f64) -> Result<Self, E>
    where
        F: FnMut(f64, &Vector<N>) -> Result<Vector<N>, E>,
    {
        let k2 = f(t + C2 * h, &axpy(y, h, &[(A21, k1)]))?;
        let k3 = f(t + C3 * h, &axpy(y, h, &[(A31, k1), (A32, &k2)]))?;
        let k4 = f(t + C4 * h, &axpy(y, h, &[(A41, k1), (A42, &k2), (A43, &k3)]))?;
        let k5 = f(t + C5 * h, &axpy(y, h, &[(A51, k1), (A52, &k2), (A53, &k3), (A54, &k4)]))?;
        let k6 = f(t + h, &axpy(y, h, &[(A61, k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]))?;
        let y1 = axpy(y, h, &[(A71, k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let k7 = f(t + h, &y1)?;
        Ok(Self { h, y0: *y, y1, k: [*k1, k2, k3, k4, k5, k6, k7] })
    }

    /// RMS of the embedded error estimate scaled by `abs_tol + rel_tol * |y|`.
    pub fn error_norm(&self, rel_tol: f64, abs_tol: f64) -> f64 {
        let k = &self.k;
        let mut acc = 0.0;
        for i in 0..N {
            let e = self.h
                * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            let sc = abs_tol + rel_tol * self.y0[i].abs().max(self.y1[i].abs());
            acc += (e / sc) * (e / sc);
        }
        (acc / N as f64).sqrt()
    }

    /// Continuous extension at fraction `theta` of the step.
    pub fn dense(&self, theta: f64) -> Vector<N> {
        let k = &self.k;
        let h = self.h;
        let th1 = 1.0 - theta;
        let mut out = [0.0; N];
        for i in 0..N {
            let dy = self.y1[i] - self.y0[i];
            let bspl = h * k[0][i] - dy;
            let r5 = h
                * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
            let r4 = dy - h * k[6][i] - bspl;
            out[i] = self.y0[i] + theta * (dy + th1 * (bspl + theta * (r4 + th1 * r5)));
        }
        out
    }
}
