//! Truncated Laurent expansions around a simple pole, used to read off
//! residues of the contour integrand analytically.
//!
//! Every factor of the integrand (empirical Stieltjes transform, its
//! derivative, the probe bilinear form) is a sum of terms `1/(a_j - z)`,
//! so its expansion around a pole `a_k` is exact: the `j = k` term
//! contributes the pole part and every other term a geometric series.
//! Products and reciprocals then propagate a fixed coefficient window,
//! wide enough that the `t^{-1}` coefficient of the full product is exact
//! in floating point.

use crate::C64;

/// Lowest tracked order `t^{MIN_ORD}`.
const MIN_ORD: i32 = -6;
/// Number of tracked coefficients (orders `MIN_ORD .. MIN_ORD + WIDTH`).
const WIDTH: usize = 13;

/// Laurent polynomial in `t = z - a` truncated to a fixed window.
#[derive(Clone, Debug)]
pub(crate) struct Laurent {
    coeffs: [C64; WIDTH],
}

impl Laurent {
    pub fn zero() -> Self {
        Laurent {
            coeffs: [C64::new(0.0, 0.0); WIDTH],
        }
    }

    pub fn constant(c: C64) -> Self {
        let mut s = Laurent::zero();
        s.set(0, c);
        s
    }

    /// The affine series `z = a + t`.
    pub fn variable(a: f64) -> Self {
        let mut s = Laurent::zero();
        s.set(0, C64::new(a, 0.0));
        s.set(1, C64::new(1.0, 0.0));
        s
    }

    /// `1 / (b - z)` expanded around `a` with `b != a`:
    /// `sum_s t^s / (b - a)^{s+1}`.
    pub fn inv_linear(b: f64, a: f64) -> Self {
        let d = b - a;
        let mut s = Laurent::zero();
        let mut pw = 1.0 / d;
        for ord in 0..=(WIDTH as i32 + MIN_ORD - 1).max(0) {
            s.set(ord, C64::new(pw, 0.0));
            pw /= d;
        }
        s
    }

    /// `1 / (a - z) = -1 / t`.
    pub fn pole() -> Self {
        let mut s = Laurent::zero();
        s.set(-1, C64::new(-1.0, 0.0));
        s
    }

    /// `1 / (b - z)^2` around `a` (`b != a`): `sum_s (s+1) t^s / (b-a)^{s+2}`.
    pub fn inv_linear_sq(b: f64, a: f64) -> Self {
        let d = b - a;
        let mut s = Laurent::zero();
        let mut pw = 1.0 / (d * d);
        for ord in 0..=(WIDTH as i32 + MIN_ORD - 1).max(0) {
            s.set(ord, C64::new((ord + 1) as f64 * pw, 0.0));
            pw /= d;
        }
        s
    }

    /// `1 / (a - z)^2 = 1 / t^2`.
    pub fn pole_sq() -> Self {
        let mut s = Laurent::zero();
        s.set(-2, C64::new(1.0, 0.0));
        s
    }

    fn idx(ord: i32) -> Option<usize> {
        let i = ord - MIN_ORD;
        (0..WIDTH as i32).contains(&i).then_some(i as usize)
    }

    pub fn get(&self, ord: i32) -> C64 {
        Self::idx(ord).map_or(C64::new(0.0, 0.0), |i| self.coeffs[i])
    }

    pub fn set(&mut self, ord: i32, value: C64) {
        if let Some(i) = Self::idx(ord) {
            self.coeffs[i] = value;
        }
    }

    pub fn add(&self, other: &Laurent) -> Laurent {
        let mut out = Laurent::zero();
        for i in 0..WIDTH {
            out.coeffs[i] = self.coeffs[i] + other.coeffs[i];
        }
        out
    }

    pub fn add_assign(&mut self, other: &Laurent) {
        for i in 0..WIDTH {
            self.coeffs[i] += other.coeffs[i];
        }
    }

    pub fn scale(&self, s: C64) -> Laurent {
        let mut out = self.clone();
        for c in out.coeffs.iter_mut() {
            *c *= s;
        }
        out
    }

    /// Product truncated to the window. Terms falling below `MIN_ORD`
    /// cannot influence tracked coefficients and are dropped.
    pub fn mul(&self, other: &Laurent) -> Laurent {
        let mut out = Laurent::zero();
        for i in 0..WIDTH {
            if self.coeffs[i].norm() == 0.0 {
                continue;
            }
            let ord_a = MIN_ORD + i as i32;
            for j in 0..WIDTH {
                if other.coeffs[j].norm() == 0.0 {
                    continue;
                }
                let ord = ord_a + MIN_ORD + j as i32;
                if let Some(idx) = Self::idx(ord) {
                    out.coeffs[idx] += self.coeffs[i] * other.coeffs[j];
                }
            }
        }
        out
    }

    /// Reciprocal of a series with a nonzero leading coefficient, via the
    /// geometric expansion `1/(c t^p (1 + u)) = t^{-p}/c (1 - u + u^2 - ...)`.
    pub fn inv(&self) -> Option<Laurent> {
        let lead_idx = self.coeffs.iter().position(|c| c.norm() > 0.0)?;
        let p = MIN_ORD + lead_idx as i32;
        let c = self.coeffs[lead_idx];
        // u = (series / (c t^p)) - 1, a power series with u(0) = 0.
        let mut u = Laurent::zero();
        for i in lead_idx + 1..WIDTH {
            let ord = (MIN_ORD + i as i32) - p;
            if let Some(idx) = Self::idx(ord) {
                u.coeffs[idx] = self.coeffs[i] / c;
            }
        }
        let mut geom = Laurent::constant(C64::new(1.0, 0.0));
        let mut term = Laurent::constant(C64::new(1.0, 0.0));
        for _ in 0..WIDTH {
            term = term.mul(&u).scale(C64::new(-1.0, 0.0));
            geom.add_assign(&term);
        }
        // Shift back by t^{-p} / c.
        let mut out = Laurent::zero();
        for i in 0..WIDTH {
            let ord = (MIN_ORD + i as i32) - p;
            if let Some(idx) = Self::idx(ord) {
                out.coeffs[idx] = geom.coeffs[i] / c;
            }
        }
        Some(out)
    }

    /// Coefficient of `t^{-1}`.
    pub fn residue(&self) -> C64 {
        self.get(-1)
    }
}
