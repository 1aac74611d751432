//! Dense complex polynomials and simultaneous root finding.
//!
//! The spectral computations reduce to small polynomial problems: the
//! master equation in `w` clears to a polynomial of degree `2K + 2`, and
//! the support of the limiting spectral measure comes from the critical
//! points of a rational function, i.e. the real roots of another low-degree
//! polynomial. Degrees stay in the tens, so an Aberth–Ehrlich simultaneous
//! iteration (third-order convergence, all roots at once) followed by a
//! Newton polish is accurate to near machine precision and needs no
//! external eigensolver.

use crate::error::{Error, Result};
use crate::C64;

const MAX_ABERTH_ITERS: usize = 400;
const ABERTH_TOL: f64 = 1e-14;

/// Polynomial with complex coefficients stored in ascending degree order.
/// The leading coefficient is nonzero after construction (zero polynomials
/// are represented by an empty coefficient vector).
#[derive(Clone, Debug, PartialEq)]
pub struct Poly {
    coeffs: Vec<C64>,
}

impl Poly {
    /// Builds a polynomial from ascending coefficients, trimming
    /// negligible leading terms relative to the largest coefficient.
    pub fn new(mut coeffs: Vec<C64>) -> Self {
        let max = coeffs.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        let cutoff = max * 1e-14;
        while let Some(last) = coeffs.last() {
            if last.norm() <= cutoff {
                coeffs.pop();
            } else {
                break;
            }
        }
        Poly { coeffs }
    }

    pub fn from_real(coeffs: &[f64]) -> Self {
        Poly::new(coeffs.iter().map(|&c| C64::new(c, 0.0)).collect())
    }

    pub fn constant(c: C64) -> Self {
        Poly::new(vec![c])
    }

    /// Monic linear factor `(w - root)`.
    pub fn linear_factor(root: f64) -> Self {
        Poly::from_real(&[-root, 1.0])
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    /// Horner evaluation.
    pub fn eval(&self, z: C64) -> C64 {
        let mut acc = C64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            acc = acc * z + c;
        }
        acc
    }

    /// Evaluates the polynomial and its first derivative in one pass.
    pub fn eval_with_derivative(&self, z: C64) -> (C64, C64) {
        let mut p = C64::new(0.0, 0.0);
        let mut dp = C64::new(0.0, 0.0);
        for &c in self.coeffs.iter().rev() {
            dp = dp * z + p;
            p = p * z + c;
        }
        (p, dp)
    }

    pub fn derivative(&self) -> Poly {
        if self.coeffs.len() <= 1 {
            return Poly { coeffs: vec![] };
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &c)| c * k as f64)
            .collect();
        Poly::new(coeffs)
    }

    pub fn mul(&self, other: &Poly) -> Poly {
        if self.is_zero() || other.is_zero() {
            return Poly { coeffs: vec![] };
        }
        let mut out = vec![C64::new(0.0, 0.0); self.coeffs.len() + other.coeffs.len() - 1];
        for (i, &a) in self.coeffs.iter().enumerate() {
            for (j, &b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Poly::new(out)
    }

    pub fn add(&self, other: &Poly) -> Poly {
        let n = self.coeffs.len().max(other.coeffs.len());
        let mut out = vec![C64::new(0.0, 0.0); n];
        for (i, &a) in self.coeffs.iter().enumerate() {
            out[i] += a;
        }
        for (i, &b) in other.coeffs.iter().enumerate() {
            out[i] += b;
        }
        Poly::new(out)
    }

    pub fn sub(&self, other: &Poly) -> Poly {
        self.add(&other.scale(C64::new(-1.0, 0.0)))
    }

    pub fn scale(&self, s: C64) -> Poly {
        Poly::new(self.coeffs.iter().map(|&c| c * s).collect())
    }

    /// Multiplies by the monomial `w` (shift of coefficients).
    pub fn mul_x(&self) -> Poly {
        if self.is_zero() {
            return self.clone();
        }
        let mut out = Vec::with_capacity(self.coeffs.len() + 1);
        out.push(C64::new(0.0, 0.0));
        out.extend_from_slice(&self.coeffs);
        Poly::new(out)
    }

    /// All complex roots via Aberth–Ehrlich iteration.
    ///
    /// Returns the roots in no particular order. Fails if the iteration
    /// does not converge, which for the well-scaled low-degree polynomials
    /// of this crate signals a genuinely degenerate input.
    pub fn roots(&self) -> Result<Vec<C64>> {
        if self.coeffs.len() <= 1 {
            return Ok(vec![]);
        }
        // Scale coefficients to unit max modulus for numerical sanity.
        let max = self.coeffs.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
        let p = self.scale(C64::new(1.0 / max, 0.0));
        let n = p.degree();
        let lead = p.coeffs[n];

        // Cauchy bound on root moduli.
        let bound = 1.0
            + p.coeffs[..n]
                .iter()
                .map(|c| (c / lead).norm())
                .fold(0.0f64, f64::max);

        // Initial guesses on a circle, angle-offset to avoid symmetry traps.
        let mut z: Vec<C64> = (0..n)
            .map(|k| {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / n as f64 + 0.39;
                C64::from_polar(0.5 * bound, theta)
            })
            .collect();

        // Backward-error floor: |p(z)| below eps * sum |a_j| |z|^j means z
        // is a root to working precision, whatever the step size says.
        let residual_floor = |zi: C64| -> f64 {
            let x = zi.norm();
            let mut s = 0.0;
            let mut xp = 1.0;
            for c in &p.coeffs {
                s += c.norm() * xp;
                xp *= x;
            }
            8.0 * f64::EPSILON * s
        };

        for _ in 0..MAX_ABERTH_ITERS {
            let mut max_step = 0.0f64;
            let mut all_converged = true;
            for i in 0..n {
                let (pv, dv) = p.eval_with_derivative(z[i]);
                if pv.norm() <= residual_floor(z[i]) {
                    continue;
                }
                all_converged = false;
                let newton = if dv.norm() > 0.0 {
                    pv / dv
                } else {
                    // Derivative vanished: nudge off the stationary point.
                    let nudge = 1e-8 * (1.0 + z[i].norm());
                    z[i] += C64::new(nudge, 1e-8);
                    continue;
                };
                let mut repulsion = C64::new(0.0, 0.0);
                for j in 0..n {
                    if j != i {
                        let d = z[i] - z[j];
                        if d.norm() > 1e-300 {
                            repulsion += C64::new(1.0, 0.0) / d;
                        }
                    }
                }
                let denom = C64::new(1.0, 0.0) - newton * repulsion;
                let step = if denom.norm() > 1e-300 { newton / denom } else { newton };
                z[i] -= step;
                max_step = max_step.max(step.norm() / (1.0 + z[i].norm()));
            }
            if all_converged || max_step < ABERTH_TOL {
                // Final Newton polish of each root individually. The
                // backward-error stop above can leave simple roots a few
                // ulps-of-the-coefficients away; quadratic refinement from
                // there reaches the root's own condition limit.
                for zi in z.iter_mut() {
                    for _ in 0..6 {
                        let (pv, dv) = p.eval_with_derivative(*zi);
                        if pv.norm() == 0.0 || dv.norm() == 0.0 {
                            break;
                        }
                        let step = pv / dv;
                        if step.norm() < 0.5 * (1.0 + zi.norm()) {
                            *zi -= step;
                        } else {
                            break;
                        }
                    }
                }
                return Ok(z);
            }
        }
        Err(Error::Numerical(format!(
            "polynomial root iteration did not converge (degree {})",
            n
        )))
    }

    /// Real roots, using a relative imaginary-part tolerance to absorb
    /// the rounding of the complex iteration.
    pub fn real_roots(&self) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = self
            .roots()?
            .into_iter()
            .filter(|r| r.im.abs() < 1e-9 * r.re.abs().max(1.0))
            .map(|r| r.re)
            .collect();
        out.sort_by(|a, b| a.partial_cmp(b).unwrap());
        Ok(out)
    }
}
