//! Eigen-analysis of one realization.
//!
//! Besides the sample eigenvalues and eigenvectors of `Sigma Sigma^*`,
//! the contour estimator needs the zeros `omega_1 > ... > omega_M` of
//! `z -> 1 + s2 c_N m_hat(z)`, where `m_hat` is the empirical Stieltjes
//! transform. Those zeros are the eigenvalues of the rank-one update
//! `diag(lambda_hat) + (s2 c_N / M) 1 1^T`, so they interlace the sample
//! eigenvalues from above; they are computed here by safeguarded
//! bisection of the secular equation in each interlacing interval, which
//! is robust to clustered eigenvalues.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{Realization, SignalModel};
use crate::spectrum::SpectralSupport;
use crate::C64;

/// Relative interval width at which bisection stops.
const SECULAR_BISECT_TOL: f64 = 1e-15;

/// Sample spectrum of one realization, with the secular roots attached.
#[derive(Clone, Debug)]
pub struct EmpiricalSpectrum {
    /// Eigenvalues of `Sigma Sigma^*`, descending, non-negative.
    pub lambda_hat: Vec<f64>,
    /// Matching unit eigenvectors (columns, same order).
    pub u_hat: DMatrix<C64>,
    /// Zeros of `1 + s2 c_N m_hat`, descending.
    pub omega_hat: Vec<f64>,
    pub model: SignalModel,
    pub seed: u64,
}

/// Split verdicts for one realization against the support thresholds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfinementVerdict {
    /// Smallest `M - K` sample eigenvalues in `[t1-, t1+]`, largest `K`
    /// in `[t2-, t2+]`.
    pub lambda_split: bool,
    /// Same split for the secular roots.
    pub omega_split: bool,
}

impl ConfinementVerdict {
    pub fn holds(&self) -> bool {
        self.lambda_split && self.omega_split
    }
}

/// Hermitian eigendecomposition of `Sigma Sigma^*` plus secular roots.
pub fn decompose(model: &SignalModel, realization: &Realization) -> Result<EmpiricalSpectrum> {
    let m = model.observation_dim();
    if realization.sigma_matrix.nrows() != m
        || realization.sigma_matrix.ncols() != model.sample_count()
    {
        return Err(Error::DimensionMismatch(format!(
            "realization is {}x{}, model wants {}x{}",
            realization.sigma_matrix.nrows(),
            realization.sigma_matrix.ncols(),
            m,
            model.sample_count()
        )));
    }
    let gram = &realization.sigma_matrix * realization.sigma_matrix.adjoint();
    let eig = nalgebra::SymmetricEigen::new(gram);

    // Descending sort, stable in the original index for deterministic ties.
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let scale = eig.eigenvalues.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut lambda_hat = Vec::with_capacity(m);
    let mut u_hat = DMatrix::zeros(m, m);
    for (col, &idx) in order.iter().enumerate() {
        let v = eig.eigenvalues[idx];
        if v < -1e-10 * scale.max(1.0) {
            return Err(Error::Numerical(format!(
                "Gram matrix produced a negative eigenvalue {v}"
            )));
        }
        lambda_hat.push(v.max(0.0));
        u_hat.column_mut(col).copy_from(&eig.eigenvectors.column(idx));
    }

    let omega_hat = secular_roots(&lambda_hat, model.noise_variance() * model.ratio());
    Ok(EmpiricalSpectrum {
        lambda_hat,
        u_hat,
        omega_hat,
        model: model.clone(),
        seed: realization.seed,
    })
}

/// Roots of `1 + tau m_hat(omega) = 0` with `tau = s2 c_N`, one per
/// interlacing interval `(lambda_k, lambda_{k-1})` plus one above
/// `lambda_1` (bounded by `lambda_1 + tau`). `lambda` is descending.
fn secular_roots(lambda: &[f64], tau: f64) -> Vec<f64> {
    let m = lambda.len();
    let per_pole = tau / m as f64;
    let secular = |omega: f64| -> f64 {
        1.0 + per_pole * lambda.iter().map(|&l| 1.0 / (l - omega)).sum::<f64>()
    };
    let mut out = Vec::with_capacity(m);
    for k in 0..m {
        let lo = lambda[k];
        let hi = if k == 0 { lambda[0] + tau } else { lambda[k - 1] };
        if hi - lo <= f64::EPSILON * lo.abs().max(1.0) {
            // Repeated eigenvalue: the root deflates onto it.
            out.push(lo);
            continue;
        }
        out.push(bisect_secular(&secular, lo, hi));
    }
    out
}

/// Bisection on `(lo, hi)`: the secular function runs from -inf at `lo+`
/// to a non-negative value at `hi` (`hi` is either the next pole or the
/// trace bound `lambda_1 + tau`).
fn bisect_secular(secular: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    if secular(hi) < 0.0 {
        // Root numerically glued to the upper end of the bracket.
        return hi;
    }
    let mut a = lo;
    let mut b = hi;
    for _ in 0..200 {
        if b - a <= SECULAR_BISECT_TOL * b.abs().max(1.0) {
            break;
        }
        let mid = 0.5 * (a + b);
        if secular(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

impl EmpiricalSpectrum {
    pub fn observation_dim(&self) -> usize {
        self.lambda_hat.len()
    }

    /// `tau = s2 c_N`, the strength of the rank-one secular update.
    pub fn tau(&self) -> f64 {
        self.model.noise_variance() * self.model.ratio()
    }

    /// Empirical Stieltjes transform `m_hat(z)` and its derivative.
    pub fn m_hat(&self, z: C64) -> Result<(C64, C64)> {
        let scale = self.lambda_hat.first().copied().unwrap_or(1.0).max(1.0);
        let mut m = C64::new(0.0, 0.0);
        let mut mp = C64::new(0.0, 0.0);
        for &l in &self.lambda_hat {
            let d = C64::new(l, 0.0) - z;
            if d.norm() < 1e-12 * scale {
                return Err(Error::Pole(format!(
                    "empirical Stieltjes transform evaluated at eigenvalue {l}"
                )));
            }
            m += C64::new(1.0, 0.0) / d;
            mp += C64::new(1.0, 0.0) / (d * d);
        }
        let m_dim = self.lambda_hat.len() as f64;
        Ok((m / m_dim, mp / m_dim))
    }

    /// `(m_hat, w_hat, w_hat')` at `z`. `w_hat` mirrors the deterministic
    /// change of variable, so it converges to `w_N` on compact sets off
    /// the support; the `literal` variant drops the `(1 - c_N)` factor in
    /// the linear term (kept for comparison only - it stays biased).
    pub fn stieltjes_with(&self, z: C64, literal: bool) -> Result<(C64, C64, C64)> {
        let (m, mp) = self.m_hat(z)?;
        let tau = self.tau();
        let coeff = if literal {
            self.model.noise_variance()
        } else {
            self.model.noise_variance() * (1.0 - self.model.ratio())
        };
        let g = C64::new(1.0, 0.0) + m * tau;
        let gp = mp * tau;
        let w = z * g * g - g * coeff;
        let wp = g * g + z * g * gp * 2.0 - gp * coeff;
        Ok((m, w, wp))
    }

    /// Default reading of the empirical change of variable.
    pub fn stieltjes(&self, z: C64) -> Result<(C64, C64, C64)> {
        self.stieltjes_with(z, false)
    }

    /// `1 + tau m_hat(z)` and its derivative: the secular function whose
    /// zeros are `omega_hat`.
    pub fn secular_value(&self, z: C64) -> Result<(C64, C64)> {
        let (m, mp) = self.m_hat(z)?;
        let tau = self.tau();
        Ok((C64::new(1.0, 0.0) + m * tau, mp * tau))
    }

    /// Checks the eigenvalue/secular-root split against the thresholds.
    pub fn confinement(&self, support: &SpectralSupport) -> ConfinementVerdict {
        let k = self.model.signal_rank();
        let m = self.observation_dim();
        let (t1_lo, t1_hi) = support.thresholds.t1;
        let split = |values: &[f64]| -> bool {
            let noise_ok = values[k..].iter().all(|&v| v >= t1_lo && v <= t1_hi);
            let signal_ok = match support.thresholds.t2 {
                Some((t2_lo, t2_hi)) => values[..k].iter().all(|&v| v >= t2_lo && v <= t2_hi),
                None => k == 0,
            };
            noise_ok && signal_ok && values.len() == m
        };
        ConfinementVerdict {
            lambda_split: split(&self.lambda_hat),
            omega_split: split(&self.omega_hat),
        }
    }

    /// Projector coefficients `d1^* u_k u_k^* d2` for every sample
    /// eigenvector, in eigenvalue order.
    pub fn sample_projections(
        &self,
        d1: &nalgebra::DVector<C64>,
        d2: &nalgebra::DVector<C64>,
    ) -> Vec<C64> {
        (0..self.observation_dim())
            .map(|k| {
                let col = self.u_hat.column(k);
                let a: C64 = col.iter().zip(d1.iter()).map(|(u, d)| u.conj() * d).sum();
                let b: C64 = col.iter().zip(d2.iter()).map(|(u, d)| u.conj() * d).sum();
                a.conj() * b
            })
            .collect()
    }
}
