//! Deterministic equivalents of the sample spectrum.
//!
//! In the large-dimensional regime `M/N -> c` the empirical eigenvalue
//! distribution of `Sigma Sigma^*` approaches a deterministic measure
//! `mu_N`. Its Stieltjes transform `m_N(z)` is characterized through the
//! change of variable
//!
//! ```text
//! w_N(z) = z (1 + s2 c m_N)^2 - s2 (1 - c)(1 + s2 c m_N),     z = phi_N(w_N(z)),
//! phi_N(w) = w (1 - s2 c f_N(w))^2 + s2 (1 - c)(1 - s2 c f_N(w)),
//! f_N(w)  = (1/M) tr (B B^* - w I)^{-1},
//! ```
//!
//! with `s2` the noise variance. Clearing denominators turns
//! `phi_N(w) = z` into a polynomial of degree `2K + 2`; the support of
//! `mu_N` is the union of "clusters" `[x_q^-, x_q^+]` whose endpoints are
//! the positive local extrema of `phi_N` on the real line. This module
//! computes the support, selects the correct solution branch for
//! `w_N(z)` / `m_N(z)`, evaluates the density by Stieltjes inversion, the
//! resolvent-equivalent diagonals, and the fixed-rank (spiked) closed
//! forms where the bulk degenerates to Marchenko–Pastur.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::SignalModel;
use crate::poly::Poly;
use crate::C64;

/// A root counts as real when its imaginary part is below this relative
/// threshold (companion of the root finder's rounding floor).
const REAL_ROOT_TOL: f64 = 1e-9;

/// Relative tolerance for "z sits on a support boundary".
const BOUNDARY_TOL: f64 = 1e-12;

/// Separation thresholds around the noise and signal cluster blocks.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct Thresholds {
    /// `[t1_lo, t1_hi]` enclosing the noise cluster.
    pub t1: (f64, f64),
    /// `[t2_lo, t2_hi]` enclosing all signal clusters (absent when the
    /// support has a single cluster).
    pub t2: Option<(f64, f64)>,
    /// Real-axis margin used both for the thresholds and the contour.
    pub epsilon: f64,
    /// Default half-height of the rectangular contour.
    pub delta: f64,
}

/// Support of the limiting spectral measure plus separation verdicts.
#[derive(Clone, Debug, Serialize)]
pub struct SpectralSupport {
    /// Disjoint increasing intervals `[x_q^-, x_q^+]`.
    pub clusters: Vec<(f64, f64)>,
    /// `(w(x_q^-), w(x_q^+))` per cluster, strictly increasing overall.
    pub w_preimages: Vec<(f64, f64)>,
    pub thresholds: Thresholds,
    /// Noise cluster isolated from the signal clusters.
    pub a1: bool,
    /// Zero is the only eigenvalue associated with the noise cluster.
    pub a2: bool,
}

impl SpectralSupport {
    pub fn cluster_count(&self) -> usize {
        self.clusters.len()
    }

    pub fn separated(&self) -> bool {
        self.a1 && self.a2
    }

    /// Index of the cluster containing `x`, if any.
    pub fn cluster_of(&self, x: f64) -> Option<usize> {
        self.clusters
            .iter()
            .position(|&(lo, hi)| x >= lo && x <= hi)
    }

    /// Distance from a complex point to the support (clusters only).
    pub fn distance(&self, z: C64) -> f64 {
        self.clusters
            .iter()
            .map(|&(lo, hi)| {
                let dx = if z.re < lo {
                    lo - z.re
                } else if z.re > hi {
                    z.re - hi
                } else {
                    0.0
                };
                (dx * dx + z.im * z.im).sqrt()
            })
            .fold(f64::MAX, f64::min)
    }
}

/// One evaluation of the deterministic equivalents at a point `z` off the
/// support boundary.
#[derive(Clone, Copy, Debug)]
pub struct WPoint {
    pub z: C64,
    pub w: C64,
    /// Stieltjes transform `m_N(z)`.
    pub m: C64,
    /// Companion transform of `c mu_N + (1-c) delta_0`.
    pub mtilde: C64,
    /// `w'_N(z) = 1 / phi'_N(w_N(z))`.
    pub wprime: C64,
    /// `1 + s2 c m_N(z)`; bounded below in modulus by 1/2.
    pub g: C64,
    /// `1 + s2 mtilde_N(z)`.
    pub gtilde: C64,
}

/// Diagonal data of the resolvent equivalents in the eigenbasis of `B B^*`.
#[derive(Clone, Debug)]
pub struct ResolventDiag {
    /// The M diagonal entries of `T_N(z)` (signal entries first, in the
    /// model's eigenvalue order, then the noise entries).
    pub t_diag: Vec<C64>,
    /// Diagonal entries of `T~_N(z)` attached to the signal eigenvalues.
    pub ttilde_signal: Vec<C64>,
    /// The common noise entry of `T~_N(z)` and its multiplicity `N - K`.
    pub ttilde_noise: C64,
    pub ttilde_noise_mult: usize,
}

/// Fixed-rank (spiked) closed forms on top of the Marchenko–Pastur bulk.
#[derive(Clone, Debug, Serialize)]
pub struct SpikedSummary {
    pub sigma2: f64,
    pub c: f64,
    /// `lambda_K - s2 sqrt(c)`; positive iff the separation conditions
    /// hold in the fixed-rank regime. Absent for the pure-noise model.
    pub margin: Option<f64>,
    /// Almost-sure limits `phi(lambda_k)` of the K largest sample
    /// eigenvalues, descending.
    pub spike_limits: Vec<f64>,
    /// Marchenko–Pastur bulk edges `s2 (1 -+ sqrt(c))^2`.
    pub edges: (f64, f64),
}

/// Evaluates `phi_N` and its derivative at `w` by direct rational
/// arithmetic. Errors when `w` hits a pole (0 or a signal eigenvalue).
pub fn phi_eval(model: &SignalModel, w: C64) -> Result<(C64, C64)> {
    let (f, fp) = rational_f(model, w)?;
    let s2 = model.noise_variance();
    let c = model.ratio();
    let h = C64::new(1.0, 0.0) - f * (s2 * c);
    let hp = -fp * (s2 * c);
    let phi = w * h * h + h * (s2 * (1.0 - c));
    let phip = h * h + w * h * hp * 2.0 + hp * (s2 * (1.0 - c));
    Ok((phi, phip))
}

/// `f_N(w) = (1/M) tr (B B^* - w)^{-1}` and its derivative.
fn rational_f(model: &SignalModel, w: C64) -> Result<(C64, C64)> {
    let m = model.observation_dim() as f64;
    let noise_mult = (model.observation_dim() - model.signal_rank()) as f64;
    let scale = model.lambdas().first().copied().unwrap_or(1.0).max(1.0);
    if w.norm() < 1e-14 * scale {
        return Err(Error::Pole("phi evaluated at w = 0".into()));
    }
    let mut f = C64::new(0.0, 0.0);
    let mut fp = C64::new(0.0, 0.0);
    for (lambda, mult) in model.distinct_lambdas() {
        let d = C64::new(lambda, 0.0) - w;
        if d.norm() < 1e-14 * scale {
            return Err(Error::Pole(format!("phi evaluated at eigenvalue {lambda}")));
        }
        f += C64::new(mult as f64, 0.0) / d;
        fp += C64::new(mult as f64, 0.0) / (d * d);
    }
    f -= C64::new(noise_mult, 0.0) / w;
    fp += C64::new(noise_mult, 0.0) / (w * w);
    Ok((f / m, fp / m))
}

/// Numerator/denominator polynomials of `phi_N` with real coefficients:
/// `phi = R / S`, `R = G (G + s2 (1-c) p)`, `S = w p^2`, where `p` is the
/// monic-up-to-sign product over distinct signal eigenvalues and
/// `G = w p - s2 c q` clears the trace term.
fn phi_fraction(model: &SignalModel) -> (Poly, Poly) {
    let distinct = model.distinct_lambdas();
    let m = model.observation_dim() as f64;
    let noise_mult = (model.observation_dim() - model.signal_rank()) as f64;
    let s2 = model.noise_variance();
    let c = model.ratio();

    let mut p = Poly::from_real(&[1.0]);
    for &(lambda, _) in &distinct {
        p = p.mul(&Poly::from_real(&[lambda, -1.0]));
    }
    // sum_part = sum_d mult_d prod_{j != d} (lambda_j - w)
    let mut sum_part = Poly::new(vec![]);
    for (d, &(_, mult)) in distinct.iter().enumerate() {
        let mut prod = Poly::from_real(&[1.0]);
        for (j, &(lambda_j, _)) in distinct.iter().enumerate() {
            if j != d {
                prod = prod.mul(&Poly::from_real(&[lambda_j, -1.0]));
            }
        }
        sum_part = sum_part.add(&prod.scale(C64::new(mult as f64, 0.0)));
    }
    let q = sum_part
        .mul_x()
        .sub(&p.scale(C64::new(noise_mult, 0.0)))
        .scale(C64::new(1.0 / m, 0.0));
    let g_poly = p.mul_x().sub(&q.scale(C64::new(s2 * c, 0.0)));
    let r = g_poly.mul(&g_poly.add(&p.scale(C64::new(s2 * (1.0 - c), 0.0))));
    let s = p.mul(&p).mul_x();
    (r, s)
}

/// Support of `mu_N`, the branch structure of `w_N`, densities and
/// resolvent equivalents for one model. Built once, then shared read-only.
#[derive(Clone, Debug)]
pub struct AsymptoticSpectrum {
    model: SignalModel,
    support: SpectralSupport,
    numer: Poly,
    denom: Poly,
}

impl AsymptoticSpectrum {
    pub fn new(model: SignalModel) -> Result<Self> {
        let (numer, denom) = phi_fraction(&model);
        let support = compute_support(&model, &numer, &denom)?;
        Ok(AsymptoticSpectrum {
            model,
            support,
            numer,
            denom,
        })
    }

    pub fn model(&self) -> &SignalModel {
        &self.model
    }

    pub fn support(&self) -> &SpectralSupport {
        &self.support
    }

    pub fn phi(&self, w: C64) -> Result<(C64, C64)> {
        phi_eval(&self.model, w)
    }

    /// Solves `phi_N(w) = z` on the branch of `w_N` and assembles all
    /// deterministic equivalents at `z`.
    pub fn w_point(&self, z: C64) -> Result<WPoint> {
        let zscale = z.norm().max(1.0);
        let w = if z.im.abs() <= 1e-13 * zscale {
            self.solve_w_real(z.re)?
        } else {
            self.solve_w_complex(z)?
        };
        self.point_from_w(z, w)
    }

    /// Spectral density of `mu_N` at a real point, via Stieltjes
    /// inversion of the in-cluster branch. The boolean flags a boundary
    /// point that was nudged into the adjacent cluster before evaluation.
    pub fn density(&self, x: f64) -> Result<(f64, bool)> {
        let scale = x.abs().max(1.0);
        for &(lo, hi) in &self.support.clusters {
            let width = hi - lo;
            if (x - lo).abs() < BOUNDARY_TOL * scale || (x - hi).abs() < BOUNDARY_TOL * scale {
                let inward = if (x - lo).abs() < (x - hi).abs() {
                    lo + 1e-9 * width
                } else {
                    hi - 1e-9 * width
                };
                let p = self.w_point(C64::new(inward, 0.0))?;
                return Ok(((p.m.im / std::f64::consts::PI).max(0.0), true));
            }
        }
        if self.support.cluster_of(x).is_none() {
            return Ok((0.0, false));
        }
        let p = self.w_point(C64::new(x, 0.0))?;
        Ok(((p.m.im / std::f64::consts::PI).max(0.0), false))
    }

    /// Diagonal entries of the resolvent equivalents `T_N`, `T~_N` in the
    /// eigenbasis of `B B^*` / `B^* B`, with the defining trace identity
    /// `(1/M) sum T_kk = m` checked to 1e-9.
    pub fn resolvent_diag(&self, p: &WPoint) -> Result<ResolventDiag> {
        let model = &self.model;
        let m_dim = model.observation_dim();
        let k = model.signal_rank();
        let mut t_diag = Vec::with_capacity(m_dim);
        for &lambda in model.lambdas() {
            t_diag.push(p.g / (C64::new(lambda, 0.0) - p.w));
        }
        let noise_entry = -p.g / p.w;
        t_diag.extend(std::iter::repeat_n(noise_entry, m_dim - k));

        let mean = t_diag.iter().sum::<C64>() / m_dim as f64;
        if (mean - p.m).norm() > 1e-9 * p.m.norm().max(1.0) {
            return Err(Error::Numerical(format!(
                "trace identity violated: (1/M) sum T = {mean}, m = {}",
                p.m
            )));
        }

        let ttilde_signal = model
            .lambdas()
            .iter()
            .map(|&lambda| p.gtilde / (C64::new(lambda, 0.0) - p.w))
            .collect();
        Ok(ResolventDiag {
            t_diag,
            ttilde_signal,
            ttilde_noise: -p.gtilde / p.w,
            ttilde_noise_mult: model.sample_count() - k,
        })
    }

    /// Fixed-rank closed forms (margin, spike limits, bulk edges).
    pub fn spiked(&self) -> SpikedSummary {
        spiked_pack(&self.model)
    }

    fn point_from_w(&self, z: C64, w_raw: C64) -> Result<WPoint> {
        // Newton polish on phi(w) - z to squeeze out iteration residue.
        let mut w = w_raw;
        for _ in 0..3 {
            let (phi, phip) = phi_eval(&self.model, w)?;
            if phip.norm() < 1e-300 {
                break;
            }
            let step = (phi - z) / phip;
            if step.norm() > 0.5 * (1.0 + w.norm()) {
                break;
            }
            w -= step;
        }

        let (phi, phip) = phi_eval(&self.model, w)?;
        let zscale = z.norm().max(1.0);
        if (phi - z).norm() > 1e-10 * zscale {
            return Err(Error::Numerical(format!(
                "branch solve residual |phi(w) - z| = {:.3e} at z = {z}",
                (phi - z).norm()
            )));
        }

        let s2 = model_variance(&self.model);
        let c = self.model.ratio();
        let (f, _) = rational_f(&self.model, w)?;
        let h = C64::new(1.0, 0.0) - f * (s2 * c);
        if h.norm() < 1e-300 {
            return Err(Error::Numerical("vanishing 1 - s2 c f(w)".into()));
        }
        let g = C64::new(1.0, 0.0) / h;
        let m = f * g;

        // Stieltjes sign and the global modulus bound |g| >= 1/2.
        if z.im.abs() > 1e-13 * zscale && m.im * z.im.signum() < 0.0 {
            return Err(Error::Numerical(format!(
                "selected branch violates the Stieltjes property at z = {z}"
            )));
        }
        if g.norm() < 0.5 * (1.0 - 1e-6) {
            return Err(Error::Numerical(format!(
                "branch bound |1 + s2 c m| >= 1/2 violated at z = {z}"
            )));
        }

        let mtilde = m * c - C64::new(1.0 - c, 0.0) / z;
        let gtilde = C64::new(1.0, 0.0) + mtilde * s2;
        Ok(WPoint {
            z,
            w,
            m,
            mtilde,
            wprime: C64::new(1.0, 0.0) / phip,
            g,
            gtilde,
        })
    }

    fn branch_poly(&self, z: C64) -> Poly {
        self.numer.sub(&self.denom.scale(z))
    }

    fn solve_w_real(&self, x: f64) -> Result<C64> {
        let scale = x.abs().max(1.0);
        let support = &self.support;
        for &(lo, hi) in &support.clusters {
            if (x - lo).abs() < BOUNDARY_TOL * scale || (x - hi).abs() < BOUNDARY_TOL * scale {
                return Err(Error::SupportBoundary(format!(
                    "z = {x} lies on a support boundary"
                )));
            }
        }
        let roots = self.branch_poly(C64::new(x, 0.0)).roots()?;
        if let Some(q) = support.cluster_of(x) {
            // Inside a cluster: one conjugate pair; take the upper root.
            let mut upper: Vec<C64> = roots
                .iter()
                .copied()
                .filter(|r| r.im > REAL_ROOT_TOL * r.re.abs().max(1.0))
                .collect();
            if upper.len() != 1 {
                // Numerical borderline roots can fake extra pairs; keep the
                // one consistent with the cluster's preimage window.
                let (wlo, whi) = support.w_preimages[q];
                upper.retain(|r| r.re > wlo - 1e-6 && r.re < whi + 1e-6);
            }
            if upper.len() != 1 {
                return Err(Error::Numerical(format!(
                    "expected one upper-half solution at z = {x}, found {}",
                    upper.len()
                )));
            }
            return Ok(upper[0]);
        }

        // In a gap: the unique real root between the neighbouring
        // preimage windows.
        let (lo_w, hi_w) = self.gap_window(x);
        let slack = 1e-9 * scale.max(1.0);
        let mut real: Vec<f64> = roots
            .iter()
            .filter(|r| r.im.abs() <= REAL_ROOT_TOL * r.re.abs().max(1.0))
            .map(|r| r.re)
            .filter(|&w| w > lo_w + slack && w < hi_w - slack)
            .collect();
        real.sort_by(|a, b| a.partial_cmp(b).unwrap());
        real.dedup_by(|a, b| (*a - *b).abs() < 1e-9 * a.abs().max(1.0));
        match real.len() {
            1 => Ok(C64::new(real[0], 0.0)),
            n => Err(Error::Numerical(format!(
                "expected one real solution in the gap window ({lo_w:.6}, {hi_w:.6}) at z = {x}, found {n}"
            ))),
        }
    }

    /// Open `w`-interval associated with the real gap containing `x`.
    fn gap_window(&self, x: f64) -> (f64, f64) {
        let support = &self.support;
        if x < support.clusters[0].0 {
            return (f64::NEG_INFINITY, support.w_preimages[0].0);
        }
        let last = support.clusters.len() - 1;
        if x > support.clusters[last].1 {
            return (support.w_preimages[last].1, f64::INFINITY);
        }
        for q in 0..last {
            if x > support.clusters[q].1 && x < support.clusters[q + 1].0 {
                return (support.w_preimages[q].1, support.w_preimages[q + 1].0);
            }
        }
        // Unreachable for x off the support; fall back to the full line.
        (f64::NEG_INFINITY, f64::INFINITY)
    }

    fn solve_w_complex(&self, z: C64) -> Result<C64> {
        let sgn = z.im.signum();
        let roots = self.branch_poly(z).roots()?;
        let s2 = model_variance(&self.model);
        let c = self.model.ratio();
        let mut survivors: Vec<C64> = Vec::new();
        for w in roots {
            if w.im * sgn <= 0.0 {
                continue;
            }
            let Ok((f, _)) = rational_f(&self.model, w) else {
                continue;
            };
            let h = C64::new(1.0, 0.0) - f * (s2 * c);
            if h.norm() < 1e-300 {
                continue;
            }
            let g = C64::new(1.0, 0.0) / h;
            let m = f * g;
            if m.im * sgn > 0.0 && g.norm() >= 0.5 * (1.0 - 1e-6) {
                survivors.push(w);
            }
        }
        match survivors.len() {
            1 => Ok(survivors[0]),
            0 => Err(Error::Numerical(format!(
                "no admissible branch solution at z = {z}"
            ))),
            _ => {
                // Disambiguate against the damped fixed-point solution.
                let m_fp = self.fixed_point_m(z).ok_or_else(|| {
                    Error::Numerical(format!("ambiguous branch solutions at z = {z}"))
                })?;
                let g = C64::new(1.0, 0.0) + m_fp * (s2 * c);
                let w_fp = z * g * g - g * (s2 * (1.0 - c));
                survivors
                    .into_iter()
                    .min_by(|a, b| {
                        (a - w_fp)
                            .norm()
                            .partial_cmp(&(b - w_fp).norm())
                            .unwrap()
                    })
                    .ok_or_else(|| Error::Numerical("empty survivor set".into()))
            }
        }
    }

    /// Damped fixed-point iteration on the defining trace equation,
    /// used only as a tie-breaker for branch selection.
    fn fixed_point_m(&self, z: C64) -> Option<C64> {
        let model = &self.model;
        let s2 = model.noise_variance();
        let c = model.ratio();
        let m_dim = model.observation_dim() as f64;
        let noise_mult = (model.observation_dim() - model.signal_rank()) as f64;
        let mut m = -C64::new(1.0, 0.0) / z;
        for _ in 0..5000 {
            let g = C64::new(1.0, 0.0) + m * (s2 * c);
            if g.norm() < 1e-12 {
                return None;
            }
            let shift = z * g - C64::new(s2 * (1.0 - c), 0.0);
            let mut total = -C64::new(noise_mult, 0.0) / shift;
            for (lambda, mult) in model.distinct_lambdas() {
                total += C64::new(mult as f64, 0.0) / (C64::new(lambda, 0.0) / g - shift);
            }
            let next = total / m_dim;
            let delta = (next - m).norm();
            m = m * 0.5 + next * 0.5;
            if delta < 1e-14 * m.norm().max(1.0) {
                return Some(m);
            }
        }
        None
    }
}

fn model_variance(model: &SignalModel) -> f64 {
    model.noise_variance()
}

/// Locates the clusters of `mu_N` from the critical points of `phi_N`.
fn compute_support(model: &SignalModel, numer: &Poly, denom: &Poly) -> Result<SpectralSupport> {
    // phi' = (R'S - RS') / S^2 with S = w p^2. The raw numerator contains
    // the factor p exactly (each eigenvalue is a pole, never a critical
    // point); dividing it out algebraically keeps the root cluster near
    // each eigenvalue well conditioned:
    //   R'S - RS' = p (w p R' - p R - 2 w p' R).
    let mut p = Poly::from_real(&[1.0]);
    for (lambda, _) in model.distinct_lambdas() {
        p = p.mul(&Poly::from_real(&[lambda, -1.0]));
    }
    let crit_poly = p
        .mul_x()
        .mul(&numer.derivative())
        .sub(&p.mul(numer))
        .sub(&p.derivative().mul_x().mul(numer).scale(C64::new(2.0, 0.0)));
    let scale = model.lambdas().first().copied().unwrap_or(1.0).max(1.0);
    let mut crit: Vec<f64> = crit_poly
        .real_roots()?
        .into_iter()
        .filter(|w| {
            w.abs() > 1e-9 * scale
                && model
                    .distinct_lambdas()
                    .iter()
                    .all(|&(l, _)| (l - w).abs() > 1e-9 * scale)
        })
        .collect();
    crit.dedup_by(|a, b| (*a - *b).abs() < 1e-10 * a.abs().max(1.0));

    // Classify each critical point; keep positive local extrema.
    let crit_deriv = crit_poly.derivative();
    let mut extrema: Vec<(f64, f64, bool)> = Vec::new(); // (w*, phi(w*), is_max)
    for &w in &crit {
        let wz = C64::new(w, 0.0);
        let (phi, _) = phi_eval(model, wz)?;
        let curvature =
            (crit_deriv.eval(wz) * p.eval(wz) / (denom.eval(wz) * denom.eval(wz))).re;
        if phi.re > 0.0 && curvature.abs() > 0.0 {
            extrema.push((w, phi.re, curvature < 0.0));
        }
    }
    extrema.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    let fail = |msg: String| Err(Error::Numerical(format!("support computation: {msg}")));
    if extrema.is_empty() || !extrema.len().is_multiple_of(2) {
        return fail(format!("{} positive extrema", extrema.len()));
    }
    let q_count = extrema.len() / 2;
    if q_count > model.signal_rank() + 1 {
        return fail(format!("{q_count} clusters exceed K + 1"));
    }
    let mut clusters = Vec::with_capacity(q_count);
    let mut w_preimages = Vec::with_capacity(q_count);
    for q in 0..q_count {
        let (w_lo, x_lo, lo_is_max) = extrema[2 * q];
        let (w_hi, x_hi, hi_is_max) = extrema[2 * q + 1];
        if !lo_is_max || hi_is_max {
            return fail("extrema do not alternate max/min".into());
        }
        if x_lo >= x_hi {
            return fail(format!("cluster {q} endpoints out of order"));
        }
        clusters.push((x_lo, x_hi));
        w_preimages.push((w_lo, w_hi));
    }
    // Ordering required of the preimages: w(x_1^-) < 0 < w(x_1^+) < ...,
    // and the last preimage exceeds the largest signal eigenvalue.
    if !(w_preimages[0].0 < 0.0 && w_preimages[0].1 > 0.0) {
        return fail("noise eigenvalue not associated with the first cluster".into());
    }
    for q in 1..q_count {
        if clusters[q].0 <= clusters[q - 1].1 {
            return fail("clusters overlap".into());
        }
    }
    if let Some(&lambda_1) = model.lambdas().first() {
        if w_preimages[q_count - 1].1 <= lambda_1 {
            return fail("last preimage does not dominate lambda_1".into());
        }
    }

    // Margins. epsilon follows the gap between the noise cluster and the
    // signal block: that gap hosts the contour's left side, so it is the
    // one that bounds how far poles can crowd the path. Gaps between
    // signal clusters lie inside the contour and do not constrain it.
    let epsilon = if q_count >= 2 {
        (0.25 * (clusters[1].0 - clusters[0].1)).min(0.5)
    } else {
        0.5
    };
    let delta = epsilon.max(0.25);
    let x1 = clusters[0];
    let t1 = ((x1.0 - epsilon).max(0.5 * x1.0), x1.1 + epsilon);
    let t2 = (q_count >= 2).then(|| (clusters[1].0 - epsilon, clusters[q_count - 1].1 + epsilon));

    let a1 = model.signal_rank() == 0 || q_count >= 2;
    let a2 = match model.lambda_min() {
        None => true,
        Some(lambda_k) => q_count >= 2 && lambda_k > w_preimages[0].1,
    };

    Ok(SpectralSupport {
        clusters,
        w_preimages,
        thresholds: Thresholds {
            t1,
            t2,
            epsilon,
            delta,
        },
        a1,
        a2,
    })
}

/// Spiked-regime summary: separation margin, spike limits `phi(lambda_k)`
/// with the Marchenko–Pastur `phi`, and the bulk edges.
pub fn spiked_pack(model: &SignalModel) -> SpikedSummary {
    let s2 = model.noise_variance();
    let c = model.ratio();
    let margin = model.lambda_min().map(|l| l - s2 * c.sqrt());
    let spike_limits = model.lambdas().iter().map(|&l| mp_phi(s2, c, l)).collect();
    SpikedSummary {
        sigma2: s2,
        c,
        margin,
        spike_limits,
        edges: (
            s2 * (1.0 - c.sqrt()).powi(2),
            s2 * (1.0 + c.sqrt()).powi(2),
        ),
    }
}

/// Marchenko–Pastur `phi(w) = (w + s2 c)(w + s2) / w`.
pub fn mp_phi(sigma2: f64, c: f64, w: f64) -> f64 {
    (w + sigma2 * c) * (w + sigma2) / w
}

impl SpikedSummary {
    /// Marchenko–Pastur branch `w(z)`: for real `z` outside the bulk the
    /// increasing real branch, inside the bulk the upper complex root.
    pub fn mp_w(&self, z: C64) -> Result<C64> {
        let (s2, c) = (self.sigma2, self.c);
        let b = C64::new(s2 * (1.0 + c), 0.0) - z;
        let disc = b * b - C64::new(4.0 * s2 * s2 * c, 0.0);
        let root = disc.sqrt();
        let (w1, w2) = ((-b + root) / 2.0, (-b - root) / 2.0);
        let zscale = z.norm().max(1.0);
        if z.im.abs() > 1e-13 * zscale {
            let sgn = z.im.signum();
            return [w1, w2]
                .into_iter()
                .find(|w| w.im * sgn > 0.0)
                .ok_or_else(|| Error::Numerical(format!("no complex MP branch at z = {z}")));
        }
        let x = z.re;
        let (lo, hi) = self.edges;
        if x >= lo - BOUNDARY_TOL && x <= hi + BOUNDARY_TOL {
            let upper = if w1.im > 0.0 { w1 } else { w2 };
            if upper.im <= 0.0 {
                return Err(Error::SupportBoundary(format!(
                    "z = {x} on the Marchenko-Pastur boundary"
                )));
            }
            return Ok(upper);
        }
        let (wa, wb) = (w1.re, w2.re);
        Ok(if x > hi {
            C64::new(wa.max(wb), 0.0)
        } else {
            C64::new(wa.min(wb), 0.0)
        })
    }

    /// Marchenko–Pastur Stieltjes transform via `m = -1 / (w + s2 c)`.
    pub fn mp_m(&self, z: C64) -> Result<C64> {
        let w = self.mp_w(z)?;
        Ok(-C64::new(1.0, 0.0) / (w + C64::new(self.sigma2 * self.c, 0.0)))
    }

    /// Limit kernel determinant `Delta(z1, z2) = 1 - s4 c / (w(z1) w(z2))`.
    pub fn mp_delta(&self, z1: C64, z2: C64) -> Result<C64> {
        let w1 = self.mp_w(z1)?;
        let w2 = self.mp_w(z2)?;
        Ok(C64::new(1.0, 0.0) - C64::new(self.sigma2 * self.sigma2 * self.c, 0.0) / (w1 * w2))
    }

    /// Real increasing branch `w(x) > s2 sqrt(c)` above the bulk; the
    /// domain of the simplified-estimator weight.
    pub fn mp_w_above(&self, x: f64) -> Result<f64> {
        if x <= self.edges.1 {
            return Err(Error::InvalidInput(format!(
                "w(x) above the bulk needs x > {:.6}, got {x}",
                self.edges.1
            )));
        }
        let w = self.mp_w(C64::new(x, 0.0))?;
        Ok(w.re)
    }

    /// Weight `h(x) = w (w + s2 c) / (w^2 - s4 c)` applied to each signal
    /// sample eigenvalue by the fixed-rank simplified estimator.
    pub fn h_weight(&self, x: f64) -> Result<f64> {
        let w = self.mp_w_above(x)?;
        let s4c = self.sigma2 * self.sigma2 * self.c;
        Ok(w * (w + self.sigma2 * self.c) / (w * w - s4c))
    }
}
