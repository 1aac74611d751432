//! Second-order theory: variance coefficients and the 2x2 fluctuation
//! covariance of the subspace estimators.
//!
//! The estimation error obeys a CLT whose variance decomposes over pairs
//! of eigenvectors of `B B^*`:
//!
//! ```text
//! vartheta(k, l) = (s2/2) (1/2 pi i)^2 oint oint
//!     theta_kl(z1, z2) w'(z1) w'(z2) dz1 dz2
//!     / [ (lam_k - w(z1))(lam_l - w(z1))(lam_k - w(z2))(lam_l - w(z2)) Delta(z1, z2) ]
//! ```
//!
//! with `theta_kl` built from three trace kernels (`u`, `v`, `v~`) and
//! `Delta = (1 - u)^2 - z1 z2 v v~`. For the traditional estimator the
//! `w'(z1) w'(z2)` factor becomes `g(z1) g(z2)` with `g = 1 + s2 c m`.
//! Fixed-rank closed forms exist for both. The coefficients only depend
//! on `(lam_k, lam_l)`, and all noise indices share `lam = 0`, so the
//! whole M x M table collapses to one value per pair of eigenvalue
//! classes (the K signal eigenvalues plus one noise class), and the
//! noise-block contractions of the probe vectors collapse to
//! `I - U U^*` projections.

use serde::Serialize;

use crate::contour::RectContour;
use crate::error::{Error, Result};
use crate::model::{SignalModel, SubspaceQuery};
use crate::spectrum::{AsymptoticSpectrum, WPoint};
use crate::C64;

/// Relative agreement required between the two evaluations of `Delta`.
const DELTA_CROSS_TOL: f64 = 1e-6;

/// Relative tolerance for node-doubling stability of the double integral.
const DOUBLE_QUAD_TOL: f64 = 1e-6;

/// Imaginary residue allowed in a variance coefficient before it is
/// discarded as real.
const VARTHETA_IMAG_TOL: f64 = 1e-8;

/// Trace kernels and determinant at a pair of contour points.
#[derive(Clone, Copy, Debug)]
pub struct KernelPack {
    pub z1: C64,
    pub z2: C64,
    pub u: C64,
    pub v: C64,
    pub vtilde: C64,
    /// Proof-side kernels, kept only for the identity `s + r = z1 z2 v~`.
    pub s: C64,
    pub r: C64,
    /// `Delta` by its definition `(1-u)^2 - z1 z2 v v~`.
    pub delta: C64,
    /// `Delta` by the quotient identity `(z1-z2)/(w1-w2)` (or `1/w'` on
    /// the diagonal); cross-checked against `delta`.
    pub delta_quotient: C64,
    /// z-dependent factors of `theta_kl`: `theta_kl = theta_tt
    /// + lam_k lam_l theta_vv + (lam_k + lam_l) theta_u`.
    pub theta_tt: C64,
    pub theta_vv: C64,
    pub theta_u: C64,
}

impl KernelPack {
    /// `theta_kl(z1, z2)` for a pair of eigenvalues.
    pub fn theta(&self, lam_k: f64, lam_l: f64) -> C64 {
        self.theta_tt + self.theta_vv * (lam_k * lam_l) + self.theta_u * (lam_k + lam_l)
    }
}

/// Evaluates every kernel at `(z1, z2)` from precomputed branch points,
/// cross-checking the two routes to `Delta`.
pub fn kernel_pack(model: &SignalModel, p1: &WPoint, p2: &WPoint) -> Result<KernelPack> {
    let pack = kernel_pack_unchecked(model, p1, p2);
    let scale = pack.delta.norm().max(1.0);
    if (pack.delta - pack.delta_quotient).norm() > DELTA_CROSS_TOL * scale {
        return Err(Error::Numerical(format!(
            "Delta cross-check failed at ({}, {}): {} vs {}",
            p1.z, p2.z, pack.delta, pack.delta_quotient
        )));
    }
    Ok(pack)
}

fn kernel_pack_unchecked(model: &SignalModel, p1: &WPoint, p2: &WPoint) -> KernelPack {
    let s2 = model.noise_variance();
    let n = model.sample_count() as f64;
    let m_dim = model.observation_dim();
    let k = model.signal_rank();
    let per = s2 / n;

    let (w1, w2) = (p1.w, p2.w);
    let (g1, g2) = (p1.g, p2.g);
    let (gt1, gt2) = (p1.gtilde, p2.gtilde);

    let mut cross = C64::new(0.0, 0.0); // sum mult / ((lam - w1)(lam - w2))
    let mut cross_l = C64::new(0.0, 0.0); // sum mult lam / (...)
    let mut cross_ll = C64::new(0.0, 0.0); // sum mult lam^2 / (...)
    let mut tr1 = C64::new(0.0, 0.0); // sum mult lam / (lam - w1)
    let mut tr2 = C64::new(0.0, 0.0); // sum mult lam / (lam - w2)
    for (lam, mult) in model.distinct_lambdas() {
        let mult = mult as f64;
        let d1 = C64::new(lam, 0.0) - w1;
        let d2 = C64::new(lam, 0.0) - w2;
        let inv = C64::new(mult, 0.0) / (d1 * d2);
        cross += inv;
        cross_l += inv * lam;
        cross_ll += inv * (lam * lam);
        tr1 += C64::new(mult * lam, 0.0) / d1;
        tr2 += C64::new(mult * lam, 0.0) / d2;
    }
    let inv_w1w2 = C64::new(1.0, 0.0) / (w1 * w2);

    let u = cross_l * per;
    let v = (cross + inv_w1w2 * (m_dim - k) as f64) * g1 * g2 * per;
    let vtilde = (cross + inv_w1w2 * (n - k as f64)) * gt1 * gt2 * per;
    let s = (C64::new(n, 0.0) - tr1 - tr2) * per / (g1 * g2);
    let r = cross_ll * per / (g1 * g2);

    let one = C64::new(1.0, 0.0);
    let delta = (one - u) * (one - u) - p1.z * p2.z * v * vtilde;
    let dz = p1.z - p2.z;
    let delta_quotient = if dz.norm() < 1e-6 * p1.z.norm().max(1.0) {
        // Diagonal limit of the quotient identity.
        one / p1.wprime
    } else {
        dz / (w1 - w2)
    };

    KernelPack {
        z1: p1.z,
        z2: p2.z,
        u,
        v,
        vtilde,
        s,
        r,
        delta,
        delta_quotient,
        theta_tt: p1.z * p2.z * g1 * g2 * vtilde,
        theta_vv: v / (g1 * g2),
        theta_u: one - u,
    }
}

/// Checks the kernel identities that hold on the contour; used by the
/// integrator's validation mode and by the acceptance suite.
pub fn validate_kernel_identities(pack: &KernelPack) -> Result<()> {
    let scale = (pack.z1.norm() * pack.z2.norm() * pack.vtilde.norm()).max(1.0);
    let lhs = pack.s + pack.r;
    let rhs = pack.z1 * pack.z2 * pack.vtilde;
    if (lhs - rhs).norm() > 1e-9 * scale {
        return Err(Error::Numerical(format!(
            "kernel identity s + r = z1 z2 v~ violated: {lhs} vs {rhs}"
        )));
    }
    if pack.u.norm() >= 1.0 {
        return Err(Error::Numerical(format!("|u| = {} >= 1", pack.u.norm())));
    }
    let one = C64::new(1.0, 0.0);
    let ratio = pack.delta / ((one - pack.u) * (one - pack.u));
    if (ratio - one).norm() >= 1.0 {
        return Err(Error::Numerical(format!(
            "series bound |Delta/(1-u)^2 - 1| = {} >= 1",
            (ratio - one).norm()
        )));
    }
    Ok(())
}

/// Which variance coefficient family a table holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    /// Improved estimator, double contour quadrature at finite (M, N).
    Numeric,
    /// Improved estimator, fixed-rank closed form.
    SpikedClosed,
    /// Traditional estimator, double contour quadrature.
    TradNumeric,
    /// Traditional estimator, fixed-rank closed forms.
    TradClosed,
}

impl VarianceMethod {
    pub fn is_numeric(self) -> bool {
        matches!(self, VarianceMethod::Numeric | VarianceMethod::TradNumeric)
    }
}

/// Symmetric table of variance coefficients over eigenvalue classes:
/// indices `0..K` are the signal eigenvalues (descending), index `K` is
/// the shared noise class (`lam = 0`).
#[derive(Clone, Debug, Serialize)]
pub struct VarianceTable {
    pub method: VarianceMethod,
    /// Class eigenvalues: the K signal values then 0.
    pub class_lambdas: Vec<f64>,
    /// Row-major (K+1) x (K+1) symmetric matrix.
    pub values: Vec<Vec<f64>>,
    /// Nodes per side used by the numeric methods (0 for closed forms).
    pub nodes_per_side: usize,
}

impl VarianceTable {
    fn class_of(&self, index: usize, model: &SignalModel) -> Result<usize> {
        let m = model.observation_dim();
        let k = model.signal_rank();
        if index == 0 || index > m {
            return Err(Error::InvalidInput(format!(
                "eigenvalue index {index} out of range 1..={m}"
            )));
        }
        Ok(if index <= k { index - 1 } else { k })
    }

    /// Coefficient for 1-based eigenvalue indices `1..=M`.
    pub fn get(&self, model: &SignalModel, k: usize, l: usize) -> Result<f64> {
        let a = self.class_of(k, model)?;
        let b = self.class_of(l, model)?;
        Ok(self.values[a][b])
    }

    /// Coefficient for class indices `0..=K`.
    pub fn class_value(&self, a: usize, b: usize) -> f64 {
        self.values[a][b]
    }

    pub fn class_count(&self) -> usize {
        self.class_lambdas.len()
    }
}

/// Double-contour integrator with per-node branch data shared across all
/// requested eigenvalue pairs.
pub struct VarianceIntegrator<'a> {
    spectrum: &'a AsymptoticSpectrum,
    contour: RectContour,
    /// Re-checks the kernel identities at every node pair.
    pub validate: bool,
}

impl<'a> VarianceIntegrator<'a> {
    pub fn new(spectrum: &'a AsymptoticSpectrum, contour: &RectContour) -> Self {
        VarianceIntegrator {
            spectrum,
            contour: contour.clone(),
            validate: false,
        }
    }

    /// One pass at a fixed node count: all `(lam_k, lam_l)` pairs at once.
    fn pass(&self, nodes_per_side: usize, pairs: &[(f64, f64)], trad: bool) -> Result<Vec<C64>> {
        let contour = self.contour.with_nodes(nodes_per_side)?;
        let nodes = contour.nodes();
        let model = self.spectrum.model();
        let points: Vec<WPoint> = nodes
            .iter()
            .map(|&(z, _)| self.spectrum.w_point(z))
            .collect::<Result<_>>()?;

        // Symmetric double sum: i <= j with off-diagonal doubling. The
        // integrand is symmetric under z1 <-> z2 for every pair.
        use rayon::prelude::*;
        let rows: Vec<Vec<C64>> = (0..nodes.len())
            .into_par_iter()
            .map(|i| {
                let mut acc = vec![C64::new(0.0, 0.0); pairs.len()];
                let pi = &points[i];
                let wi = nodes[i].1;
                for j in i..nodes.len() {
                    let pj = &points[j];
                    let pack = kernel_pack_unchecked(model, pi, pj);
                    if self.validate {
                        validate_kernel_identities(&pack)?;
                        let scale = pack.delta.norm().max(1.0);
                        if (pack.delta - pack.delta_quotient).norm() > DELTA_CROSS_TOL * scale {
                            return Err(Error::Numerical(
                                "Delta cross-check failed inside the double integral".into(),
                            ));
                        }
                    }
                    let factor = if trad {
                        pi.g * pj.g
                    } else {
                        pi.wprime * pj.wprime
                    };
                    let base = wi * nodes[j].1 * factor / pack.delta;
                    let multiplier = if i == j { 1.0 } else { 2.0 };
                    for (p, &(lk, ll)) in pairs.iter().enumerate() {
                        let denom = (C64::new(lk, 0.0) - pi.w)
                            * (C64::new(ll, 0.0) - pi.w)
                            * (C64::new(lk, 0.0) - pj.w)
                            * (C64::new(ll, 0.0) - pj.w);
                        acc[p] += base * pack.theta(lk, ll) * multiplier / denom;
                    }
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;

        // Deterministic reduction in node order.
        let mut totals = vec![C64::new(0.0, 0.0); pairs.len()];
        for row in rows {
            for (t, v) in totals.iter_mut().zip(row) {
                *t += v;
            }
        }
        // (s2/2) (1/2 pi i)^2 = -(s2/2) / (4 pi^2).
        let norm = -model.noise_variance() / (8.0 * std::f64::consts::PI * std::f64::consts::PI);
        Ok(totals.into_iter().map(|t| t * norm).collect())
    }

    /// Node-doubled evaluation of the coefficients for eigenvalue pairs,
    /// real parts returned after the imaginary-residue check.
    pub fn vartheta_pairs(&self, pairs: &[(f64, f64)], trad: bool) -> Result<Vec<f64>> {
        let mut n = self.contour.nodes_per_side.max(32);
        let mut prev: Option<Vec<C64>> = None;
        loop {
            let vals = self.pass(n, pairs, trad)?;
            if let Some(p) = prev {
                let stable = vals
                    .iter()
                    .zip(&p)
                    .all(|(a, b)| (a - b).norm() <= DOUBLE_QUAD_TOL * a.norm().max(1e-12));
                if stable {
                    return vals
                        .into_iter()
                        .map(|v| {
                            if v.im.abs() > VARTHETA_IMAG_TOL * v.norm().max(1.0) {
                                Err(Error::Numerical(format!(
                                    "variance coefficient has imaginary residue {v}"
                                )))
                            } else {
                                Ok(v.re)
                            }
                        })
                        .collect();
                }
            }
            prev = Some(vals);
            n *= 2;
            if n > 1024 {
                return Err(Error::Numerical(
                    "double contour integral did not stabilize".into(),
                ));
            }
        }
    }
}

fn lambda_of_index(model: &SignalModel, index: usize) -> Result<f64> {
    let m = model.observation_dim();
    if index == 0 || index > m {
        return Err(Error::InvalidInput(format!(
            "eigenvalue index {index} out of range 1..={m}"
        )));
    }
    Ok(if index <= model.signal_rank() {
        model.lambdas()[index - 1]
    } else {
        0.0
    })
}

/// Improved-estimator variance coefficient by double contour quadrature,
/// for 1-based eigenvalue indices (`lam = 0` beyond the signal rank).
pub fn vartheta_numeric(
    spectrum: &AsymptoticSpectrum,
    contour: &RectContour,
    k: usize,
    l: usize,
) -> Result<f64> {
    let model = spectrum.model();
    let pair = (lambda_of_index(model, k)?, lambda_of_index(model, l)?);
    Ok(VarianceIntegrator::new(spectrum, contour).vartheta_pairs(&[pair], false)?[0])
}

/// Traditional-estimator variance coefficient by double contour quadrature.
pub fn vartheta_trad_numeric(
    spectrum: &AsymptoticSpectrum,
    contour: &RectContour,
    k: usize,
    l: usize,
) -> Result<f64> {
    let model = spectrum.model();
    let pair = (lambda_of_index(model, k)?, lambda_of_index(model, l)?);
    Ok(VarianceIntegrator::new(spectrum, contour).vartheta_pairs(&[pair], true)?[0])
}

fn require_spiked_margin(model: &SignalModel, lam: f64) -> Result<()> {
    let s4c = model.noise_variance().powi(2) * model.ratio();
    if lam > 0.0 && lam * lam <= s4c {
        return Err(Error::Separation(format!(
            "eigenvalue {lam} below the fixed-rank separation threshold (lam^2 <= s4 c)"
        )));
    }
    Ok(())
}

/// Fixed-rank closed form of the improved-estimator coefficient.
pub fn vartheta_spiked(model: &SignalModel, k: usize, l: usize) -> Result<f64> {
    let lam_k = lambda_of_index(model, k)?;
    let lam_l = lambda_of_index(model, l)?;
    require_spiked_margin(model, lam_k)?;
    require_spiked_margin(model, lam_l)?;
    if lam_k == 0.0 && lam_l == 0.0 {
        // The indicator kills noise-noise pairs in the limit.
        return Ok(0.0);
    }
    let s2 = model.noise_variance();
    let s4 = s2 * s2;
    let s4c = s4 * model.ratio();
    let num = s4c * (lam_k * lam_l + (lam_k + lam_l) * s2 + s4) * (lam_k * lam_l + s4c);
    let den =
        2.0 * (lam_k * lam_k - s4c) * (lam_l * lam_l - s4c) * (lam_k * lam_l - s4c);
    Ok(num / den)
}

/// Fixed-rank closed forms of the traditional-estimator coefficient
/// (three regimes: noise-noise vanishes, one mixed form, one
/// signal-signal form). `c_N` is used throughout, including the last
/// term of the signal-signal polynomial.
pub fn vartheta_trad_closed(model: &SignalModel, k: usize, l: usize) -> Result<f64> {
    let lam_k = lambda_of_index(model, k)?;
    let lam_l = lambda_of_index(model, l)?;
    require_spiked_margin(model, lam_k)?;
    require_spiked_margin(model, lam_l)?;
    let s2 = model.noise_variance();
    let c = model.ratio();
    let s4 = s2 * s2;
    let s4c = s4 * c;
    match (lam_k > 0.0, lam_l > 0.0) {
        (false, false) => Ok(0.0),
        (true, false) | (false, true) => {
            let lam = lam_k.max(lam_l);
            Ok(s2 * (lam + s2) * (lam * lam - s4c)
                / (2.0 * lam * lam * (lam + s2 * c).powi(2)))
        }
        (true, true) => {
            let prod = lam_k * lam_l;
            let sum = lam_k + lam_l;
            let chi = prod * (prod + s2 * sum + s4) * ((1.0 + c) * (prod + s4c) + 2.0 * s2 * c * sum)
                - c * (prod - s4c) * (prod + s2 * sum + s4c).powi(2);
            Ok(s4c * chi
                / (2.0
                    * prod
                    * (lam_k + s2 * c).powi(2)
                    * (lam_l + s2 * c).powi(2)
                    * (prod - s4c)))
        }
    }
}

/// Builds the full class table for one method. Numeric methods reuse a
/// single pass over the node pairs for every class pair.
#[allow(clippy::needless_range_loop)]
pub fn variance_table(
    spectrum: &AsymptoticSpectrum,
    contour: Option<&RectContour>,
    method: VarianceMethod,
    nodes_override: Option<usize>,
) -> Result<VarianceTable> {
    let model = spectrum.model();
    let k = model.signal_rank();
    let mut class_lambdas: Vec<f64> = model.lambdas().to_vec();
    class_lambdas.push(0.0);
    let n_classes = k + 1;

    let mut values = vec![vec![0.0; n_classes]; n_classes];
    match method {
        VarianceMethod::Numeric | VarianceMethod::TradNumeric => {
            let contour = contour.ok_or_else(|| {
                Error::InvalidInput("numeric variance methods need a contour".into())
            })?;
            let contour = match nodes_override {
                Some(n) => contour.with_nodes(n)?,
                None => contour.clone(),
            };
            // Deduplicate by eigenvalue pair: tied eigenvalues share a
            // coefficient.
            let mut uniq: Vec<(f64, f64)> = Vec::new();
            let mut index_of = vec![vec![0usize; n_classes]; n_classes];
            for a in 0..n_classes {
                for b in a..n_classes {
                    let pair = (class_lambdas[a], class_lambdas[b]);
                    let pos = uniq
                        .iter()
                        .position(|&(x, y)| {
                            (x - pair.0).abs() < 1e-12 && (y - pair.1).abs() < 1e-12
                        })
                        .unwrap_or_else(|| {
                            uniq.push(pair);
                            uniq.len() - 1
                        });
                    index_of[a][b] = pos;
                    index_of[b][a] = pos;
                }
            }
            let integrator = VarianceIntegrator::new(spectrum, &contour);
            let vals =
                integrator.vartheta_pairs(&uniq, method == VarianceMethod::TradNumeric)?;
            for a in 0..n_classes {
                for b in 0..n_classes {
                    values[a][b] = vals[index_of[a][b]];
                }
            }
        }
        VarianceMethod::SpikedClosed | VarianceMethod::TradClosed => {
            let m_dim = model.observation_dim();
            for a in 0..n_classes {
                for b in 0..n_classes {
                    // Class -> a representative 1-based index.
                    let ia = if a < k { a + 1 } else { m_dim };
                    let ib = if b < k { b + 1 } else { m_dim };
                    values[a][b] = if method == VarianceMethod::SpikedClosed {
                        vartheta_spiked(model, ia, ib)?
                    } else {
                        vartheta_trad_closed(model, ia, ib)?
                    };
                }
            }
        }
    }

    // Non-negativity and symmetry.
    for a in 0..n_classes {
        for b in 0..n_classes {
            if values[a][b] < -1e-10 {
                return Err(Error::Numerical(format!(
                    "negative variance coefficient {} at class pair ({a}, {b})",
                    values[a][b]
                )));
            }
            let gap = (values[a][b] - values[b][a]).abs();
            if gap > 1e-9 * values[a][b].abs().max(1e-12) {
                return Err(Error::Numerical(format!(
                    "asymmetric variance table at class pair ({a}, {b})"
                )));
            }
        }
    }

    Ok(VarianceTable {
        method,
        class_lambdas,
        values,
        nodes_per_side: match method {
            VarianceMethod::Numeric | VarianceMethod::TradNumeric => {
                nodes_override.unwrap_or_else(|| contour.map_or(0, |c| c.nodes_per_side))
            }
            _ => 0,
        },
    })
}

/// Probe projections aggregated per eigenvalue class (signal eigenvectors
/// individually; the whole noise eigenspace as `I - U U^*` contractions).
#[derive(Clone, Debug, Serialize)]
pub struct ProjectedQuery {
    pub eta11: Vec<f64>,
    pub eta22: Vec<f64>,
    #[serde(skip)]
    pub eta12: Vec<C64>,
}

/// The assembled 2x2 covariance of `[Re, -Im]` fluctuations.
#[derive(Clone, Debug, Serialize)]
pub struct CovarianceAssembly {
    pub gamma: [[f64; 2]; 2],
    pub projections: ProjectedQuery,
    /// Verdict of the non-singularity condition
    /// `sum vt eta11 eta22 - |sum vt eta12 eta12| > 0`.
    pub nondegenerate: bool,
}

fn gamma_pair(
    proj: &ProjectedQuery,
    a: usize,
    b: usize,
) -> [[f64; 2]; 2] {
    let cross = proj.eta12[a] * proj.eta12[b];
    let diag = 0.5 * (proj.eta11[a] * proj.eta22[b] + proj.eta11[b] * proj.eta22[a]);
    [
        [cross.re + diag, -cross.im],
        [-cross.im, -cross.re + diag],
    ]
}

/// Per-class probe projections for a query.
pub fn project_query(model: &SignalModel, query: &SubspaceQuery) -> ProjectedQuery {
    let k = model.signal_rank();
    let u = model.eigenvectors();
    let mut eta11 = Vec::with_capacity(k + 1);
    let mut eta22 = Vec::with_capacity(k + 1);
    let mut eta12 = Vec::with_capacity(k + 1);
    let mut sum11 = 0.0;
    let mut sum22 = 0.0;
    let mut sum12 = C64::new(0.0, 0.0);
    for j in 0..k {
        let col = u.column(j);
        let a: C64 = col.iter().zip(query.d1.iter()).map(|(u, d)| u.conj() * d).sum();
        let b: C64 = col.iter().zip(query.d2.iter()).map(|(u, d)| u.conj() * d).sum();
        let e11 = a.norm_sqr();
        let e22 = b.norm_sqr();
        let e12 = a.conj() * b;
        eta11.push(e11);
        eta22.push(e22);
        eta12.push(e12);
        sum11 += e11;
        sum22 += e22;
        sum12 += e12;
    }
    // Noise class: I - U U^* contractions.
    eta11.push((query.d1.norm_squared() - sum11).max(0.0));
    eta22.push((query.d2.norm_squared() - sum22).max(0.0));
    eta12.push(query.d1.dotc(&query.d2) - sum12);
    ProjectedQuery { eta11, eta22, eta12 }
}

/// Assembles `Gamma = sum_{k,l} vartheta(k,l) Gamma(k,l)` over classes.
#[allow(clippy::needless_range_loop)]
pub fn gamma_assemble(
    model: &SignalModel,
    query: &SubspaceQuery,
    table: &VarianceTable,
) -> Result<CovarianceAssembly> {
    let n_classes = model.signal_rank() + 1;
    if table.class_count() != n_classes {
        return Err(Error::DimensionMismatch(format!(
            "variance table has {} classes, model wants {n_classes}",
            table.class_count()
        )));
    }
    let proj = project_query(model, query);
    let mut gamma = [[0.0f64; 2]; 2];
    let mut s_diag = 0.0;
    let mut s_cross = C64::new(0.0, 0.0);
    for a in 0..n_classes {
        for b in 0..n_classes {
            let vt = table.class_value(a, b);
            let g = gamma_pair(&proj, a, b);
            for (row, grow) in gamma.iter_mut().zip(&g) {
                for (cell, val) in row.iter_mut().zip(grow) {
                    *cell += vt * val;
                }
            }
            s_diag += vt * proj.eta11[a] * proj.eta22[b];
            s_cross += (proj.eta12[a] * proj.eta12[b]) * vt;
        }
    }
    let nondegenerate = s_diag - s_cross.norm() > 1e-12 * s_diag.abs().max(1e-300);
    Ok(CovarianceAssembly {
        gamma,
        projections: proj,
        nondegenerate,
    })
}

/// Predicted second-order behaviour of the statistic
/// `sqrt(N) Re(xi (eta_hat - eta))`.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct MsePrediction {
    /// `xi^T Gamma xi`: variance on the `sqrt(N)` scale.
    pub variance: f64,
    /// Raw mean-square error of `Re(xi (eta_hat - eta))` at this `N`.
    pub mse: f64,
    pub nondegenerate: bool,
}

/// Evaluates `xi^T Gamma xi` for `xi = [Re(xi), Im(xi)]`.
pub fn mse_predict(assembly: &CovarianceAssembly, xi: C64, n: usize) -> MsePrediction {
    let v = [xi.re, xi.im];
    let mut variance = 0.0;
    for (i, vi) in v.iter().enumerate() {
        for (j, vj) in v.iter().enumerate() {
            variance += vi * vj * assembly.gamma[i][j];
        }
    }
    MsePrediction {
        variance,
        mse: variance / n as f64,
        nondegenerate: assembly.nondegenerate,
    }
}

/// Inverse square root of a symmetric positive definite 2x2 matrix.
pub fn gamma_inv_sqrt(gamma: &[[f64; 2]; 2]) -> Result<[[f64; 2]; 2]> {
    let (a, b, d) = (gamma[0][0], gamma[0][1], gamma[1][1]);
    let tr = a + d;
    let det = a * d - b * b;
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    let l1 = 0.5 * (tr + disc);
    let l2 = 0.5 * (tr - disc);
    if l2 <= 1e-14 * l1.max(1e-300) {
        return Err(Error::DegenerateVariance(format!(
            "fluctuation covariance is singular (eigenvalues {l1:.3e}, {l2:.3e})"
        )));
    }
    // Eigenvector for l1.
    let (c, s) = if b.abs() > 1e-300 {
        let t = l1 - a;
        let norm = (b * b + t * t).sqrt();
        (b / norm, t / norm)
    } else if a >= d {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let (f1, f2) = (1.0 / l1.sqrt(), 1.0 / l2.sqrt());
    Ok([
        [f1 * c * c + f2 * s * s, f1 * c * s - f2 * s * c],
        [f1 * c * s - f2 * s * c, f1 * s * s + f2 * c * c],
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contour::RectContour;
    use crate::model::SignalModel;
    use crate::spectrum::AsymptoticSpectrum;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn mp_spectrum() -> AsymptoticSpectrum {
        AsymptoticSpectrum::new(SignalModel::new(100, 200, 1.0, vec![], None).unwrap()).unwrap()
    }

    fn two_spike_spectrum() -> AsymptoticSpectrum {
        AsymptoticSpectrum::new(SignalModel::new(20, 40, 1.0, vec![6.0, 5.0], None).unwrap())
            .unwrap()
    }

    #[test]
    fn kernel_reference_marchenko_pastur() {
        // z1 = z2 = 3 in the pure-noise model: w = 1, Delta = 1 - s4 c/w^2
        // = 0.5 = 1/w'(3).
        let spec = mp_spectrum();
        let p = spec.w_point(C64::new(3.0, 0.0)).unwrap();
        let pack = kernel_pack(spec.model(), &p, &p).unwrap();
        assert_relative_eq!(pack.delta.re, 0.5, epsilon = 1e-9);
        assert_relative_eq!(pack.delta_quotient.re, 0.5, epsilon = 1e-9);
        assert!(pack.delta.im.abs() < 1e-12);
    }

    #[test]
    fn kernel_symmetry_and_identities() {
        let spec = two_spike_spectrum();
        let contour = RectContour::from_support(spec.support(), 16).unwrap();
        let nodes = contour.nodes();
        let mut checked = 0;
        for i in (0..nodes.len()).step_by(7) {
            for j in (0..nodes.len()).step_by(11) {
                let p1 = spec.w_point(nodes[i].0).unwrap();
                let p2 = spec.w_point(nodes[j].0).unwrap();
                let a = kernel_pack(spec.model(), &p1, &p2).unwrap();
                let b = kernel_pack(spec.model(), &p2, &p1).unwrap();
                assert!((a.u - b.u).norm() < 1e-12);
                assert!((a.v - b.v).norm() < 1e-12);
                assert!((a.vtilde - b.vtilde).norm() < 1e-12);
                assert!((a.delta - b.delta).norm() < 1e-12);
                validate_kernel_identities(&a).unwrap();
                // The determinant stays bounded and bounded away from zero
                // on the contour.
                assert!(a.delta.norm() > 0.02 && a.delta.norm() < 50.0);
                checked += 1;
            }
        }
        assert!(checked >= 30);
    }

    #[test]
    fn integrator_validation_mode_holds_at_every_pair() {
        // The kernel identities can be re-checked at every node pair of
        // the double integral; on a healthy scenario nothing trips.
        let spec = two_spike_spectrum();
        let contour = RectContour::from_support(spec.support(), 24).unwrap();
        let mut integrator = VarianceIntegrator::new(&spec, &contour);
        integrator.validate = true;
        let vals = integrator.vartheta_pairs(&[(6.0, 5.0), (0.0, 0.0)], false).unwrap();
        assert!(vals.iter().all(|v| *v > 0.0));
    }

    #[test]
    fn vartheta_spiked_reference_values() {
        let model = SignalModel::new(400, 800, 1.0, vec![5.0, 5.0], None).unwrap();
        // Both signal, lam = 5: 0.5 * 36 * 25.5 / (2 * 24.5^3).
        let v = vartheta_spiked(&model, 1, 2).unwrap();
        assert_relative_eq!(v, 0.5 * 36.0 * 25.5 / (2.0 * 24.5f64.powi(3)), epsilon = 1e-12);
        assert_relative_eq!(v, 0.0156057, epsilon = 1e-6);
        // Mixed signal-noise: s2 (lam + s2) / (2 (lam^2 - s4 c)) = 6/49.
        let v = vartheta_spiked(&model, 1, 400).unwrap();
        assert_relative_eq!(v, 6.0 / 49.0, epsilon = 1e-12);
        // Noise-noise: exactly zero in the limit.
        assert_eq!(vartheta_spiked(&model, 399, 400).unwrap(), 0.0);
        // Sub-threshold spike refuses.
        let sub = SignalModel::new(400, 800, 1.0, vec![0.5], None).unwrap();
        assert!(vartheta_spiked(&sub, 1, 1).is_err());
    }

    #[test]
    fn vartheta_trad_closed_reference_value() {
        let model = SignalModel::new(400, 800, 1.0, vec![5.0], None).unwrap();
        let v = vartheta_trad_closed(&model, 1, 2).unwrap();
        assert_relative_eq!(v, 6.0 * 24.5 / (2.0 * 25.0 * 30.25), epsilon = 1e-12);
        assert_relative_eq!(v, 0.0971901, epsilon = 1e-6);
        assert_eq!(vartheta_trad_closed(&model, 2, 3).unwrap(), 0.0);
    }

    #[test]
    fn vartheta_numeric_matches_symmetry_and_class_structure() {
        let spec = two_spike_spectrum();
        let contour = RectContour::from_support(spec.support(), 64).unwrap();
        let v12 = vartheta_numeric(&spec, &contour, 1, 2).unwrap();
        let v21 = vartheta_numeric(&spec, &contour, 2, 1).unwrap();
        assert_relative_eq!(v12, v21, epsilon = 1e-10);
        // Depends on indices only through the eigenvalues: any two noise
        // indices agree.
        let a = vartheta_numeric(&spec, &contour, 1, 19).unwrap();
        let b = vartheta_numeric(&spec, &contour, 1, 20).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
        assert!(v12 > 0.0 && a > 0.0);
    }

    #[test]
    fn variance_table_collapses_tied_eigenvalues() {
        let model = SignalModel::new(10, 20, 1.0, vec![10.0, 10.0, 10.0, 5.0, 5.0], None).unwrap();
        let spectrum = AsymptoticSpectrum::new(model).unwrap();
        let contour = RectContour::from_support(spectrum.support(), 48).unwrap();
        let table =
            variance_table(&spectrum, Some(&contour), VarianceMethod::Numeric, None).unwrap();
        // Classes 0,1,2 share lam = 10; classes 3,4 share lam = 5.
        assert_relative_eq!(table.class_value(0, 3), table.class_value(2, 4), epsilon = 1e-12);
        assert_relative_eq!(table.class_value(0, 0), table.class_value(1, 2), epsilon = 1e-12);
        let model = spectrum.model();
        // 1-based index lookup maps beyond-K to the noise class.
        let v = table.get(model, 6, 10).unwrap();
        assert_relative_eq!(v, table.class_value(5, 5), epsilon = 1e-15);
    }

    #[test]
    fn gamma_reference_shapes() {
        let model = SignalModel::new(20, 40, 1.0, vec![6.0, 5.0], None).unwrap();
        let spectrum = AsymptoticSpectrum::new(model.clone()).unwrap();
        let contour = RectContour::from_support(spectrum.support(), 48).unwrap();
        let table =
            variance_table(&spectrum, Some(&contour), VarianceMethod::Numeric, None).unwrap();

        // d1 = d2 = u_1: only the first signal class contributes and
        // Gamma = vartheta(1,1) [[2, 0], [0, 0]].
        let u1 = DVector::from_fn(20, |i, _| model.eigenvectors()[(i, 0)]);
        let q = SubspaceQuery::new(u1.clone(), u1, C64::new(1.0, 0.0)).unwrap();
        let asm = gamma_assemble(&model, &q, &table).unwrap();
        let vt = table.class_value(0, 0);
        assert_relative_eq!(asm.gamma[0][0], 2.0 * vt, epsilon = 1e-12);
        assert!(asm.gamma[0][1].abs() < 1e-14 && asm.gamma[1][1].abs() < 1e-14);

        // d = e_M with canonical eigenvectors: only the noise class
        // contributes, Gamma = 2 vartheta(M,M) e1 e1^T.
        let q = SubspaceQuery::canonical(20, 20, 20).unwrap();
        let asm = gamma_assemble(&model, &q, &table).unwrap();
        let vt_nn = table.get(&model, 20, 20).unwrap();
        assert_relative_eq!(asm.gamma[0][0], 2.0 * vt_nn, epsilon = 1e-12);
        assert!(asm.gamma[1][1].abs() < 1e-14);

        let pred = mse_predict(&asm, C64::new(1.0, 0.0), 40);
        assert_relative_eq!(pred.variance, 2.0 * vt_nn, epsilon = 1e-12);
        assert_relative_eq!(pred.mse, pred.variance / 40.0, epsilon = 1e-15);
        // xi = i picks the (vanishing) second diagonal entry.
        let pred_i = mse_predict(&asm, C64::new(0.0, 1.0), 40);
        assert!(pred_i.variance.abs() < 1e-14);
    }

    #[test]
    fn gamma_pairs_nonnegative_definite() {
        let model = SignalModel::new(20, 40, 1.0, vec![6.0, 5.0], None).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let d1 = DVector::from_fn(20, |_, _| {
                C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            });
            let d2 = DVector::from_fn(20, |_, _| {
                C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            });
            let q = SubspaceQuery::new(d1, d2, C64::new(1.0, 0.0)).unwrap();
            let proj = project_query(&model, &q);
            for a in 0..proj.eta11.len() {
                for b in 0..proj.eta11.len() {
                    let g = gamma_pair(&proj, a, b);
                    let tr = g[0][0] + g[1][1];
                    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
                    assert!(tr >= -1e-12, "trace {tr}");
                    assert!(det >= -1e-12, "det {det}");
                }
            }
        }
    }

    #[test]
    fn noise_eigenvector_query_has_vanishing_spiked_variance() {
        // d = u_M: under the fixed-rank table the noise-noise coefficient
        // is exactly zero, so the predicted variance vanishes.
        let model = SignalModel::new(20, 40, 1.0, vec![6.0, 5.0], None).unwrap();
        let spectrum = AsymptoticSpectrum::new(model.clone()).unwrap();
        let table = variance_table(&spectrum, None, VarianceMethod::SpikedClosed, None).unwrap();
        let q = SubspaceQuery::canonical(20, 20, 20).unwrap();
        let asm = gamma_assemble(&model, &q, &table).unwrap();
        let pred = mse_predict(&asm, C64::new(1.0, 0.0), 40);
        assert_eq!(pred.variance, 0.0);
        assert!(!asm.nondegenerate);
    }

    #[test]
    fn gamma_inv_sqrt_roundtrip() {
        let gamma = [[2.0, 0.3], [0.3, 0.5]];
        let w = gamma_inv_sqrt(&gamma).unwrap();
        // w * gamma * w = I.
        let mut prod = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for a in 0..2 {
                    for b in 0..2 {
                        prod[i][j] += w[i][a] * gamma[a][b] * w[b][j];
                    }
                }
            }
        }
        assert_relative_eq!(prod[0][0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(prod[1][1], 1.0, epsilon = 1e-12);
        assert!(prod[0][1].abs() < 1e-12);
        assert!(gamma_inv_sqrt(&[[1.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn lower_bounds_hold_at_reference_scenario() {
        // Closed-form lower bounds for the three index regimes.
        let spec = two_spike_spectrum();
        let contour = RectContour::from_support(spec.support(), 64).unwrap();
        let (m, n, k) = (20.0, 40.0, 2.0);

        let v = vartheta_numeric(&spec, &contour, 1, 2).unwrap();
        let bound = (m - k) / n / (2.0 * 6.0 * 5.0);
        assert!(v >= bound - 1e-9, "signal-signal {v} >= {bound}");

        let v = vartheta_numeric(&spec, &contour, 19, 20).unwrap();
        let bound = 1.0 / (2.0 * n) * (1.0 / 36.0 + 1.0 / 25.0);
        assert!(v >= bound - 1e-9, "noise-noise {v} >= {bound}");

        let v = vartheta_numeric(&spec, &contour, 1, 20).unwrap();
        let bound = 1.0 / (2.0 * 6.0);
        assert!(v >= bound - 1e-9, "mixed {v} >= {bound}");
    }

    #[test]
    fn spiked_and_numeric_agree_at_large_dimensions() {
        let model = SignalModel::new(200, 400, 1.0, vec![10.0, 5.0], None).unwrap();
        let spectrum = AsymptoticSpectrum::new(model.clone()).unwrap();
        let contour = RectContour::from_support(spectrum.support(), 96).unwrap();
        for (k, l) in [(1, 1), (1, 2), (2, 2), (1, 200)] {
            let numeric = vartheta_numeric(&spectrum, &contour, k, l).unwrap();
            let closed = vartheta_spiked(&model, k, l).unwrap();
            assert!(
                (numeric - closed).abs() <= 0.05 * closed.abs(),
                "({k},{l}): numeric {numeric} vs closed {closed}"
            );
        }
    }
}
