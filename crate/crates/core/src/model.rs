//! Signal-plus-noise model: deterministic structure, random realizations,
//! and the exact noise-subspace localization function.
//!
//! The observation matrix is `Sigma = B + W` with `B` a deterministic rank-K
//! "information" matrix and `W` i.i.d. complex Gaussian noise with per-entry
//! variance `sigma^2 / N`. `B` is represented by the eigenstructure of
//! `B B^*` only — the signal eigenvalues `lambda_1 >= ... >= lambda_K > 0`
//! and their orthonormal eigenvectors — since every downstream formula
//! depends on `B` solely through that pair.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::C64;

/// Orthonormality tolerance for the signal eigenvector block.
const ORTHO_TOL: f64 = 1e-12;

/// Deterministic side of the information-plus-noise model.
#[derive(Clone, Debug)]
pub struct SignalModel {
    m: usize,
    n: usize,
    sigma2: f64,
    /// Signal eigenvalues of `B B^*`, sorted descending, all positive.
    lambdas: Vec<f64>,
    /// M x K matrix of orthonormal signal eigenvectors.
    u: DMatrix<C64>,
}

impl SignalModel {
    /// Validates and builds a model. `eigenvectors = None` selects the
    /// canonical choice (first K basis vectors); an explicit matrix must be
    /// M x K with orthonormal columns.
    pub fn new(
        m: usize,
        n: usize,
        sigma2: f64,
        mut lambdas: Vec<f64>,
        eigenvectors: Option<DMatrix<C64>>,
    ) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidModel("M and N must be positive".into()));
        }
        if m >= n {
            return Err(Error::InvalidModel(format!(
                "need M < N (sample ratio c in (0,1)), got M={m}, N={n}"
            )));
        }
        let k = lambdas.len();
        if k >= m {
            return Err(Error::InvalidModel(format!(
                "signal rank K={k} must be smaller than M={m}"
            )));
        }
        if sigma2.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !sigma2.is_finite() {
            return Err(Error::InvalidModel(format!(
                "noise variance must be positive and finite, got {sigma2}"
            )));
        }
        if lambdas
            .iter()
            .any(|l| l.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) || !l.is_finite())
        {
            return Err(Error::InvalidModel(
                "signal eigenvalues must be positive and finite".into(),
            ));
        }
        lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());

        let u = match eigenvectors {
            Some(u) => {
                if u.nrows() != m || u.ncols() != k {
                    return Err(Error::DimensionMismatch(format!(
                        "eigenvector matrix is {}x{}, expected {}x{}",
                        u.nrows(),
                        u.ncols(),
                        m,
                        k
                    )));
                }
                let gram = u.adjoint() * &u;
                for i in 0..k {
                    for j in 0..k {
                        let target = if i == j { 1.0 } else { 0.0 };
                        if (gram[(i, j)] - C64::new(target, 0.0)).norm() > ORTHO_TOL {
                            return Err(Error::InvalidModel(
                                "signal eigenvectors are not orthonormal".into(),
                            ));
                        }
                    }
                }
                u
            }
            None => DMatrix::from_fn(m, k, |i, j| {
                if i == j {
                    C64::new(1.0, 0.0)
                } else {
                    C64::new(0.0, 0.0)
                }
            }),
        };

        Ok(SignalModel {
            m,
            n,
            sigma2,
            lambdas,
            u,
        })
    }

    pub fn observation_dim(&self) -> usize {
        self.m
    }

    pub fn sample_count(&self) -> usize {
        self.n
    }

    pub fn signal_rank(&self) -> usize {
        self.lambdas.len()
    }

    pub fn noise_variance(&self) -> f64 {
        self.sigma2
    }

    /// Dimension ratio `c_N = M / N`, always in (0, 1).
    pub fn ratio(&self) -> f64 {
        self.m as f64 / self.n as f64
    }

    /// Signal eigenvalues, descending.
    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// Smallest signal eigenvalue (`None` for the pure-noise model).
    pub fn lambda_min(&self) -> Option<f64> {
        self.lambdas.last().copied()
    }

    /// Signal eigenvector block (M x K, orthonormal columns).
    pub fn eigenvectors(&self) -> &DMatrix<C64> {
        &self.u
    }

    /// Distinct signal eigenvalues with multiplicities, descending.
    /// Values closer than a relative 1e-12 are merged.
    pub fn distinct_lambdas(&self) -> Vec<(f64, usize)> {
        let mut out: Vec<(f64, usize)> = Vec::new();
        for &l in &self.lambdas {
            match out.last_mut() {
                Some((v, mult)) if (*v - l).abs() <= 1e-12 * v.abs().max(1.0) => *mult += 1,
                _ => out.push((l, 1)),
            }
        }
        out
    }

    /// Materializes `B = U diag(sqrt(lambda)) V^*` with canonical right
    /// singular vectors. Only needed when sampling realizations.
    pub fn information_matrix(&self) -> DMatrix<C64> {
        let k = self.signal_rank();
        let mut b = DMatrix::zeros(self.m, self.n);
        for j in 0..k {
            let scale = self.lambdas[j].sqrt();
            for i in 0..self.m {
                b[(i, j)] = self.u[(i, j)] * C64::new(scale, 0.0);
            }
        }
        b
    }
}

/// Pair of deterministic probe vectors for the bilinear form
/// `d1^* P d2`, plus the scalar used by the fluctuation statistic.
#[derive(Clone, Debug)]
pub struct SubspaceQuery {
    pub d1: DVector<C64>,
    pub d2: DVector<C64>,
    /// Deterministic scalar multiplying the estimation error in the
    /// standardized statistic; defaults to 1.
    pub xi: C64,
}

impl SubspaceQuery {
    pub fn new(d1: DVector<C64>, d2: DVector<C64>, xi: C64) -> Result<Self> {
        if d1.len() != d2.len() {
            return Err(Error::DimensionMismatch(format!(
                "probe vectors have lengths {} and {}",
                d1.len(),
                d2.len()
            )));
        }
        for d in [&d1, &d2] {
            if !d.iter().all(|c| c.re.is_finite() && c.im.is_finite()) {
                return Err(Error::InvalidInput("probe vector has non-finite entries".into()));
            }
        }
        Ok(SubspaceQuery { d1, d2, xi })
    }

    /// Canonical-basis probe `e_index` (1-based index).
    pub fn canonical(m: usize, index1: usize, index2: usize) -> Result<Self> {
        let mk = |idx: usize| -> Result<DVector<C64>> {
            if idx == 0 || idx > m {
                return Err(Error::InvalidInput(format!(
                    "canonical index {idx} out of range 1..={m}"
                )));
            }
            let mut v = DVector::zeros(m);
            v[idx - 1] = C64::new(1.0, 0.0);
            Ok(v)
        };
        SubspaceQuery::new(mk(index1)?, mk(index2)?, C64::new(1.0, 0.0))
    }

    pub fn is_quadratic(&self) -> bool {
        self.d1
            .iter()
            .zip(self.d2.iter())
            .all(|(a, b)| (a - b).norm() <= 1e-14)
    }
}

/// One random draw of the observation matrix, tagged with its seed.
#[derive(Clone, Debug)]
pub struct Realization {
    pub sigma_matrix: DMatrix<C64>,
    pub seed: u64,
}

/// SplitMix64 step, used to derive independent per-trial seeds from a
/// master seed without shared RNG state.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master.wrapping_add(index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draws `Sigma = B + W`, `W_ij ~ CN(0, sigma^2/N)` (independent real and
/// imaginary parts, each of variance `sigma^2 / 2N`). Reproducible: the
/// same `(model, seed)` yields a bit-identical matrix.
pub fn sample_realization(model: &SignalModel, seed: u64) -> Realization {
    let m = model.observation_dim();
    let n = model.sample_count();
    let std = (model.noise_variance() / (2.0 * n as f64)).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    let mut sigma = model.information_matrix();
    // Column-major fill keeps the draw order independent of matrix layout.
    for j in 0..n {
        for i in 0..m {
            let re = normal.sample(&mut rng);
            let im = normal.sample(&mut rng);
            sigma[(i, j)] += C64::new(re, im);
        }
    }
    Realization {
        sigma_matrix: sigma,
        seed,
    }
}

/// Exact localization function `eta = d1^* (I - U U^*) d2`, i.e. the
/// bilinear form of the true noise-subspace projector.
pub fn eta_true(model: &SignalModel, query: &SubspaceQuery) -> Result<C64> {
    if query.d1.len() != model.observation_dim() {
        return Err(Error::DimensionMismatch(format!(
            "probe length {} vs observation dimension {}",
            query.d1.len(),
            model.observation_dim()
        )));
    }
    let u = model.eigenvectors();
    let a = u.adjoint() * &query.d1;
    let b = u.adjoint() * &query.d2;
    Ok(query.d1.dotc(&query.d2) - a.dotc(&b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mixed_multiplicity_model() -> SignalModel {
        SignalModel::new(10, 20, 1.0, vec![10.0, 10.0, 10.0, 5.0, 5.0], None).unwrap()
    }

    #[test]
    fn build_model_accepts_reference_scenario() {
        let model = mixed_multiplicity_model();
        assert_relative_eq!(model.ratio(), 0.5);
        assert_eq!(model.signal_rank(), 5);
        assert_eq!(model.distinct_lambdas(), vec![(10.0, 3), (5.0, 2)]);
    }

    #[test]
    fn build_model_accepts_pure_noise() {
        let model = SignalModel::new(4, 8, 1.0, vec![], None).unwrap();
        assert_eq!(model.signal_rank(), 0);
        assert!(model.lambda_min().is_none());
    }

    #[test]
    fn build_model_rejects_bad_inputs() {
        assert!(SignalModel::new(4, 8, 1.0, vec![-1.0], None).is_err());
        assert!(SignalModel::new(8, 4, 1.0, vec![], None).is_err());
        assert!(SignalModel::new(4, 8, 1.0, vec![1.0; 4], None).is_err());
        assert!(SignalModel::new(4, 8, 0.0, vec![], None).is_err());
        let skewed = DMatrix::from_fn(4, 1, |i, _| C64::new(1.0 + i as f64, 0.0));
        assert!(SignalModel::new(4, 8, 1.0, vec![1.0], Some(skewed)).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let model = mixed_multiplicity_model();
        let a = sample_realization(&model, 1);
        let b = sample_realization(&model, 1);
        let c = sample_realization(&model, 2);
        assert_eq!(a.sigma_matrix, b.sigma_matrix);
        assert_ne!(a.sigma_matrix, c.sigma_matrix);
    }

    #[test]
    fn noise_entry_variance_matches_convention() {
        let model = SignalModel::new(100, 200, 1.0, vec![], None).unwrap();
        let r = sample_realization(&model, 7);
        let mean_sq: f64 = r
            .sigma_matrix
            .iter()
            .map(|c| c.norm_sqr())
            .sum::<f64>()
            / (100.0 * 200.0);
        let target = model.noise_variance() / model.sample_count() as f64;
        assert!(
            (mean_sq / target - 1.0).abs() < 0.05,
            "mean |W|^2 = {mean_sq}, target {target}"
        );
    }

    #[test]
    fn eta_true_reference_values() {
        let model = mixed_multiplicity_model();
        let m = model.observation_dim();

        // Probe equal to a signal eigenvector is annihilated.
        let u1 = DVector::from_fn(m, |i, _| model.eigenvectors()[(i, 0)]);
        let q = SubspaceQuery::new(u1.clone(), u1, C64::new(1.0, 0.0)).unwrap();
        assert!(eta_true(&model, &q).unwrap().norm() < 1e-14);

        // Last canonical vector lies in the noise subspace.
        let q = SubspaceQuery::canonical(m, m, m).unwrap();
        assert_relative_eq!(eta_true(&model, &q).unwrap().re, 1.0, epsilon = 1e-14);

        // Two distinct signal-span vectors give zero.
        let q = SubspaceQuery::canonical(m, 1, 2).unwrap();
        assert!(eta_true(&model, &q).unwrap().norm() < 1e-14);
    }

    #[test]
    fn eta_invariant_under_signal_basis_rotation() {
        // Rotate the two lambda=5 eigenvectors inside their eigenspace:
        // the projector, and hence eta, must not move.
        let base = mixed_multiplicity_model();
        let m = base.observation_dim();
        let mut u = base.eigenvectors().clone();
        let (c, s) = (0.6f64, 0.8f64);
        let phase = C64::from_polar(1.0, 0.7);
        for i in 0..m {
            let (a, b) = (u[(i, 3)], u[(i, 4)]);
            u[(i, 3)] = a * C64::new(c, 0.0) + b * C64::new(s, 0.0) * phase;
            u[(i, 4)] = -a * C64::new(s, 0.0) * phase.conj() + b * C64::new(c, 0.0);
        }
        let rotated = SignalModel::new(10, 20, 1.0, vec![10.0, 10.0, 10.0, 5.0, 5.0], Some(u)).unwrap();

        let mut d1 = DVector::zeros(m);
        let mut d2 = DVector::zeros(m);
        for i in 0..m {
            d1[i] = C64::new((i + 1) as f64 * 0.1, -0.2);
            d2[i] = C64::new(0.3, (i as f64) * 0.05);
        }
        let q = SubspaceQuery::new(d1, d2, C64::new(1.0, 0.0)).unwrap();
        let a = eta_true(&base, &q).unwrap();
        let b = eta_true(&rotated, &q).unwrap();
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn derive_seed_spreads() {
        let s: Vec<u64> = (0..16).map(|i| derive_seed(42, i)).collect();
        let mut dedup = s.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), s.len());
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        // |eta| <= ||d1|| ||d2|| since the projector has unit norm.
        #[test]
        fn eta_bounded_by_probe_norms(
            re1 in proptest::collection::vec(-2.0f64..2.0, 6),
            re2 in proptest::collection::vec(-2.0f64..2.0, 6),
            im2 in proptest::collection::vec(-2.0f64..2.0, 6),
        ) {
            let model = SignalModel::new(6, 12, 1.0, vec![4.0, 2.0], None).unwrap();
            let d1 = DVector::from_iterator(6, re1.iter().map(|&x| C64::new(x, 0.5 * x)));
            let d2 = DVector::from_iterator(6, re2.iter().zip(&im2).map(|(&x, &y)| C64::new(x, y)));
            let bound = d1.norm() * d2.norm();
            let q = SubspaceQuery::new(d1, d2, C64::new(1.0, 0.0)).unwrap();
            let eta = eta_true(&model, &q).unwrap();
            prop_assert!(eta.norm() <= bound + 1e-12);
        }
    }
}
