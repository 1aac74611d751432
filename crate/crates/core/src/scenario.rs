//! Scenario files: the JSON description of a model plus probe vectors
//! consumed by the command-line front end and the test suites.
//!
//! ```json
//! {
//!   "M": 20, "N": 40, "sigma2": 1.0,
//!   "signal_eigenvalues": [5.0, 6.0],
//!   "eigenvectors": "canonical",
//!   "d1": {"type": "canonical", "index": 20},
//!   "d2": {"type": "explicit", "re": [0.1, ...], "im": [0.0, ...]},
//!   "xi": {"re": 1.0, "im": 0.0},
//!   "seed": 1
//! }
//! ```
//!
//! `eigenvectors` is either the string `"canonical"` (first K basis
//! vectors) or an explicit M x K matrix `{"re": [[...]], "im": [[...]]}`
//! in row-major order. Canonical probe indices are 1-based, so
//! `index = M` selects `e_M`. `xi` and `seed` are optional (defaults: 1
//! and 0).

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SignalModel, SubspaceQuery};
use crate::C64;

/// `{re, im}` serialization for complex scalars in reports.
pub mod serde_c64 {
    use super::C64;
    use serde::ser::SerializeStruct;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(value: &C64, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let mut s = serializer.serialize_struct("Complex", 2)?;
        s.serialize_field("re", &value.re)?;
        s.serialize_field("im", &value.im)?;
        s.end()
    }

    pub mod option {
        use super::C64;
        use serde::ser::SerializeStruct;
        use serde::Serializer;

        pub fn serialize<S: Serializer>(
            value: &Option<C64>,
            serializer: S,
        ) -> std::result::Result<S::Ok, S::Error> {
            match value {
                None => serializer.serialize_none(),
                Some(v) => {
                    let mut s = serializer.serialize_struct("Complex", 2)?;
                    s.serialize_field("re", &v.re)?;
                    s.serialize_field("im", &v.im)?;
                    s.end()
                }
            }
        }
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct ComplexSpec {
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl From<ComplexSpec> for C64 {
    fn from(c: ComplexSpec) -> C64 {
        C64::new(c.re, c.im)
    }
}

/// Signal eigenvector block: canonical basis or an explicit matrix.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum EigenvectorSpec {
    Named(String),
    Explicit { re: Vec<Vec<f64>>, im: Vec<Vec<f64>> },
}

impl Default for EigenvectorSpec {
    fn default() -> Self {
        EigenvectorSpec::Named("canonical".into())
    }
}

/// One probe vector: canonical `e_index` (1-based) or explicit entries.
#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ProbeSpec {
    Canonical { index: usize },
    Explicit { re: Vec<f64>, #[serde(default)] im: Vec<f64> },
}

impl ProbeSpec {
    fn build(&self, m: usize) -> Result<DVector<C64>> {
        match self {
            ProbeSpec::Canonical { index } => {
                if *index == 0 || *index > m {
                    return Err(Error::InvalidInput(format!(
                        "canonical probe index {index} out of range 1..={m}"
                    )));
                }
                let mut v = DVector::zeros(m);
                v[*index - 1] = C64::new(1.0, 0.0);
                Ok(v)
            }
            ProbeSpec::Explicit { re, im } => {
                if re.len() != m || (!im.is_empty() && im.len() != m) {
                    return Err(Error::DimensionMismatch(format!(
                        "explicit probe has {} entries, model wants {m}",
                        re.len()
                    )));
                }
                Ok(DVector::from_fn(m, |i, _| {
                    C64::new(re[i], im.get(i).copied().unwrap_or(0.0))
                }))
            }
        }
    }
}

/// Parsed scenario file.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub sigma2: f64,
    pub signal_eigenvalues: Vec<f64>,
    #[serde(default)]
    pub eigenvectors: EigenvectorSpec,
    pub d1: ProbeSpec,
    pub d2: ProbeSpec,
    #[serde(default)]
    pub xi: Option<ComplexSpec>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl Scenario {
    pub fn from_path(path: &Path) -> Result<Self> {
        std::fs::read_to_string(path)?.parse()
    }

    pub fn model(&self) -> Result<SignalModel> {
        let eigenvectors = match &self.eigenvectors {
            EigenvectorSpec::Named(name) if name == "canonical" => None,
            EigenvectorSpec::Named(name) => {
                return Err(Error::InvalidInput(format!(
                    "unknown eigenvector spec '{name}' (expected \"canonical\" or a matrix)"
                )))
            }
            EigenvectorSpec::Explicit { re, im } => {
                let k = self.signal_eigenvalues.len();
                if re.len() != self.m || im.len() != self.m {
                    return Err(Error::DimensionMismatch(format!(
                        "eigenvector matrix has {} rows, model wants {}",
                        re.len(),
                        self.m
                    )));
                }
                if re.iter().chain(im).any(|row| row.len() != k) {
                    return Err(Error::DimensionMismatch(format!(
                        "eigenvector matrix rows must have K = {k} columns"
                    )));
                }
                Some(DMatrix::from_fn(self.m, k, |i, j| {
                    C64::new(re[i][j], im[i][j])
                }))
            }
        };
        SignalModel::new(
            self.m,
            self.n,
            self.sigma2,
            self.signal_eigenvalues.clone(),
            eigenvectors,
        )
    }

    pub fn query(&self) -> Result<SubspaceQuery> {
        let d1 = self.d1.build(self.m)?;
        let d2 = self.d2.build(self.m)?;
        let xi = self
            .xi
            .clone()
            .map_or(C64::new(1.0, 0.0), C64::from);
        SubspaceQuery::new(d1, d2, xi)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_SPIKE_QUADRATIC: &str = r#"{
        "M": 20, "N": 40, "sigma2": 1.0,
        "signal_eigenvalues": [5.0, 6.0],
        "eigenvectors": "canonical",
        "d1": {"type": "canonical", "index": 20},
        "d2": {"type": "canonical", "index": 20},
        "seed": 1
    }"#;

    #[test]
    fn parses_reference_scenario() {
        let sc = TWO_SPIKE_QUADRATIC.parse::<Scenario>().unwrap();
        let model = sc.model().unwrap();
        assert_eq!(model.observation_dim(), 20);
        assert_eq!(model.lambdas(), &[6.0, 5.0]);
        let q = sc.query().unwrap();
        assert!(q.is_quadratic());
        assert_eq!(q.d1[19], C64::new(1.0, 0.0));
        assert_eq!(sc.seed(), 1);
    }

    #[test]
    fn explicit_probe_and_xi() {
        let text = r#"{
            "M": 3, "N": 6, "sigma2": 2.0,
            "signal_eigenvalues": [4.0],
            "d1": {"type": "explicit", "re": [1.0, 0.0, 0.0], "im": [0.0, 0.5, 0.0]},
            "d2": {"type": "canonical", "index": 3},
            "xi": {"re": 0.0, "im": 1.0}
        }"#;
        let sc: Scenario = text.parse().unwrap();
        let q = sc.query().unwrap();
        assert_eq!(q.d1[1], C64::new(0.0, 0.5));
        assert_eq!(q.xi, C64::new(0.0, 1.0));
        assert_eq!(sc.seed(), 0);
    }

    #[test]
    fn rejects_malformed_scenarios() {
        assert!("{}".parse::<Scenario>().is_err());
        let bad_index = r#"{
            "M": 4, "N": 8, "sigma2": 1.0, "signal_eigenvalues": [],
            "d1": {"type": "canonical", "index": 5},
            "d2": {"type": "canonical", "index": 1}
        }"#;
        let sc: Scenario = bad_index.parse().unwrap();
        assert!(sc.query().is_err());

        let bad_model = r#"{
            "M": 8, "N": 4, "sigma2": 1.0, "signal_eigenvalues": [],
            "d1": {"type": "canonical", "index": 1},
            "d2": {"type": "canonical", "index": 1}
        }"#;
        assert!(bad_model.parse::<Scenario>().unwrap().model().is_err());
    }

    #[test]
    fn explicit_eigenvectors_roundtrip() {
        let text = r#"{
            "M": 3, "N": 6, "sigma2": 1.0,
            "signal_eigenvalues": [2.0],
            "eigenvectors": {"re": [[0.0], [1.0], [0.0]], "im": [[0.0], [0.0], [0.0]]},
            "d1": {"type": "canonical", "index": 2},
            "d2": {"type": "canonical", "index": 2}
        }"#;
        let sc: Scenario = text.parse().unwrap();
        let model = sc.model().unwrap();
        assert_eq!(model.eigenvectors()[(1, 0)], C64::new(1.0, 0.0));
        // e_2 lies in the signal span: eta = 0.
        let q = sc.query().unwrap();
        let eta = crate::model::eta_true(&model, &q).unwrap();
        assert!(eta.norm() < 1e-14);
    }
}
