//! JSON model files.
//!
//! ```json
//! {
//!   "dims": {"d1": 1, "d2": 1, "m1": 1, "m2": 1},
//!   "horizon": 1.0,
//!   "initial": {"mean": [0.5], "cov": [[0.4]]},
//!   "coefficients": {
//!     "a": {"constant": [[-0.3]]},
//!     "b": {"constant": [[0.6]]},
//!     "c": {"constant": [[1.0]]},
//!     "sigma": {"table": {"times": [0.0, 0.5, 1.0], "values": [[[0.8]], [[0.5]]]}}
//!   }
//! }
//! ```
//!
//! Matrices are lists of rows. A table holds one more time than values.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::model::{matrix_from_rows, CoefficientProvider, Dims, InitialLaw, ModelSpec};

type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DimsFile {
    d1: usize,
    d2: usize,
    m1: usize,
    m2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialFile {
    mean: Vec<f64>,
    cov: Rows,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    times: Vec<f64>,
    values: Vec<Rows>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum CoefficientFile {
    Constant(Rows),
    Table(TableFile),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoefficientsFile {
    a: CoefficientFile,
    b: CoefficientFile,
    c: CoefficientFile,
    sigma: CoefficientFile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    dims: DimsFile,
    horizon: f64,
    initial: InitialFile,
    coefficients: CoefficientsFile,
}

fn rows_of(m: &Mat) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl CoefficientFile {
    fn into_provider(self, name: &str) -> Result<CoefficientProvider> {
        let tag = |e: Error| Error::InvalidInput(format!("coefficient {name}: {e}"));
        match self {
            CoefficientFile::Constant(rows) => {
                Ok(CoefficientProvider::Constant(matrix_from_rows(&rows).map_err(tag)?))
            }
            CoefficientFile::Table(t) => {
                if t.times.len() != t.values.len() + 1 {
                    return Err(Error::InvalidInput(format!(
                        "coefficient {name}: table needs {} times for {} values",
                        t.values.len() + 1,
                        t.values.len()
                    )));
                }
                if t.times.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(Error::InvalidInput(format!(
                        "coefficient {name}: table times must be strictly increasing"
                    )));
                }
                let values =
                    t.values.iter().map(|r| matrix_from_rows(r)).collect::<Result<_>>().map_err(tag)?;
                Ok(CoefficientProvider::Table { times: t.times, values })
            }
        }
    }

    fn from_provider(p: &CoefficientProvider) -> Self {
        match p {
            CoefficientProvider::Constant(m) => CoefficientFile::Constant(rows_of(m)),
            CoefficientProvider::Table { times, values } => CoefficientFile::Table(TableFile {
                times: times.clone(),
                values: values.iter().map(rows_of).collect(),
            }),
        }
    }
}

impl ModelSpec {
    /// Parses a model file. Shapes are checked later by
    /// [`validate_model`](crate::validate_model).
    pub fn from_json_str(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let d = file.dims;
        let cov = matrix_from_rows(&file.initial.cov)
            .map_err(|e| Error::InvalidInput(format!("initial covariance: {e}")))?;
        let co = file.coefficients;
        Ok(ModelSpec {
            dims: Dims { d1: d.d1, d2: d.d2, m1: d.m1, m2: d.m2 },
            a: co.a.into_provider("a")?,
            b: co.b.into_provider("b")?,
            c: co.c.into_provider("c")?,
            sigma: co.sigma.into_provider("sigma")?,
            initial: InitialLaw::new(DVector::from_vec(file.initial.mean), cov),
            horizon: file.horizon,
        })
    }

    pub fn to_json_string(&self) -> String {
        let file = ModelFile {
            dims: DimsFile { d1: self.dims.d1, d2: self.dims.d2, m1: self.dims.m1, m2: self.dims.m2 },
            horizon: self.horizon,
            initial: InitialFile {
                mean: self.initial.mean.iter().copied().collect(),
                cov: rows_of(&self.initial.cov),
            },
            coefficients: CoefficientsFile {
                a: CoefficientFile::from_provider(&self.a),
                b: CoefficientFile::from_provider(&self.b),
                c: CoefficientFile::from_provider(&self.c),
                sigma: CoefficientFile::from_provider(&self.sigma),
            },
        };
        serde_json::to_string_pretty(&file).expect("model serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{oscillator_2d, switching_2d};

    #[test]
    fn round_trip() {
        for spec in [oscillator_2d(), switching_2d()] {
            let back = ModelSpec::from_json_str(&spec.to_json_string()).unwrap();
            assert_eq!(back, spec);
        }
    }

    #[test]
    fn documented_example_parses() {
        let text = r#"{
          "dims": {"d1": 1, "d2": 1, "m1": 1, "m2": 1},
          "horizon": 1.0,
          "initial": {"mean": [0.5], "cov": [[0.4]]},
          "coefficients": {
            "a": {"constant": [[-0.3]]},
            "b": {"constant": [[0.6]]},
            "c": {"constant": [[1.0]]},
            "sigma": {"table": {"times": [0.0, 0.5, 1.0], "values": [[[0.8]], [[0.5]]]}}
          }
        }"#;
        let spec = ModelSpec::from_json_str(text).unwrap();
        assert_eq!(spec.sigma.eval(0.7).unwrap()[(0, 0)], 0.5);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let good = oscillator_2d().to_json_string();
        assert!(matches!(ModelSpec::from_json_str("{"), Err(Error::Config(_))));
        let extra = good.replacen("\"horizon\"", "\"colour\": 1, \"horizon\"", 1);
        assert!(ModelSpec::from_json_str(&extra).is_err());
        let mut spec = switching_2d();
        if let CoefficientProvider::Table { times, .. } = &mut spec.a {
            times.pop();
        }
        assert!(ModelSpec::from_json_str(&spec.to_json_string()).is_err());
    }
}
