use nalgebra::DMatrix;

use crate::conf::{confidence_batch, ConfidenceConfig};
use crate::error::{invalid, Result};
use crate::gaussian::GaussianPrimitive;
use crate::scalar::Real;

/// Primitives with their feature rows (`N × d_model`) and confidences.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveBatch<T: Real> {
    pub primitives: Vec<GaussianPrimitive<T>>,
    pub features: DMatrix<T>,
    pub confidences: Vec<T>,
}

impl<T: Real> PrimitiveBatch<T> {
    pub fn new(primitives: Vec<GaussianPrimitive<T>>, features: DMatrix<T>, confidences: Vec<T>) -> Result<Self> {
        if features.nrows() != primitives.len() || confidences.len() != primitives.len() {
            return invalid(format!(
                "batch length mismatch: {} primitives, {} feature rows, {} confidences",
                primitives.len(),
                features.nrows(),
                confidences.len()
            ));
        }
        if let Some(c) = confidences.iter().find(|c| !(**c >= T::zero() && **c <= T::one())) {
            return invalid(format!("confidence {c} outside [0, 1]"));
        }
        Ok(Self { primitives, features, confidences })
    }

    /// Builds a batch and fills confidences from `cfg`.
    pub fn with_confidence(
        primitives: Vec<GaussianPrimitive<T>>,
        features: DMatrix<T>,
        cfg: &ConfidenceConfig,
    ) -> Result<Self> {
        let confidences = confidence_batch(&primitives, cfg)?;
        Self::new(primitives, features, confidences)
    }

    /// Primitives with all-zero features.
    pub fn zero_features(primitives: Vec<GaussianPrimitive<T>>, d_model: usize, cfg: &ConfidenceConfig) -> Result<Self> {
        let n = primitives.len();
        Self::with_confidence(primitives, DMatrix::zeros(n, d_model), cfg)
    }

    pub fn empty(d_model: usize) -> Self {
        Self { primitives: Vec::new(), features: DMatrix::zeros(0, d_model), confidences: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.features.ncols()
    }

    pub fn recompute_confidence(&mut self, cfg: &ConfidenceConfig) -> Result<()> {
        self.confidences = confidence_batch(&self.primitives, cfg)?;
        Ok(())
    }

    pub fn select(&self, ids: &[usize]) -> Self {
        let d = self.d_model();
        let features = DMatrix::from_fn(ids.len(), d, |r, c| self.features[(ids[r], c)]);
        Self {
            primitives: ids.iter().map(|&i| self.primitives[i].clone()).collect(),
            features,
            confidences: ids.iter().map(|&i| self.confidences[i]).collect(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.d_model() != other.d_model() {
            return invalid(format!("feature width mismatch: {} vs {}", self.d_model(), other.d_model()));
        }
        let (n, m, d) = (self.len(), other.len(), self.d_model());
        let features =
            DMatrix::from_fn(n + m, d, |r, c| if r < n { self.features[(r, c)] } else { other.features[(r - n, c)] });
        let mut primitives = self.primitives.clone();
        primitives.extend(other.primitives.iter().cloned());
        let mut confidences = self.confidences.clone();
        confidences.extend_from_slice(&other.confidences);
        Ok(Self { primitives, features, confidences })
    }
}
