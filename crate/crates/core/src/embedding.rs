//! Dimension-checked vector arithmetic over embedding features.
//!
//! Every feature that flows through the classifier (class label columns,
//! image features, description and prediction features, the fused query)
//! is an [`EmbeddingVector`]. Construction validates finiteness, so any
//! vector that reaches [`score`] or [`fuse_average`] is well formed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Raw norms below this are treated as a degenerate (all-zero) vector.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

/// Allowed deviation from unit length for vectors that claim to be normalized.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VectorError {
    #[error("embedding vector must have at least one dimension")]
    Empty,
    #[error("embedding coordinate {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("vector norm {norm:e} is below the zero threshold")]
    ZeroVector { norm: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("cannot fuse an empty feature list")]
    EmptyFeatureList,
    #[error("similarity score list is empty")]
    EmptyScores,
    #[error("class feature matrix needs at least one column")]
    EmptyMatrix,
    #[error("column {index} is not unit norm (norm {norm})")]
    NotUnitNorm { index: usize, norm: f64 },
}

/// A fixed-dimension real vector in the shared image/text embedding space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VectorError> {
        if values.is_empty() {
            return Err(VectorError::Empty);
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VectorError::NonFinite { index, value });
        }
        Ok(Self { values })
    }

    /// Converts from single precision, as most encoder services emit.
    pub fn from_f32(values: &[f32]) -> Result<Self, VectorError> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    /// The `i`-th standard basis vector of dimension `dim`.
    pub fn basis(dim: usize, i: usize) -> Result<Self, VectorError> {
        let mut values = vec![0.0; dim];
        if i >= dim {
            return Err(VectorError::DimMismatch {
                expected: dim,
                found: i + 1,
            });
        }
        values[i] = 1.0;
        Self::new(values)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_NORM_TOLERANCE
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64, VectorError> {
        check_dim(self.dim(), other.dim())?;
        Ok(dot_unchecked(&self.values, &other.values))
    }

    /// Returns `self + other` elementwise.
    pub fn add(&self, other: &EmbeddingVector) -> Result<EmbeddingVector, VectorError> {
        check_dim(self.dim(), other.dim())?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        EmbeddingVector::new(values)
    }

    pub fn scale(&self, factor: f64) -> Result<EmbeddingVector, VectorError> {
        EmbeddingVector::new(self.values.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = VectorError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), VectorError> {
    if expected != found {
        return Err(VectorError::DimMismatch { expected, found });
    }
    Ok(())
}

fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit Euclidean length.
pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector, VectorError> {
    let norm = v.norm();
    if norm < ZERO_NORM_THRESHOLD {
        return Err(VectorError::ZeroVector { norm });
    }
    EmbeddingVector::new(v.values.iter().map(|x| x / norm).collect())
}

/// Sums the features and normalizes the result.
///
/// Dividing by the count before normalizing would change nothing, so the
/// fused query is simply the direction of the sum.
pub fn fuse_average(features: &[EmbeddingVector]) -> Result<EmbeddingVector, VectorError> {
    let sum = sum_vectors(features)?;
    normalize(&sum)
}

/// Elementwise sum of a nonempty list of same-dimension vectors.
pub fn sum_vectors(features: &[EmbeddingVector]) -> Result<EmbeddingVector, VectorError> {
    let (first, rest) = features
        .split_first()
        .ok_or(VectorError::EmptyFeatureList)?;
    let mut acc = first.values.clone();
    for f in rest {
        check_dim(acc.len(), f.dim())?;
        for (a, b) in acc.iter_mut().zip(&f.values) {
            *a += b;
        }
    }
    EmbeddingVector::new(acc)
}

/// Elementwise mean of a nonempty list of same-dimension vectors.
pub fn mean_vectors(features: &[EmbeddingVector]) -> Result<EmbeddingVector, VectorError> {
    let sum = sum_vectors(features)?;
    sum.scale(1.0 / features.len() as f64)
}

/// The class label feature matrix: one unit-norm column per class, in label order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassFeatureMatrix {
    columns: Vec<EmbeddingVector>,
    dim: usize,
}

impl ClassFeatureMatrix {
    pub fn new(columns: Vec<EmbeddingVector>) -> Result<Self, VectorError> {
        let dim = columns.first().ok_or(VectorError::EmptyMatrix)?.dim();
        for (index, col) in columns.iter().enumerate() {
            check_dim(dim, col.dim())?;
            if !col.is_unit() {
                return Err(VectorError::NotUnitNorm {
                    index,
                    norm: col.norm(),
                });
            }
        }
        Ok(Self { columns, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of classes.
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[EmbeddingVector] {
        &self.columns
    }

    pub fn column(&self, i: usize) -> Option<&EmbeddingVector> {
        self.columns.get(i)
    }
}

/// Per-class similarity scores for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimilarityScores(Vec<f64>);

impl SimilarityScores {
    pub fn new(scores: Vec<f64>) -> Result<Self, VectorError> {
        if let Some((index, &value)) = scores.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VectorError::NonFinite { index, value });
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Indices of the `k` best classes, best first. Ties go to the lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        top_k_indices(&self.0, k)
    }
}

/// Sorts indices by `(-score, index)` and keeps the first `k`.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Dot product of the query with every column of `matrix`.
pub fn score(
    query: &EmbeddingVector,
    matrix: &ClassFeatureMatrix,
) -> Result<SimilarityScores, VectorError> {
    check_dim(matrix.dim(), query.dim())?;
    let scores = matrix
        .columns
        .iter()
        .map(|col| dot_unchecked(&query.values, &col.values))
        .collect();
    SimilarityScores::new(scores)
}

/// Index of the maximum score; the lowest index wins ties.
pub fn argmax_index(scores: &SimilarityScores) -> Result<usize, VectorError> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.0.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i).ok_or(VectorError::EmptyScores)
}
