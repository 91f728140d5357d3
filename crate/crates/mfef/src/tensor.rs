//! Shared semantic types and shape contracts.
//!
//! Everything that flows between blocks is one of the types below. Arrays are
//! channels-first `(batch, channels, height, width)` throughout. All numeric
//! code is generic over [`Scalar`] so that training can run in `f32` while
//! gradient checking instantiates the same code in `f64`.

use ndarray::{Array1, Array2, Array4};

use crate::error::{MfefError, Result};

/// Element type for all tensors: `f32` or `f64`.
pub trait Scalar: ndarray::NdFloat {
    /// Dtype tag used in checkpoint headers.
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Rank-4 activation tensor `(B, C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F: Scalar> {
    pub data: Array4<F>,
}

impl<F: Scalar> FeatureMap<F> {
    /// Wraps an array, rejecting degenerate (zero-sized) dimensions.
    pub fn new(data: Array4<F>) -> Result<Self> {
        if data.shape().iter().any(|&d| d == 0) {
            return Err(MfefError::InvalidShape(format!(
                "feature map dimensions must all be >= 1, got {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    /// `(B, C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.data.shape();
        (s[0], s[1], s[2], s[3])
    }

    /// True iff every dimension is >= 1 and every value is finite.
    pub fn validate(&self) -> bool {
        self.data.shape().iter().all(|&d| d >= 1) && self.data.iter().all(|v| v.is_finite())
    }
}

/// Diagnostic scan of the [`FeatureMap`] invariants.
pub fn validate_feature_map<F: Scalar>(fm: &FeatureMap<F>) -> bool {
    fm.validate()
}

/// Per-sample class scores `(B, M)` from a classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits<F: Scalar> {
    pub data: Array2<F>,
}

impl<F: Scalar> Logits<F> {
    pub fn new(data: Array2<F>) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() < 2 {
            return Err(MfefError::InvalidShape(format!(
                "logits need B >= 1 and M >= 2, got ({}, {})",
                data.nrows(),
                data.ncols()
            )));
        }
        Ok(Self { data })
    }

    pub fn batch(&self) -> usize {
        self.data.nrows()
    }

    pub fn classes(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-stochastic matrix `(B, M)`: entries in [0, 1], rows summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist<F: Scalar> {
    pub data: Array2<F>,
}

/// Row-sum tolerance for the [`ProbDist`] closure invariant.
pub const PROB_ROW_SUM_TOL: f64 = 1e-6;

impl<F: Scalar> ProbDist<F> {
    /// Wraps softmax output. Callers constructing by hand should run
    /// [`ProbDist::validate`] afterwards.
    pub fn new(data: Array2<F>) -> Self {
        Self { data }
    }

    pub fn batch(&self) -> usize {
        self.data.nrows()
    }

    pub fn classes(&self) -> usize {
        self.data.ncols()
    }

    /// Checks range and row-sum closure.
    pub fn validate(&self) -> bool {
        let one = 1.0;
        self.data
            .iter()
            .all(|&v| v.is_finite() && v >= F::zero() && v.as_f64() <= one)
            && self.data.rows().into_iter().all(|row| {
                let s: f64 = row.iter().map(|v| v.as_f64()).sum();
                (s - one).abs() <= PROB_ROW_SUM_TOL
            })
    }
}

/// Ground-truth labels for one batch, each in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelBatch {
    pub labels: Array1<usize>,
    pub num_classes: usize,
}

impl LabelBatch {
    pub fn new(labels: Array1<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(MfefError::InvalidShape(format!(
                "label batch needs at least 2 classes, got {num_classes}"
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(MfefError::InvalidShape(format!(
                "label {l} at index {i} out of range [0, {num_classes})"
            )));
        }
        Ok(Self {
            labels,
            num_classes,
        })
    }

    pub fn from_slice(labels: &[usize], num_classes: usize) -> Result<Self> {
        Self::new(Array1::from(labels.to_vec()), num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
