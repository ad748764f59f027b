//! Inception Score and Fréchet distance over supplied class probabilities and features.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::embedding::EmbeddingMatrix;
use crate::linalg::{Matrix, SymmetricEigen};
use crate::scalar::Scalar;
use crate::shuffle;

/// Floor applied inside logarithms of the KL divergence.
pub const LOG_FLOOR: f64 = 1e-12;
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;
pub const SYMMETRY_TOLERANCE: f64 = 1e-9;
pub const NEGATIVE_EIGEN_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_SPLITS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("cannot form {splits} non-empty splits from {rows} rows")]
    EmptySplit { rows: usize, splits: usize },
    #[error("row {row} is not a probability distribution (sum {sum})")]
    InvalidProbabilities { row: usize, sum: f64 },
    #[error("need at least 2 rows to fit a Gaussian, got {0}")]
    TooFewRows(usize),
    #[error("matrix is not symmetric (max asymmetry {0})")]
    NotSymmetric(f64),
    #[error("matrix has eigenvalue {0} below the PSD tolerance")]
    IndefiniteMatrix(f64),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("non-finite value in input")]
    NonFinite,
    #[error("missing features for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingFeature(Vec<String>),
}

/// Row-stochastic `rows × classes` matrix of class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMatrix<T> {
    values: Matrix<T>,
}

impl<T: Scalar> ProbMatrix<T> {
    pub fn new(values: Matrix<T>) -> Result<Self, MetricsError> {
        let tol = T::lit(ROW_SUM_TOLERANCE);
        for r in 0..values.rows() {
            let row = values.row(r);
            let sum: T = row.iter().copied().sum();
            if !row.iter().all(|&p| p >= T::zero() && p.is_finite()) || (sum - T::one()).abs() > tol {
                return Err(MetricsError::InvalidProbabilities { row: r, sum: sum.to_f64_lossy() });
            }
        }
        Ok(Self { values })
    }

    /// Builds from `f32`-stored rows (e.g. an `EMB1` file). Rows whose sum is
    /// within storage rounding of 1 are renormalized before validation.
    pub fn from_f32_rows<'a>(rows: impl IntoIterator<Item = &'a [f32]>, classes: usize) -> Result<Self, MetricsError> {
        let slack = T::from_count(classes) * T::lit(f32::EPSILON as f64);
        let mut data = Vec::new();
        let mut n = 0;
        for row in rows {
            let mut converted: Vec<T> = crate::scalar::convert_slice(row);
            let sum: T = converted.iter().copied().sum();
            if (sum - T::one()).abs() <= slack && sum > T::zero() {
                converted.iter_mut().for_each(|p| *p /= sum);
            }
            data.extend(converted);
            n += 1;
        }
        Self::new(Matrix::from_vec(n, classes, data))
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn classes(&self) -> usize {
        self.values.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.values.row(i)
    }
}

/// `rows × dim` feature matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T> {
    values: Matrix<T>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(values: Matrix<T>) -> Result<Self, MetricsError> {
        if !values.is_finite() {
            return Err(MetricsError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, MetricsError> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(MetricsError::DimensionMismatch { left: dim, right: bad.len() });
        }
        Self::new(Matrix::from_vec(rows.len(), dim, rows.concat()))
    }

    pub fn from_f32_rows<'a>(rows: impl IntoIterator<Item = &'a [f32]>, dim: usize) -> Result<Self, MetricsError> {
        let mut data = Vec::new();
        let mut n = 0;
        for row in rows {
            if row.len() != dim {
                return Err(MetricsError::DimensionMismatch { left: dim, right: row.len() });
            }
            data.extend(crate::scalar::convert_slice::<T, f32>(row));
            n += 1;
        }
        Self::new(Matrix::from_vec(n, dim, data))
    }

    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.values
    }
}

/// Mean and covariance of a fitted multivariate Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats<T> {
    pub mu: Vec<T>,
    pub sigma: Matrix<T>,
}

impl<T: Scalar> GaussianStats<T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn diagonal(mu: Vec<T>, variances: &[T]) -> Self {
        Self { mu, sigma: Matrix::from_diagonal(variances) }
    }
}

/// Inception Score summary over splits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InceptionScore<T> {
    pub mean: T,
    /// Population standard deviation across splits.
    pub std: T,
}

fn split_is<T: Scalar>(probs: &ProbMatrix<T>, rows: &[usize]) -> T {
    let k = probs.classes();
    let n = T::from_count(rows.len());
    let mut marginal = vec![T::zero(); k];
    for &r in rows {
        for (m, &p) in marginal.iter_mut().zip(probs.row(r)) {
            *m += p;
        }
    }
    marginal.iter_mut().for_each(|m| *m /= n);
    let floor = T::lit(LOG_FLOOR);
    let log_marginal: Vec<T> = marginal.iter().map(|&m| m.max(floor).ln()).collect();
    let mean_kl = rows
        .iter()
        .map(|&r| {
            probs
                .row(r)
                .iter()
                .zip(&log_marginal)
                .filter(|(&p, _)| p > T::zero())
                .map(|(&p, &lm)| p * (p.max(floor).ln() - lm))
                .sum::<T>()
        })
        .sum::<T>()
        / n;
    mean_kl.exp()
}

/// `exp(E_x KL(p(y|x) ‖ p(y)))` per split after a seeded row shuffle.
pub fn inception_score<T: Scalar>(probs: &ProbMatrix<T>, n_splits: usize, seed: u64) -> Result<InceptionScore<T>, MetricsError> {
    let rows = probs.rows();
    if n_splits == 0 || rows < n_splits {
        return Err(MetricsError::EmptySplit { rows, splits: n_splits });
    }
    let order = shuffle::permutation(rows, seed);
    let scores: Vec<T> = (0..n_splits)
        .map(|s| split_is(probs, &order[s * rows / n_splits..(s + 1) * rows / n_splits]))
        .collect();
    let count = T::from_count(n_splits);
    let mean = scores.iter().copied().sum::<T>() / count;
    let var = scores.iter().map(|&s| (s - mean) * (s - mean)).sum::<T>() / count;
    Ok(InceptionScore { mean, std: var.sqrt() })
}

/// Column mean and unbiased covariance (divisor `rows − 1`), symmetrized.
pub fn fit_gaussian<T: Scalar>(features: &FeatureMatrix<T>) -> Result<GaussianStats<T>, MetricsError> {
    let (n, d) = (features.rows(), features.dim());
    if n < 2 {
        return Err(MetricsError::TooFewRows(n));
    }
    let x = features.matrix();
    let count = T::from_count(n);
    let mut mu = vec![T::zero(); d];
    for i in 0..n {
        for (m, &v) in mu.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= count);

    let mut sigma = Matrix::zeros(d, d);
    let mut centered = vec![T::zero(); d];
    for i in 0..n {
        for ((c, &v), &m) in centered.iter_mut().zip(x.row(i)).zip(&mu) {
            *c = v - m;
        }
        for a in 0..d {
            let ca = centered[a];
            for b in a..d {
                sigma[(a, b)] += ca * centered[b];
            }
        }
    }
    let divisor = T::from_count(n - 1);
    for a in 0..d {
        for b in a..d {
            let v = sigma[(a, b)] / divisor;
            sigma[(a, b)] = v;
            sigma[(b, a)] = v;
        }
    }
    Ok(GaussianStats { mu, sigma })
}

/// Principal square root of a symmetric PSD matrix via eigendecomposition.
/// Eigenvalues in `[-1e-8, 0)` are clamped to zero.
pub fn matrix_sqrt_psd<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>, MetricsError> {
    sqrt_psd_with_tolerance(a, T::lit(SYMMETRY_TOLERANCE), T::lit(NEGATIVE_EIGEN_TOLERANCE))
}

fn sqrt_psd_with_tolerance<T: Scalar>(a: &Matrix<T>, sym_tol: T, neg_tol: T) -> Result<Matrix<T>, MetricsError> {
    if !a.is_square() {
        return Err(MetricsError::DimensionMismatch { left: a.rows(), right: a.cols() });
    }
    if !a.is_finite() {
        return Err(MetricsError::NonFinite);
    }
    let asym = a.max_asymmetry();
    if asym > sym_tol {
        return Err(MetricsError::NotSymmetric(asym.to_f64_lossy()));
    }
    let eig = SymmetricEigen::new(a);
    let lowest = eig.min_value();
    if lowest < -neg_tol {
        return Err(MetricsError::IndefiniteMatrix(lowest.to_f64_lossy()));
    }
    Ok(eig.map_values(|x| x.max(T::zero()).sqrt()))
}

/// Squared Fréchet distance between two Gaussians:
/// `‖μ₁−μ₂‖² + Tr(Σ₁ + Σ₂ − 2 (Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`.
pub fn frechet_distance<T: Scalar>(g1: &GaussianStats<T>, g2: &GaussianStats<T>) -> Result<T, MetricsError> {
    if g1.dim() != g2.dim() || g1.sigma.rows() != g1.dim() || g2.sigma.rows() != g2.dim() {
        return Err(MetricsError::DimensionMismatch { left: g1.dim(), right: g2.dim() });
    }
    let mean_term: T = g1.mu.iter().zip(&g2.mu).map(|(&a, &b)| (a - b) * (a - b)).sum();

    // Negative-eigenvalue tolerance scales with the matrix so large covariances
    // are not rejected for rounding noise.
    let scale = |m: &Matrix<T>| T::one().max(m.frobenius_norm());
    let neg_tol = |m: &Matrix<T>| T::lit(NEGATIVE_EIGEN_TOLERANCE) * scale(m);
    let sym_tol = |m: &Matrix<T>| T::lit(SYMMETRY_TOLERANCE) * scale(m);

    let s1 = g1.sigma.symmetrized();
    let s2 = g2.sigma.symmetrized();
    let root1 = sqrt_psd_with_tolerance(&s1, sym_tol(&s1), neg_tol(&s1))?;
    let inner = root1.matmul(&s2).matmul(&root1).symmetrized();
    let cross = sqrt_psd_with_tolerance(&inner, sym_tol(&inner), neg_tol(&inner))?;

    let d = mean_term + s1.trace() + s2.trace() - T::lit(2.0) * cross.trace();
    if d < T::zero() && d >= T::lit(-1e-6) {
        return Ok(T::zero());
    }
    Ok(d)
}

pub fn fid<T: Scalar>(features_a: &FeatureMatrix<T>, features_b: &FeatureMatrix<T>) -> Result<T, MetricsError> {
    frechet_distance(&fit_gaussian(features_a)?, &fit_gaussian(features_b)?)
}

/// Metrics for one partition of a dataset's images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionMetrics {
    pub images: usize,
    pub inception_score: Option<InceptionScore<f64>>,
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetricReport {
    pub preferred: Option<PartitionMetrics>,
    pub non_preferred: Option<PartitionMetrics>,
    pub warnings: Vec<String>,
}

/// Inputs for [`split_metric_report`], all keyed by image id except the reference set.
pub struct SplitMetricInputs<'a> {
    pub probs: &'a EmbeddingMatrix,
    pub features: &'a EmbeddingMatrix,
    pub reference: &'a EmbeddingMatrix,
    pub n_splits: usize,
    pub seed: u64,
}

/// IS and FID (against the reference features) for preferred and non-preferred images.
pub fn split_metric_report(dataset: &Dataset, inputs: &SplitMetricInputs<'_>) -> Result<SplitMetricReport, MetricsError> {
    let mut preferred = Vec::new();
    let mut non_preferred = Vec::new();
    let mut seen = HashSet::new();
    for inst in &dataset.instances {
        for (k, id) in inst.image_ids.iter().enumerate() {
            if !seen.insert(id.as_str()) {
                continue;
            }
            if k == inst.preferred_index {
                preferred.push(id.as_str());
            } else {
                non_preferred.push(id.as_str());
            }
        }
    }
    let missing: Vec<String> = preferred
        .iter()
        .chain(&non_preferred)
        .filter(|id| inputs.probs.get(id).is_none() || inputs.features.get(id).is_none())
        .map(|id| id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(MetricsError::MissingFeature(missing));
    }

    let reference = FeatureMatrix::<f64>::from_f32_rows(inputs.reference.iter().map(|(_, v)| v), inputs.reference.dim())?;
    let mut warnings = Vec::new();
    let mut partition = |name: &str, ids: &[&str]| -> Result<Option<PartitionMetrics>, MetricsError> {
        if ids.is_empty() {
            warnings.push(format!("{name} partition is empty"));
            return Ok(None);
        }
        let probs = ProbMatrix::<f64>::from_f32_rows(ids.iter().map(|id| inputs.probs.get(id).unwrap()), inputs.probs.dim())?;
        let feats = FeatureMatrix::<f64>::from_f32_rows(ids.iter().map(|id| inputs.features.get(id).unwrap()), inputs.features.dim())?;
        let is = match inception_score(&probs, inputs.n_splits, inputs.seed) {
            Ok(s) => Some(s),
            Err(e) => {
                warnings.push(format!("{name}: inception score skipped: {e}"));
                None
            }
        };
        let fid = match fid(&feats, &reference) {
            Ok(v) => Some(v),
            Err(e @ (MetricsError::TooFewRows(_) | MetricsError::IndefiniteMatrix(_))) => {
                warnings.push(format!("{name}: FID skipped: {e}"));
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Some(PartitionMetrics { images: ids.len(), inception_score: is, fid }))
    };
    let preferred = partition("preferred", &preferred)?;
    let non_preferred = partition("non_preferred", &non_preferred)?;
    Ok(SplitMetricReport { preferred, non_preferred, warnings })
}
