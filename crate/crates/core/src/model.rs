//! Parameter containers, Gaussian and mixture densities, Mahalanobis distances.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Row-major n x p matrix of finite observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct DataMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
}

impl DataMatrix {
    pub fn new(n: usize, p: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || p == 0 {
            return Err(Error::InvalidData(format!("empty data matrix ({n} x {p})")));
        }
        if values.len() != n * p {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n} x {p} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite value at row {}, column {}",
                pos / p + 1,
                pos % p + 1
            )));
        }
        Ok(Self { n, p, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("ragged rows".into()));
        }
        Self::new(rows.len(), p, rows.concat())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.p..(i + 1) * self.p]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.p)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Stack `other` below `self`.
    pub fn append(&self, other: &DataMatrix) -> Result<DataMatrix> {
        if other.p != self.p {
            return Err(Error::DimensionMismatch("column counts differ".into()));
        }
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        DataMatrix::new(self.n + other.n, self.p, values)
    }

    /// Keep the given rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> DataMatrix {
        let mut values = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            values.extend_from_slice(self.row(i));
        }
        DataMatrix { n: idx.len(), p: self.p, values }
    }

    /// Per-column (min, max).
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = vec![(f64::INFINITY, f64::NEG_INFINITY); self.p];
        for row in self.rows() {
            for (j, &v) in row.iter().enumerate() {
                b[j].0 = b[j].0.min(v);
                b[j].1 = b[j].1.max(v);
            }
        }
        b
    }

    /// Per-column standard deviation (n - 1 denominator, 0 for n = 1).
    pub fn column_sd(&self) -> Vec<f64> {
        let n = self.n as f64;
        (0..self.p)
            .map(|j| {
                let mean = self.rows().map(|r| r[j]).sum::<f64>() / n;
                if self.n < 2 {
                    return 0.0;
                }
                let ss = self.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>();
                (ss / (n - 1.0)).sqrt()
            })
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for DataMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        DataMatrix::from_rows(&rows)
    }
}

impl From<DataMatrix> for Vec<Vec<f64>> {
    fn from(d: DataMatrix) -> Self {
        d.rows().map(<[f64]>::to_vec).collect()
    }
}

/// n x K grid of squared Mahalanobis distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn compute(data: &DataMatrix, model: &PreparedModel) -> DistanceMatrix {
        let k = model.k();
        let mut values = Vec::with_capacity(data.n() * k);
        for row in data.rows() {
            for c in &model.components {
                values.push(c.mahalanobis_sq(row));
            }
        }
        DistanceMatrix { n: data.n(), k, values }
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k + k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, k)).collect()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Mixture weights, component means and covariance matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct MixtureModel {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Vec<Vec<f64>>>,
}

impl From<MixtureModel> for ModelRepr {
    fn from(m: MixtureModel) -> Self {
        ModelRepr {
            weights: m.weights,
            means: m.means.iter().map(|v| v.iter().copied().collect()).collect(),
            covariances: m
                .covariances
                .iter()
                .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
        }
    }
}

impl TryFrom<ModelRepr> for MixtureModel {
    type Error = Error;
    fn try_from(r: ModelRepr) -> Result<Self> {
        let means = r.means.into_iter().map(DVector::from_vec).collect();
        let mut covs = Vec::with_capacity(r.covariances.len());
        for c in r.covariances {
            let p = c.len();
            if c.iter().any(|row| row.len() != p) {
                return Err(Error::InvalidModel("covariance is not square".into()));
            }
            covs.push(DMatrix::from_row_slice(p, p, &c.concat()));
        }
        MixtureModel::new(r.weights, means, covs)
    }
}

impl MixtureModel {
    /// Builds a model and checks its invariants.
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let m = Self { weights, means, covariances };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(Error::InvalidModel("no components".into()));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(Error::InvalidModel("weights, means and covariances differ in length".into()));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::InvalidModel("negative or NaN weight".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!("weights sum to {total}")));
        }
        let p = self.means[0].len();
        if p == 0 {
            return Err(Error::InvalidModel("zero-dimensional means".into()));
        }
        for (mu, cov) in self.means.iter().zip(&self.covariances) {
            if mu.len() != p || cov.nrows() != p || cov.ncols() != p {
                return Err(Error::InvalidModel("inconsistent dimensions".into()));
            }
            if mu.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidModel("non-finite parameter".into()));
            }
            let asym = (cov - cov.transpose()).amax();
            if asym > 1e-10 {
                return Err(Error::InvalidModel(format!("covariance asymmetry {asym}")));
            }
            GaussianComponent::new(mu.clone(), cov)?;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    /// Precomputes eigendecompositions for repeated density evaluation.
    pub fn prepare(&self) -> Result<PreparedModel> {
        let components = self
            .means
            .iter()
            .zip(&self.covariances)
            .map(|(m, c)| GaussianComponent::new(m.clone(), c))
            .collect::<Result<Vec<_>>>()?;
        let log_weights = self.weights.iter().map(|w| w.ln()).collect();
        Ok(PreparedModel { components, log_weights })
    }

    /// Reorders components: new component `j` is old component `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> MixtureModel {
        MixtureModel {
            weights: perm.iter().map(|&j| self.weights[j]).collect(),
            means: perm.iter().map(|&j| self.means[j].clone()).collect(),
            covariances: perm.iter().map(|&j| self.covariances[j].clone()).collect(),
        }
    }
}

/// Symmetric eigendecomposition `V diag(values) V^T`.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(m: &DMatrix<f64>) -> SymEigen {
        let sym = (m + m.transpose()) * 0.5;
        let e = SymmetricEigen::new(sym);
        SymEigen { values: e.eigenvalues, vectors: e.eigenvectors }
    }

    pub fn reconstruct(&self, values: &DVector<f64>) -> DMatrix<f64> {
        let scaled = &self.vectors * DMatrix::from_diagonal(values);
        let out = scaled * self.vectors.transpose();
        (&out + out.transpose()) * 0.5
    }
}

/// One Gaussian component with cached inverse square root and log-normalizer.
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub mean: DVector<f64>,
    pub eigen: SymEigen,
    whitening: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianComponent {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let eigen = SymEigen::new(cov);
        let max = eigen.values.max();
        let min = eigen.values.min();
        if !(max > 0.0) || !(min > 1e-300 * max) {
            return Err(Error::SingularCovariance);
        }
        let p = mean.len();
        let mut whitening = eigen.vectors.transpose();
        for (j, mut row) in whitening.row_iter_mut().enumerate() {
            row /= eigen.values[j].sqrt();
        }
        let log_det: f64 = eigen.values.iter().map(|v| v.ln()).sum();
        let log_norm = -0.5 * (p as f64 * LN_2PI + log_det);
        Ok(Self { mean, eigen, whitening, log_norm })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mahalanobis_sq(&self, y: &[f64]) -> f64 {
        let p = self.dim();
        let mut total = 0.0;
        for r in 0..p {
            let mut z = 0.0;
            for c in 0..p {
                z += self.whitening[(r, c)] * (y[c] - self.mean[c]);
            }
            total += z * z;
        }
        total
    }

    pub fn log_density_from_d2(&self, d2: f64) -> f64 {
        self.log_norm - 0.5 * d2
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        self.log_density_from_d2(self.mahalanobis_sq(y))
    }
}

#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub components: Vec<GaussianComponent>,
    pub log_weights: Vec<f64>,
}

impl PreparedModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// ln(pi_k) + ln(phi(y; mu_k, Sigma_k)) for every k.
    pub fn joint_log_densities(&self, y: &[f64], out: &mut [f64]) {
        for (k, c) in self.components.iter().enumerate() {
            out[k] = self.log_weights[k] + c.log_density(y);
        }
    }

    pub fn log_density(&self, y: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.k()];
        self.joint_log_densities(y, &mut buf);
        log_sum_exp(&buf)
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `(y - mu)^T Sigma^-1 (y - mu)`.
pub fn mahalanobis_sq(point: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    if point.len() != mean.len() || cov.nrows() != mean.len() || cov.ncols() != mean.len() {
        return Err(Error::DimensionMismatch("point, mean and covariance".into()));
    }
    let c = GaussianComponent::new(DVector::from_column_slice(mean), cov)?;
    if point == mean {
        return Ok(0.0);
    }
    Ok(c.mahalanobis_sq(point))
}

pub fn log_mixture_density(point: &[f64], model: &MixtureModel) -> Result<f64> {
    if point.len() != model.dim() {
        return Err(Error::DimensionMismatch("point and model".into()));
    }
    Ok(model.prepare()?.log_density(point))
}

/// Mixture density accumulated in log space with a max shift.
pub fn mixture_density(point: &[f64], model: &MixtureModel) -> Result<f64> {
    Ok(log_mixture_density(point, model)?.exp())
}

pub fn log_likelihood(data: &DataMatrix, model: &MixtureModel) -> Result<f64> {
    if data.p() != model.dim() {
        return Err(Error::DimensionMismatch("data and model".into()));
    }
    let prepared = model.prepare()?;
    Ok(data.rows().map(|r| prepared.log_density(r)).sum())
}
