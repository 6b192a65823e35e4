//! Eigen-ratio constraint across component covariance matrices.
//!
//! Eigenvalues of all components are pooled and truncated to `[m, c * m]`,
//! where `m` minimizes the count-weighted Gaussian deviance
//! `sum_k n_k sum_j (ln l*_jk + l_jk / l*_jk)`. On each interval between
//! consecutive breakpoints `{l_jk} U {l_jk / c}` the optimum has a closed form,
//! so only `2Kp + 1` candidate values need to be compared.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::SymEigen;

/// Pooled eigenvalue ratio `max_jk l_jk / min_jk l_jk`.
pub fn eigen_ratio(covariances: &[DMatrix<f64>]) -> f64 {
    let (lo, hi) = covariances
        .iter()
        .flat_map(|c| SymEigen::new(c).values.iter().copied().collect::<Vec<_>>())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi / lo
}

/// Enforcement with equal component counts.
pub fn eigen_ratio_enforce(covariances: &[DMatrix<f64>], c: f64) -> Result<Vec<DMatrix<f64>>> {
    let counts = vec![1.0; covariances.len()];
    eigen_ratio_enforce_weighted(covariances, &counts, c)
}

/// Truncation deviance for lower bound `m`.
pub fn truncation_deviance(eigenvalues: &[Vec<f64>], counts: &[f64], c: f64, m: f64) -> f64 {
    eigenvalues
        .iter()
        .zip(counts)
        .map(|(vals, &n)| {
            n * vals
                .iter()
                .map(|&l| {
                    let t = l.clamp(m, c * m);
                    t.ln() + l / t
                })
                .sum::<f64>()
        })
        .sum()
}

/// Optimal truncation bound `m` for pooled eigenvalues.
pub fn optimal_truncation(eigenvalues: &[Vec<f64>], counts: &[f64], c: f64) -> Result<f64> {
    let mut breaks: Vec<f64> = eigenvalues
        .iter()
        .flatten()
        .flat_map(|&l| [l, l / c])
        .filter(|&b| b > 0.0)
        .collect();
    if breaks.is_empty() {
        return Err(Error::DegenerateComponent { component: 0 });
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();

    let mut candidates = breaks.clone();
    // interval (0, b_0], [b_i, b_i+1], [b_last, inf)
    let edges: Vec<(f64, f64)> = std::iter::once((0.0, breaks[0]))
        .chain(breaks.windows(2).map(|w| (w[0], w[1])))
        .chain(std::iter::once((breaks[breaks.len() - 1], f64::INFINITY)))
        .collect();
    for (lo, hi) in edges {
        let probe = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo };
        let (mut num, mut den) = (0.0, 0.0);
        for (vals, &n) in eigenvalues.iter().zip(counts) {
            for &l in vals {
                if l < probe {
                    num += n * l;
                    den += n;
                } else if l > c * probe {
                    num += n * l / c;
                    den += n;
                }
            }
        }
        if den > 0.0 && num > 0.0 {
            let m = num / den;
            if m > lo && m < hi {
                candidates.push(m);
            }
        }
    }

    let mut best = (f64::INFINITY, candidates[0]);
    for m in candidates {
        let f = truncation_deviance(eigenvalues, counts, c, m);
        if f < best.0 {
            best = (f, m);
        }
    }
    Ok(best.1)
}

/// Truncates pooled eigenvalues so that `max / min <= c`; eigenvectors are
/// kept. Inputs already satisfying the constraint are returned untouched.
pub fn eigen_ratio_enforce_weighted(
    covariances: &[DMatrix<f64>],
    counts: &[f64],
    c: f64,
) -> Result<Vec<DMatrix<f64>>> {
    if !(c >= 1.0) {
        return Err(Error::InvalidConfig(format!("eigen-ratio bound must be >= 1, got {c}")));
    }
    if counts.len() != covariances.len() {
        return Err(Error::DimensionMismatch("counts and covariances".into()));
    }
    let eigens: Vec<SymEigen> = covariances.iter().map(SymEigen::new).collect();
    let values: Vec<Vec<f64>> = eigens.iter().map(|e| e.values.iter().map(|v| v.max(0.0)).collect()).collect();
    let (lo, hi) = values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo > 0.0 && hi / lo <= c {
        return Ok(covariances.to_vec());
    }
    let m = optimal_truncation(&values, counts, c)?;
    Ok(eigens
        .iter()
        .zip(&values)
        .map(|(e, vals)| {
            let clipped = DVector::from_iterator(vals.len(), vals.iter().map(|l| l.clamp(m, c * m)));
            e.reconstruct(&clipped)
        })
        .collect())
}
