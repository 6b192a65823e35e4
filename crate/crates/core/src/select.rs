//! Weighted information criteria and monitoring sweeps over the bandwidth
//! and the number of clusters.

use serde::{Deserialize, Serialize};

use crate::downweight::KernelSpec;
use crate::error::{Error, Result};
use crate::fit::{fit, fit_once, fit_trimmed, root_score, FitConfig, FitResult};
use crate::model::{DataMatrix, MixtureModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Penalty {
    Aic,
    Bic,
}

/// Free parameters of an unconstrained K-component, p-variate mixture.
pub fn free_parameters(k: usize, p: usize) -> usize {
    (k - 1) + k * p + k * p * (p + 1) / 2
}

pub fn penalty_term(penalty: Penalty, k: usize, p: usize, n: usize) -> f64 {
    let nu = free_parameters(k, p) as f64;
    match penalty {
        Penalty::Aic => 2.0 * nu,
        Penalty::Bic => nu * (n as f64).ln(),
    }
}

/// Per-row log mixture densities, accumulated the same way as
/// [`crate::model::log_likelihood`].
fn row_log_densities(data: &DataMatrix, model: &MixtureModel) -> Result<Vec<f64>> {
    if data.p() != model.dim() {
        return Err(Error::DimensionMismatch("data and model".into()));
    }
    let prepared = model.prepare()?;
    Ok(data.rows().map(|r| prepared.log_density(r)).collect())
}

/// `-2 sum_i w_i log m(y_i) + penalty` with the fit's conditional weights.
pub fn weighted_ic(fit: &FitResult, data: &DataMatrix, penalty: Penalty) -> Result<f64> {
    if fit.cond_weights.len() != data.n() {
        return Err(Error::DimensionMismatch("fit and data rows".into()));
    }
    let logs = row_log_densities(data, &fit.model)?;
    let ll: f64 = fit.cond_weights.iter().zip(&logs).map(|(w, l)| w * l).sum();
    Ok(-2.0 * ll + penalty_term(penalty, fit.k(), data.p(), data.n()))
}

/// Classical criterion of the same fitted model with every weight set to one.
pub fn classical_ic(model: &MixtureModel, data: &DataMatrix, penalty: Penalty) -> Result<f64> {
    let ll = crate::model::log_likelihood(data, model)?;
    Ok(-2.0 * ll + penalty_term(penalty, model.k(), data.p(), data.n()))
}

/// `sum_i w_i log(pi_{k_i} phi(y_i; mu_{k_i}, Sigma_{k_i}))` over MAP labels.
pub fn weighted_class_loglik(fit: &FitResult, data: &DataMatrix) -> Result<f64> {
    if fit.assignments.len() != data.n() {
        return Err(Error::DimensionMismatch("fit and data rows".into()));
    }
    let prepared = fit.model.prepare()?;
    let mut total = 0.0;
    for (i, y) in data.rows().enumerate() {
        let l = fit.assignments[i];
        total += fit.cond_weights[i] * (prepared.log_weights[l] + prepared.components[l].log_density(y));
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSpec {
    pub h_values: Vec<f64>,
    pub k_values: Vec<usize>,
    /// When set, the first cell of each K starts from a trimmed
    /// classification fit with this trimming fraction instead of random
    /// multi-starts.
    #[serde(default)]
    pub start_trim: Option<f64>,
}

impl MonitorSpec {
    pub fn new(h_values: Vec<f64>, k_values: Vec<usize>) -> Result<Self> {
        let spec = Self { h_values, k_values, start_trim: None };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h_values.is_empty() || self.k_values.is_empty() {
            return Err(Error::InvalidConfig("monitor grids must be nonempty".into()));
        }
        if self.h_values.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidConfig("bandwidths must be positive and finite".into()));
        }
        if self.h_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("bandwidth grid must be strictly increasing".into()));
        }
        if self.start_trim.is_some_and(|t| !(0.0..1.0).contains(&t)) {
            return Err(Error::InvalidConfig("start trimming fraction must lie in [0, 1)".into()));
        }
        if self.k_values.contains(&0) || self.k_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("K grid must be positive and strictly increasing".into()));
        }
        Ok(())
    }

    /// `count` evenly spaced values from `start` to `stop` inclusive.
    pub fn linspace(start: f64, stop: f64, count: usize) -> Result<Vec<f64>> {
        match count {
            0 => Err(Error::InvalidConfig("grid count must be positive".into())),
            1 => Ok(vec![start]),
            _ => Ok((0..count).map(|i| start + (stop - start) * i as f64 / (count - 1) as f64).collect()),
        }
    }
}

/// `count` log-evenly spaced values from `start` to `stop` inclusive.
pub fn geomspace(start: f64, stop: f64, count: usize) -> Result<Vec<f64>> {
    if !(start > 0.0 && stop > 0.0) {
        return Err(Error::InvalidConfig("log-spaced grid needs positive end points".into()));
    }
    let logs = MonitorSpec::linspace(start.ln(), stop.ln(), count)?;
    Ok(logs.into_iter().map(f64::exp).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorCell {
    pub k: usize,
    pub h: f64,
    pub downweighting: f64,
    pub weighted_bic: f64,
    pub weighted_aic: f64,
    pub wclass_loglik: f64,
    pub converged: bool,
    pub cond_dist2: Vec<f64>,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub k: usize,
    pub h: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorGrid {
    pub h_values: Vec<f64>,
    pub k_values: Vec<usize>,
    /// Successful cells ordered by K, then h.
    pub cells: Vec<MonitorCell>,
    pub failures: Vec<CellFailure>,
}

impl MonitorGrid {
    pub fn cells_for(&self, k: usize) -> impl Iterator<Item = &MonitorCell> {
        self.cells.iter().filter(move |c| c.k == k)
    }

    /// Downweighting profile `(h, level)` for one K.
    pub fn profile(&self, k: usize) -> Vec<(f64, f64)> {
        self.cells_for(k).map(|c| (c.h, c.downweighting)).collect()
    }
}

fn record(data: &DataMatrix, k: usize, h: f64, fit: FitResult) -> Result<MonitorCell> {
    Ok(MonitorCell {
        k,
        h,
        downweighting: fit.downweighting(),
        weighted_bic: weighted_ic(&fit, data, Penalty::Bic)?,
        weighted_aic: weighted_ic(&fit, data, Penalty::Aic)?,
        wclass_loglik: weighted_class_loglik(&fit, data)?,
        converged: fit.converged,
        cond_dist2: fit.cond_dist2.clone(),
        fit,
    })
}

fn sweep_k(data: &DataMatrix, k: usize, spec: &MonitorSpec, config: &FitConfig) -> Vec<std::result::Result<MonitorCell, CellFailure>> {
    let mut previous: Option<MixtureModel> = None;
    let mut out = Vec::with_capacity(spec.h_values.len());
    for &h in &spec.h_values {
        let mut cfg = config.clone();
        let outcome = KernelSpec::new(cfg.kernel.family, h).and_then(|kernel| {
            cfg.kernel = kernel;
            let fitted = match &previous {
                Some(start) => {
                    let mut r = fit_once(data, k, start, &cfg)?;
                    if cfg.algorithm.is_weighted() {
                        r.root_score = root_score(&r, &cfg).unwrap_or(f64::NAN);
                    }
                    r
                }
                None => match spec.start_trim {
                    Some(trim) => fit_trimmed(data, k, trim, &cfg)?,
                    None => fit(data, k, &cfg, &[])?,
                },
            };
            record(data, k, h, fitted)
        });
        match outcome {
            Ok(cell) => {
                previous = Some(cell.fit.model.clone());
                out.push(Ok(cell));
            }
            Err(e) => out.push(Err(CellFailure { k, h, error: e.to_string() })),
        }
    }
    out
}

/// Fits every `(h, K)` cell. Within one K the bandwidths are visited in
/// increasing order and each fit starts from the previous cell's solution;
/// distinct K run concurrently. Failed cells are recorded and skipped.
pub fn monitor(data: &DataMatrix, config: &FitConfig, spec: &MonitorSpec) -> Result<MonitorGrid> {
    spec.validate()?;
    config.validate()?;
    let run = |&k: &usize| sweep_k(data, k, spec, config);
    #[cfg(feature = "parallel")]
    let per_k: Vec<_> = {
        use rayon::prelude::*;
        spec.k_values.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_k: Vec<_> = spec.k_values.iter().map(run).collect();
    let mut cells = Vec::new();
    let mut failures = Vec::new();
    for outcome in per_k.into_iter().flatten() {
        match outcome {
            Ok(c) => cells.push(c),
            Err(f) => failures.push(f),
        }
    }
    Ok(MonitorGrid { h_values: spec.h_values.clone(), k_values: spec.k_values.clone(), cells, failures })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuggestOptions {
    pub jump_threshold: f64,
    pub target: f64,
}

impl Default for SuggestOptions {
    fn default() -> Self {
        Self { jump_threshold: 0.10, target: 0.10 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rationale {
    Changepoint,
    NoChangepoint,
}

impl std::fmt::Display for Rationale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Rationale::Changepoint => "changepoint",
            Rationale::NoChangepoint => "no-changepoint",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub k: usize,
    pub h: f64,
    pub index: usize,
    pub downweighting: f64,
    pub rationale: Rationale,
    /// Size of the drop for a changepoint, distance to the target otherwise.
    pub score: f64,
}

/// Picks a bandwidth from a downweighting profile sorted by h.
pub fn suggest_from_profile(profile: &[(f64, f64)], options: SuggestOptions) -> Result<(usize, Rationale, f64)> {
    if profile.len() < 3 {
        return Err(Error::GridTooSmall);
    }
    let mut best: Option<(usize, f64)> = None;
    for (j, w) in profile.windows(2).enumerate() {
        let drop = w[0].1 - w[1].1;
        if drop > options.jump_threshold && best.is_none_or(|(_, d)| drop > d) {
            best = Some((j, drop));
        }
    }
    if let Some((j, drop)) = best {
        return Ok((j, Rationale::Changepoint, drop));
    }
    let mut idx = 0;
    let mut dist = f64::INFINITY;
    for (j, &(_, level)) in profile.iter().enumerate() {
        let d = (level - options.target).abs();
        if d < dist {
            dist = d;
            idx = j;
        }
    }
    Ok((idx, Rationale::NoChangepoint, dist))
}

/// Largest h strictly before the biggest adjacent drop in downweighting
/// level above the jump threshold; without such a drop, the h whose level is
/// closest to the target.
pub fn suggest_h(grid: &MonitorGrid, k: usize, options: SuggestOptions) -> Result<Suggestion> {
    let profile = grid.profile(k);
    let (index, rationale, score) = suggest_from_profile(&profile, options)?;
    let (h, downweighting) = profile[index];
    Ok(Suggestion { k, h, index, downweighting, rationale, score })
}
