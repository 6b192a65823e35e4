//! WEM / WCEM iterations and their non-robust EM / CEM baselines.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::constraint::eigen_ratio_enforce_weighted;
use crate::downweight::{residual_or_sentinel, weight, BoundaryKde, KernelFamily, KernelSpec, RafSpec};
use crate::error::{Error, Result};
use crate::model::{log_sum_exp, DataMatrix, DistanceMatrix, MixtureModel, PreparedModel};

/// Residual level below which a point counts toward the root-selection score.
pub const ROOT_RESIDUAL_CUTOFF: f64 = -0.95;
/// Candidates whose mean conditional weight falls below this are degenerate.
pub const DEGENERATE_MEAN_WEIGHT: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Wem,
    Wcem,
    Em,
    Cem,
}

impl Algorithm {
    pub fn is_weighted(self) -> bool {
        matches!(self, Algorithm::Wem | Algorithm::Wcem)
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Algorithm::Wcem | Algorithm::Cem)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Wem => "wem",
            Algorithm::Wcem => "wcem",
            Algorithm::Em => "em",
            Algorithm::Cem => "cem",
        })
    }
}

impl FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wem" => Ok(Algorithm::Wem),
            "wcem" => Ok(Algorithm::Wcem),
            "em" => Ok(Algorithm::Em),
            "cem" => Ok(Algorithm::Cem),
            other => Err(Error::InvalidConfig(format!(
                "unknown algorithm '{other}', expected one of: wem, wcem, em, cem"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub algorithm: Algorithm,
    pub kernel: KernelSpec,
    pub raf: RafSpec,
    pub eigen_ratio: f64,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub unbias_cov: bool,
    pub root_mc_draws: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Wem,
            kernel: KernelSpec { family: KernelFamily::FoldedNormal, bandwidth: 0.5 },
            raf: RafSpec::gkl(0.9).expect("valid tuning"),
            eigen_ratio: 50.0,
            max_iter: 500,
            rel_tol: 1e-8,
            n_starts: 20,
            seed: 0,
            unbias_cov: false,
            root_mc_draws: 10_000,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eigen_ratio >= 1.0) {
            return Err(Error::InvalidConfig(format!("eigen ratio must be >= 1, got {}", self.eigen_ratio)));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be positive".into()));
        }
        if self.max_iter == 0 || self.root_mc_draws == 0 {
            return Err(Error::InvalidConfig("max_iter and root_mc_draws must be positive".into()));
        }
        KernelSpec::new(self.kernel.family, self.kernel.bandwidth)?;
        Ok(())
    }
}

/// n x K posterior membership probabilities (one-hot after a C-step).
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    n: usize,
    k: usize,
    values: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn from_values(n: usize, k: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * k {
            return Err(Error::DimensionMismatch("posterior shape".into()));
        }
        Ok(Self { n, k, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.values[i * self.k + k]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    /// Row-wise argmax; ties go to the lowest component index.
    pub fn map_labels(&self) -> Vec<usize> {
        (0..self.n).map(|i| argmax(self.row(i))).collect()
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Pearson residuals and weights from one soft-trimming pass.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightState {
    /// n x K row-major, one set of weights per component (WEM).
    Componentwise { k: usize, residuals: Vec<f64>, weights: Vec<f64> },
    /// One weight per point at its assigned component (WCEM).
    Conditional { residuals: Vec<f64>, weights: Vec<f64> },
}

impl WeightState {
    pub fn weights(&self) -> &[f64] {
        match self {
            WeightState::Componentwise { weights, .. } | WeightState::Conditional { weights, .. } => weights,
        }
    }

    pub fn residuals(&self) -> &[f64] {
        match self {
            WeightState::Componentwise { residuals, .. } | WeightState::Conditional { residuals, .. } => residuals,
        }
    }

    /// Weight attached to point `i` in component `k`.
    fn weight(&self, i: usize, k: usize) -> f64 {
        match self {
            WeightState::Componentwise { k: kk, weights, .. } => weights[i * kk + k],
            WeightState::Conditional { weights, .. } => weights[i],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub algorithm: Algorithm,
    pub model: MixtureModel,
    /// 0-based component index per row.
    pub assignments: Vec<usize>,
    pub cond_weights: Vec<f64>,
    pub cond_dist2: Vec<f64>,
    pub cond_residuals: Vec<f64>,
    pub weighted_loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub root_score: f64,
    /// Fraction of the observed rows with residual below the root cutoff.
    pub root_score_empirical: f64,
}

impl FitResult {
    pub fn k(&self) -> usize {
        self.model.k()
    }

    pub fn mean_weight(&self) -> f64 {
        self.cond_weights.iter().sum::<f64>() / self.cond_weights.len() as f64
    }

    /// Empirical downweighting level `1 - mean(w)`.
    pub fn downweighting(&self) -> f64 {
        1.0 - self.mean_weight()
    }
}

/// E-step output: posteriors plus per-row log mixture densities.
#[derive(Debug, Clone)]
pub struct Expectation {
    pub posterior: PosteriorMatrix,
    pub log_density: Vec<f64>,
    /// ln(pi_k phi_k(y_i)), n x K row-major.
    pub joint: Vec<f64>,
    pub underflow_rows: Vec<usize>,
}

fn expectation(dist: &DistanceMatrix, prepared: &PreparedModel) -> Expectation {
    let (n, k) = (dist.n(), dist.k());
    let mut joint = Vec::with_capacity(n * k);
    for i in 0..n {
        for (c, comp) in prepared.components.iter().enumerate() {
            joint.push(prepared.log_weights[c] + comp.log_density_from_d2(dist.get(i, c)));
        }
    }
    let mut values = vec![0.0; n * k];
    let mut log_density = Vec::with_capacity(n);
    let mut underflow_rows = Vec::new();
    for i in 0..n {
        let row = &joint[i * k..(i + 1) * k];
        let lse = log_sum_exp(row);
        log_density.push(lse);
        let out = &mut values[i * k..(i + 1) * k];
        if lse.is_finite() {
            for (o, &j) in out.iter_mut().zip(row) {
                *o = (j - lse).exp();
            }
            let s: f64 = out.iter().sum();
            out.iter_mut().for_each(|o| *o /= s);
        } else {
            out.iter_mut().for_each(|o| *o = 1.0 / k as f64);
            underflow_rows.push(i);
        }
    }
    Expectation { posterior: PosteriorMatrix { n, k, values }, log_density, joint, underflow_rows }
}

/// Posterior membership probabilities, computed in log space.
pub fn e_step(data: &DataMatrix, model: &MixtureModel) -> Result<PosteriorMatrix> {
    check_dims(data, model)?;
    let prepared = model.prepare()?;
    let dist = DistanceMatrix::compute(data, &prepared);
    Ok(expectation(&dist, &prepared).posterior)
}

/// Hard assignment to the most probable component.
pub fn c_step(u: &PosteriorMatrix) -> PosteriorMatrix {
    let mut values = vec![0.0; u.n * u.k];
    for (i, k) in u.map_labels().into_iter().enumerate() {
        values[i * u.k + k] = 1.0;
    }
    PosteriorMatrix { n: u.n, k: u.k, values }
}

fn check_dims(data: &DataMatrix, model: &MixtureModel) -> Result<()> {
    if data.p() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "data has {} columns, model dimension {}",
            data.p(),
            model.dim()
        )));
    }
    Ok(())
}

fn kde_for(samples: &[f64], kernel: KernelSpec) -> Result<BoundaryKde> {
    if kernel.family == KernelFamily::LogTransform {
        let clamped: Vec<f64> = samples.iter().map(|s| s.max(f64::MIN_POSITIVE)).collect();
        BoundaryKde::new(&clamped, kernel)
    } else {
        BoundaryKde::new(samples, kernel)
    }
}

fn kde_at(kde: &BoundaryKde, t: f64) -> Result<f64> {
    if kde.spec().family == KernelFamily::LogTransform {
        kde.density(t.max(f64::MIN_POSITIVE))
    } else {
        kde.density(t)
    }
}

fn componentwise_weights(dist: &DistanceMatrix, p: usize, kernel: KernelSpec, raf: &RafSpec) -> Result<WeightState> {
    let (n, k) = (dist.n(), dist.k());
    let mut residuals = vec![0.0; n * k];
    let mut weights = vec![0.0; n * k];
    for c in 0..k {
        let column = dist.column(c);
        let kde = kde_for(&column, kernel)?;
        for (i, &d2) in column.iter().enumerate() {
            let delta = residual_or_sentinel(d2, p, kde_at(&kde, d2)?);
            residuals[i * k + c] = delta;
            weights[i * k + c] = weight(delta, raf);
        }
    }
    Ok(WeightState::Componentwise { k, residuals, weights })
}

/// One KDE per cluster built from the squared distances of its members.
pub(crate) fn conditional_kdes(cond_dist2: &[f64], labels: &[usize], k: usize, kernel: KernelSpec) -> Result<Vec<BoundaryKde>> {
    let mut groups = vec![Vec::new(); k];
    for (&d2, &l) in cond_dist2.iter().zip(labels) {
        groups[l].push(d2);
    }
    groups
        .iter()
        .enumerate()
        .map(|(c, g)| {
            if g.len() < 2 {
                Err(Error::DegenerateComponent { component: c })
            } else {
                kde_for(g, kernel)
            }
        })
        .collect()
}

fn conditional_weights(
    dist: &DistanceMatrix,
    labels: &[usize],
    p: usize,
    kernel: KernelSpec,
    raf: &RafSpec,
) -> Result<(Vec<f64>, WeightState)> {
    let cond: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| dist.get(i, l)).collect();
    let kdes = conditional_kdes(&cond, labels, dist.k(), kernel)?;
    let mut residuals = Vec::with_capacity(cond.len());
    let mut weights = Vec::with_capacity(cond.len());
    for (&d2, &l) in cond.iter().zip(labels) {
        let delta = residual_or_sentinel(d2, p, kde_at(&kdes[l], d2)?);
        residuals.push(delta);
        weights.push(weight(delta, raf));
    }
    Ok((cond, WeightState::Conditional { residuals, weights }))
}

/// Soft-trimming weights: component-wise for WEM, conditional on the
/// supplied assignments for WCEM. The non-robust baselines get unit weights.
pub fn soft_trim(
    data: &DataMatrix,
    model: &MixtureModel,
    config: &FitConfig,
    assignments: Option<&[usize]>,
) -> Result<WeightState> {
    check_dims(data, model)?;
    let prepared = model.prepare()?;
    let dist = DistanceMatrix::compute(data, &prepared);
    let (n, k, p) = (data.n(), model.k(), data.p());
    match config.algorithm {
        Algorithm::Wem => componentwise_weights(&dist, p, config.kernel, &config.raf),
        Algorithm::Wcem => {
            let labels = assignments
                .ok_or_else(|| Error::InvalidConfig("WCEM soft trimming needs cluster assignments".into()))?;
            if labels.len() != n || labels.iter().any(|&l| l >= k) {
                return Err(Error::DimensionMismatch("assignments".into()));
            }
            Ok(conditional_weights(&dist, labels, p, config.kernel, &config.raf)?.1)
        }
        Algorithm::Em => Ok(WeightState::Componentwise { k, residuals: vec![0.0; n * k], weights: vec![1.0; n * k] }),
        Algorithm::Cem => Ok(WeightState::Conditional { residuals: vec![0.0; n], weights: vec![1.0; n] }),
    }
}

/// Weighted M-step followed by eigen-ratio enforcement.
pub fn m_step_weighted(
    data: &DataMatrix,
    u: &PosteriorMatrix,
    w: &WeightState,
    config: &FitConfig,
) -> Result<MixtureModel> {
    Ok(m_step_inner(data, u, w, config)?.0)
}

fn m_step_inner(
    data: &DataMatrix,
    u: &PosteriorMatrix,
    w: &WeightState,
    config: &FitConfig,
) -> Result<(MixtureModel, Vec<f64>)> {
    let (n, k, p) = (data.n(), u.k(), data.p());
    if u.n() != n || w.weights().len() != n * k && w.weights().len() != n {
        return Err(Error::DimensionMismatch("posterior, weights and data".into()));
    }
    let mut sums = vec![0.0; k];
    let mut sq_sums = vec![0.0; k];
    let mut means = vec![DVector::<f64>::zeros(p); k];
    for i in 0..n {
        let y = data.row(i);
        for c in 0..k {
            let e = u.get(i, c) * w.weight(i, c);
            if e == 0.0 {
                continue;
            }
            sums[c] += e;
            sq_sums[c] += e * e;
            for j in 0..p {
                means[c][j] += e * y[j];
            }
        }
    }
    for c in 0..k {
        if !(sums[c] >= 1e-8 * n as f64) {
            return Err(Error::DegenerateComponent { component: c });
        }
        means[c] /= sums[c];
    }
    let mut covs = vec![DMatrix::<f64>::zeros(p, p); k];
    let mut diff = vec![0.0; p];
    for i in 0..n {
        let y = data.row(i);
        for c in 0..k {
            let e = u.get(i, c) * w.weight(i, c);
            if e == 0.0 {
                continue;
            }
            for j in 0..p {
                diff[j] = y[j] - means[c][j];
            }
            let cov = &mut covs[c];
            for a in 0..p {
                for b in 0..=a {
                    cov[(a, b)] += e * diff[a] * diff[b];
                }
            }
        }
    }
    for c in 0..k {
        for a in 0..p {
            for b in 0..a {
                covs[c][(b, a)] = covs[c][(a, b)];
            }
        }
        covs[c] /= sums[c];
        if config.unbias_cov {
            let denom = sums[c] - sq_sums[c] / sums[c];
            if denom > 0.0 {
                covs[c] *= sums[c] / denom;
            }
        }
    }
    let covs = eigen_ratio_enforce_weighted(&covs, &sums, config.eigen_ratio)?;
    let total: f64 = sums.iter().sum();
    let mut weights: Vec<f64> = sums.iter().map(|s| s / total).collect();
    let norm: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= norm);
    let model = MixtureModel { weights, means, covariances: covs };
    model.prepare().map_err(|_| Error::DegenerateComponent { component: 0 })?;
    Ok((model, sums))
}

/// Starting values: user-supplied starts first, then `n_starts` generated
/// candidates. Generated candidates fit means and diagonal covariances to a
/// random partition of `K(p+1)` sampled rows; when user starts exist, every
/// other generated candidate is instead a user start with perturbed means.
pub fn init_candidates(
    data: &DataMatrix,
    k: usize,
    config: &FitConfig,
    user_starts: &[MixtureModel],
) -> Result<Vec<MixtureModel>> {
    let (n, p) = (data.n(), data.p());
    if k == 0 {
        return Err(Error::InvalidConfig("K must be at least 1".into()));
    }
    let needed = k * (p + 1);
    if n < needed {
        return Err(Error::TooFewRows { needed, got: n });
    }
    for s in user_starts {
        if s.k() != k || s.dim() != p {
            return Err(Error::DimensionMismatch("user start shape".into()));
        }
        s.validate()?;
    }
    let sd = data.column_sd();
    let floor: Vec<f64> = sd.iter().map(|s| (1e-3 * s * s).max(1e-12)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out: Vec<MixtureModel> = user_starts.to_vec();
    for s in 0..config.n_starts {
        let candidate = if !user_starts.is_empty() && s % 2 == 1 {
            let base = &user_starts[(s / 2) % user_starts.len()];
            let mut m = base.clone();
            for mean in &mut m.means {
                for j in 0..p {
                    let z: f64 = rng.sample(StandardNormal);
                    mean[j] += 0.1 * sd[j] * z;
                }
            }
            m
        } else {
            let rows = sample(&mut rng, n, needed).into_vec();
            let mut means = Vec::with_capacity(k);
            let mut covs = Vec::with_capacity(k);
            for group in rows.chunks(p + 1) {
                let mut mean = DVector::zeros(p);
                for &i in group {
                    mean += DVector::from_column_slice(data.row(i));
                }
                mean /= group.len() as f64;
                let var = DVector::from_iterator(
                    p,
                    (0..p).map(|j| {
                        let ss: f64 = group.iter().map(|&i| (data.row(i)[j] - mean[j]).powi(2)).sum();
                        (ss / (group.len() as f64 - 1.0).max(1.0)).max(floor[j])
                    }),
                );
                means.push(mean);
                covs.push(DMatrix::from_diagonal(&var));
            }
            let counts = vec![1.0; k];
            let covs = eigen_ratio_enforce_weighted(&covs, &counts, config.eigen_ratio)?;
            MixtureModel { weights: vec![1.0 / k as f64; k], means, covariances: covs }
        };
        candidate.validate()?;
        out.push(candidate);
    }
    Ok(out)
}

/// Trimmed classification start: from `config.n_starts` random candidates,
/// alternate MAP assignment with re-estimation on the `1 - trim` fraction of
/// rows with the highest joint density, and keep the start with the largest
/// trimmed classification log-likelihood. Meant as a robust user start under
/// heavy contamination.
pub fn trimmed_start(data: &DataMatrix, k: usize, trim: f64, config: &FitConfig) -> Result<MixtureModel> {
    if !(0.0..1.0).contains(&trim) {
        return Err(Error::InvalidConfig(format!("trimming fraction must lie in [0, 1), got {trim}")));
    }
    let (n, p) = (data.n(), data.p());
    let keep = ((n as f64) * (1.0 - trim)).ceil() as usize;
    if keep < k * (p + 1) {
        return Err(Error::TooFewRows { needed: k * (p + 1), got: keep });
    }
    let mut random = config.clone();
    random.n_starts = config.n_starts.max(1);
    let starts = init_candidates(data, k, &random, &[])?;
    let mut best: Option<(f64, MixtureModel)> = None;
    for start in starts {
        if let Some((obj, model)) = concentrate(data, start, keep, config.eigen_ratio) {
            if best.as_ref().is_none_or(|(b, _)| obj > *b) {
                best = Some((obj, model));
            }
        }
    }
    best.map(|(_, m)| m).ok_or(Error::AllRootsDegenerate)
}

const CONCENTRATION_STEPS: usize = 50;

fn concentrate(data: &DataMatrix, mut model: MixtureModel, keep: usize, c: f64) -> Option<(f64, MixtureModel)> {
    let (n, p, k) = (data.n(), data.p(), model.k());
    let mut joint = vec![0.0; k];
    let mut previous: Vec<usize> = Vec::new();
    let mut objective = f64::NEG_INFINITY;
    for _ in 0..CONCENTRATION_STEPS {
        let prepared = model.prepare().ok()?;
        let mut scored: Vec<(f64, usize, usize)> = (0..n)
            .map(|i| {
                prepared.joint_log_densities(data.row(i), &mut joint);
                let l = argmax(&joint);
                (joint[l], l, i)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.2.cmp(&b.2)));
        scored.truncate(keep);
        objective = scored.iter().map(|s| s.0).sum();
        let mut state: Vec<usize> = scored.iter().map(|s| s.2 * k + s.1).collect();
        state.sort_unstable();
        if state == previous {
            break;
        }
        previous = state;
        let mut counts = vec![0.0; k];
        let mut means = vec![DVector::<f64>::zeros(p); k];
        for &(_, l, i) in &scored {
            counts[l] += 1.0;
            means[l] += DVector::from_column_slice(data.row(i));
        }
        if counts.iter().any(|&c| c < (p + 1) as f64) {
            return None;
        }
        for l in 0..k {
            means[l] /= counts[l];
        }
        let mut covs = vec![DMatrix::<f64>::zeros(p, p); k];
        for &(_, l, i) in &scored {
            let d = DVector::from_column_slice(data.row(i)) - &means[l];
            covs[l] += &d * d.transpose();
        }
        for l in 0..k {
            covs[l] /= counts[l];
        }
        let covs = eigen_ratio_enforce_weighted(&covs, &counts, c).ok()?;
        let weights = counts.iter().map(|c| c / keep as f64).collect();
        model = MixtureModel { weights, means, covariances: covs };
    }
    model.validate().ok()?;
    Some((objective, model))
}

struct IterationState {
    objective: f64,
    posterior: PosteriorMatrix,
    weights: WeightState,
}

fn iteration_state(data: &DataMatrix, model: &MixtureModel, config: &FitConfig) -> Result<IterationState> {
    let prepared = model.prepare()?;
    let dist = DistanceMatrix::compute(data, &prepared);
    let ex = expectation(&dist, &prepared);
    let (n, k, p) = (data.n(), model.k(), data.p());
    Ok(match config.algorithm {
        Algorithm::Em => IterationState {
            objective: ex.log_density.iter().sum(),
            posterior: ex.posterior,
            weights: WeightState::Componentwise { k, residuals: vec![0.0; n * k], weights: vec![1.0; n * k] },
        },
        Algorithm::Cem => {
            let labels = ex.posterior.map_labels();
            let objective = labels.iter().enumerate().map(|(i, &l)| ex.joint[i * k + l]).sum();
            IterationState {
                objective,
                posterior: c_step(&ex.posterior),
                weights: WeightState::Conditional { residuals: vec![0.0; n], weights: vec![1.0; n] },
            }
        }
        Algorithm::Wem => {
            let weights = componentwise_weights(&dist, p, config.kernel, &config.raf)?;
            let labels = ex.posterior.map_labels();
            let objective = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| weights.weight(i, l) * ex.log_density[i])
                .sum();
            IterationState { objective, posterior: ex.posterior, weights }
        }
        Algorithm::Wcem => {
            let labels = ex.posterior.map_labels();
            let (_, weights) = conditional_weights(&dist, &labels, p, config.kernel, &config.raf)?;
            let objective = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| weights.weight(i, l) * ex.joint[i * k + l])
                .sum();
            IterationState { objective, posterior: c_step(&ex.posterior), weights }
        }
    })
}

/// Final MAP assignments and conditional weights, distances and residuals.
pub fn finalize(data: &DataMatrix, model: MixtureModel, config: &FitConfig) -> Result<FitResult> {
    check_dims(data, &model)?;
    let prepared = model.prepare()?;
    let dist = DistanceMatrix::compute(data, &prepared);
    let ex = expectation(&dist, &prepared);
    let labels = ex.posterior.map_labels();
    let (cond_dist2, cond_weights, cond_residuals) = if config.algorithm.is_weighted() {
        let (cond, state) = conditional_weights(&dist, &labels, data.p(), config.kernel, &config.raf)?;
        (cond, state.weights().to_vec(), state.residuals().to_vec())
    } else {
        let cond: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| dist.get(i, l)).collect();
        (cond, vec![1.0; data.n()], vec![0.0; data.n()])
    };
    let weighted_loglik = cond_weights.iter().zip(&ex.log_density).map(|(w, l)| w * l).sum();
    let below = cond_residuals.iter().filter(|&&d| d < ROOT_RESIDUAL_CUTOFF).count();
    Ok(FitResult {
        algorithm: config.algorithm,
        model,
        assignments: labels,
        root_score_empirical: below as f64 / data.n() as f64,
        cond_weights,
        cond_dist2,
        cond_residuals,
        weighted_loglik,
        trace: Vec::new(),
        iterations: 0,
        converged: false,
        root_score: 0.0,
    })
}

/// Iterates from `start` until the relative change of the objective drops
/// below `rel_tol` or `max_iter` is reached.
pub fn fit_once(data: &DataMatrix, k: usize, start: &MixtureModel, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    check_dims(data, start)?;
    if start.k() != k {
        return Err(Error::KMismatch { fitted: start.k(), reference: k });
    }
    start.validate()?;
    let mut model = start.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iter {
        let state = iteration_state(data, &model, config)?;
        if !state.objective.is_finite() {
            return Err(Error::DegenerateComponent { component: 0 });
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if (state.objective - prev).abs() / (state.objective.abs() + 1.0) < config.rel_tol {
                trace.push(state.objective);
                converged = true;
                break;
            }
        }
        trace.push(state.objective);
        model = m_step_inner(data, &state.posterior, &state.weights, config)?.0;
        iterations += 1;
    }
    let mut result = finalize(data, model, config)?;
    result.trace = trace;
    result.iterations = iterations;
    result.converged = converged;
    Ok(result)
}

fn draw_from(model: &PreparedModel, weights: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut comp = weights.len() - 1;
    for (c, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            comp = c;
            break;
        }
    }
    let g = &model.components[comp];
    let p = g.dim();
    let z: Vec<f64> = (0..p).map(|_| rng.sample(StandardNormal)).collect();
    (0..p)
        .map(|r| {
            g.mean[r]
                + (0..p)
                    .map(|c| g.eigen.vectors[(r, c)] * g.eigen.values[c].sqrt() * z[c])
                    .sum::<f64>()
        })
        .collect()
}

/// Monte Carlo estimate of `Pr[delta < -0.95]` under the fitted mixture,
/// with residuals conditional on MAP assignment and measured against the
/// fit's per-cluster kernel density estimates.
pub fn root_score(fit: &FitResult, config: &FitConfig) -> Result<f64> {
    let k = fit.k();
    let p = fit.model.dim();
    let prepared = fit.model.prepare()?;
    let kdes = conditional_kdes(&fit.cond_dist2, &fit.assignments, k, config.kernel)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_0a11_b00c);
    let mut joint = vec![0.0; k];
    let mut below = 0usize;
    for _ in 0..config.root_mc_draws {
        let y = draw_from(&prepared, &fit.model.weights, &mut rng);
        prepared.joint_log_densities(&y, &mut joint);
        let l = argmax(&joint);
        let d2 = prepared.components[l].mahalanobis_sq(&y);
        let delta = residual_or_sentinel(d2, p, kde_at(&kdes[l], d2)?);
        if delta < ROOT_RESIDUAL_CUTOFF {
            below += 1;
        }
    }
    Ok(below as f64 / config.root_mc_draws as f64)
}

/// Picks one root among multi-start fixed points.
///
/// Weighted fits: candidates with mean conditional weight below 0.25 are
/// discarded, the rest are ranked by [`root_score`] (ties go to the higher
/// weighted log-likelihood). Baseline EM / CEM fits are ranked by their
/// objective.
pub fn select_root(results: Vec<FitResult>, _data: &DataMatrix, config: &FitConfig) -> Result<FitResult> {
    if results.is_empty() {
        return Err(Error::AllRootsDegenerate);
    }
    if !config.algorithm.is_weighted() {
        return results
            .into_iter()
            .reduce(|best, r| if r.weighted_loglik > best.weighted_loglik { r } else { best })
            .ok_or(Error::AllRootsDegenerate);
    }
    let mut best: Option<FitResult> = None;
    for mut r in results {
        if r.mean_weight() < DEGENERATE_MEAN_WEIGHT {
            continue;
        }
        r.root_score = match root_score(&r, config) {
            Ok(s) => s,
            Err(_) => continue,
        };
        best = match best {
            None => Some(r),
            Some(b) => {
                let better = r.root_score < b.root_score
                    || (r.root_score == b.root_score && r.weighted_loglik > b.weighted_loglik);
                Some(if better { r } else { b })
            }
        };
    }
    best.ok_or(Error::AllRootsDegenerate)
}

fn run_candidates(data: &DataMatrix, k: usize, candidates: &[MixtureModel], config: &FitConfig) -> Vec<FitResult> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        candidates
            .par_iter()
            .map(|s| fit_once(data, k, s, config).ok())
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        candidates.iter().filter_map(|s| fit_once(data, k, s, config).ok()).collect()
    }
}

/// Single fit from [`trimmed_start`], with the root score filled in for
/// weighted algorithms.
pub fn fit_trimmed(data: &DataMatrix, k: usize, trim: f64, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let start = trimmed_start(data, k, trim, config)?;
    let mut r = fit_once(data, k, &start, config)?;
    if config.algorithm.is_weighted() {
        r.root_score = root_score(&r, config)?;
    }
    Ok(r)
}

/// Multi-start fit followed by root selection.
pub fn fit(data: &DataMatrix, k: usize, config: &FitConfig, user_starts: &[MixtureModel]) -> Result<FitResult> {
    config.validate()?;
    let candidates = init_candidates(data, k, config, user_starts)?;
    let results = run_candidates(data, k, &candidates, config);
    select_root(results, data, config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_step_examples() {
        let u = PosteriorMatrix::from_values(2, 2, vec![0.2, 0.8, 0.5, 0.5]).unwrap();
        let c = c_step(&u);
        assert_eq!(c.row(0), &[0.0, 1.0]);
        assert_eq!(c.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn algorithm_parse() {
        assert_eq!("wcem".parse::<Algorithm>().unwrap(), Algorithm::Wcem);
        assert!("kmeans".parse::<Algorithm>().is_err());
    }

    #[test]
    fn too_few_rows() {
        let data = DataMatrix::new(5, 2, vec![0.0; 10]).unwrap();
        let err = init_candidates(&data, 2, &FitConfig::default(), &[]).unwrap_err();
        assert_eq!(err, Error::TooFewRows { needed: 6, got: 5 });
    }
}
