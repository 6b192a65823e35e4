//! Scenario generators, contamination, fitting accuracy and the Monte Carlo
//! study driver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::chi2::chi2_quantile;
use crate::diagnose::{clustering_report, DetectionRule};
use crate::error::{Error, Result};
use crate::fit::{fit, fit_trimmed, FitConfig, FitResult};
use crate::model::{DataMatrix, MixtureModel, PreparedModel};

/// A generated sample with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub data: DataMatrix,
    pub labels: Vec<usize>,
    pub truth: MixtureModel,
}

/// Draws `n` points from `truth` with multinomial component sizes.
pub fn sample_mixture(truth: &MixtureModel, n: usize, seed: u64) -> Result<Sample> {
    let p = truth.dim();
    let chol: Vec<DMatrix<f64>> = truth
        .covariances
        .iter()
        .map(|c| c.clone().cholesky().map(|ch| ch.l()).ok_or(Error::SingularCovariance))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = truth.k() - 1;
        for (c, &w) in truth.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = c;
                break;
            }
        }
        let z = DVector::from_iterator(p, (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let y = &truth.means[comp] + &chol[comp] * z;
        values.extend(y.iter());
        labels.push(comp);
    }
    Ok(Sample { data: DataMatrix::new(n, p, values)?, labels, truth: truth.clone() })
}

/// Three-component benchmark with separation `beta` in `p >= 2` dimensions.
pub fn m5_truth(p: usize, beta: f64) -> Result<MixtureModel> {
    if p < 2 {
        return Err(Error::DimensionTooSmall { min: 2, got: p });
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("separation must be positive, got {beta}")));
    }
    let mean = |a: f64, b: f64| {
        let mut m = DVector::zeros(p);
        m[0] = a;
        m[1] = b;
        m
    };
    let cov = |a: f64, b: f64, c: f64| {
        let mut s = DMatrix::identity(p, p);
        s[(0, 0)] = a;
        s[(0, 1)] = b;
        s[(1, 0)] = b;
        s[(1, 1)] = c;
        s
    };
    MixtureModel::new(
        vec![0.2, 0.4, 0.4],
        vec![mean(-beta, -beta), mean(0.0, beta), mean(beta, 0.0)],
        vec![cov(15.0, -10.0, 15.0), DMatrix::identity(p, p), cov(45.0, 0.0, 30.0)],
    )
}

pub fn gen_m5(p: usize, beta: f64, n: usize, seed: u64) -> Result<Sample> {
    let truth = m5_truth(p, beta)?;
    if n < 3 * (p + 1) {
        return Err(Error::TooFewRows { needed: 3 * (p + 1), got: n });
    }
    sample_mixture(&truth, n, seed)
}

/// The two-dimensional, three-component illustrative mixture.
pub fn example4_truth() -> MixtureModel {
    let m = |a: f64, b: f64| DVector::from_vec(vec![a, b]);
    let s = |a: f64, b: f64| DMatrix::from_row_slice(2, 2, &[a, b, b, a]);
    MixtureModel::new(
        vec![0.2, 0.3, 0.5],
        vec![m(-5.0, 0.0), m(0.0, -5.0), m(5.0, 0.0)],
        vec![s(1.0, -0.5), s(2.0, 1.25), s(3.0, -1.75)],
    )
    .expect("valid parameters")
}

pub fn gen_example4(n: usize, seed: u64) -> Result<Sample> {
    if n < 12 {
        return Err(Error::TooFewRows { needed: 12, got: n });
    }
    sample_mixture(&example4_truth(), n, seed)
}

pub const REJECTION_BUDGET: usize = 1_000_000;

/// Appends `round(n eps / (1 - eps))` uniform points from the clean data's
/// bounding box whose squared distance to every true component exceeds the
/// chi-square `quantile`. Returns the stacked data and outlier flags.
pub fn contaminate(
    clean: &DataMatrix,
    truth: &MixtureModel,
    eps: f64,
    quantile: f64,
    seed: u64,
) -> Result<(DataMatrix, Vec<bool>)> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::InvalidConfig(format!("contamination rate must lie in [0, 1), got {eps}")));
    }
    let n = clean.n();
    let m = (n as f64 * eps / (1.0 - eps)).round() as usize;
    if m == 0 {
        return Ok((clean.clone(), vec![false; n]));
    }
    let p = clean.p();
    let cut = chi2_quantile(quantile, p)?;
    let prepared = truth.prepare()?;
    let bounds = clean.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(m * p);
    let mut y = vec![0.0; p];
    for _ in 0..m {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > REJECTION_BUDGET {
                return Err(Error::RejectionBudgetExceeded(REJECTION_BUDGET));
            }
            for (j, &(lo, hi)) in bounds.iter().enumerate() {
                y[j] = lo + (hi - lo) * rng.random::<f64>();
            }
            if min_distance(&prepared, &y) > cut {
                break;
            }
        }
        values.extend_from_slice(&y);
    }
    let noise = DataMatrix::new(m, p, values)?;
    let mut flags = vec![false; n];
    flags.extend(std::iter::repeat(true).take(m));
    Ok((clean.append(&noise)?, flags))
}

pub fn min_distance(model: &PreparedModel, y: &[f64]) -> f64 {
    model.components.iter().map(|c| c.mahalanobis_sq(y)).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mu_err: f64,
    pub sigma_err: f64,
    pub pi_err: f64,
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.singular_values();
    sv.max() / sv.min()
}

/// Frobenius error of the means, average log condition number of
/// `Sigma_hat Sigma^-1`, and Euclidean error of the weights. Components are
/// compared in order, so align labels first.
pub fn accuracy_metrics(fitted: &MixtureModel, truth: &MixtureModel) -> Result<Accuracy> {
    if fitted.k() != truth.k() {
        return Err(Error::KMismatch { fitted: fitted.k(), reference: truth.k() });
    }
    if fitted.dim() != truth.dim() {
        return Err(Error::DimensionMismatch("fitted and true dimension".into()));
    }
    let mu_err = fitted
        .means
        .iter()
        .zip(&truth.means)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        .sqrt();
    let mut sigma_err = 0.0;
    for (s_hat, s) in fitted.covariances.iter().zip(&truth.covariances) {
        let inv = s.clone().try_inverse().ok_or(Error::SingularCovariance)?;
        sigma_err += condition_number(&(s_hat * inv)).ln();
    }
    sigma_err /= fitted.k() as f64;
    let pi_err = fitted
        .weights
        .iter()
        .zip(&truth.weights)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(Accuracy { mu_err, sigma_err, pi_err })
}

/// Permutation sorting components by the first mean coordinate
/// (`perm[new] = old`); stable for ties.
pub fn sort_permutation(model: &MixtureModel) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..model.k()).collect();
    perm.sort_by(|&a, &b| model.means[a][0].total_cmp(&model.means[b][0]));
    perm
}

/// Relabels components so first mean coordinates are nondecreasing.
pub fn label_align(fit: &FitResult) -> FitResult {
    let perm = sort_permutation(&fit.model);
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let mut out = fit.clone();
    out.model = fit.model.permuted(&perm);
    out.assignments = fit.assignments.iter().map(|&a| inverse[a]).collect();
    out
}

fn relabel_truth(truth: &MixtureModel, labels: &[usize]) -> (MixtureModel, Vec<usize>) {
    let perm = sort_permutation(truth);
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    (truth.permuted(&perm), labels.iter().map(|&l| inverse[l]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    M5,
    Example4,
}

/// Whether `eps` is a fraction of the total (contaminated) sample or of the
/// clean sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsBase {
    #[default]
    Total,
    Clean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimScenario {
    pub scheme: Scheme,
    /// Sample size; the total size when `eps_base` is `Total`.
    pub n: usize,
    pub eps: f64,
    pub beta: f64,
    pub p: usize,
    pub seed: u64,
    pub outlier_quantile: f64,
    #[serde(default)]
    pub eps_base: EpsBase,
}

impl SimScenario {
    pub fn m5(p: usize, beta: f64, n: usize, eps: f64, seed: u64) -> Self {
        Self { scheme: Scheme::M5, n, eps, beta, p, seed, outlier_quantile: 0.99, eps_base: EpsBase::Total }
    }

    pub fn example4(n: usize, eps: f64, seed: u64) -> Self {
        Self { scheme: Scheme::Example4, n, eps, beta: 0.0, p: 2, seed, outlier_quantile: 0.99, eps_base: EpsBase::Total }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps) {
            return Err(Error::InvalidConfig(format!("contamination rate must lie in [0, 1), got {}", self.eps)));
        }
        if !(self.outlier_quantile > 0.0 && self.outlier_quantile < 1.0) {
            return Err(Error::InvalidConfig("outlier quantile must lie in (0, 1)".into()));
        }
        if self.scheme == Scheme::M5 {
            m5_truth(self.p, self.beta)?;
        }
        Ok(())
    }

    pub fn truth(&self) -> Result<MixtureModel> {
        match self.scheme {
            Scheme::M5 => m5_truth(self.p, self.beta),
            Scheme::Example4 => Ok(example4_truth()),
        }
    }

    fn clean_size(&self) -> usize {
        match self.eps_base {
            EpsBase::Total => (self.n as f64 * (1.0 - self.eps)).round() as usize,
            _ => self.n,
        }
    }

    /// Generates the contaminated sample for one trial: data, true labels
    /// (outliers carry label 0 and are masked by the flags) and outlier flags.
    pub fn generate(&self, seed: u64) -> Result<(Sample, Vec<bool>)> {
        self.validate()?;
        let n_clean = self.clean_size();
        let sample = match self.scheme {
            Scheme::M5 => gen_m5(self.p, self.beta, n_clean, seed)?,
            Scheme::Example4 => gen_example4(n_clean, seed)?,
        };
        let eps_rel = match self.eps_base {
            EpsBase::Total => self.eps,
            EpsBase::Clean => self.eps / (1.0 + self.eps),
        };
        let (data, flags) = contaminate(&sample.data, &sample.truth, eps_rel, self.outlier_quantile, split_seed(seed, 1))?;
        let mut labels = sample.labels;
        labels.resize(data.n(), 0);
        Ok((Sample { data, labels, truth: sample.truth }, flags))
    }
}

/// SplitMix64 step used to derive independent seeds.
pub fn split_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub fit: FitConfig,
    pub k: usize,
    pub rules: Vec<DetectionRule>,
    /// Fit each trial once from a trimmed start with this trimming fraction
    /// instead of from random starts.
    #[serde(default)]
    pub start_trim: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleMetrics {
    pub eps_hat: f64,
    pub swamping: f64,
    pub masking: f64,
    pub rand: f64,
    pub mce: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub scenario: usize,
    pub trial: usize,
    pub seed: u64,
    pub accuracy: Accuracy,
    pub downweighting: f64,
    /// Classification accuracy over all genuine points, no detection rule.
    pub rand: f64,
    pub mce: f64,
    pub converged: bool,
    pub rules: Vec<RuleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub scenario: usize,
    pub trials: usize,
    pub failures: usize,
    pub accuracy: Accuracy,
    pub downweighting: f64,
    pub rand: f64,
    pub mce: f64,
    pub rules: Vec<RuleMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenarios: Vec<SimScenario>,
    pub config: StudyConfig,
    pub n_trials: usize,
    pub records: Vec<TrialRecord>,
    pub failures: Vec<TrialFailure>,
    pub summaries: Vec<StudySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub scenario: usize,
    pub trial: usize,
    pub error: String,
}

/// Seed of trial `trial` in a scenario.
pub fn trial_seed(scenario_seed: u64, trial: usize) -> u64 {
    split_seed(scenario_seed, trial as u64 + 1)
}

/// Generate, contaminate, fit and score one trial.
pub fn run_trial(scenario: &SimScenario, config: &StudyConfig, seed: u64) -> Result<(FitResult, TrialRecord)> {
    let (sample, outlier) = scenario.generate(seed)?;
    let mut fit_config = config.fit.clone();
    fit_config.seed = split_seed(seed, 2);
    let fitted = match config.start_trim {
        Some(trim) => fit_trimmed(&sample.data, config.k, trim, &fit_config)?,
        None => fit(&sample.data, config.k, &fit_config, &[])?,
    };
    let record = score_trial(&fitted, &sample, &outlier, &config.rules)?;
    Ok((fitted, TrialRecord { seed, ..record }))
}

/// Aligns labels and computes every metric for a finished fit.
pub fn score_trial(fitted: &FitResult, sample: &Sample, outlier: &[bool], rules: &[DetectionRule]) -> Result<TrialRecord> {
    let aligned = label_align(fitted);
    let (truth, labels) = relabel_truth(&sample.truth, &sample.labels);
    let accuracy = accuracy_metrics(&aligned.model, &truth)?;
    let p = sample.data.p();
    let genuine: Vec<bool> = outlier.iter().map(|o| !o).collect();
    let rand = crate::diagnose::rand_index(&aligned.assignments, &labels, &genuine)?;
    let mce = crate::diagnose::mce(&aligned.assignments, &labels, &genuine).unwrap_or(f64::NAN);
    let mut rule_metrics = Vec::with_capacity(rules.len());
    for rule in rules {
        let rep = clustering_report(&aligned, rule, p, Some(&labels), Some(outlier))?;
        rule_metrics.push(RuleMetrics {
            eps_hat: rep.eps_hat,
            swamping: rep.swamping.unwrap_or(0.0),
            masking: rep.masking.unwrap_or(0.0),
            rand: rep.rand.unwrap_or(f64::NAN),
            mce: rep.mce.unwrap_or(f64::NAN),
        });
    }
    Ok(TrialRecord {
        scenario: 0,
        trial: 0,
        seed: 0,
        accuracy,
        downweighting: aligned.downweighting(),
        rand,
        mce,
        converged: aligned.converged,
        rules: rule_metrics,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, c) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if c == 0 {
        f64::NAN
    } else {
        s / c as f64
    }
}

pub fn summarize(scenario: usize, records: &[TrialRecord], failures: usize, n_rules: usize) -> StudySummary {
    let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.scenario == scenario).collect();
    StudySummary {
        scenario,
        trials: rs.len(),
        failures,
        accuracy: Accuracy {
            mu_err: mean(rs.iter().map(|r| r.accuracy.mu_err)),
            sigma_err: mean(rs.iter().map(|r| r.accuracy.sigma_err)),
            pi_err: mean(rs.iter().map(|r| r.accuracy.pi_err)),
        },
        downweighting: mean(rs.iter().map(|r| r.downweighting)),
        rand: mean(rs.iter().map(|r| r.rand)),
        mce: mean(rs.iter().map(|r| r.mce)),
        rules: (0..n_rules)
            .map(|j| RuleMetrics {
                eps_hat: mean(rs.iter().map(|r| r.rules[j].eps_hat)),
                swamping: mean(rs.iter().map(|r| r.rules[j].swamping)),
                masking: mean(rs.iter().map(|r| r.rules[j].masking)),
                rand: mean(rs.iter().map(|r| r.rules[j].rand)),
                mce: mean(rs.iter().map(|r| r.rules[j].mce)),
            })
            .collect(),
    }
}

/// Runs `n_trials` independent trials per scenario. Trial seeds derive from
/// the scenario seed and trial index, so results do not depend on execution
/// order or thread count.
pub fn run_study(scenarios: &[SimScenario], config: &StudyConfig, n_trials: usize) -> Result<StudyReport> {
    if n_trials == 0 {
        return Err(Error::InvalidConfig("at least one trial is required".into()));
    }
    for s in scenarios {
        s.validate()?;
    }
    config.fit.validate()?;
    if config.start_trim.is_some_and(|t| !(0.0..1.0).contains(&t)) {
        return Err(Error::InvalidConfig("start trimming fraction must lie in [0, 1)".into()));
    }
    let jobs: Vec<(usize, usize)> =
        (0..scenarios.len()).flat_map(|s| (0..n_trials).map(move |t| (s, t))).collect();
    let run = |&(s, t): &(usize, usize)| {
        let seed = trial_seed(scenarios[s].seed, t);
        run_trial(&scenarios[s], config, seed).map(|(_, r)| TrialRecord { scenario: s, trial: t, ..r })
    };
    #[cfg(feature = "parallel")]
    let outcomes: Vec<Result<TrialRecord>> = {
        use rayon::prelude::*;
        jobs.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let outcomes: Vec<Result<TrialRecord>> = jobs.iter().map(run).collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (&(s, t), o) in jobs.iter().zip(outcomes) {
        match o {
            Ok(r) => records.push(r),
            Err(e) => failures.push(TrialFailure { scenario: s, trial: t, error: e.to_string() }),
        }
    }
    let summaries = (0..scenarios.len())
        .map(|s| summarize(s, &records, failures.iter().filter(|f| f.scenario == s).count(), config.rules.len()))
        .collect();
    Ok(StudyReport { scenarios: scenarios.to_vec(), config: config.clone(), n_trials, records, failures, summaries })
}
