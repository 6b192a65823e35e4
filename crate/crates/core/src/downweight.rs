//! Boundary-corrected kernel density estimation on squared distances,
//! Pearson residuals against the chi-square reference, residual adjustment
//! functions and the resulting weights.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::chi2::{chi2_pdf, ln_chi2_pdf, ln_gamma};
use crate::error::{Error, Result};

/// Residuals are floored here so that `delta + 1` never reaches zero.
pub const RESIDUAL_FLOOR: f64 = -1.0 + 1e-12;

// Kernel terms further than this many bandwidths away are below 1e-17 of the
// peak and are skipped.
const NORMAL_CUTOFF: f64 = 9.0;
const GAMMA_LOG_CUTOFF: f64 = 42.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelFamily {
    FoldedNormal,
    Gamma,
    LogTransform,
}

impl KernelFamily {
    pub const NAMES: &'static [&'static str] = &["folded-normal", "gamma", "log-transform"];
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KernelFamily::FoldedNormal => "folded-normal",
            KernelFamily::Gamma => "gamma",
            KernelFamily::LogTransform => "log-transform",
        })
    }
}

impl FromStr for KernelFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "folded-normal" => Ok(KernelFamily::FoldedNormal),
            "gamma" => Ok(KernelFamily::Gamma),
            "log-transform" => Ok(KernelFamily::LogTransform),
            other => Err(Error::InvalidConfig(format!(
                "unknown kernel family '{other}', expected one of: {}",
                KernelFamily::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    /// Bandwidth on the squared-distance scale (log scale for `LogTransform`).
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(Self { family, bandwidth })
    }

    pub fn folded_normal(bandwidth: f64) -> Result<Self> {
        Self::new(KernelFamily::FoldedNormal, bandwidth)
    }

    pub fn with_bandwidth(self, bandwidth: f64) -> Result<Self> {
        Self::new(self.family, bandwidth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RafFamily {
    Pdm,
    Gkl,
}

/// Residual adjustment function: family plus its tuning constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RafSpec {
    pub family: RafFamily,
    pub tuning: f64,
    /// Power divergence in the `tau -> infinity` (Kullback-Leibler) limit.
    #[serde(default)]
    pub kl_limit: bool,
}

impl RafSpec {
    pub fn pdm(tuning: f64) -> Result<Self> {
        if tuning == 0.0 || !tuning.is_finite() {
            return Err(Error::InvalidConfig(format!("PDM tuning must be finite and nonzero, got {tuning}")));
        }
        Ok(Self { family: RafFamily::Pdm, tuning, kl_limit: false })
    }

    pub fn pdm_kl() -> Self {
        Self { family: RafFamily::Pdm, tuning: f64::INFINITY, kl_limit: true }
    }

    pub fn gkl(tuning: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tuning) {
            return Err(Error::InvalidConfig(format!("GKL tuning must lie in [0, 1], got {tuning}")));
        }
        Ok(Self { family: RafFamily::Gkl, tuning, kl_limit: false })
    }
}

impl fmt::Display for RafSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.family, self.kl_limit) {
            (RafFamily::Pdm, true) => f.write_str("pdm:inf"),
            (RafFamily::Pdm, false) => write!(f, "pdm:{}", self.tuning),
            (RafFamily::Gkl, _) => write!(f, "gkl:{}", self.tuning),
        }
    }
}

impl FromStr for RafSpec {
    type Err = Error;
    /// `family:param`, e.g. `gkl:0.9`, `pdm:2`, `pdm:inf`.
    fn from_str(s: &str) -> Result<Self> {
        let (family, param) = s.split_once(':').ok_or_else(|| {
            Error::InvalidConfig(format!("RAF '{s}' must have the form family:param (pdm, gkl)"))
        })?;
        match family {
            "pdm" if matches!(param, "inf" | "infinity") => Ok(RafSpec::pdm_kl()),
            "pdm" | "gkl" => {
                let tau: f64 = param
                    .parse()
                    .map_err(|_| Error::InvalidConfig(format!("bad RAF parameter '{param}'")))?;
                if family == "pdm" {
                    RafSpec::pdm(tau)
                } else {
                    RafSpec::gkl(tau)
                }
            }
            other => Err(Error::InvalidConfig(format!(
                "unknown RAF family '{other}', expected one of: pdm, gkl"
            ))),
        }
    }
}

/// Kernel density estimate over (0, inf) built from squared distances.
#[derive(Debug, Clone)]
pub struct BoundaryKde {
    spec: KernelSpec,
    // sorted samples (log samples for the log-transform family)
    sorted: Vec<f64>,
}

impl BoundaryKde {
    pub fn new(samples: &[f64], spec: KernelSpec) -> Result<Self> {
        Ok(Self { spec, sorted: Self::prepare(samples, spec)? })
    }

    fn prepare(samples: &[f64], spec: KernelSpec) -> Result<Vec<f64>> {
        if samples.is_empty() {
            return Err(Error::EmptySample);
        }
        if samples.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::DomainError("negative or NaN squared distance".into()));
        }
        let mut sorted: Vec<f64> = match spec.family {
            KernelFamily::LogTransform => {
                if samples.iter().any(|&s| s == 0.0) {
                    return Err(Error::DomainError("log-transform kernel needs positive samples".into()));
                }
                samples.iter().map(|s| s.ln()).collect()
            }
            _ => samples.to_vec(),
        };
        sorted.sort_by(f64::total_cmp);
        Ok(sorted)
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    pub fn spec(&self) -> KernelSpec {
        self.spec
    }

    pub fn density(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::DomainError(format!("density evaluated at {t}")));
        }
        let h = self.spec.bandwidth;
        let n = self.sorted.len() as f64;
        match self.spec.family {
            KernelFamily::FoldedNormal => {
                let mut sum = self.normal_sum(t, h);
                if t < NORMAL_CUTOFF * h {
                    sum += self.normal_sum(-t, h);
                }
                Ok(sum / (n * h))
            }
            KernelFamily::LogTransform => {
                if t == 0.0 {
                    return Err(Error::DomainError("log-transform kernel at t = 0".into()));
                }
                Ok(self.normal_sum(t.ln(), h) / (n * h * t))
            }
            KernelFamily::Gamma => Ok(self.gamma_sum(t, h) / n),
        }
    }

    pub fn density_many(&self, points: &[f64]) -> Result<Vec<f64>> {
        points.iter().map(|&t| self.density(t)).collect()
    }

    // sum_i phi((x - s_i) / h) over samples within the cutoff window
    fn normal_sum(&self, x: f64, h: f64) -> f64 {
        let lo = x - NORMAL_CUTOFF * h;
        let hi = x + NORMAL_CUTOFF * h;
        let start = self.sorted.partition_point(|&s| s < lo);
        let norm = 1.0 / (2.0 * PI).sqrt();
        self.sorted[start..]
            .iter()
            .take_while(|&&s| s <= hi)
            .map(|&s| {
                let z = (x - s) / h;
                norm * (-0.5 * z * z).exp()
            })
            .sum()
    }

    // sum_i gamma_pdf(s_i; shape = t/h + 1, scale = h), scanning outward from
    // the mode (log-concave in s, so the scan can stop once terms are tiny)
    fn gamma_sum(&self, t: f64, h: f64) -> f64 {
        let shape = t / h + 1.0;
        let log_const = -ln_gamma(shape) - shape * h.ln();
        let log_kernel = |s: f64| {
            if s == 0.0 {
                if shape == 1.0 {
                    log_const
                } else {
                    f64::NEG_INFINITY
                }
            } else {
                (shape - 1.0) * s.ln() - s / h + log_const
            }
        };
        let mode = (shape - 1.0) * h;
        let peak = log_kernel(mode.max(0.0));
        let split = self.sorted.partition_point(|&s| s < mode);
        let mut sum = 0.0;
        for &s in &self.sorted[split..] {
            let lk = log_kernel(s);
            if lk < peak - GAMMA_LOG_CUTOFF {
                break;
            }
            sum += lk.exp();
        }
        for &s in self.sorted[..split].iter().rev() {
            let lk = log_kernel(s);
            if lk < peak - GAMMA_LOG_CUTOFF {
                break;
            }
            sum += lk.exp();
        }
        sum
    }
}

/// Evaluates the boundary-corrected KDE of `samples` at each of `eval_points`.
pub fn kde_boundary(eval_points: &[f64], samples: &[f64], spec: KernelSpec) -> Result<Vec<f64>> {
    BoundaryKde::new(samples, spec)?.density_many(eval_points)
}

/// `kde_value / chi2_pdf(d2, p) - 1`, floored just above -1.
pub fn pearson_residual(d2: f64, p: usize, kde_value: f64) -> Result<f64> {
    if !(kde_value >= 0.0) {
        return Err(Error::DomainError(format!("kde value {kde_value}")));
    }
    let reference = chi2_pdf(d2, p)?;
    if reference == 0.0 {
        return Err(Error::ReferenceDensityZero(d2));
    }
    Ok((kde_value / reference - 1.0).max(RESIDUAL_FLOOR))
}

/// Residual computed through log densities; an underflowed reference density
/// yields the `+inf` sentinel instead of an error.
pub fn residual_or_sentinel(d2: f64, p: usize, kde_value: f64) -> f64 {
    if kde_value <= 0.0 {
        return RESIDUAL_FLOOR;
    }
    let log_ref = if d2 == 0.0 {
        match p {
            1 => return RESIDUAL_FLOOR,
            2 => 0.5f64.ln(),
            _ => f64::NEG_INFINITY,
        }
    } else {
        ln_chi2_pdf(d2, p)
    };
    if log_ref == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let ratio = (kde_value.ln() - log_ref).exp();
    (ratio - 1.0).max(RESIDUAL_FLOOR)
}

/// Residual adjustment function A(delta).
///
/// The returned value always satisfies `|A(delta)| <= |delta|`. The PDM and
/// GKL formulas violate this for negative residuals, where `A(delta)` is
/// replaced by `delta` itself; inliers therefore keep unit weight.
pub fn raf_apply(delta: f64, spec: &RafSpec) -> f64 {
    if delta == 0.0 {
        return 0.0;
    }
    if delta == f64::INFINITY {
        return f64::INFINITY;
    }
    let raw = match spec.family {
        RafFamily::Pdm if spec.kl_limit => (delta + 1.0).ln(),
        RafFamily::Pdm => spec.tuning * ((delta + 1.0).powf(1.0 / spec.tuning) - 1.0),
        RafFamily::Gkl if spec.tuning < 1e-12 => delta,
        RafFamily::Gkl => {
            let arg = spec.tuning * delta + 1.0;
            if arg <= 0.0 {
                f64::NEG_INFINITY
            } else {
                arg.ln() / spec.tuning
            }
        }
    };
    if raw.is_nan() || raw.abs() > delta.abs() {
        delta
    } else {
        raw
    }
}

/// `[A(delta) + 1]^+ / (delta + 1)`, clipped to [0, 1].
pub fn weight(delta: f64, spec: &RafSpec) -> f64 {
    if delta.is_nan() || delta == f64::INFINITY || delta <= RESIDUAL_FLOOR {
        return 0.0;
    }
    let a = raf_apply(delta, spec);
    let w = (a + 1.0).max(0.0) / (delta + 1.0);
    w.clamp(0.0, 1.0)
}
