//! Outlier detection rules, detection error rates and clustering accuracy.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::chi2::chi2_quantile;
use crate::error::{Error, Result};
use crate::fit::FitResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DetectionRule {
    /// Flag when the conditional squared distance exceeds the chi-square
    /// `1 - alpha` quantile.
    Chi2 { alpha: f64 },
    /// Flag when the conditional weight is below the threshold; `None` means
    /// the adaptive cut-off `1 - mean(w)`.
    WeightThreshold { threshold: Option<f64> },
}

impl DetectionRule {
    pub fn chi2(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        Ok(DetectionRule::Chi2 { alpha })
    }

    pub fn weight(threshold: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&threshold) {
            return Err(Error::InvalidConfig(format!("weight threshold must lie in [0, 1), got {threshold}")));
        }
        Ok(DetectionRule::WeightThreshold { threshold: Some(threshold) })
    }

    pub fn adaptive() -> Self {
        DetectionRule::WeightThreshold { threshold: None }
    }
}

impl fmt::Display for DetectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DetectionRule::Chi2 { alpha } => write!(f, "chi2:{alpha}"),
            DetectionRule::WeightThreshold { threshold: Some(t) } => write!(f, "weight:{t}"),
            DetectionRule::WeightThreshold { threshold: None } => f.write_str("weight:adaptive"),
        }
    }
}

impl FromStr for DetectionRule {
    type Err = Error;
    /// `chi2:<alpha>`, `weight:<threshold>` or `weight:adaptive`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("detection rule '{s}': expected chi2:<alpha> or weight:<threshold|adaptive>"));
        let (kind, param) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "chi2" => DetectionRule::chi2(param.parse().map_err(|_| bad())?),
            "weight" if param == "adaptive" => Ok(DetectionRule::adaptive()),
            "weight" => DetectionRule::weight(param.parse().map_err(|_| bad())?),
            _ => Err(bad()),
        }
    }
}

pub fn detect_outliers(fit: &FitResult, rule: &DetectionRule, p: usize) -> Result<Vec<bool>> {
    match *rule {
        DetectionRule::Chi2 { alpha } => {
            let cut = chi2_quantile(1.0 - alpha, p)?;
            Ok(fit.cond_dist2.iter().map(|&d| d > cut).collect())
        }
        DetectionRule::WeightThreshold { threshold } => {
            let cut = threshold.unwrap_or_else(|| fit.downweighting());
            Ok(fit.cond_weights.iter().map(|&w| w < cut).collect())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionErrors {
    pub eps_hat: f64,
    pub swamping: f64,
    pub masking: f64,
}

fn rate(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Detected-outlier rate, swamping (false positives among genuine points)
/// and masking (missed outliers); empty denominators give 0.
pub fn detection_errors(flags: &[bool], truth_outlier: &[bool]) -> Result<DetectionErrors> {
    if flags.len() != truth_outlier.len() {
        return Err(Error::DimensionMismatch("flags and truth".into()));
    }
    let (mut swamped, mut genuine, mut masked, mut outliers) = (0, 0, 0, 0);
    for (&f, &t) in flags.iter().zip(truth_outlier) {
        if t {
            outliers += 1;
            masked += usize::from(!f);
        } else {
            genuine += 1;
            swamped += usize::from(f);
        }
    }
    Ok(DetectionErrors {
        eps_hat: rate(flags.iter().filter(|&&f| f).count(), flags.len()),
        swamping: rate(swamped, genuine),
        masking: rate(masked, outliers),
    })
}

fn pairs(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Rand index over the masked-in points, via the contingency table.
pub fn rand_index(labels_a: &[usize], labels_b: &[usize], mask: &[bool]) -> Result<f64> {
    if labels_a.len() != labels_b.len() || labels_a.len() != mask.len() {
        return Err(Error::DimensionMismatch("labelings and mask".into()));
    }
    let ka = labels_a.iter().max().map_or(0, |m| m + 1);
    let kb = labels_b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    let mut n = 0u64;
    for ((&a, &b), &m) in labels_a.iter().zip(labels_b).zip(mask) {
        if m {
            table[a * kb + b] += 1;
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::FewerThanTwoPoints);
    }
    let both: u64 = table.iter().map(|&c| pairs(c)).sum();
    let same_a: u64 = (0..ka).map(|a| pairs(table[a * kb..(a + 1) * kb].iter().sum())).sum();
    let same_b: u64 = (0..kb).map(|b| pairs((0..ka).map(|a| table[a * kb + b]).sum())).sum();
    let total = pairs(n);
    let agree = total + 2 * both - same_a - same_b;
    Ok(agree as f64 / total as f64)
}

/// Misclassified fraction over the masked-in points, labels already aligned.
pub fn mce(labels_fit: &[usize], labels_truth: &[usize], mask: &[bool]) -> Result<f64> {
    if labels_fit.len() != labels_truth.len() || labels_fit.len() != mask.len() {
        return Err(Error::DimensionMismatch("labelings and mask".into()));
    }
    let kf = labels_fit.iter().max().map_or(0, |m| m + 1);
    let kt = labels_truth.iter().max().map_or(0, |m| m + 1);
    if kf != kt {
        return Err(Error::KMismatch { fitted: kf, reference: kt });
    }
    let (mut wrong, mut total) = (0usize, 0usize);
    for ((&f, &t), &m) in labels_fit.iter().zip(labels_truth).zip(mask) {
        if m {
            total += 1;
            wrong += usize::from(f != t);
        }
    }
    if total == 0 {
        return Err(Error::FewerThanTwoPoints);
    }
    Ok(wrong as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub rule: DetectionRule,
    pub flags: Vec<bool>,
    /// `None` marks a point reported as an outlier.
    pub labels: Vec<Option<usize>>,
    pub eps_hat: f64,
    pub swamping: Option<f64>,
    pub masking: Option<f64>,
    pub rand: Option<f64>,
    pub mce: Option<f64>,
    pub downweighting: f64,
}

/// Applies a rule and, when ground truth is known, scores detection and
/// classification over true negatives (genuine, unflagged points).
pub fn clustering_report(
    fit: &FitResult,
    rule: &DetectionRule,
    p: usize,
    truth_labels: Option<&[usize]>,
    truth_outlier: Option<&[bool]>,
) -> Result<ClusteringReport> {
    let flags = detect_outliers(fit, rule, p)?;
    let labels = flags
        .iter()
        .zip(&fit.assignments)
        .map(|(&f, &a)| if f { None } else { Some(a) })
        .collect();
    let eps_hat = rate(flags.iter().filter(|&&f| f).count(), flags.len());
    let (mut swamping, mut masking, mut rand, mut mce_v) = (None, None, None, None);
    if let Some(t) = truth_outlier {
        let e = detection_errors(&flags, t)?;
        swamping = Some(e.swamping);
        masking = Some(e.masking);
    }
    if let Some(tl) = truth_labels {
        let genuine: Vec<bool> = match truth_outlier {
            Some(t) => t.iter().map(|o| !o).collect(),
            None => vec![true; flags.len()],
        };
        let mask: Vec<bool> = genuine.iter().zip(&flags).map(|(&g, &f)| g && !f).collect();
        rand = rand_index(&fit.assignments, tl, &mask).ok();
        mce_v = mce(&fit.assignments, tl, &mask).ok();
    }
    Ok(ClusteringReport {
        rule: *rule,
        flags,
        labels,
        eps_hat,
        swamping,
        masking,
        rand,
        mce: mce_v,
        downweighting: fit.downweighting(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detection_error_examples() {
        let truth = [true, false, true, false, false];
        let e = detection_errors(&truth, &truth).unwrap();
        assert_eq!((e.swamping, e.masking), (0.0, 0.0));
        let mut t = vec![false; 10];
        t[..4].iter_mut().for_each(|x| *x = true);
        let e = detection_errors(&[false; 10], &t).unwrap();
        assert_eq!((e.eps_hat, e.swamping, e.masking), (0.0, 0.0, 1.0));
        // no true outliers: masking defined as 0
        let e = detection_errors(&[true, false], &[false, false]).unwrap();
        assert_eq!((e.eps_hat, e.swamping, e.masking), (0.5, 0.5, 0.0));
    }

    #[test]
    fn rand_index_examples() {
        let a = [0, 1, 2, 1, 0];
        assert_eq!(rand_index(&a, &a, &[true; 5]).unwrap(), 1.0);
        let r = rand_index(&[0, 0, 0, 0], &[0, 0, 1, 1], &[true; 4]).unwrap();
        assert!((r - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(rand_index(&[0, 1], &[0, 1], &[true, false]), Err(Error::FewerThanTwoPoints));
    }

    #[test]
    fn mce_examples() {
        let t = [0, 1, 2, 0, 1, 2, 0, 1, 2, 0];
        assert_eq!(mce(&t, &t, &[true; 10]).unwrap(), 0.0);
        let mut f = t;
        f[3] = 2;
        assert!((mce(&f, &t, &[true; 10]).unwrap() - 0.1).abs() < 1e-15);
        assert!(matches!(mce(&[0, 1], &[0, 2], &[true; 2]), Err(Error::KMismatch { .. })));
    }

    #[test]
    fn rule_parsing() {
        assert_eq!("chi2:0.01".parse::<DetectionRule>().unwrap(), DetectionRule::Chi2 { alpha: 0.01 });
        assert_eq!("weight:adaptive".parse::<DetectionRule>().unwrap(), DetectionRule::adaptive());
        assert!("chi2:1.5".parse::<DetectionRule>().is_err());
        assert!("tukey:3".parse::<DetectionRule>().is_err());
        for s in ["chi2:0.025", "weight:0.2", "weight:adaptive"] {
            assert_eq!(s.parse::<DetectionRule>().unwrap().to_string(), s);
        }
    }
}
