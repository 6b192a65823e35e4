//! Machine-readable output of `fit`.

use serde::{Deserialize, Serialize};

use wemix::diagnose::DetectionRule;
use wemix::{FitConfig, MixtureModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputEcho {
    pub path: String,
    pub delimiter: String,
    pub header: bool,
    pub columns: Option<String>,
    pub rows: usize,
    pub dims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigEcho {
    pub k: usize,
    pub fit: FitConfig,
    pub start_trim: Option<f64>,
    pub rules: Vec<DetectionRule>,
    pub input: InputEcho,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    /// 1-based input row.
    pub row: usize,
    /// 1-based component.
    pub assignment: usize,
    pub weight: f64,
    pub dist2: f64,
    /// One flag per configured rule, in rule order.
    pub outlier: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSummary {
    pub rule: DetectionRule,
    pub label: String,
    pub flagged: usize,
    pub eps_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub weighted_loglik: f64,
    pub weighted_bic: f64,
    pub weighted_aic: f64,
    pub downweighting: f64,
    pub root_score: f64,
    pub root_score_empirical: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub schema_version: u32,
    pub config: ConfigEcho,
    pub model: MixtureModel,
    pub rows: Vec<RowResult>,
    pub rules: Vec<RuleSummary>,
    pub diagnostics: Diagnostics,
}
