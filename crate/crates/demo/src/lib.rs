//! WebAssembly bindings behind `www/index.html`.
//!
//! Each operation has a plain Rust function returning a serializable struct,
//! and a `#[wasm_bindgen]` wrapper that hands JSON to the page.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use wemix::chi2::chi2_pdf;
use wemix::downweight::{kde_boundary, raf_apply, residual_or_sentinel, weight, KernelFamily, KernelSpec, RafSpec};
use wemix::select::{geomspace, monitor, suggest_h, MonitorSpec, SuggestOptions};
use wemix::sim::{label_align, SimScenario};
use wemix::{Error, FitConfig};

#[derive(Debug, Clone, Serialize)]
pub struct WeightCurve {
    pub raf: String,
    pub delta: Vec<f64>,
    pub adjusted: Vec<f64>,
    pub weight: Vec<f64>,
}

/// Residual adjustment and weight over `count` residuals in `[lo, hi]`.
pub fn weight_curve(raf: &str, lo: f64, hi: f64, count: usize) -> Result<WeightCurve, Error> {
    let spec: RafSpec = raf.parse()?;
    if !(lo < hi) || count < 2 || lo < -1.0 {
        return Err(Error::InvalidConfig("need -1 <= lo < hi and at least two points".into()));
    }
    let delta: Vec<f64> = (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect();
    Ok(WeightCurve {
        raf: spec.to_string(),
        adjusted: delta.iter().map(|&d| raf_apply(d, &spec)).collect(),
        weight: delta.iter().map(|&d| weight(d, &spec)).collect(),
        delta,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityProfile {
    pub grid: Vec<f64>,
    pub kde: Vec<f64>,
    pub reference: Vec<f64>,
    pub residual: Vec<f64>,
    pub weight: Vec<f64>,
    /// Squared distances of the sample to its closest true component.
    pub dist2: Vec<f64>,
    pub outlier: Vec<bool>,
}

/// KDE of squared distances from a contaminated sample against the
/// chi-square reference, with Pearson residuals and weights along a grid.
pub fn density_profile(
    n: usize,
    eps: f64,
    kernel: &str,
    h: f64,
    raf: &str,
    seed: u64,
) -> Result<DensityProfile, Error> {
    let family: KernelFamily = kernel.parse()?;
    let spec = KernelSpec::new(family, h)?;
    let raf: RafSpec = raf.parse()?;
    let scenario = SimScenario::example4(n, eps, seed);
    let (sample, outlier) = scenario.generate(seed)?;
    let prepared = sample.truth.prepare()?;
    let dist2: Vec<f64> = sample
        .data
        .rows()
        .map(|y| prepared.components.iter().map(|c| c.mahalanobis_sq(y)).fold(f64::INFINITY, f64::min))
        .collect();
    let p = sample.data.p();
    let grid: Vec<f64> = (1..=240).map(|i| i as f64 * 0.05).collect();
    let kde = kde_boundary(&grid, &dist2, spec)?;
    let reference: Vec<f64> = grid.iter().map(|&t| chi2_pdf(t, p)).collect::<Result<_, _>>()?;
    let residual: Vec<f64> = grid.iter().zip(&kde).map(|(&t, &f)| residual_or_sentinel(t, p, f)).collect();
    let weight = residual.iter().map(|&d| weight(d, &raf)).collect();
    Ok(DensityProfile { grid, kde, reference, residual, weight, dist2, outlier })
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub h: f64,
    pub downweighting: f64,
    /// 0-based component, sorted by the first mean coordinate.
    pub assignment: Vec<usize>,
    pub weight: Vec<f64>,
    pub means: Vec<[f64; 2]>,
    /// Row-major 2x2 covariances.
    pub covariances: Vec<[f64; 4]>,
    pub proportions: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Sweep {
    pub points: Vec<[f64; 2]>,
    pub truth_outlier: Vec<bool>,
    pub cells: Vec<SweepCell>,
    pub suggested: usize,
    pub rationale: String,
}

/// Bandwidth sweep over the three-cluster example with uniform noise: WEM
/// from a trimmed start at the smallest h, each later h warm-started from
/// the previous one, and the suggested h from the downweighting profile.
pub fn sweep_example(n: usize, eps: f64, count: usize, seed: u64) -> Result<Sweep, Error> {
    let (sample, truth_outlier) = SimScenario::example4(n, eps, seed).generate(seed)?;
    let config = FitConfig { eigen_ratio: 15.0, n_starts: 10, seed, ..FitConfig::default() };
    let mut spec = MonitorSpec::new(geomspace(0.001, 0.03, count)?, vec![3])?;
    spec.start_trim = Some(0.5);
    let grid = monitor(&sample.data, &config, &spec)?;
    if let Some(f) = grid.failures.first() {
        return Err(Error::InvalidConfig(format!("fit at h = {} failed: {}", f.h, f.error)));
    }
    let suggestion = suggest_h(&grid, 3, SuggestOptions::default())?;
    let cells = grid
        .cells_for(3)
        .map(|c| {
            let fitted = label_align(&c.fit);
            let m = &fitted.model;
            SweepCell {
                h: c.h,
                downweighting: c.downweighting,
                assignment: fitted.assignments.clone(),
                weight: fitted.cond_weights.clone(),
                means: m.means.iter().map(|v| [v[0], v[1]]).collect(),
                covariances: m.covariances.iter().map(|c| [c[(0, 0)], c[(0, 1)], c[(1, 0)], c[(1, 1)]]).collect(),
                proportions: m.weights.clone(),
                converged: c.converged,
            }
        })
        .collect();
    Ok(Sweep {
        points: sample.data.rows().map(|r| [r[0], r[1]]).collect(),
        truth_outlier,
        cells,
        suggested: suggestion.index,
        rationale: suggestion.rationale.to_string(),
    })
}

fn to_json<T: Serialize>(r: Result<T, Error>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = weightCurve)]
pub fn weight_curve_js(raf: &str, lo: f64, hi: f64, count: usize) -> Result<String, JsError> {
    to_json(weight_curve(raf, lo, hi, count))
}

#[wasm_bindgen(js_name = densityProfile)]
pub fn density_profile_js(n: usize, eps: f64, kernel: &str, h: f64, raf: &str, seed: u32) -> Result<String, JsError> {
    to_json(density_profile(n, eps, kernel, h, raf, seed as u64))
}

#[wasm_bindgen(js_name = sweepExample)]
pub fn sweep_example_js(n: usize, eps: f64, count: usize, seed: u32) -> Result<String, JsError> {
    to_json(sweep_example(n, eps, count, seed as u64))
}
