use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use wemix::chi2::chi2_pdf;
use wemix::downweight::{kde_boundary, raf_apply, residual_or_sentinel, weight, KernelFamily, KernelSpec, RafSpec};

fn all_specs() -> Vec<RafSpec> {
    let mut specs = vec![RafSpec::pdm(-1.0).unwrap(), RafSpec::pdm(2.0).unwrap(), RafSpec::pdm_kl()];
    for tau in [0.1, 0.5, 0.9, 1.0] {
        specs.push(RafSpec::gkl(tau).unwrap());
    }
    specs
}

fn arb_delta() -> impl Strategy<Value = f64> {
    prop_oneof![-1.0f64..0.0, 0.0f64..10.0, 0.0f64..1e6]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn weight_in_unit_interval(delta in arb_delta()) {
        for spec in all_specs() {
            let w = weight(delta, &spec);
            prop_assert!((0.0..=1.0).contains(&w), "{spec} delta {delta} w {w}");
        }
    }

    #[test]
    fn raf_bounded_by_residual(delta in arb_delta()) {
        for spec in all_specs() {
            let a = raf_apply(delta, &spec);
            prop_assert!(a.abs() <= delta.abs() + 1e-12, "{spec} delta {delta} A {a}");
        }
    }
}

#[test]
fn unit_weight_at_zero_residual() {
    for spec in all_specs() {
        assert_eq!(weight(0.0, &spec), 1.0, "{spec}");
    }
}

#[test]
fn weight_nonincreasing_for_positive_residuals() {
    for spec in all_specs() {
        let mut prev = weight(0.0, &spec);
        for i in 1..=20_000 {
            let delta = (i as f64 / 1000.0).powi(3);
            let w = weight(delta, &spec);
            assert!(w <= prev + 1e-15, "{spec}: w({delta}) = {w} > {prev}");
            prev = w;
        }
    }
}

#[test]
fn hellinger_and_gkl_closed_forms() {
    assert!((weight(3.0, &RafSpec::pdm(2.0).unwrap()) - 0.75).abs() < 1e-15);
    let e = std::f64::consts::E;
    assert!((weight(e - 1.0, &RafSpec::gkl(1.0).unwrap()) - 2.0 / e).abs() < 1e-12);
}

fn chi2_draws(n: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = ChiSquared::new(p).unwrap();
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

#[test]
fn kde_families_converge_to_chi2_density() {
    let draws = chi2_draws(2000, 5.0, 11);
    let grid: Vec<f64> = (0..=280).map(|i| 1.0 + i as f64 * 0.05).collect();
    for (family, h) in [
        (KernelFamily::FoldedNormal, 0.6),
        (KernelFamily::Gamma, 0.08),
        (KernelFamily::LogTransform, 0.12),
    ] {
        let f = kde_boundary(&grid, &draws, KernelSpec::new(family, h).unwrap()).unwrap();
        let mad = grid
            .iter()
            .zip(&f)
            .map(|(&t, &v)| (v - chi2_pdf(t, 5).unwrap()).abs())
            .sum::<f64>()
            / grid.len() as f64;
        assert!(mad < 0.01, "{family}: mean abs deviation {mad}");
    }
}

#[test]
fn kde_mass_is_conserved() {
    let draws = chi2_draws(200, 2.0, 3);
    let step = 0.001;
    let grid: Vec<f64> = (1..=40_000).map(|i| i as f64 * step).collect();
    for (family, h) in [
        (KernelFamily::FoldedNormal, 0.5),
        (KernelFamily::Gamma, 0.02),
        (KernelFamily::LogTransform, 0.2),
    ] {
        let f = kde_boundary(&grid, &draws, KernelSpec::new(family, h).unwrap()).unwrap();
        let mass: f64 = f.iter().sum::<f64>() * step;
        assert!((mass - 1.0).abs() < 0.02, "{family}: mass {mass}");
    }
}

#[test]
fn huge_bandwidth_gives_unit_weights_on_model_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = 3;
    let d2: Vec<f64> = (0..500)
        .map(|_| (0..p).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); z * z }).sum())
        .collect();
    let kde = kde_boundary(&d2, &d2, KernelSpec::folded_normal(1e6).unwrap()).unwrap();
    let spec = RafSpec::gkl(0.9).unwrap();
    for (t, f) in d2.iter().zip(&kde) {
        let w = weight(residual_or_sentinel(*t, p, *f), &spec);
        assert!(w >= 0.99, "d2 {t}: weight {w}");
    }
}

#[test]
fn single_far_outlier_gets_zero_weight() {
    // 300 clean squared distances plus one at 400; the reference density there
    // is ~1e-87 so its residual is enormous.
    let mut d2 = chi2_draws(300, 2.0, 8);
    d2.push(400.0);
    let kde = kde_boundary(&d2, &d2, KernelSpec::folded_normal(0.5).unwrap()).unwrap();
    let spec = RafSpec::gkl(0.9).unwrap();
    let w: Vec<f64> = d2.iter().zip(&kde).map(|(t, f)| weight(residual_or_sentinel(*t, 2, *f), &spec)).collect();
    assert!(w[300] < 1e-6, "outlier weight {}", w[300]);
    // isolated sample: only its own kernel term survives, phi(0) / (n h)
    let own = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * 301.0 * 0.5);
    assert!((kde[300] - own).abs() <= 1e-12 * own);
    let mean_clean = w[..300].iter().sum::<f64>() / 300.0;
    assert!(mean_clean > 0.9, "clean mean weight {mean_clean}");
}
