use proptest::prelude::*;
use wemix::diagnose::{clustering_report, detect_outliers, detection_errors, mce, rand_index, DetectionRule};
use wemix::downweight::KernelSpec;
use wemix::fit::fit_once;
use wemix::sim::{contaminate, example4_truth, gen_example4};
use wemix::{Algorithm, FitConfig, FitResult};

fn pair_scan(a: &[usize], b: &[usize], mask: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..a.len()).filter(|&i| mask[i]).collect();
    let (mut agree, mut total) = (0u64, 0u64);
    for x in 0..idx.len() {
        for y in x + 1..idx.len() {
            let (i, j) = (idx[x], idx[y]);
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / total as f64
}

fn labeled(n: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<bool>)> {
    (
        prop::collection::vec(0usize..4, n),
        prop::collection::vec(0usize..3, n),
        prop::collection::vec(prop::bool::weighted(0.8), n),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn rand_index_equals_pair_scan((a, b, mask) in labeled(30)) {
        prop_assume!(mask.iter().filter(|&&m| m).count() >= 2);
        prop_assert_eq!(rand_index(&a, &b, &mask).unwrap(), pair_scan(&a, &b, &mask));
    }

    #[test]
    fn rand_index_symmetric_and_relabel_invariant((a, b, mask) in labeled(40)) {
        prop_assume!(mask.iter().filter(|&&m| m).count() >= 2);
        let r = rand_index(&a, &b, &mask).unwrap();
        prop_assert_eq!(r, rand_index(&b, &a, &mask).unwrap());
        let relabeled: Vec<usize> = a.iter().map(|&l| [2, 0, 3, 1][l]).collect();
        prop_assert_eq!(r, rand_index(&relabeled, &b, &mask).unwrap());
    }

    #[test]
    fn detection_errors_match_confusion_table(flags in prop::collection::vec(any::<bool>(), 50), truth in prop::collection::vec(any::<bool>(), 50)) {
        let (mut tp, mut fp, mut fne, mut tn) = (0.0, 0.0, 0.0, 0.0);
        for (f, t) in flags.iter().zip(&truth) {
            match (f, t) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fne += 1.0,
                (false, false) => tn += 1.0,
            }
        }
        let e = detection_errors(&flags, &truth).unwrap();
        let rate = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        prop_assert_eq!(e.eps_hat, (tp + fp) / 50.0);
        prop_assert_eq!(e.swamping, rate(fp, fp + tn));
        prop_assert_eq!(e.masking, rate(fne, fne + tp));
    }
}

#[test]
fn small_rand_examples() {
    let mask = [true; 4];
    assert_eq!(rand_index(&[0, 0, 0, 0], &[0, 0, 1, 1], &mask).unwrap(), 2.0 / 6.0);
    assert_eq!(rand_index(&[0, 1, 2, 2], &[0, 1, 2, 2], &mask).unwrap(), 1.0);
    assert!(rand_index(&[0, 1], &[0, 1], &[true, false]).is_err());
}

#[test]
fn mce_counts_misclassified_points() {
    let truth = vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2, 0];
    let mut fit = truth.clone();
    fit[4] = 2;
    let mut mask = vec![true; 11];
    mask[10] = false;
    assert!((mce(&fit, &truth, &mask).unwrap() - 0.1).abs() < 1e-15);
    assert_eq!(mce(&truth, &truth, &mask).unwrap(), 0.0);
}

fn contaminated_fit() -> (FitResult, Vec<bool>) {
    let truth = example4_truth();
    let clean = gen_example4(300, 41).unwrap().data;
    let (data, outlier) = contaminate(&clean, &truth, 0.2, 0.99, 42).unwrap();
    let cfg = FitConfig {
        algorithm: Algorithm::Wem,
        kernel: KernelSpec::folded_normal(0.05).unwrap(),
        eigen_ratio: 15.0,
        ..FitConfig::default()
    };
    (fit_once(&data, 3, &truth, &cfg).unwrap(), outlier)
}

#[test]
fn alpha_trades_masking_for_swamping() {
    let (fit, outlier) = contaminated_fit();
    let alphas = [0.001, 0.005, 0.01, 0.025, 0.05, 0.1, 0.2, 0.3, 0.5];
    let mut prev: Option<(f64, f64)> = None;
    for a in alphas {
        let flags = detect_outliers(&fit, &DetectionRule::chi2(a).unwrap(), 2).unwrap();
        let e = detection_errors(&flags, &outlier).unwrap();
        if let Some((s, m)) = prev {
            assert!(e.swamping >= s && e.masking <= m, "alpha {a}");
        }
        prev = Some((e.swamping, e.masking));
    }
}

#[test]
fn limiting_rules() {
    let (fit, _) = contaminated_fit();
    let all = detect_outliers(&fit, &DetectionRule::chi2(1.0 - 1e-12).unwrap(), 2).unwrap();
    assert!(all.iter().all(|&f| f));
    let none = detect_outliers(&fit, &DetectionRule::weight(0.0).unwrap(), 2).unwrap();
    assert!(none.iter().all(|&f| !f));
    let adaptive = clustering_report(&fit, &DetectionRule::adaptive(), 2, None, None).unwrap();
    let min_w = fit.cond_weights.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(adaptive.eps_hat <= 1.0 - min_w);
    assert!(adaptive.swamping.is_none() && adaptive.rand.is_none());
}

#[test]
fn report_labels_mark_flagged_points() {
    let (fit, outlier) = contaminated_fit();
    let rule = DetectionRule::weight(0.2).unwrap();
    let rep = clustering_report(&fit, &rule, 2, None, Some(&outlier)).unwrap();
    for i in 0..rep.flags.len() {
        assert_eq!(rep.labels[i].is_none(), rep.flags[i]);
    }
    let mean_flag = rep.flags.iter().filter(|&&f| f).count() as f64 / rep.flags.len() as f64;
    assert_eq!(rep.eps_hat, mean_flag);
    assert!((0.0..=1.0).contains(&rep.masking.unwrap()));
}
