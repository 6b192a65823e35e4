use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wemix::constraint::eigen_ratio;
use wemix::downweight::{KernelSpec, RafSpec};
use wemix::fit::{
    c_step, e_step, finalize, fit, fit_once, init_candidates, m_step_weighted, select_root, soft_trim, trimmed_start,
    PosteriorMatrix, WeightState,
};
use wemix::sim::{contaminate, example4_truth, gen_example4};
use wemix::{Algorithm, DataMatrix, Error, FitConfig, MixtureModel};

fn config(algorithm: Algorithm, h: f64) -> FitConfig {
    FitConfig { algorithm, kernel: KernelSpec::folded_normal(h).unwrap(), eigen_ratio: 1e6, ..FitConfig::default() }
}

fn perturbed_truth() -> MixtureModel {
    let mut m = example4_truth();
    m.weights = vec![1.0 / 3.0; 3];
    for (c, mean) in m.means.iter_mut().enumerate() {
        mean[0] += 0.4 * (c as f64 - 1.0);
        mean[1] -= 0.3;
    }
    for cov in &mut m.covariances {
        *cov = DMatrix::identity(2, 2) * 1.5;
    }
    m
}

fn pdf(y: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let inv = cov.clone().try_inverse().unwrap();
    let d = DVector::from_column_slice(y) - mean;
    let q = (d.transpose() * inv * &d)[(0, 0)];
    let p = y.len() as f64;
    (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(p / 2.0) * cov.determinant().sqrt())
}

/// Plain EM with a naive E-step and M-step.
fn textbook_em(data: &DataMatrix, start: &MixtureModel, iters: usize) -> (MixtureModel, f64) {
    let (n, p, k) = (data.n(), data.p(), start.k());
    let mut m = start.clone();
    for _ in 0..iters {
        let mut u = vec![vec![0.0; k]; n];
        for i in 0..n {
            let dens: Vec<f64> = (0..k).map(|c| m.weights[c] * pdf(data.row(i), &m.means[c], &m.covariances[c])).collect();
            let s: f64 = dens.iter().sum();
            for c in 0..k {
                u[i][c] = dens[c] / s;
            }
        }
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| u[i][c]).sum();
            let mut mu = DVector::zeros(p);
            for i in 0..n {
                mu += DVector::from_column_slice(data.row(i)) * u[i][c];
            }
            mu /= nk;
            let mut cov = DMatrix::zeros(p, p);
            for i in 0..n {
                let d = DVector::from_column_slice(data.row(i)) - &mu;
                cov += &d * d.transpose() * u[i][c];
            }
            m.weights[c] = nk / n as f64;
            m.means[c] = mu;
            m.covariances[c] = cov / nk;
        }
    }
    let ll = (0..n)
        .map(|i| (0..k).map(|c| m.weights[c] * pdf(data.row(i), &m.means[c], &m.covariances[c])).sum::<f64>().ln())
        .sum();
    (m, ll)
}

#[test]
fn em_matches_textbook_implementation() {
    let s = gen_example4(300, 21).unwrap();
    let start = perturbed_truth();
    let cfg = FitConfig { rel_tol: 1e-13, max_iter: 5000, ..config(Algorithm::Em, 1.0) };
    let ours = fit_once(&s.data, 3, &start, &cfg).unwrap();
    assert!(ours.converged);
    let (oracle, ll) = textbook_em(&s.data, &start, ours.iterations + 200);
    assert!((ours.weighted_loglik - ll).abs() < 1e-6, "{} vs {ll}", ours.weighted_loglik);
    for c in 0..3 {
        assert!((&ours.model.means[c] - &oracle.means[c]).amax() < 1e-6);
    }
}

#[test]
fn wem_with_huge_bandwidth_reduces_to_em() {
    let s = gen_example4(500, 4).unwrap();
    let start = perturbed_truth();
    let wem = fit_once(&s.data, 3, &start, &config(Algorithm::Wem, 1e9)).unwrap();
    let em = fit_once(&s.data, 3, &start, &config(Algorithm::Em, 1e9)).unwrap();
    assert!(wem.cond_weights.iter().all(|&w| w == 1.0));
    assert!((wem.weighted_loglik - em.weighted_loglik).abs() < 1e-6);
    for c in 0..3 {
        assert!((&wem.model.means[c] - &em.model.means[c]).amax() < 1e-6);
    }
}

#[test]
fn e_step_matches_closed_form() {
    let s = gen_example4(50, 2).unwrap();
    let m = perturbed_truth();
    let u = e_step(&s.data, &m).unwrap();
    for i in 0..50 {
        let dens: Vec<f64> = (0..3).map(|c| m.weights[c] * pdf(s.data.row(i), &m.means[c], &m.covariances[c])).collect();
        let tot: f64 = dens.iter().sum();
        for c in 0..3 {
            assert!((u.get(i, c) - dens[c] / tot).abs() < 1e-12);
        }
    }
}

#[test]
fn c_step_is_first_argmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (n, k) = (200, 4);
    // coarse values force ties
    let values: Vec<f64> = (0..n * k).map(|_| rng.random_range(0..4) as f64 / 4.0).collect();
    let u = PosteriorMatrix::from_values(n, k, values).unwrap();
    let c = c_step(&u);
    for i in 0..n {
        let row = u.row(i);
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        for j in 0..k {
            assert_eq!(c.get(i, j), if j == best { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn weighted_m_step_matches_double_loop() {
    let s = gen_example4(120, 7).unwrap();
    let m = perturbed_truth();
    let cfg = config(Algorithm::Wem, 0.3);
    let u = e_step(&s.data, &m).unwrap();
    let w = soft_trim(&s.data, &m, &cfg, None).unwrap();
    let WeightState::Componentwise { weights, .. } = &w else { panic!("expected componentwise weights") };
    let out = m_step_weighted(&s.data, &u, &w, &cfg).unwrap();
    let (n, p, k) = (120, 2, 3);
    let mut totals = vec![0.0; k];
    for c in 0..k {
        let mut sw = 0.0;
        let mut mu = vec![0.0; p];
        for i in 0..n {
            let e = u.get(i, c) * weights[i * k + c];
            sw += e;
            for j in 0..p {
                mu[j] += e * s.data.row(i)[j];
            }
        }
        for v in &mut mu {
            *v /= sw;
        }
        let mut cov = vec![vec![0.0; p]; p];
        for i in 0..n {
            let e = u.get(i, c) * weights[i * k + c];
            for a in 0..p {
                for b in 0..p {
                    cov[a][b] += e * (s.data.row(i)[a] - mu[a]) * (s.data.row(i)[b] - mu[b]);
                }
            }
        }
        for j in 0..p {
            assert!((out.means[c][j] - mu[j]).abs() < 1e-10);
        }
        for a in 0..p {
            for b in 0..p {
                assert!((out.covariances[c][(a, b)] - cov[a][b] / sw).abs() < 1e-10);
            }
        }
        totals[c] = sw;
    }
    let all: f64 = totals.iter().sum();
    for c in 0..k {
        assert!((out.weights[c] - totals[c] / all).abs() < 1e-10);
    }
}

fn chi2_2_pdf(t: f64) -> f64 {
    0.5 * (-0.5 * t).exp()
}

fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standalone single-component weighted-likelihood loop, p = 2, GKL RAF.
fn k1_oracle(data: &DataMatrix, h: f64, tau: f64, iters: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = data.n();
    let rows: Vec<DVector<f64>> = data.rows().map(DVector::from_column_slice).collect();
    let mut mu = rows.iter().sum::<DVector<f64>>() / n as f64;
    let mut cov = rows.iter().map(|r| (r - &mu) * (r - &mu).transpose()).sum::<DMatrix<f64>>() / n as f64;
    for _ in 0..iters {
        let inv = cov.clone().try_inverse().unwrap();
        let d2: Vec<f64> = rows.iter().map(|r| ((r - &mu).transpose() * &inv * (r - &mu))[(0, 0)]).collect();
        let w: Vec<f64> = d2
            .iter()
            .map(|&t| {
                let f = d2.iter().map(|&s| phi((t - s) / h) + phi((t + s) / h)).sum::<f64>() / (n as f64 * h);
                let delta = f / chi2_2_pdf(t) - 1.0;
                if delta <= 0.0 {
                    1.0
                } else {
                    (((tau * delta + 1.0).ln() / tau + 1.0) / (delta + 1.0)).min(1.0)
                }
            })
            .collect();
        let sw: f64 = w.iter().sum();
        mu = rows.iter().zip(&w).map(|(r, wi)| r * *wi).sum::<DVector<f64>>() / sw;
        cov = rows.iter().zip(&w).map(|(r, wi)| (r - &mu) * (r - &mu).transpose() * *wi).sum::<DMatrix<f64>>() / sw;
    }
    (mu, cov)
}

#[test]
fn single_component_wem_matches_standalone_loop() {
    let truth = MixtureModel::new(
        vec![1.0],
        vec![DVector::from_vec(vec![1.0, -2.0])],
        vec![DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.0])],
    )
    .unwrap();
    let clean = wemix::sim::sample_mixture(&truth, 180, 3).unwrap().data;
    let (data, _) = contaminate(&clean, &truth, 0.1, 0.999, 4).unwrap();
    let cfg = FitConfig {
        raf: RafSpec::gkl(0.5).unwrap(),
        rel_tol: 1e-15,
        max_iter: 400,
        ..config(Algorithm::Wem, 0.5)
    };
    let ours = fit_once(&data, 1, &truth, &cfg).unwrap();
    let (mu, cov) = k1_oracle(&data, 0.5, 0.5, 400);
    assert!((&ours.model.means[0] - &mu).amax() < 1e-6, "{} vs {mu}", ours.model.means[0]);
    assert!((&ours.model.covariances[0] - &cov).amax() < 1e-6);
}

#[test]
fn init_candidate_count_and_validity() {
    let s = gen_example4(200, 1).unwrap();
    let cfg = FitConfig { n_starts: 20, ..FitConfig::default() };
    let starts = vec![example4_truth(), perturbed_truth(), example4_truth()];
    let cands = init_candidates(&s.data, 3, &cfg, &starts).unwrap();
    assert_eq!(cands.len(), 23);
    for c in &cands {
        c.validate().unwrap();
    }
    let again = init_candidates(&s.data, 3, &FitConfig { n_starts: 1, ..cfg.clone() }, &[]).unwrap();
    let twice = init_candidates(&s.data, 3, &FitConfig { n_starts: 1, ..cfg }, &[]).unwrap();
    assert_eq!(again, twice);
}

#[test]
fn fits_are_deterministic_and_respect_eigen_ratio() {
    let s = gen_example4(300, 12).unwrap();
    for algorithm in [Algorithm::Wem, Algorithm::Wcem, Algorithm::Em, Algorithm::Cem] {
        let cfg = FitConfig { algorithm, n_starts: 4, eigen_ratio: 3.0, seed: 5, ..FitConfig::default() };
        let a = fit(&s.data, 3, &cfg, &[]).unwrap();
        let b = fit(&s.data, 3, &cfg, &[]).unwrap();
        assert_eq!(a, b);
        assert!(eigen_ratio(&a.model.covariances) <= 3.0 + 1e-9, "{algorithm}");
        assert!((a.model.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn row_order_does_not_change_the_fit() {
    let s = gen_example4(240, 13).unwrap();
    let mut idx: Vec<usize> = (0..240).collect();
    idx.reverse();
    idx.swap(3, 100);
    let shuffled = s.data.select_rows(&idx);
    let cfg = config(Algorithm::Wem, 0.5);
    let a = fit_once(&s.data, 3, &perturbed_truth(), &cfg).unwrap();
    let b = fit_once(&shuffled, 3, &perturbed_truth(), &cfg).unwrap();
    for c in 0..3 {
        assert!((&a.model.means[c] - &b.model.means[c]).amax() < 1e-6);
    }
    for (pos, &i) in idx.iter().enumerate() {
        assert_eq!(a.assignments[i], b.assignments[pos]);
    }
}

#[test]
fn component_relabeling_permutes_the_fit() {
    let s = gen_example4(240, 14).unwrap();
    let cfg = config(Algorithm::Wem, 0.5);
    let start = perturbed_truth();
    let perm = [2, 0, 1];
    let a = fit_once(&s.data, 3, &start, &cfg).unwrap();
    let b = fit_once(&s.data, 3, &start.permuted(&perm), &cfg).unwrap();
    let relabeled = a.model.permuted(&perm);
    for c in 0..3 {
        assert!((&relabeled.means[c] - &b.model.means[c]).amax() < 1e-6);
    }
}

#[test]
fn single_candidate_is_returned() {
    let s = gen_example4(200, 15).unwrap();
    let cfg = config(Algorithm::Wem, 0.5);
    let r = fit_once(&s.data, 3, &example4_truth(), &cfg).unwrap();
    let picked = select_root(vec![r.clone()], &s.data, &cfg).unwrap();
    assert_eq!(picked.model, r.model);
    assert_eq!(picked.assignments, r.assignments);
}

#[test]
fn low_weight_roots_are_discarded() {
    let s = gen_example4(200, 16).unwrap();
    let cfg = config(Algorithm::Wem, 0.5);
    let good = fit_once(&s.data, 3, &example4_truth(), &cfg).unwrap();
    let mut degenerate = good.clone();
    degenerate.cond_weights = vec![0.1; 200];
    degenerate.weighted_loglik = f64::INFINITY;
    let picked = select_root(vec![degenerate.clone(), good.clone()], &s.data, &cfg).unwrap();
    assert_eq!(picked.cond_weights, good.cond_weights);
    assert_eq!(select_root(vec![degenerate], &s.data, &cfg), Err(Error::AllRootsDegenerate));
}

#[test]
fn generating_model_has_lower_root_score() {
    let cfg = FitConfig { root_mc_draws: 4000, ..config(Algorithm::Wem, 0.5) };
    let mut wrong = example4_truth();
    wrong.means[0][0] += 2.5;
    wrong.covariances[1] *= 3.0;
    let mut wins = 0;
    for seed in 0..20 {
        let s = gen_example4(400, 100 + seed).unwrap();
        let a = finalize(&s.data, example4_truth(), &cfg).unwrap();
        let b = finalize(&s.data, wrong.clone(), &cfg).unwrap();
        let picked = select_root(vec![b, a.clone()], &s.data, &cfg).unwrap();
        if picked.model == a.model {
            wins += 1;
        }
    }
    assert!(wins >= 18, "generating model selected {wins}/20 times");
}

#[test]
fn trimmed_start_survives_heavy_noise() {
    let truth = example4_truth();
    let clean = gen_example4(600, 31).unwrap().data;
    let (data, _) = contaminate(&clean, &truth, 0.4, 0.99, 32).unwrap();
    let cfg = FitConfig { n_starts: 10, eigen_ratio: 15.0, seed: 3, ..FitConfig::default() };
    let start = trimmed_start(&data, 3, 0.5, &cfg).unwrap();
    start.validate().unwrap();
    for mu in &truth.means {
        let nearest = start.means.iter().map(|m| (m - mu).norm()).fold(f64::INFINITY, f64::min);
        assert!(nearest < 0.5, "truth mean {mu} missed by {nearest}");
    }
    assert!(trimmed_start(&data, 3, 1.0, &cfg).is_err());
}
