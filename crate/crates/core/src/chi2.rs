//! Chi-square reference distribution: density, CDF and quantile.

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS_COEF[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Log-density of chi-square with `p` degrees of freedom at `t > 0`.
pub fn ln_chi2_pdf(t: f64, p: usize) -> f64 {
    let half = p as f64 / 2.0;
    (half - 1.0) * t.ln() - t / 2.0 - half * std::f64::consts::LN_2 - ln_gamma(half)
}

pub fn chi2_pdf(t: f64, p: usize) -> Result<f64> {
    if p == 0 {
        return Err(Error::DomainError("degrees of freedom must be positive".into()));
    }
    if !(t >= 0.0) {
        return Err(Error::DomainError(format!("chi-square density at t = {t}")));
    }
    if t == 0.0 {
        return match p {
            1 => Err(Error::BoundarySingularity),
            2 => Ok(0.5),
            _ => Ok(0.0),
        };
    }
    if t.is_infinite() {
        return Ok(0.0);
    }
    Ok(ln_chi2_pdf(t, p).exp())
}

/// Regularized lower incomplete gamma P(a, x).
pub fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefix = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        (1.0 - (log_prefix.exp() * h)).max(0.0)
    }
}

pub fn chi2_cdf(t: f64, p: usize) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    reg_lower_gamma(p as f64 / 2.0, t / 2.0)
}

/// Quantile by bisection on the CDF.
pub fn chi2_quantile(prob: f64, p: usize) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(Error::DomainError(format!("chi-square quantile at prob = {prob}")));
    }
    if p == 0 {
        return Err(Error::DomainError("degrees of freedom must be positive".into()));
    }
    let pf = p as f64;
    let mut lo = 0.0;
    let mut hi = pf + 40.0 * (2.0 * pf).sqrt();
    while chi2_cdf(hi, p) < prob {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_cdf(mid, p) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = if n % 2 == 1 { n + 1 } else { n };
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let x = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        s * h / 3.0
    }

    #[test]
    fn ln_gamma_known_values() {
        assert!((ln_gamma(1.0)).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        assert!((ln_gamma(5.0) - 24f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(10.5) - 1_133_278.388_948_441_4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pdf_examples() {
        assert_eq!(chi2_pdf(0.0, 2).unwrap(), 0.5);
        assert_eq!(chi2_pdf(0.0, 3).unwrap(), 0.0);
        assert!((chi2_pdf(2.0, 2).unwrap() - (-1f64).exp() / 2.0).abs() < 1e-15);
        assert!((chi2_pdf(2.0, 2).unwrap() - 0.183_939_721).abs() < 1e-9);
        assert_eq!(chi2_pdf(0.0, 1), Err(Error::BoundarySingularity));
        assert!(matches!(chi2_pdf(-1.0, 2), Err(Error::DomainError(_))));
    }

    #[test]
    fn pdf_p4_matches_quadrature_normalizer() {
        // gamma-form density t^(k/2-1) e^(-t/2) / Z with Z from quadrature
        let unnorm = |t: f64| t * (-t / 2.0).exp();
        let z = simpson(unnorm, 0.0, 200.0, 200_000);
        let expected = unnorm(1.0) / z;
        assert!((chi2_pdf(1.0, 4).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn pdf_integrates_to_one() {
        for p in [1usize, 2, 5, 10] {
            // substitute t = u^2 to remove the p = 1 boundary singularity
            let f = |u: f64| {
                if u == 0.0 {
                    if p == 1 {
                        2.0 / (2.0 * std::f64::consts::PI).sqrt()
                    } else {
                        0.0
                    }
                } else {
                    2.0 * u * chi2_pdf(u * u, p).unwrap()
                }
            };
            let mass = simpson(f, 0.0, 200f64.sqrt(), 200_000);
            assert!((mass - 1.0).abs() < 1e-6, "p={p} mass={mass}");
        }
    }

    #[test]
    fn quantile_closed_form_p2() {
        assert!((chi2_quantile(0.5, 2).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-9);
        assert!((chi2_quantile(0.99, 2).unwrap() - 2.0 * 100f64.ln()).abs() < 1e-9);
        assert!(chi2_quantile(0.0, 2).is_err());
        assert!(chi2_quantile(1.0, 2).is_err());
    }

    #[test]
    fn quantile_inverts_cdf_on_grid() {
        for p in [1usize, 2, 3, 6, 10] {
            for i in 1..50 {
                let prob = i as f64 / 50.0;
                let t = chi2_quantile(prob, p).unwrap();
                assert!((chi2_cdf(t, p) - prob).abs() < 1e-10);
            }
            for i in 1..40 {
                let t = i as f64 * 0.7;
                let back = chi2_quantile(chi2_cdf(t, p), p).unwrap();
                assert!((back - t).abs() < 1e-8 * t.max(1.0), "p={p} t={t} back={back}");
            }
        }
    }
}
