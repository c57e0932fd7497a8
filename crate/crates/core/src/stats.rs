//! Tail probabilities used by the detector.

use libm::{erfc, lgamma as ln_gamma};

/// Bernoulli KL divergence `KL(p || q)` in nats, with `0 ln 0 = 0`.
///
/// Returns `+inf` when `p` puts mass where `q` has none.
pub fn kl_bernoulli(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| {
        if a == 0.0 {
            0.0
        } else if b == 0.0 {
            f64::INFINITY
        } else {
            a * (a / b).ln()
        }
    };
    (term(p, q) + term(1.0 - p, 1.0 - q)).max(0.0)
}

/// Upper tail of the standard normal, `P[Z >= z]`.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn ln_binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    let (nf, kf) = (n as f64, k as f64);
    ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0)
        + kf * p.ln()
        + (nf - kf) * (1.0 - p).ln()
}

/// `P[X >= k]` for `X ~ Binomial(n, p)`.
///
/// Sums probability masses in log space starting from the term at the tail
/// boundary, walking toward the thin end with the pmf ratio recurrence.
/// Tails containing the mode are computed as one minus the opposite tail.
pub fn binomial_sf(n: u64, k: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let mean = n as f64 * p;
    if k as f64 >= mean {
        upper_sum(n, k, p).min(1.0)
    } else {
        (1.0 - lower_sum(n, k - 1, p)).clamp(0.0, 1.0)
    }
}

/// `P[X <= k]`.
pub fn binomial_cdf(n: u64, k: u64, p: f64) -> f64 {
    if k >= n {
        return 1.0;
    }
    1.0 - binomial_sf(n, k + 1, p)
}

/// `sum_{j >= k} pmf(j)`, for `k` at or above the mean.
fn upper_sum(n: u64, k: u64, p: f64) -> f64 {
    let odds = p / (1.0 - p);
    let mut term = 1.0;
    let mut total = 1.0;
    for j in k..n {
        term *= (n - j) as f64 / (j + 1) as f64 * odds;
        total += term;
        if term < total * 1e-17 {
            break;
        }
    }
    (ln_binomial_pmf(n, k, p) + total.ln()).exp()
}

/// `sum_{j <= k} pmf(j)`, for `k` below the mean.
fn lower_sum(n: u64, k: u64, p: f64) -> f64 {
    let inv_odds = (1.0 - p) / p;
    let mut term = 1.0;
    let mut total = 1.0;
    let mut j = k;
    while j > 0 {
        term *= j as f64 / (n - j + 1) as f64 * inv_odds;
        total += term;
        if term < total * 1e-17 {
            break;
        }
        j -= 1;
    }
    (ln_binomial_pmf(n, k, p) + total.ln()).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct pmf summation with exact integer binomial coefficients.
    fn brute_force_sf(n: u64, k: u64, p: f64) -> f64 {
        let mut total = 0.0;
        for j in k..=n {
            let mut c = 1.0f64;
            for i in 0..j {
                c = c * (n - i) as f64 / (i + 1) as f64;
            }
            total += c * p.powi(j as i32) * (1.0 - p).powi((n - j) as i32);
        }
        total
    }

    #[test]
    fn binomial_tail_matches_brute_force() {
        for &(n, p) in &[(10u64, 0.5), (37, 0.3), (100, 0.5), (60, 0.9), (1, 0.2)] {
            for k in 0..=n + 1 {
                let exact = brute_force_sf(n, k, p);
                let got = binomial_sf(n, k, p);
                assert!(
                    (got - exact).abs() <= 1e-12 * exact + 1e-16,
                    "n={n} k={k} p={p}: {got} vs {exact}"
                );
            }
        }
    }

    #[test]
    fn binomial_tail_reference_values() {
        assert!((binomial_sf(10, 10, 0.5) - 2f64.powi(-10)).abs() < 1e-18);
        assert_eq!(binomial_sf(10, 0, 0.5), 1.0);
        // scipy.stats.binom.sf(56, 100, 0.5)
        assert!((binomial_sf(100, 57, 0.5) - 0.0966739522478214).abs() < 1e-13);
        // scipy.stats.binom.sf(116, 200, 0.5)
        assert!((binomial_sf(200, 117, 0.5) - 0.009698472270169218).abs() < 1e-14);
        // deep tail stays relative-accurate
        let deep = binomial_sf(1000, 900, 0.5);
        assert!(deep > 0.0 && deep < 1e-140);
        assert!((binomial_cdf(10, 9, 0.5) - (1.0 - 2f64.powi(-10))).abs() < 1e-15);
    }

    #[test]
    fn kl_and_normal() {
        assert!((kl_bernoulli(1.0, 0.5) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_bernoulli(0.3, 0.3), 0.0);
        assert_eq!(kl_bernoulli(0.5, 0.0), f64::INFINITY);
        assert!((normal_sf(0.0) - 0.5).abs() < 1e-16);
        // scipy.stats.norm.sf(1.4), norm.sf(3.0)
        assert!((normal_sf(1.4) - 0.08075665923377107).abs() < 1e-14);
        assert!((normal_sf(3.0) - 0.0013498980316301035).abs() < 1e-15);
    }
}
