//! Small numerical helpers shared by several modules.

use statrs::distribution::{Beta, ContinuousCDF, DiscreteCDF, Poisson, StudentsT};

/// Binomial probability mass.
pub fn binom_pmf(x: usize, n: usize, p: f64) -> f64 {
    if x > n {
        return 0.0;
    }
    let ln_c = statrs::function::factorial::ln_binomial(n as u64, x as u64);
    if p == 0.0 {
        return if x == 0 { 1.0 } else { 0.0 };
    }
    if p == 1.0 {
        return if x == n { 1.0 } else { 0.0 };
    }
    (ln_c + x as f64 * p.ln() + (n - x) as f64 * (-p).ln_1p()).exp()
}

/// Pr(X <= x) for X ~ Bin(n, p); negative `x` gives 0.
pub fn binom_cdf(x: i64, n: usize, p: f64) -> f64 {
    if x < 0 {
        return 0.0;
    }
    let x = (x as usize).min(n);
    (0..=x).map(|j| binom_pmf(j, n, p)).sum::<f64>().min(1.0)
}

/// Pr(X >= x) for X ~ Bin(n, p).
pub fn binom_sf(x: i64, n: usize, p: f64) -> f64 {
    if x <= 0 {
        return 1.0;
    }
    if x as usize > n {
        return 0.0;
    }
    (x as usize..=n).map(|j| binom_pmf(j, n, p)).sum::<f64>().min(1.0)
}

// Same tolerance R uses to guard quantile search against rounding.
const FUZZ: f64 = 1.0 - 64.0 * f64::EPSILON;

/// Smallest integer q with Pr(X <= q) >= p, X ~ Bin(n, prob).
pub fn binom_quantile(p: f64, n: usize, prob: f64) -> i64 {
    let target = p * FUZZ;
    let mut acc = 0.0;
    for q in 0..=n {
        acc += binom_pmf(q, n, prob);
        if acc >= target {
            return q as i64;
        }
    }
    n as i64
}

pub fn pois_cdf(x: i64, lambda: f64) -> f64 {
    if x < 0 {
        0.0
    } else {
        Poisson::new(lambda).expect("lambda > 0").cdf(x as u64)
    }
}

/// Smallest integer q with Pr(X <= q) >= p, X ~ Poisson(lambda).
pub fn pois_quantile(p: f64, lambda: f64) -> i64 {
    let target = p * FUZZ;
    let mut q = 0i64;
    while pois_cdf(q, lambda) < target {
        q += 1;
    }
    q
}

/// Student-t quantile.
pub fn t_quantile(p: f64, df: f64) -> f64 {
    StudentsT::new(0.0, 1.0, df)
        .expect("df > 0")
        .inverse_cdf(p)
}

/// Exact (Clopper-Pearson) bounds for a binomial proportion with tail
/// probability `alpha` on each side.
pub fn clopper_pearson(yes: u32, n: u32, alpha: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (y, n) = (yes as f64, n as f64);
    let lo = if yes == 0 {
        0.0
    } else {
        Beta::new(y, n - y + 1.0).expect("positive shapes").inverse_cdf(alpha)
    };
    let hi = if yes as f64 == n {
        1.0
    } else {
        Beta::new(y + 1.0, n - y).expect("positive shapes").inverse_cdf(1.0 - alpha)
    };
    (lo, hi)
}

/// Root of a decreasing function on (lo, hi) by bisection.
pub fn bisect_decreasing(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    0.5 * (lo + hi)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with n-1 denominator; 0 for fewer than two values.
pub fn var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Pearson correlation; NaN when either side is constant.
pub fn cor(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_tails_complement() {
        for n in 1..12 {
            for x in 0..=n as i64 {
                let s = binom_cdf(x - 1, n, 0.3) + binom_sf(x, n, 0.3);
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantiles_are_smallest_crossing() {
        for n in 1..20 {
            for p in [0.025, 0.3, 0.5, 0.9, 0.975] {
                let q = binom_quantile(p, n, 0.35);
                assert!(binom_cdf(q, n, 0.35) >= p * FUZZ);
                assert!(binom_cdf(q - 1, n, 0.35) < p * FUZZ);
            }
        }
        assert_eq!(pois_quantile(0.5, 2.4), 2);
        assert_eq!(pois_quantile(0.975, 2.4), 6);
    }

    #[test]
    fn t_table_value() {
        assert!((t_quantile(0.975, 4.0) - 2.776445).abs() < 1e-5);
    }
}
