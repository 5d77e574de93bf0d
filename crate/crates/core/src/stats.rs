//! Hypothesis tests used by the evaluation harness.

use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, StudentsT};

use crate::error::{Error, Result};
use crate::linalg;

/// Largest sample size for which Spearman's p-value is computed by full
/// enumeration of rank permutations.
pub const SPEARMAN_EXACT_MAX_N: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchTest {
    pub t: f64,
    pub df: f64,
    /// `P(T ≥ t)`: evidence that the first sample has the larger mean.
    pub p_greater: f64,
    pub p_two_sided: f64,
}

/// Welch's unequal-variance t-test of `mean(a)` against `mean(b)`.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument("Welch test needs two samples of size >= 2".into()));
    }
    let (ma, sa) = linalg::mean_std(a);
    let (mb, sb) = linalg::mean_std(b);
    let va = sa * sa / a.len() as f64;
    let vb = sb * sb / b.len() as f64;
    let se = (va + vb).sqrt();
    if !(se > 0.0) {
        return Err(Error::InvalidArgument("both samples are constant".into()));
    }
    let t = (ma - mb) / se;
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(WelchTest {
        t,
        df,
        p_greater: dist.sf(t),
        p_two_sided: (2.0 * dist.sf(t.abs())).min(1.0),
    })
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    /// `P(ρ ≤ observed)` under independence: evidence of a negative trend.
    pub p_less: f64,
    pub exact: bool,
}

/// Spearman rank correlation. Small samples enumerate every permutation;
/// larger ones use the t approximation with `n − 2` degrees of freedom.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    if x.len() != y.len() {
        return Err(Error::DimMismatch { expected: x.len(), got: y.len() });
    }
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidArgument("Spearman needs at least 3 pairs".into()));
    }
    let rx = ranks(x);
    let ry = ranks(y);
    let rho = pearson(&rx, &ry);
    if !rho.is_finite() {
        return Err(Error::InvalidArgument("a sample is constant; rank correlation undefined".into()));
    }
    if n <= SPEARMAN_EXACT_MAX_N {
        let mut perm = ry.clone();
        let mut total = 0u64;
        let mut hits = 0u64;
        heap_permutations(&mut perm, &mut |p| {
            total += 1;
            if pearson(&rx, p) <= rho + 1e-12 {
                hits += 1;
            }
        });
        return Ok(Spearman {
            rho,
            p_less: hits as f64 / total as f64,
            exact: true,
        });
    }
    let df = (n - 2) as f64;
    let p_less = if rho <= -1.0 {
        0.0
    } else if rho >= 1.0 {
        1.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        StudentsT::new(0.0, 1.0, df)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?
            .cdf(t)
    };
    Ok(Spearman { rho, p_less, exact: false })
}

fn heap_permutations(v: &mut [f64], visit: &mut impl FnMut(&[f64])) {
    let n = v.len();
    let mut c = vec![0usize; n];
    visit(v);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                v.swap(0, i);
            } else {
                v.swap(c[i], i);
            }
            visit(v);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsTest {
    pub d: f64,
    pub p_value: f64,
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsTest> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("KS test needs two non-empty samples".into()));
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = (n * m / (n + m)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok(KsTest {
        d,
        p_value: kolmogorov_q(lambda),
    })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-16 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Central `level` acceptance interval for a `Binomial(n, p)` count,
/// returned as rates `(lo/n, hi/n)`.
pub fn binomial_interval(n: u64, p: f64, level: f64) -> Result<(f64, f64)> {
    if n == 0 || !(0.0..=1.0).contains(&p) || !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("binomial interval needs n > 0, p in [0,1], level in (0,1)".into()));
    }
    let dist = Binomial::new(p, n).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let tail = (1.0 - level) / 2.0;
    let quantile = |q: f64| (0..=n).find(|&k| dist.cdf(k) >= q).unwrap_or(n);
    Ok((quantile(tail) as f64 / n as f64, quantile(1.0 - tail) as f64 / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welch_matches_hand_computation() {
        // Means 3 and 1, both variances 2.5, n = 5: t = 2/√1 = 2, df = 8.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [-1.0, 0.0, 1.0, 2.0, 3.0];
        let w = welch_t_test(&a, &b).unwrap();
        assert!((w.t - 2.0).abs() < 1e-12);
        assert!((w.df - 8.0).abs() < 1e-12);
        // Student t with 8 df: P(T > 2) = 0.040258...
        assert!((w.p_greater - 0.0402587).abs() < 1e-6);
        assert!((w.p_two_sided - 2.0 * w.p_greater).abs() < 1e-12);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_exact_for_perfect_order() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let y = [5.0, 4.0, 3.0, 2.0, 1.0];
        let s = spearman(&x, &y).unwrap();
        assert_eq!(s.rho, -1.0);
        assert!(s.exact);
        assert!((s.p_less - 1.0 / 120.0).abs() < 1e-15);
    }

    #[test]
    fn spearman_exact_counts_permutations() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [2.0, 1.0, 4.0, 3.0];
        let s = spearman(&x, &y).unwrap();
        assert!((s.rho - 0.6).abs() < 1e-12);
        // ρ = 1 − Σd²/10, so every permutation except the identity and the
        // three adjacent swaps has ρ ≤ 0.6.
        assert!((s.p_less - 20.0 / 24.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_large_sample_uses_t() {
        let x: Vec<f64> = (0..30).map(f64::from).collect();
        let y: Vec<f64> = x.iter().map(|v| -v + if (*v as i32) % 3 == 0 { 5.0 } else { 0.0 }).collect();
        let s = spearman(&x, &y).unwrap();
        assert!(!s.exact);
        assert!(s.rho < -0.9 && s.p_less < 1e-6);
    }

    #[test]
    fn ks_identical_and_disjoint() {
        let a: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let same = ks_two_sample(&a, &a).unwrap();
        assert_eq!(same.d, 0.0);
        assert_eq!(same.p_value, 1.0);
        let b: Vec<f64> = a.iter().map(|v| v + 1000.0).collect();
        let apart = ks_two_sample(&a, &b).unwrap();
        assert_eq!(apart.d, 1.0);
        assert!(apart.p_value < 1e-20);
    }

    #[test]
    fn kolmogorov_reference_value() {
        // Q(1.36) ≈ 0.0494, the familiar 5% critical value.
        assert!((kolmogorov_q(1.36) - 0.0494).abs() < 5e-4);
    }

    #[test]
    fn binomial_interval_brackets_mean() {
        let (lo, hi) = binomial_interval(2000, 0.01, 0.95).unwrap();
        assert!(lo < 0.01 && hi > 0.01);
        // Normal approximation: 0.01 ± 1.96·√(0.01·0.99/2000) ≈ [0.0056, 0.0144].
        assert!((lo - 0.0056).abs() < 1.5e-3 && (hi - 0.0144).abs() < 1.5e-3);
    }
}
