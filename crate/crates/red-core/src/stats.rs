//! Paired significance tests and rank aggregation: two-sided paired
//! t-test, Wilcoxon signed-rank (exact null distribution up to n = 25,
//! normal approximation with tie correction above), mean ranks, and
//! win/tie/loss tallies at a significance level.

use serde::{Deserialize, Serialize};

use crate::error::RedError;
use crate::Result;

/// Effective-n threshold below which the Wilcoxon null distribution is
/// enumerated exactly.
pub const WILCOXON_EXACT_LIMIT: usize = 25;

/// Per-run metric values for two methods, paired by run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedSample {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSample {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(RedError::Dimension(format!(
                "paired sample lengths {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.len() < 2 {
            return Err(RedError::Data("paired sample needs n >= 2".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(RedError::Data("paired sample has non-finite values".into()));
        }
        Ok(Self { a, b })
    }

    fn differences(&self) -> Vec<f64> {
        self.a.iter().zip(self.b.iter()).map(|(x, y)| x - y).collect()
    }
}

/// Two-sided paired t-test result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TTestResult {
    pub p_value: f64,
    pub t_statistic: Option<f64>,
    /// True when the difference variance is zero and the p-value comes
    /// from a limit convention rather than the t distribution.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a - b` with n-1 degrees of freedom.
/// All-zero differences give p = 1; zero variance with nonzero mean gives
/// the p -> 0 limit with the degeneracy flag set.
pub fn paired_t_test(sample: &PairedSample) -> TTestResult {
    let d = sample.differences();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var == 0.0 {
        return if mean == 0.0 {
            TTestResult {
                p_value: 1.0,
                t_statistic: None,
                degenerate: true,
            }
        } else {
            TTestResult {
                p_value: 0.0,
                t_statistic: None,
                degenerate: true,
            }
        };
    }
    let t = mean / (var.sqrt() / n.sqrt());
    let dof = n - 1.0;
    // two-sided p through the regularized incomplete beta identity
    let x = dof / (dof + t * t);
    let p = regularized_incomplete_beta(dof / 2.0, 0.5, x);
    TTestResult {
        p_value: p.clamp(0.0, 1.0),
        t_statistic: Some(t),
        degenerate: false,
    }
}

/// Wilcoxon signed-rank result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WilcoxonResult {
    pub p_value: f64,
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    /// Sample size after discarding zero differences.
    pub effective_n: usize,
    /// Whether the exact null distribution was used.
    pub exact: bool,
}

/// Two-sided Wilcoxon signed-rank test on `a - b`. Zero differences are
/// discarded; tied absolute differences receive average ranks. The exact
/// sign-flip distribution is used for effective n <= 25, the normal
/// approximation with tie correction above.
pub fn wilcoxon_signed_rank(sample: &PairedSample) -> WilcoxonResult {
    let d: Vec<f64> = sample
        .differences()
        .into_iter()
        .filter(|v| *v != 0.0)
        .collect();
    let n = d.len();
    if n == 0 {
        return WilcoxonResult {
            p_value: 1.0,
            statistic: 0.0,
            effective_n: 0,
            exact: true,
        };
    }

    // average ranks of |d|, doubled so ties stay integral
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].abs().partial_cmp(&d[j].abs()).unwrap());
    let mut double_ranks = vec![0u64; n];
    let mut tie_sizes: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && d[order[j]].abs() == d[order[i]].abs() {
            j += 1;
        }
        // ranks i+1..=j averaged; doubled average = (i+1) + j
        let doubled = (i + 1 + j) as u64;
        for &idx in &order[i..j] {
            double_ranks[idx] = doubled;
        }
        tie_sizes.push(j - i);
        i = j;
    }

    let w_plus_doubled: u64 = d
        .iter()
        .zip(double_ranks.iter())
        .filter(|(v, _)| **v > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let statistic = w_plus_doubled as f64 / 2.0;

    if n <= WILCOXON_EXACT_LIMIT {
        let p = exact_signed_rank_p(&double_ranks, w_plus_doubled);
        WilcoxonResult {
            p_value: p,
            statistic,
            effective_n: n,
            exact: true,
        }
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let tie_term: f64 = tie_sizes
            .iter()
            .map(|&t| {
                let t = t as f64;
                t * t * t - t
            })
            .sum();
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (statistic - mean) / var.sqrt();
        let p = 2.0 * (1.0 - standard_normal_cdf(z.abs()));
        WilcoxonResult {
            p_value: p.clamp(0.0, 1.0),
            statistic,
            effective_n: n,
            exact: false,
        }
    }
}

/// Exact two-sided p for the sign-flip null: counts subsets by dynamic
/// programming over the (doubled, integral) rank values.
fn exact_signed_rank_p(double_ranks: &[u64], w_doubled: u64) -> f64 {
    let total: u64 = double_ranks.iter().sum();
    let mut counts = vec![0f64; total as usize + 1];
    counts[0] = 1.0;
    for &r in double_ranks {
        let r = r as usize;
        for s in (r..counts.len()).rev() {
            counts[s] += counts[s - r];
        }
    }
    let n_assignments = 2f64.powi(double_ranks.len() as i32);
    let w = w_doubled as usize;
    let p_le: f64 = counts[..=w].iter().sum::<f64>() / n_assignments;
    let p_ge: f64 = counts[w..].iter().sum::<f64>() / n_assignments;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Regularized incomplete beta function `I_x(a, b)` by the Lentz
/// continued fraction, accurate to ~1e-14.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const TINY: f64 = 1e-300;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Log-gamma via the Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &c) in COEFFS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Standard normal CDF through the error function: a Taylor series for
/// small arguments, a continued fraction for the tail.
pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * erfc_scalar(-z / std::f64::consts::SQRT_2)
}

fn erfc_scalar(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc_scalar(-x);
    }
    if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_continued_fraction(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // erf(x) = 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
    let mut term = x;
    let mut sum = x;
    let x2 = x * x;
    for n in 1..200 {
        term *= -x2 / n as f64;
        let add = term / (2.0 * n as f64 + 1.0);
        sum += add;
        if add.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    sum * 2.0 / std::f64::consts::PI.sqrt()
}

fn erfc_continued_fraction(x: f64) -> f64 {
    // erfc(x) = exp(-x^2)/sqrt(pi) / (x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut f = 0.0;
    for k in (1..=80u32).rev() {
        f = (k as f64 / 2.0) / (x + f);
    }
    (-x * x).exp() / std::f64::consts::PI.sqrt() / (x + f)
}

/// Mean rank of each method across datasets, rank 1 best (highest value).
/// Ties receive average ranks. Datasets where any method is NA are
/// skipped, matching the complete-case convention of the summary tables.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanRankRow {
    pub method: String,
    pub mean_rank: f64,
    pub std_rank: f64,
    pub datasets_used: usize,
}

pub fn mean_rank(methods: &[String], per_dataset: &[Vec<Option<f64>>]) -> Result<Vec<MeanRankRow>> {
    if methods.len() < 2 {
        return Err(RedError::Data("mean rank needs at least 2 methods".into()));
    }
    let mut rank_lists: Vec<Vec<f64>> = vec![Vec::new(); methods.len()];
    for row in per_dataset {
        if row.len() != methods.len() {
            return Err(RedError::Dimension(
                "per-dataset row width differs from method count".into(),
            ));
        }
        if row.iter().any(|v| v.is_none()) {
            continue;
        }
        let values: Vec<f64> = row.iter().map(|v| v.unwrap()).collect();
        let ranks = average_ranks_descending(&values);
        for (m, r) in ranks.into_iter().enumerate() {
            rank_lists[m].push(r);
        }
    }
    if rank_lists[0].is_empty() {
        return Err(RedError::Data(
            "no datasets with complete results to rank".into(),
        ));
    }
    Ok(methods
        .iter()
        .zip(rank_lists.into_iter())
        .map(|(name, ranks)| {
            let n = ranks.len() as f64;
            let mean = ranks.iter().sum::<f64>() / n;
            let var = if ranks.len() > 1 {
                ranks.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            MeanRankRow {
                method: name.clone(),
                mean_rank: mean,
                std_rank: var.sqrt(),
                datasets_used: ranks.len(),
            }
        })
        .collect())
}

/// Ranks with 1 = highest value; tied values share the average rank.
fn average_ranks_descending(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| values[j].partial_cmp(&values[i]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            ranks[idx] = avg;
        }
        i = j;
    }
    ranks
}

/// Win/tie/loss counts for method A against method B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WinTieLoss {
    pub wins: usize,
    pub ties: usize,
    pub losses: usize,
}

/// Significant under the t-test, the Wilcoxon test, or both.
pub fn significant_either(sample: &PairedSample, alpha: f64) -> bool {
    paired_t_test(sample).p_value < alpha || wilcoxon_signed_rank(sample).p_value < alpha
}

/// Significant under both tests simultaneously (the stricter predicate
/// used to mark best entries in summary tables).
pub fn significant_both(sample: &PairedSample, alpha: f64) -> bool {
    paired_t_test(sample).p_value < alpha && wilcoxon_signed_rank(sample).p_value < alpha
}

/// Per-dataset win/tie/loss of A vs B: a win needs the mean difference to
/// favor A and significance under either test at level `alpha`.
pub fn win_tie_loss(per_dataset: &[PairedSample], alpha: f64) -> WinTieLoss {
    let mut out = WinTieLoss {
        wins: 0,
        ties: 0,
        losses: 0,
    };
    for sample in per_dataset {
        let mean_a: f64 = sample.a.iter().sum::<f64>() / sample.a.len() as f64;
        let mean_b: f64 = sample.b.iter().sum::<f64>() / sample.b.len() as f64;
        let significant = significant_either(sample, alpha);
        if significant && mean_a > mean_b {
            out.wins += 1;
        } else if significant && mean_b > mean_a {
            out.losses += 1;
        } else {
            out.ties += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Quadrature oracle for the two-sided t-test p-value: integrates the
    /// unnormalized t density through the substitution x = sqrt(v) tan(t),
    /// which maps the real line to a bounded interval. Independent of the
    /// incomplete-beta route.
    fn t_p_value_quadrature(t_stat: f64, dof: f64) -> f64 {
        // density (1 + x^2/v)^(-(v+1)/2) dx becomes sqrt(v) cos(t)^(v-1) dt
        let integrand = |theta: f64| theta.cos().powf(dof - 1.0);
        let simpson = |a: f64, b: f64, n: usize| -> f64 {
            let h = (b - a) / n as f64;
            let mut acc = integrand(a) + integrand(b);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * integrand(a + i as f64 * h);
            }
            acc * h / 3.0
        };
        let theta_t = (t_stat.abs() / dof.sqrt()).atan();
        let half = std::f64::consts::FRAC_PI_2;
        let tail = simpson(theta_t, half, 20_000);
        let total = simpson(-half, half, 40_000);
        2.0 * tail / total
    }

    #[test]
    fn t_test_constant_differences_degenerate() {
        let s = PairedSample::new(vec![2.0; 5], vec![1.0; 5]).unwrap();
        let r = paired_t_test(&s);
        assert!(r.degenerate);
        assert!(r.p_value < 1e-12);
    }

    #[test]
    fn t_test_identical_sequences() {
        let s = PairedSample::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        let r = paired_t_test(&s);
        assert_eq!(r.p_value, 1.0);
        assert!(r.degenerate);
    }

    #[test]
    fn t_test_matches_quadrature_oracle() {
        let a = vec![1.2, 0.8, 1.5, 2.0, 1.1, 0.9, 1.7, 1.3, 1.8, 1.0];
        let b = vec![1.0, 0.9, 1.2, 1.6, 1.2, 0.7, 1.5, 1.2, 1.4, 0.8];
        let s = PairedSample::new(a, b).unwrap();
        let r = paired_t_test(&s);
        let t = r.t_statistic.unwrap();
        let oracle = t_p_value_quadrature(t, 9.0);
        assert!(
            (r.p_value - oracle).abs() < 1e-6,
            "p {} vs quadrature {oracle}",
            r.p_value
        );
    }

    #[test]
    fn t_test_quadrature_agreement_across_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [3usize, 5, 12, 30] {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let s = PairedSample::new(a, b).unwrap();
            let r = paired_t_test(&s);
            if let Some(t) = r.t_statistic {
                let oracle = t_p_value_quadrature(t, (n - 1) as f64);
                assert!(
                    (r.p_value - oracle).abs() < 1e-6,
                    "n {n}: p {} vs {oracle}",
                    r.p_value
                );
            }
        }
    }

    /// Enumeration oracle over all 2^n sign assignments, using the same
    /// doubled-rank convention.
    fn wilcoxon_exact_oracle(d: &[f64]) -> f64 {
        let d: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
        let n = d.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| d[i].abs().partial_cmp(&d[j].abs()).unwrap());
        let mut doubled = vec![0u64; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j < n && d[order[j]].abs() == d[order[i]].abs() {
                j += 1;
            }
            for &idx in &order[i..j] {
                doubled[idx] = (i + 1 + j) as u64;
            }
            i = j;
        }
        let observed: u64 = d
            .iter()
            .zip(doubled.iter())
            .filter(|(v, _)| **v > 0.0)
            .map(|(_, r)| *r)
            .sum();
        let mut le = 0u64;
        let mut ge = 0u64;
        for mask in 0u64..(1 << n) {
            let w: u64 = (0..n).filter(|&b| mask >> b & 1 == 1).map(|b| doubled[b]).sum();
            if w <= observed {
                le += 1;
            }
            if w >= observed {
                ge += 1;
            }
        }
        let total = (1u64 << n) as f64;
        let p_le = le as f64 / total;
        let p_ge = ge as f64 / total;
        (2.0 * p_le.min(p_ge)).min(1.0)
    }

    #[test]
    fn wilcoxon_matches_enumeration_for_small_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for n in 2..=10usize {
            for _ in 0..5 {
                let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let b: Vec<f64> = (0..n)
                    .map(|_| {
                        // coarse grid so ties and zeros occur
                        (rng.gen_range(-1.0..1.0f64) * 4.0).round() / 4.0
                    })
                    .collect();
                let d: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
                let s = PairedSample::new(a, b).unwrap();
                let got = wilcoxon_signed_rank(&s);
                let want = wilcoxon_exact_oracle(&d);
                assert_eq!(got.p_value, want, "n = {n}");
                assert!(got.exact);
            }
        }
    }

    #[test]
    fn wilcoxon_strictly_positive_n6() {
        let s = PairedSample::new(
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0],
        )
        .unwrap();
        let r = wilcoxon_signed_rank(&s);
        assert_eq!(r.p_value, 2.0 / 64.0);
    }

    #[test]
    fn wilcoxon_symmetric_differences_near_one() {
        let s = PairedSample::new(
            vec![1.0, -1.0, 2.0, -2.0, 3.0, -3.0],
            vec![0.0; 6],
        )
        .unwrap();
        let r = wilcoxon_signed_rank(&s);
        assert!(r.p_value > 0.9, "p = {}", r.p_value);
    }

    #[test]
    fn wilcoxon_all_zero_differences() {
        let s = PairedSample::new(vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]).unwrap();
        let r = wilcoxon_signed_rank(&s);
        assert_eq!(r.p_value, 1.0);
        assert_eq!(r.effective_n, 0);
    }

    #[test]
    fn wilcoxon_normal_approximation_for_large_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 60;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0) + 0.15).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let s = PairedSample::new(a, b).unwrap();
        let r = wilcoxon_signed_rank(&s);
        assert!(!r.exact);
        assert!(r.p_value < 0.05, "shifted sample should be significant");
    }

    #[test]
    fn tests_invariant_under_common_shift() {
        let a = vec![1.0, 2.0, 3.5, 2.2, 4.0];
        let b = vec![0.5, 2.5, 3.0, 2.0, 3.1];
        let s1 = PairedSample::new(a.clone(), b.clone()).unwrap();
        let shift = 11.0;
        let s2 = PairedSample::new(
            a.iter().map(|v| v + shift).collect(),
            b.iter().map(|v| v + shift).collect(),
        )
        .unwrap();
        assert_relative_eq!(
            paired_t_test(&s1).p_value,
            paired_t_test(&s2).p_value,
            max_relative = 1e-9
        );
        assert_eq!(
            wilcoxon_signed_rank(&s1).p_value,
            wilcoxon_signed_rank(&s2).p_value
        );
    }

    #[test]
    fn wilcoxon_invariant_under_odd_monotone_transform() {
        let a = vec![1.0, 2.0, 3.5, 2.2, 4.0, 1.1];
        let b = vec![0.5, 2.5, 3.0, 2.0, 3.1, 1.4];
        let d: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| x - y).collect();
        // x -> x^3 preserves |d| ordering and signs
        let a2: Vec<f64> = d.iter().map(|v| v.powi(3)).collect();
        let s1 = PairedSample::new(d.clone(), vec![0.0; d.len()]).unwrap();
        let s2 = PairedSample::new(a2, vec![0.0; d.len()]).unwrap();
        assert_eq!(
            wilcoxon_signed_rank(&s1).p_value,
            wilcoxon_signed_rank(&s2).p_value
        );
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_relative_eq!(standard_normal_cdf(0.0), 0.5, epsilon = 1e-14);
        assert_relative_eq!(
            standard_normal_cdf(1.959963984540054),
            0.975,
            epsilon = 1e-11
        );
        assert_relative_eq!(
            standard_normal_cdf(-3.0),
            0.0013498980316300933,
            max_relative = 1e-10
        );
    }

    #[test]
    fn ln_gamma_reference_values() {
        assert_relative_eq!(ln_gamma(1.0), 0.0, epsilon = 1e-12);
        assert_relative_eq!(ln_gamma(0.5), std::f64::consts::PI.ln() / 2.0, epsilon = 1e-12);
        assert_relative_eq!(ln_gamma(10.0), (362880f64).ln(), max_relative = 1e-13);
    }

    #[test]
    fn mean_rank_dominant_method() {
        let methods = vec!["a".to_string(), "b".to_string()];
        let table = vec![
            vec![Some(0.9), Some(0.5)],
            vec![Some(0.8), Some(0.4)],
            vec![Some(0.7), Some(0.3)],
        ];
        let rows = mean_rank(&methods, &table).unwrap();
        assert_eq!(rows[0].mean_rank, 1.0);
        assert_eq!(rows[1].mean_rank, 2.0);
    }

    #[test]
    fn mean_rank_tie_averages() {
        let methods = vec!["a".to_string(), "b".to_string()];
        let table = vec![vec![Some(0.5), Some(0.5)], vec![Some(0.9), Some(0.1)]];
        let rows = mean_rank(&methods, &table).unwrap();
        assert_eq!(rows[0].mean_rank, (1.5 + 1.0) / 2.0);
        assert_eq!(rows[1].mean_rank, (1.5 + 2.0) / 2.0);
    }

    #[test]
    fn mean_rank_skips_incomplete_datasets() {
        let methods = vec!["a".to_string(), "b".to_string()];
        let table = vec![
            vec![Some(0.9), None],
            vec![Some(0.2), Some(0.8)],
        ];
        let rows = mean_rank(&methods, &table).unwrap();
        assert_eq!(rows[0].datasets_used, 1);
        assert_eq!(rows[0].mean_rank, 2.0);
    }

    #[test]
    fn win_tie_loss_identical_methods_all_ties() {
        let samples: Vec<PairedSample> = (0..4)
            .map(|i| {
                let v: Vec<f64> = (0..6).map(|j| (i * 6 + j) as f64 / 10.0).collect();
                PairedSample::new(v.clone(), v).unwrap()
            })
            .collect();
        let wtl = win_tie_loss(&samples, 0.05);
        assert_eq!(
            wtl,
            WinTieLoss {
                wins: 0,
                ties: 4,
                losses: 0
            }
        );
    }

    #[test]
    fn win_tie_loss_dominant_method() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<PairedSample> = (0..5)
            .map(|_| {
                let b: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..0.2)).collect();
                let a: Vec<f64> = b.iter().map(|v| v + 0.5 + rng.gen_range(0.0..0.01)).collect();
                PairedSample::new(a, b).unwrap()
            })
            .collect();
        let wtl = win_tie_loss(&samples, 0.05);
        assert_eq!(
            wtl,
            WinTieLoss {
                wins: 5,
                ties: 0,
                losses: 0
            }
        );
    }

    #[test]
    fn win_tie_loss_is_mirror_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let forward: Vec<PairedSample> = (0..6)
            .map(|_| {
                let a: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
                let b: Vec<f64> = (0..8).map(|_| rng.gen_range(0.0..1.0)).collect();
                PairedSample::new(a, b).unwrap()
            })
            .collect();
        let backward: Vec<PairedSample> = forward
            .iter()
            .map(|s| PairedSample::new(s.b.clone(), s.a.clone()).unwrap())
            .collect();
        let f = win_tie_loss(&forward, 0.05);
        let b = win_tie_loss(&backward, 0.05);
        assert_eq!(f.wins, b.losses);
        assert_eq!(f.losses, b.wins);
        assert_eq!(f.ties, b.ties);
    }

    #[test]
    fn or_rule_wins_on_single_test_significance() {
        // construct a sample significant under wilcoxon (all positive,
        // n = 8 -> exact p = 2/256 < 0.05) but with one huge outlier that
        // inflates the t-test variance above the threshold
        let a = vec![1.01, 1.02, 1.03, 1.04, 1.05, 1.06, 1.07, 50.0];
        let b = vec![1.0; 8];
        let s = PairedSample::new(a, b).unwrap();
        let t = paired_t_test(&s);
        let w = wilcoxon_signed_rank(&s);
        assert!(t.p_value > 0.05, "t p = {}", t.p_value);
        assert!(w.p_value < 0.05, "wilcoxon p = {}", w.p_value);
        assert!(significant_either(&s, 0.05));
        assert!(!significant_both(&s, 0.05));
        let wtl = win_tie_loss(&[s], 0.05);
        assert_eq!(wtl.wins, 1);
    }
}
