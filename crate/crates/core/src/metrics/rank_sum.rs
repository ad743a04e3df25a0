use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Largest combined sample size for which p is computed by enumeration.
pub const EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankSumMethod {
    Exact,
    NormalApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    pub p_two_sided: f64,
    pub method: RankSumMethod,
    pub n: usize,
    pub m: usize,
}

/// Midranks (1-based) of the pooled values.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon rank-sum (Mann-Whitney) test.
///
/// Exact by enumerating every assignment of the pooled midranks to the first
/// sample when `n + m <= 20`; otherwise the normal approximation with tie and
/// continuity corrections. `p = min(1, 2 * min(lower tail, upper tail))`.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("rank-sum sample"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("rank-sum samples must be finite".into()));
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let offset = (n * (n + 1)) as f64 / 2.0;
    let u = ranks[..n].iter().sum::<f64>() - offset;
    let (lower, upper, method) = if n + m <= EXACT_LIMIT {
        let (lo, hi) = exact_tails(&ranks, n, u + offset);
        (lo, hi, RankSumMethod::Exact)
    } else {
        let (lo, hi) = normal_tails(&ranks, n, m, u);
        (lo, hi, RankSumMethod::NormalApproximation)
    };
    Ok(RankSumResult {
        u,
        p_two_sided: (2.0 * lower.min(upper)).min(1.0),
        method,
        n,
        m,
    })
}

/// `P(R <= r)` and `P(R >= r)` for the rank sum `R` of `n` positions chosen
/// uniformly among all `C(N, n)` subsets.
fn exact_tails(ranks: &[f64], n: usize, r: f64) -> (f64, f64) {
    let total = ranks.len();
    // Midranks are multiples of 1/2; compare doubled sums as integers.
    let twice: Vec<i64> = ranks.iter().map(|&v| (2.0 * v).round() as i64).collect();
    let target = (2.0 * r).round() as i64;
    let (mut le, mut ge, mut count) = (0u64, 0u64, 0u64);
    for set in 0u32..(1u32 << total) {
        if set.count_ones() as usize != n {
            continue;
        }
        let mut s = 0i64;
        let mut bits = set;
        while bits != 0 {
            s += twice[bits.trailing_zeros() as usize];
            bits &= bits - 1;
        }
        count += 1;
        le += u64::from(s <= target);
        ge += u64::from(s >= target);
    }
    (le as f64 / count as f64, ge as f64 / count as f64)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_tails(ranks: &[f64], n: usize, m: usize, u: f64) -> (f64, f64) {
    let big_n = (n + m) as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&v| v == sorted[i]).count();
        ties += (j * j * j - j) as f64;
        i += j;
    }
    let nm = (n * m) as f64;
    let var = nm / 12.0 * ((big_n + 1.0) - ties / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return (1.0, 1.0);
    }
    let sd = var.sqrt();
    let mu = nm / 2.0;
    let lower = std_normal_cdf((u - mu + 0.5) / sd);
    let upper = std_normal_cdf(-(u - mu - 0.5) / sd);
    (lower, upper)
}
