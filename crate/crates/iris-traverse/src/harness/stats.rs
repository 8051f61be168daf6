//! Small statistics kit for experiment summaries.
//!
//! Just enough for the tables this crate emits: means, medians, and a
//! one-sided Wilcoxon rank-sum (Mann-Whitney U) test under the normal
//! approximation with midranks and a tie-corrected variance.

use serde::Serialize;

/// Abramowitz & Stegun 7.1.26 polynomial; |error| < 1.5e-7 everywhere.
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    Some(xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("no NaN in summaries"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Result of a one-sided rank-sum test.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct RankSumTest {
    /// Mann-Whitney U of the first sample.
    pub u: f64,
    /// Normal-approximation z value (continuity-corrected).
    pub z: f64,
    /// One-sided p for "first sample is stochastically smaller".
    pub p_less: f64,
}

/// One-sided Mann-Whitney U: how strong is the evidence that values in
/// `xs` run smaller than values in `ys`? Ties get midranks; the variance
/// carries the usual tie correction. Degenerate inputs (an empty sample,
/// or all observations identical) return `p_less = 0.5` — no evidence
/// either way.
pub fn rank_sum_less(xs: &[f64], ys: &[f64]) -> RankSumTest {
    let (nx, ny) = (xs.len() as f64, ys.len() as f64);
    let n = nx + ny;
    let no_evidence = RankSumTest {
        u: 0.5 * nx * ny,
        z: 0.0,
        p_less: 0.5,
    };
    if xs.is_empty() || ys.is_empty() {
        return no_evidence;
    }

    // Rank the pooled sample, midranks for ties.
    let mut pooled: Vec<(f64, bool)> = xs
        .iter()
        .map(|&v| (v, true))
        .chain(ys.iter().map(|&v| (v, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("no NaN in rank-sum input"));

    let mut rank_sum_x = 0.0;
    let mut tie_term = 0.0; // Σ (t³ − t) over tie groups
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j].0 == pooled[i].0 {
            j += 1;
        }
        let t = (j - i) as f64;
        let midrank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        rank_sum_x += midrank * pooled[i..j].iter().filter(|p| p.1).count() as f64;
        tie_term += t * t * t - t;
        i = j;
    }

    let u = rank_sum_x - nx * (nx + 1.0) / 2.0;
    let mu = nx * ny / 2.0;
    let var = nx * ny / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return no_evidence; // every observation tied
    }
    // Continuity correction toward the "smaller" alternative.
    let z = (u - mu + 0.5) / var.sqrt();
    RankSumTest {
        u,
        z,
        p_less: normal_cdf(z),
    }
}
