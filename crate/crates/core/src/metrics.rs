//! Forecast error metrics, detection scores and the exact signed-rank test.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != yhat.len() {
        return Err(Error::Shape(format!(
            "metric inputs must be equal and non-empty ({} vs {})",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let ss: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((ss / y.len() as f64).sqrt())
}

/// Mean absolute percentage error as a fraction (multiply by 100 for %).
pub fn mape(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let zeros: Vec<usize> = y.iter().enumerate().filter(|(_, v)| **v == 0.0).map(|(i, _)| i).collect();
    if !zeros.is_empty() {
        return Err(Error::Domain(format!("MAPE undefined: zero actuals at {zeros:?}")));
    }
    let s: f64 = y.iter().zip(yhat).map(|(a, b)| ((a - b) / a).abs()).sum();
    Ok(s / y.len() as f64)
}

pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum();
    let ss_tot: f64 = y.iter().map(|a| (a - mean) * (a - mean)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// One row of the per-(household, model) report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastScores {
    pub r2: f64,
    pub rmse: f64,
    pub mape: f64,
    pub mape_percent: f64,
}

impl ForecastScores {
    pub fn compute(y: &[f64], yhat: &[f64]) -> Result<Self> {
        let mape = mape(y, yhat)?;
        Ok(ForecastScores {
            r2: r2(y, yhat)?,
            rmse: rmse(y, yhat)?,
            mape,
            mape_percent: mape * 100.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub far: f64,
    /// Set when some ratio had a zero denominator and was reported as 0.
    pub undefined: bool,
}

pub fn f1_far(tp: usize, fp: usize, fn_: usize) -> DetectionScores {
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let far = ratio(fp, tp + fp);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    DetectionScores {
        precision: precision.unwrap_or(0.0),
        recall: recall.unwrap_or(0.0),
        f1: f1.unwrap_or(0.0),
        far: far.unwrap_or(0.0),
        undefined: precision.is_none() || recall.is_none() || f1.is_none(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)` over the non-zero differences.
    pub statistic: f64,
    pub w_plus: f64,
    pub w_minus: f64,
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub degenerate: bool,
}

pub const WILCOXON_EXACT_MAX_N: usize = 20;

/// Average ranks of `|d|`, doubled so ties stay integral.
fn doubled_ranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|a, b| abs[*a].total_cmp(&abs[*b]));
    let mut ranks = vec![0; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 averaged, times two
        let doubled = (i + 1 + j + 1) as u64;
        for k in i..=j {
            ranks[order[k]] = doubled;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided Wilcoxon signed-rank test on paired samples `(a_i, b_i)`,
/// enumerating all `2^n` sign assignments of the ranked differences.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::Shape("paired samples must be equal and non-empty".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        log::warn!("all paired differences are zero; signed-rank test is degenerate");
        return Ok(WilcoxonResult {
            statistic: 0.0,
            w_plus: 0.0,
            w_minus: 0.0,
            p_value: 1.0,
            n: 0,
            degenerate: true,
        });
    }
    if n > WILCOXON_EXACT_MAX_N {
        return Err(Error::Domain(format!(
            "exact enumeration supports at most {WILCOXON_EXACT_MAX_N} non-zero pairs, got {n}"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_ranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w_plus: u64 = ranks.iter().zip(&diffs).filter(|(_, d)| **d > 0.0).map(|(r, _)| r).sum();
    let observed = w_plus.min(total - w_plus);

    let mut extreme = 0u64;
    for signs in 0u64..(1 << n) {
        let plus: u64 = (0..n).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum();
        if plus.min(total - plus) <= observed {
            extreme += 1;
        }
    }
    Ok(WilcoxonResult {
        statistic: observed as f64 / 2.0,
        w_plus: w_plus as f64 / 2.0,
        w_minus: (total - w_plus) as f64 / 2.0,
        p_value: extreme as f64 / (1u64 << n) as f64,
        n,
        degenerate: false,
    })
}

/// Null distribution of `W+` for `n` untied pairs: `counts[w]` sign patterns
/// give `W+ = w`.
pub fn signed_rank_null_counts(n: usize) -> Vec<u64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for rank in 1..=n {
        for w in (rank..=max).rev() {
            counts[w] += counts[w - rank];
        }
    }
    counts
}
