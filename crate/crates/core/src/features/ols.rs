use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub coefficient: f64,
    pub std_error: f64,
    pub t_statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsReport {
    /// Intercept first, then predictors in input order.
    pub rows: Vec<CoefficientRow>,
    pub r_squared: f64,
    pub residual_variance: f64,
    pub dof: usize,
    pub n: usize,
}

impl OlsReport {
    pub fn predictors(&self) -> impl Iterator<Item = &CoefficientRow> {
        self.rows.iter().filter(|r| r.name != INTERCEPT)
    }

    pub fn get(&self, name: &str) -> Option<&CoefficientRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Least squares with an intercept, via modified Gram-Schmidt QR with one
/// re-orthogonalisation pass. `x` is row-major with `names.len()` columns.
pub fn ols_fit(names: &[String], x: &[f64], y: &[f64]) -> Result<OlsReport> {
    let k = names.len();
    let n = y.len();
    if x.len() != n * k {
        return Err(Error::Shape(format!("{} values for {n} x {k} design", x.len())));
    }
    if n <= k + 1 {
        return Err(Error::Sizing(format!("{n} rows for {k} predictors plus intercept")));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in regression input".into()));
    }
    let p = k + 1;
    let col = |j: usize| -> Vec<f64> {
        if j == 0 {
            vec![1.0; n]
        } else {
            (0..n).map(|i| x[i * k + j - 1]).collect()
        }
    };
    let label = |j: usize| if j == 0 { INTERCEPT.to_string() } else { names[j - 1].clone() };

    let mut q: Vec<Vec<f64>> = Vec::with_capacity(p);
    let mut r = vec![0.0; p * p];
    let mut collinear = Vec::new();
    for j in 0..p {
        let mut v = col(j);
        let norm0 = dot(&v, &v).sqrt();
        for _pass in 0..2 {
            for (i, qi) in q.iter().enumerate() {
                let proj = dot(qi, &v);
                r[i * p + j] += proj;
                v.iter_mut().zip(qi).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            collinear.push(label(j));
            q.push(vec![0.0; n]);
            continue;
        }
        r[j * p + j] = norm;
        v.iter_mut().for_each(|a| *a /= norm);
        q.push(v);
    }
    if !collinear.is_empty() {
        return Err(Error::Singular { columns: collinear });
    }

    // beta = R^-1 Q^T y
    let qty: Vec<f64> = q.iter().map(|qi| dot(qi, y)).collect();
    let mut beta = vec![0.0; p];
    for i in (0..p).rev() {
        let s: f64 = (i + 1..p).map(|j| r[i * p + j] * beta[j]).sum();
        beta[i] = (qty[i] - s) / r[i * p + i];
    }
    // R^-1 (upper triangular), then diag((X^T X)^-1) = row norms of R^-1.
    let mut rinv = vec![0.0; p * p];
    for c in 0..p {
        for i in (0..=c).rev() {
            let rhs = if i == c { 1.0 } else { 0.0 };
            let s: f64 = (i + 1..=c).map(|j| r[i * p + j] * rinv[j * p + c]).sum();
            rinv[i * p + c] = (rhs - s) / r[i * p + i];
        }
    }

    let mut ssr = 0.0;
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let mut sst = 0.0;
    for i in 0..n {
        let fit: f64 = beta[0] + (0..k).map(|j| beta[j + 1] * x[i * k + j]).sum::<f64>();
        ssr += (y[i] - fit).powi(2);
        sst += (y[i] - mean_y).powi(2);
    }
    let dof = n - p;
    let sigma2 = ssr / dof as f64;
    let t_dist = StudentsT::new(0.0, 1.0, dof as f64)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;

    let rows = (0..p)
        .map(|j| {
            let var_factor: f64 = (j..p).map(|c| rinv[j * p + c].powi(2)).sum();
            let se = (sigma2 * var_factor).sqrt();
            let t = beta[j] / se;
            let p_value = if t.is_nan() {
                1.0
            } else if t.is_infinite() {
                0.0
            } else {
                (2.0 * (1.0 - t_dist.cdf(t.abs()))).clamp(0.0, 1.0)
            };
            CoefficientRow {
                name: label(j),
                coefficient: beta[j],
                std_error: se,
                t_statistic: t,
                p_value,
            }
        })
        .collect();
    Ok(OlsReport {
        rows,
        r_squared: if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 },
        residual_variance: sigma2,
        dof,
        n,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub predictors: Vec<String>,
    pub fell_back: bool,
}

/// Predictors with `p < alpha` plus everything in `protected`. Nothing
/// significant (outside the protected set) falls back to all predictors.
pub fn select_significant(report: &OlsReport, alpha: f64, protected: &[&str]) -> Selection {
    let significant: Vec<String> = report
        .predictors()
        .filter(|r| r.p_value < alpha || (alpha >= 1.0 && r.p_value <= 1.0))
        .map(|r| r.name.clone())
        .collect();
    if significant.iter().all(|n| protected.contains(&n.as_str())) {
        log::warn!("no predictor is significant at alpha={alpha}; keeping the full set");
        return Selection {
            predictors: report.predictors().map(|r| r.name.clone()).collect(),
            fell_back: true,
        };
    }
    let predictors = report
        .predictors()
        .filter(|r| significant.contains(&r.name) || protected.contains(&r.name.as_str()))
        .map(|r| r.name.clone())
        .collect();
    Selection {
        predictors,
        fell_back: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("x{i}")).collect()
    }

    fn fake_report(ps: &[(&str, f64)]) -> OlsReport {
        OlsReport {
            rows: std::iter::once((INTERCEPT, 0.5))
                .chain(ps.iter().copied())
                .map(|(n, p)| CoefficientRow {
                    name: n.into(),
                    coefficient: 1.0,
                    std_error: 1.0,
                    t_statistic: 1.0,
                    p_value: p,
                })
                .collect(),
            r_squared: 0.0,
            residual_variance: 1.0,
            dof: 10,
            n: 12,
        }
    }

    #[test]
    fn exact_linear_fit() {
        let x: Vec<f64> = (0..50).map(|i| i as f64 * 0.3 - 2.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let rep = ols_fit(&names(1), &x, &y).unwrap();
        let slope = rep.get("x0").unwrap();
        assert!((slope.coefficient - 2.0).abs() < 1e-9);
        assert!(slope.p_value < 1e-12);
        assert!((rep.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recovers_coefficients_noiselessly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = [1.5, -2.0, 0.25, 4.0];
        let n = 200;
        let x: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| beta[0] + (0..3).map(|j| beta[j + 1] * x[i * 3 + j]).sum::<f64>())
            .collect();
        let rep = ols_fit(&names(3), &x, &y).unwrap();
        for (row, b) in rep.rows.iter().zip(beta) {
            assert!(((row.coefficient - b) / b).abs() < 1e-9, "{row:?}");
        }
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 500;
        let x: Vec<f64> = (0..n * 2).map(|_| rng.sample::<f64, _>(StandardNormal) * 10.0).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| 3.0 * x[i * 2] - x[i * 2 + 1] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let rep = ols_fit(&names(2), &x, &y).unwrap();
        let b: Vec<f64> = rep.rows.iter().map(|r| r.coefficient).collect();
        let e: Vec<f64> = (0..n).map(|i| y[i] - b[0] - b[1] * x[i * 2] - b[2] * x[i * 2 + 1]).collect();
        let scale: f64 = y.iter().map(|v| v.abs()).sum::<f64>();
        assert!(e.iter().sum::<f64>().abs() < 1e-8 * scale);
        for j in 0..2 {
            let d: f64 = (0..n).map(|i| e[i] * x[i * 2 + j]).sum();
            assert!(d.abs() < 1e-8 * scale * 10.0, "{d}");
        }
    }

    #[test]
    fn null_predictor_p_values_are_rarely_tiny() {
        let trials = 200;
        let mut ok = 0;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
            let rep = ols_fit(&names(1), &x, &y).unwrap();
            let p = rep.get("x0").unwrap().p_value;
            assert!((0.0..=1.0).contains(&p));
            if p > 0.001 {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.99 * trials as f64, "{ok}/{trials}");
    }

    #[test]
    fn duplicated_columns_are_singular() {
        let x: Vec<f64> = (0..20).flat_map(|i| [i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        match ols_fit(&names(2), &x, &y).unwrap_err() {
            Error::Singular { columns } => assert_eq!(columns, vec!["x1"]),
            e => panic!("{e}"),
        }
        let constant: Vec<f64> = vec![3.0; 20];
        let err = ols_fit(&names(1), &constant, &y).unwrap_err();
        assert_eq!(err.category(), "singular");
    }

    #[test]
    fn too_few_rows() {
        let err = ols_fit(&names(2), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap_err();
        assert_eq!(err.category(), "sizing");
    }

    #[test]
    fn selection_rules() {
        let rep = fake_report(&[("a", 0.01), ("b", 0.2)]);
        assert_eq!(select_significant(&rep, 0.05, &[]).predictors, vec!["a"]);

        let rep = fake_report(&[("a", 0.5), ("b", 0.5), ("t_top", 0.5)]);
        let s = select_significant(&rep, 0.05, &["t_top"]);
        assert!(s.fell_back);
        assert_eq!(s.predictors, vec!["a", "b", "t_top"]);

        let rep = fake_report(&[("a", 0.5), ("b", 1.0)]);
        let s = select_significant(&rep, 1.0, &[]);
        assert_eq!(s.predictors, vec!["a", "b"]);
        assert!(!s.fell_back);

        let rep = fake_report(&[("a", 0.01), ("t_top", 0.7)]);
        assert_eq!(select_significant(&rep, 0.05, &["t_top"]).predictors, vec!["a", "t_top"]);
    }
}
