use std::io::Write;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gbdt_fit, BoostingType, GbdtParams, GossParams};
use crate::error::{Error, Result};
use crate::metrics::rmse;
use crate::par::{derive_seed, Exec};

/// Cartesian search space over boosting parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub boosting_type: Vec<BoostingType>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub n_estimators: Vec<usize>,
    pub num_leaves: Vec<usize>,
    #[serde(default)]
    pub min_samples_leaf: Option<usize>,
    #[serde(default)]
    pub goss: Option<GossParams>,
}

impl Default for ParamGrid {
    fn default() -> Self {
        ParamGrid {
            boosting_type: vec![BoostingType::Gbdt, BoostingType::Dart],
            max_depth: vec![5, 10, 30],
            learning_rate: vec![0.001, 0.01, 0.1],
            n_estimators: vec![100, 500, 800],
            num_leaves: vec![2, 5, 10, 20],
            min_samples_leaf: None,
            goss: None,
        }
    }
}

impl ParamGrid {
    pub fn single(params: &GbdtParams) -> Self {
        ParamGrid {
            boosting_type: vec![params.boosting_type],
            max_depth: vec![params.max_depth],
            learning_rate: vec![params.learning_rate],
            n_estimators: vec![params.n_estimators],
            num_leaves: vec![params.num_leaves],
            min_samples_leaf: Some(params.min_samples_leaf),
            goss: params.goss,
        }
    }

    pub fn len(&self) -> usize {
        self.boosting_type.len()
            * self.max_depth.len()
            * self.learning_rate.len()
            * self.n_estimators.len()
            * self.num_leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `index`-th grid point in row-major order (boosting type slowest).
    pub fn get(&self, index: usize) -> GbdtParams {
        let mut i = index;
        let mut pick = |len: usize| {
            let r = i % len;
            i /= len;
            r
        };
        let nl = self.num_leaves[pick(self.num_leaves.len())];
        let ne = self.n_estimators[pick(self.n_estimators.len())];
        let lr = self.learning_rate[pick(self.learning_rate.len())];
        let md = self.max_depth[pick(self.max_depth.len())];
        let bt = self.boosting_type[pick(self.boosting_type.len())];
        let defaults = GbdtParams::default();
        GbdtParams {
            boosting_type: bt,
            max_depth: md,
            learning_rate: lr,
            n_estimators: ne,
            num_leaves: nl,
            min_samples_leaf: self.min_samples_leaf.unwrap_or(defaults.min_samples_leaf),
            goss: self.goss,
            ..defaults
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub n_iter: usize,
    pub k: usize,
    pub seed: u64,
    /// Shuffle rows before folding. Off by default: folds stay contiguous in time.
    #[serde(default)]
    pub shuffle: bool,
    /// Smallest allowed fold, typically the lag context of the features.
    #[serde(default)]
    pub min_fold_rows: usize,
    #[serde(default)]
    pub exec: Exec,
}

impl Default for CvOptions {
    fn default() -> Self {
        CvOptions { n_iter: 20, k: 3, seed: 0, shuffle: false, min_fold_rows: 0, exec: Exec::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub grid_index: usize,
    pub params: GbdtParams,
    pub fold_rmse: Vec<f64>,
    pub mean_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: GbdtParams,
    pub best_rmse: f64,
    pub rows: Vec<CvRow>,
}

impl CvResult {
    pub fn write_csv<W: Write>(&self, mut out: W, run_id: Option<&str>) -> Result<()> {
        if let Some(id) = run_id {
            writeln!(out, "# run_id={id}")?;
        }
        let k = self.rows.first().map_or(0, |r| r.fold_rmse.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "grid_index",
            "boosting_type",
            "max_depth",
            "learning_rate",
            "n_estimators",
            "num_leaves",
            "min_samples_leaf",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..k).map(|i| format!("fold{i}_rmse")));
        header.push("mean_rmse".into());
        w.write_record(&header)?;
        for r in &self.rows {
            let p = &r.params;
            let bt = match p.boosting_type {
                BoostingType::Gbdt => "gbdt",
                BoostingType::Dart => "dart",
            };
            let mut rec = vec![
                r.grid_index.to_string(),
                bt.to_string(),
                p.max_depth.to_string(),
                p.learning_rate.to_string(),
                p.n_estimators.to_string(),
                p.num_leaves.to_string(),
                p.min_samples_leaf.to_string(),
            ];
            rec.extend(r.fold_rmse.iter().map(|v| v.to_string()));
            rec.push(r.mean_rmse.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Fold boundaries `[start, end)` over `n` rows.
fn fold_bounds(n: usize, k: usize) -> Vec<(usize, usize)> {
    (0..k).map(|j| (j * n / k, (j + 1) * n / k)).collect()
}

/// Random search over `grid` scored by k-fold RMSE; lowest mean wins, ties to
/// the earlier sampled candidate.
pub fn random_search_cv(x: &[f64], width: usize, y: &[f64], grid: &ParamGrid, opts: &CvOptions) -> Result<CvResult> {
    if opts.k < 2 || opts.n_iter == 0 {
        return Err(Error::Config(format!("need k >= 2 and n_iter >= 1 (k={}, n_iter={})", opts.k, opts.n_iter)));
    }
    if grid.is_empty() {
        return Err(Error::Config("empty parameter grid".into()));
    }
    let n = y.len();
    if width == 0 || x.len() != n * width {
        return Err(Error::Shape(format!("{} values do not form {n} rows of {width}", x.len())));
    }
    let folds = fold_bounds(n, opts.k);
    let smallest = folds.iter().map(|(a, b)| b - a).min().unwrap_or(0);
    if smallest < opts.min_fold_rows.max(2) {
        return Err(Error::Sizing(format!(
            "fold of {smallest} rows is smaller than the required {} rows",
            opts.min_fold_rows.max(2)
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let take = opts.n_iter.min(grid.len());
    let picks: Vec<usize> = sample(&mut rng, grid.len(), take).into_vec();
    let mut order: Vec<usize> = (0..n).collect();
    if opts.shuffle {
        order.shuffle(&mut rng);
    }

    let jobs: Vec<(usize, usize)> = (0..take).flat_map(|c| (0..opts.k).map(move |f| (c, f))).collect();
    let scores = opts.exec.map_slice(&jobs, |&(c, f)| -> Result<f64> {
        let mut params = grid.get(picks[c]);
        params.seed = derive_seed(opts.seed, picks[c] as u64);
        let (lo, hi) = folds[f];
        let mut tx = Vec::with_capacity((n - (hi - lo)) * width);
        let mut ty = Vec::with_capacity(n - (hi - lo));
        for (pos, &i) in order.iter().enumerate() {
            if pos < lo || pos >= hi {
                tx.extend_from_slice(&x[i * width..(i + 1) * width]);
                ty.push(y[i]);
            }
        }
        let model = gbdt_fit(&tx, width, &ty, &params)?;
        let (vy, pred): (Vec<f64>, Vec<f64>) = order[lo..hi]
            .iter()
            .map(|&i| (y[i], model.predict_row(&x[i * width..(i + 1) * width])))
            .unzip();
        rmse(&vy, &pred)
    });

    let mut rows = Vec::with_capacity(take);
    let mut it = scores.into_iter();
    for &gi in &picks {
        let fold_rmse = it.by_ref().take(opts.k).collect::<Result<Vec<f64>>>()?;
        let mean_rmse = fold_rmse.iter().sum::<f64>() / opts.k as f64;
        let mut params = grid.get(gi);
        params.seed = derive_seed(opts.seed, gi as u64);
        rows.push(CvRow { grid_index: gi, params, fold_rmse, mean_rmse });
    }
    let best = rows
        .iter()
        .fold(None::<&CvRow>, |acc, r| match acc {
            Some(b) if b.mean_rmse <= r.mean_rmse => Some(b),
            _ => Some(r),
        })
        .expect("at least one candidate");
    Ok(CvResult { best: best.params.clone(), best_rmse: best.mean_rmse, rows })
}
