//! Gradient-boosted regression trees under squared loss.
//!
//! `F_{m+1}(x) = F_m(x) + η · h_m(x)`, starting from the target mean, where
//! each `h_m` is a leaf-wise tree fit to the current residuals. Optional
//! gradient-based one-side sampling (GOSS) and dart-style tree dropout are
//! supported; [`random_search_cv`] tunes the parameters.

mod search;
mod tree;

pub use search::{random_search_cv, CvOptions, CvResult, CvRow, ParamGrid};
pub use tree::{fit_tree, Predicate, TreeNode};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::derive_seed;
use tree::{Binned, Grower};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoostingType {
    Gbdt,
    Dart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GossParams {
    /// Fraction of rows with the largest |gradient| always kept.
    pub a: f64,
    /// Fraction of rows sampled from the remainder.
    pub b: f64,
}

impl Default for GossParams {
    fn default() -> Self {
        GossParams { a: 0.2, b: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtParams {
    pub boosting_type: BoostingType,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub n_estimators: usize,
    pub num_leaves: usize,
    pub min_samples_leaf: usize,
    pub goss: Option<GossParams>,
    /// Per-tree dropout probability for dart.
    pub drop_rate: f64,
    pub max_drop: usize,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            boosting_type: BoostingType::Gbdt,
            max_depth: 10,
            learning_rate: 0.1,
            n_estimators: 100,
            num_leaves: 20,
            min_samples_leaf: 20,
            goss: None,
            drop_rate: 0.1,
            max_drop: 50,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        if self.num_leaves == 0 || self.min_samples_leaf == 0 {
            return Err(Error::Config("num_leaves and min_samples_leaf must be positive".into()));
        }
        // Dropout bookkeeping stores one byte per row and tree.
        if self.boosting_type == BoostingType::Dart && self.num_leaves > 256 {
            return Err(Error::Config(format!("dart supports at most 256 leaves, got {}", self.num_leaves)));
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return Err(Error::Config(format!("drop rate {}", self.drop_rate)));
        }
        if let Some(g) = self.goss {
            check_goss(g.a, g.b)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagedTree {
    pub weight: f64,
    pub tree: TreeNode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub base_value: f64,
    pub n_features: usize,
    pub params: GbdtParams,
    pub trees: Vec<StagedTree>,
}

impl GbdtModel {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        self.base_value + self.trees.iter().map(|t| t.weight * t.tree.predict(x)).sum::<f64>()
    }

    /// Predictions for a row-major matrix.
    pub fn predict(&self, x: &[f64], width: usize) -> Result<Vec<f64>> {
        if width != self.n_features || (width > 0 && !x.len().is_multiple_of(width)) {
            return Err(Error::Shape(format!(
                "model expects {} features, got rows of {width}",
                self.n_features
            )));
        }
        Ok(x.chunks(width).map(|r| self.predict_row(r)).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn check_goss(a: f64, b: f64) -> Result<()> {
    // a = 1 keeps every row, so b is irrelevant there.
    if a == 1.0 && b > 0.0 {
        return Ok(());
    }
    if !(a > 0.0 && b > 0.0 && a + b <= 1.0 + 1e-12) {
        return Err(Error::Config(format!("GOSS needs 0 < a, b and a + b <= 1 (a={a}, b={b})")));
    }
    Ok(())
}

fn ceil_fraction(f: f64, n: usize) -> usize {
    ((f * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Gradient-based one-side sampling: the `ceil(a·n)` largest |gradient| rows
/// with weight 1, plus `ceil(b·n)` uniform draws from the rest weighted
/// `(1 − a) / b`.
pub fn goss_sample(gradients: &[f64], a: f64, b: f64, seed: u64) -> Result<(Vec<usize>, Vec<f64>)> {
    check_goss(a, b)?;
    let n = gradients.len();
    let top = ceil_fraction(a, n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|i, j| gradients[*j].abs().total_cmp(&gradients[*i].abs()).then(i.cmp(j)));
    let mut indices: Vec<usize> = order[..top].to_vec();
    let mut weights = vec![1.0; top];
    let rest = &order[top..];
    let take = ceil_fraction(b, n).min(rest.len());
    if take > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, rest.len(), take).into_iter().map(|i| rest[i]).collect();
        picked.sort_unstable();
        indices.extend(picked);
        weights.extend(std::iter::repeat_n((1.0 - a) / b, take));
    }
    Ok((indices, weights))
}

/// Fit a boosted ensemble to `y` from row-major `x` with `width` columns.
pub fn gbdt_fit(x: &[f64], width: usize, y: &[f64], params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    if y.len() < 2 || width == 0 || x.len() != y.len() * width {
        return Err(Error::Shape(format!(
            "need at least 2 rows with matching targets ({} values, {} targets, width {width})",
            x.len(),
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite target".into()));
    }
    let data = Binned::new(x, width)?;
    let n = y.len();
    let base_value = y.iter().sum::<f64>() / n as f64;
    let mut model = GbdtModel {
        base_value,
        n_features: width,
        params: params.clone(),
        trees: Vec::with_capacity(params.n_estimators),
    };
    if y.iter().all(|v| *v == y[0]) {
        return Ok(model);
    }

    let dart = params.boosting_type == BoostingType::Dart;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut pred = vec![base_value; n];
    // Leaf index of every training row for every tree, for cheap dropout.
    let mut leaf_ids: Vec<Vec<u8>> = Vec::new();
    let mut leaf_vals: Vec<Vec<f64>> = Vec::new();
    let all_rows: Vec<u32> = (0..n as u32).collect();
    let mut residual = vec![0.0; n];
    let mut sample_w = vec![0.0; n];

    for m in 0..params.n_estimators {
        let dropped: Vec<usize> = if dart && !model.trees.is_empty() {
            let mut d: Vec<usize> = (0..model.trees.len())
                .filter(|_| rng.random::<f64>() < params.drop_rate)
                .collect();
            if d.len() > params.max_drop {
                let keep = sample(&mut rng, d.len(), params.max_drop).into_vec();
                let mut kept: Vec<usize> = keep.into_iter().map(|i| d[i]).collect();
                kept.sort_unstable();
                d = kept;
            }
            d
        } else {
            Vec::new()
        };
        for i in 0..n {
            let mut p = pred[i];
            for &j in &dropped {
                p -= model.trees[j].weight * leaf_vals[j][leaf_ids[j][i] as usize];
            }
            residual[i] = y[i] - p;
        }

        let (rows, weights) = match params.goss {
            Some(g) => {
                let (idx, w) = goss_sample(&residual, g.a, g.b, derive_seed(params.seed, m as u64))?;
                sample_w.iter_mut().for_each(|v| *v = 0.0);
                for (i, wi) in idx.iter().zip(&w) {
                    sample_w[*i] = *wi;
                }
                let mut rows: Vec<u32> = idx.into_iter().map(|i| i as u32).collect();
                rows.sort_unstable();
                (rows, Some(sample_w.as_slice()))
            }
            None => (all_rows.clone(), None),
        };
        let flat = Grower::new(&data, &residual, weights, params).grow(rows);

        let k = dropped.len() as f64;
        let weight = params.learning_rate / (1.0 + k);
        let ids: Vec<u8> = (0..n).map(|i| flat.leaf_of(&x[i * width..(i + 1) * width]) as u8).collect();
        for i in 0..n {
            pred[i] += weight * flat.leaf_values[ids[i] as usize];
        }
        if !dropped.is_empty() {
            let scale = k / (k + 1.0);
            for &j in &dropped {
                let old = model.trees[j].weight;
                let new = old * scale;
                for i in 0..n {
                    pred[i] -= (old - new) * leaf_vals[j][leaf_ids[j][i] as usize];
                }
                model.trees[j].weight = new;
            }
        }
        model.trees.push(StagedTree { weight, tree: flat.to_node() });
        if dart {
            leaf_ids.push(ids);
            leaf_vals.push(flat.leaf_values);
        }
    }
    Ok(model)
}
