//! Leaf-wise regression tree growth with exact split enumeration.
//!
//! Each feature is mapped once onto the sorted list of its distinct values.
//! A node's candidate thresholds are the midpoints between consecutive
//! distinct values present in that node, so accumulating per-value sums is an
//! exact enumeration, not an approximation.

use serde::{Deserialize, Serialize};

use super::GbdtParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    /// `x[feature] <= threshold` goes left.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    /// Leaves in left-to-right order with the predicates leading to them.
    pub fn leaves(&self) -> Vec<(Vec<Predicate>, f64)> {
        let mut out = Vec::new();
        fn walk(n: &TreeNode, path: &mut Vec<Predicate>, out: &mut Vec<(Vec<Predicate>, f64)>) {
            match n {
                TreeNode::Leaf { value } => out.push((path.clone(), *value)),
                TreeNode::Split { feature, threshold, left, right } => {
                    path.push(Predicate { feature: *feature, threshold: *threshold, goes_left: true });
                    walk(left, path, out);
                    path.pop();
                    path.push(Predicate { feature: *feature, threshold: *threshold, goes_left: false });
                    walk(right, path, out);
                    path.pop();
                }
            }
        }
        walk(self, &mut Vec::new(), &mut out);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predicate {
    pub feature: usize,
    pub threshold: f64,
    pub goes_left: bool,
}

impl Predicate {
    pub fn holds(&self, x: &[f64]) -> bool {
        (x[self.feature] <= self.threshold) == self.goes_left
    }
}

/// Column-wise ranks of each value among its feature's distinct values.
#[derive(Debug, Clone)]
pub(crate) struct Binned {
    pub n_rows: usize,
    pub bins: Vec<Vec<u32>>,
    pub values: Vec<Vec<f64>>,
}

impl Binned {
    pub fn new(x: &[f64], width: usize) -> Result<Self> {
        if width == 0 || !x.len().is_multiple_of(width) {
            return Err(Error::Shape(format!("{} values do not form rows of {width}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite value in feature matrix".into()));
        }
        let n = x.len() / width;
        let mut bins = Vec::with_capacity(width);
        let mut values = Vec::with_capacity(width);
        for f in 0..width {
            let mut order: Vec<u32> = (0..n as u32).collect();
            order.sort_by(|a, b| x[*a as usize * width + f].total_cmp(&x[*b as usize * width + f]));
            let mut col_bins = vec![0u32; n];
            let mut uniq: Vec<f64> = Vec::new();
            for &r in &order {
                let v = x[r as usize * width + f];
                if uniq.last() != Some(&v) {
                    uniq.push(v);
                }
                col_bins[r as usize] = (uniq.len() - 1) as u32;
            }
            bins.push(col_bins);
            values.push(uniq);
        }
        Ok(Binned { n_rows: n, bins, values })
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    feature: usize,
    /// Highest bin routed left.
    bin: u32,
    threshold: f64,
    gain: f64,
}

/// Flat tree as grown; leaves are numbered in creation order.
#[derive(Debug, Clone)]
pub(crate) struct FlatTree {
    nodes: Vec<Flat>,
    pub leaf_values: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
enum Flat {
    Leaf(usize),
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

impl FlatTree {
    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Flat::Leaf(l) => return l,
                Flat::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn to_node(&self) -> TreeNode {
        fn build(t: &FlatTree, i: usize) -> TreeNode {
            match t.nodes[i] {
                Flat::Leaf(l) => TreeNode::Leaf { value: t.leaf_values[l] },
                Flat::Split { feature, threshold, left, right } => TreeNode::Split {
                    feature,
                    threshold,
                    left: Box::new(build(t, left)),
                    right: Box::new(build(t, right)),
                },
            }
        }
        build(self, 0)
    }
}

struct Open {
    node: usize,
    rows: Vec<u32>,
    depth: usize,
    best: Option<Candidate>,
}

#[derive(Default)]
struct Scratch {
    g: Vec<f64>,
    w: Vec<f64>,
    c: Vec<u32>,
    pairs: Vec<(u32, f64, f64)>,
}

pub(crate) struct Grower<'a> {
    data: &'a Binned,
    grad: &'a [f64],
    weight: Option<&'a [f64]>,
    num_leaves: usize,
    max_depth: usize,
    min_samples_leaf: usize,
    min_gain: f64,
    scratch: Scratch,
}

impl<'a> Grower<'a> {
    pub fn new(
        data: &'a Binned,
        grad: &'a [f64],
        weight: Option<&'a [f64]>,
        params: &GbdtParams,
    ) -> Self {
        Grower {
            data,
            grad,
            weight,
            num_leaves: params.num_leaves.max(1),
            max_depth: params.max_depth,
            min_samples_leaf: params.min_samples_leaf.max(1),
            min_gain: 0.0,
            scratch: Scratch::default(),
        }
    }

    fn w(&self, r: u32) -> f64 {
        self.weight.map_or(1.0, |w| w[r as usize])
    }

    fn sums(&self, rows: &[u32]) -> (f64, f64) {
        rows.iter().fold((0.0, 0.0), |(g, w), &r| {
            let wr = self.w(r);
            (g + wr * self.grad[r as usize], w + wr)
        })
    }

    fn best_split(&mut self, rows: &[u32], depth: usize) -> Option<Candidate> {
        if depth >= self.max_depth || rows.len() < 2 * self.min_samples_leaf {
            return None;
        }
        let (g_tot, w_tot) = self.sums(rows);
        if w_tot <= 0.0 {
            return None;
        }
        let parent = g_tot * g_tot / w_tot;
        let mut best: Option<Candidate> = None;
        let msl = self.min_samples_leaf as u32;
        let n_node = rows.len() as u32;
        for f in 0..self.data.bins.len() {
            let col = &self.data.bins[f];
            let vals = &self.data.values[f];
            if vals.len() < 2 {
                continue;
            }
            let consider = |b: u32, b_next: u32, gl: f64, wl: f64, cl: u32, best: &mut Option<Candidate>| {
                let cr = n_node - cl;
                let wr = w_tot - wl;
                if cl < msl || cr < msl || wl <= 0.0 || wr <= 0.0 {
                    return;
                }
                let gr = g_tot - gl;
                let gain = gl * gl / wl + gr * gr / wr - parent;
                if best.is_none_or(|c| gain > c.gain) {
                    let lo = vals[b as usize];
                    let hi = vals[b_next as usize];
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    *best = Some(Candidate { feature: f, bin: b, threshold, gain });
                }
            };
            let sparse = rows.len() * 4 < vals.len();
            if sparse {
                let pairs = &mut self.scratch.pairs;
                pairs.clear();
                for &r in rows {
                    let wr = self.weight.map_or(1.0, |w| w[r as usize]);
                    pairs.push((col[r as usize], wr * self.grad[r as usize], wr));
                }
                pairs.sort_unstable_by_key(|p| p.0);
                let (mut gl, mut wl, mut cl) = (0.0, 0.0, 0u32);
                let mut i = 0;
                while i < pairs.len() {
                    let b = pairs[i].0;
                    while i < pairs.len() && pairs[i].0 == b {
                        gl += pairs[i].1;
                        wl += pairs[i].2;
                        cl += 1;
                        i += 1;
                    }
                    if i < pairs.len() {
                        consider(b, pairs[i].0, gl, wl, cl, &mut best);
                    }
                }
            } else {
                let s = &mut self.scratch;
                s.g.clear();
                s.g.resize(vals.len(), 0.0);
                s.w.clear();
                s.w.resize(vals.len(), 0.0);
                s.c.clear();
                s.c.resize(vals.len(), 0);
                for &r in rows {
                    let b = col[r as usize] as usize;
                    let wr = self.weight.map_or(1.0, |w| w[r as usize]);
                    s.g[b] += wr * self.grad[r as usize];
                    s.w[b] += wr;
                    s.c[b] += 1;
                }
                let (mut gl, mut wl, mut cl) = (0.0, 0.0, 0u32);
                let mut prev: Option<u32> = None;
                for b in 0..vals.len() {
                    if s.c[b] == 0 {
                        continue;
                    }
                    if let Some(p) = prev {
                        consider(p, b as u32, gl, wl, cl, &mut best);
                    }
                    gl += s.g[b];
                    wl += s.w[b];
                    cl += s.c[b];
                    prev = Some(b as u32);
                }
            }
        }
        best.filter(|c| c.gain > self.min_gain)
    }

    /// Best-first growth until `num_leaves` leaves or no admissible split.
    pub fn grow(mut self, rows: Vec<u32>) -> FlatTree {
        let total_sq: f64 = rows
            .iter()
            .map(|&r| self.w(r) * self.grad[r as usize] * self.grad[r as usize])
            .sum();
        self.min_gain = 1e-10 * total_sq.max(f64::MIN_POSITIVE);

        let mut tree = FlatTree { nodes: vec![Flat::Leaf(0)], leaf_values: Vec::new() };
        let best = self.best_split(&rows, 0);
        let mut open = vec![Open { node: 0, rows, depth: 0, best }];
        let mut finished: Vec<Open> = Vec::new();
        let mut leaves = 1;
        while leaves < self.num_leaves {
            let pick = open
                .iter()
                .enumerate()
                .filter(|(_, o)| o.best.is_some())
                .max_by(|a, b| {
                    let (ga, gb) = (a.1.best.unwrap().gain, b.1.best.unwrap().gain);
                    // Earlier leaves win ties.
                    ga.total_cmp(&gb).then(b.0.cmp(&a.0))
                })
                .map(|(i, _)| i);
            let Some(i) = pick else { break };
            let leaf = open.swap_remove(i);
            let c = leaf.best.unwrap();
            let col = &self.data.bins[c.feature];
            let (l_rows, r_rows): (Vec<u32>, Vec<u32>) =
                leaf.rows.iter().partition(|&&r| col[r as usize] <= c.bin);
            let l = tree.nodes.len();
            tree.nodes.push(Flat::Leaf(0));
            tree.nodes.push(Flat::Leaf(0));
            tree.nodes[leaf.node] = Flat::Split {
                feature: c.feature,
                threshold: c.threshold,
                left: l,
                right: l + 1,
            };
            let depth = leaf.depth + 1;
            let lb = self.best_split(&l_rows, depth);
            let rb = self.best_split(&r_rows, depth);
            open.push(Open { node: l, rows: l_rows, depth, best: lb });
            open.push(Open { node: l + 1, rows: r_rows, depth, best: rb });
            leaves += 1;
        }
        finished.extend(open);
        finished.sort_by_key(|o| o.node);
        for o in finished {
            let (g, w) = self.sums(&o.rows);
            let value = if w > 0.0 { g / w } else { 0.0 };
            tree.nodes[o.node] = Flat::Leaf(tree.leaf_values.len());
            tree.leaf_values.push(value);
        }
        tree
    }
}

/// Fit one regression tree to `residuals` (row-major `x` with `width`
/// columns). Leaf values are weighted mean residuals.
pub fn fit_tree(
    x: &[f64],
    width: usize,
    residuals: &[f64],
    sample_weights: Option<&[f64]>,
    params: &GbdtParams,
) -> Result<TreeNode> {
    let data = Binned::new(x, width)?;
    if residuals.len() != data.n_rows || sample_weights.is_some_and(|w| w.len() != data.n_rows) {
        return Err(Error::Shape("residual/weight length differs from row count".into()));
    }
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(Error::Data("non-finite residual".into()));
    }
    let rows: Vec<u32> = (0..data.n_rows as u32)
        .filter(|r| sample_weights.is_none_or(|w| w[*r as usize] > 0.0))
        .collect();
    Ok(Grower::new(&data, residuals, sample_weights, params).grow(rows).to_node())
}
