//! Regression models: CART trees, bagged random forests and k-nearest
//! neighbours, all operating on pipeline-transformed inputs.

use std::cmp::{Ordering as CmpOrdering, Reverse};
use std::collections::BinaryHeap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pipeline::Transformed;
use super::OracleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    All,
    Sqrt,
}

/// Regressor kind plus hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressorSpec {
    DecisionTree { criterion: Criterion, max_depth: Option<usize> },
    RandomForest { n_estimators: usize, max_depth: Option<usize>, max_features: MaxFeatures },
    Knn { n_neighbors: usize, p: u32 },
}

pub const DEPTH_GRID: [Option<usize>; 3] = [Some(10), Some(20), None];
pub const N_ESTIMATORS_GRID: [usize; 5] = [10, 20, 50, 100, 200];
pub const N_NEIGHBORS_GRID: [usize; 6] = [1, 2, 3, 4, 5, 6];
pub const MINKOWSKI_P_GRID: [u32; 2] = [1, 2];

impl RegressorSpec {
    /// Rejects hyperparameters outside the supported grids.
    pub fn validate(&self) -> Result<(), OracleError> {
        let ok = match *self {
            RegressorSpec::DecisionTree { max_depth, .. } => DEPTH_GRID.contains(&max_depth),
            RegressorSpec::RandomForest { n_estimators, max_depth, .. } => {
                N_ESTIMATORS_GRID.contains(&n_estimators) && DEPTH_GRID.contains(&max_depth)
            }
            RegressorSpec::Knn { n_neighbors, p } => {
                N_NEIGHBORS_GRID.contains(&n_neighbors) && MINKOWSKI_P_GRID.contains(&p)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(OracleError::Hyperparameters(format!("{self:?} is outside the supported grid")))
        }
    }

    /// Every supported configuration of every kind.
    pub fn full_grid() -> Vec<RegressorSpec> {
        let mut out = Vec::new();
        for criterion in [Criterion::Mse, Criterion::Mae] {
            for max_depth in DEPTH_GRID {
                out.push(RegressorSpec::DecisionTree { criterion, max_depth });
            }
        }
        for n_estimators in N_ESTIMATORS_GRID {
            for max_depth in DEPTH_GRID {
                for max_features in [MaxFeatures::All, MaxFeatures::Sqrt] {
                    out.push(RegressorSpec::RandomForest { n_estimators, max_depth, max_features });
                }
            }
        }
        for n_neighbors in N_NEIGHBORS_GRID {
            for p in MINKOWSKI_P_GRID {
                out.push(RegressorSpec::Knn { n_neighbors, p });
            }
        }
        out
    }

    pub fn label(&self) -> String {
        match self {
            RegressorSpec::DecisionTree { criterion, max_depth } => {
                format!("tree(criterion={criterion:?},max_depth={})", depth_label(*max_depth)).to_lowercase()
            }
            RegressorSpec::RandomForest { n_estimators, max_depth, max_features } => format!(
                "forest(n_estimators={n_estimators},max_depth={},max_features={max_features:?})",
                depth_label(*max_depth)
            )
            .to_lowercase(),
            RegressorSpec::Knn { n_neighbors, p } => format!("knn(n_neighbors={n_neighbors},p={p})"),
        }
    }
}

fn depth_label(d: Option<usize>) -> String {
    d.map_or("none".into(), |d| d.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// Binary regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, Copy)]
struct TreeParams {
    criterion: Criterion,
    max_depth: Option<usize>,
    /// Features examined per split; `None` examines all.
    max_features: Option<usize>,
}

#[derive(Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.0.total_cmp(&other.0)
    }
}

/// Running sum of absolute deviations from the median.
#[derive(Default)]
struct MedianAcc {
    lo: BinaryHeap<OrdF64>,
    hi: BinaryHeap<Reverse<OrdF64>>,
    sum_lo: f64,
    sum_hi: f64,
}

impl MedianAcc {
    fn push(&mut self, v: f64) {
        if self.lo.peek().is_none_or(|t| v <= t.0) {
            self.lo.push(OrdF64(v));
            self.sum_lo += v;
        } else {
            self.hi.push(Reverse(OrdF64(v)));
            self.sum_hi += v;
        }
        if self.lo.len() > self.hi.len() + 1 {
            let t = self.lo.pop().expect("non-empty").0;
            self.sum_lo -= t;
            self.hi.push(Reverse(OrdF64(t)));
            self.sum_hi += t;
        } else if self.hi.len() > self.lo.len() {
            let t = self.hi.pop().expect("non-empty").0 .0;
            self.sum_hi -= t;
            self.lo.push(OrdF64(t));
            self.sum_lo += t;
        }
    }

    fn abs_dev(&self) -> f64 {
        let Some(m) = self.lo.peek() else { return 0.0 };
        let m = m.0;
        (m * self.lo.len() as f64 - self.sum_lo) + (self.sum_hi - m * self.hi.len() as f64)
    }
}

fn leaf_value(y: &[f64], rows: &[usize], criterion: Criterion) -> f64 {
    match criterion {
        Criterion::Mse => rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64,
        Criterion::Mae => {
            let mut v: Vec<f64> = rows.iter().map(|&r| y[r]).collect();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            if n % 2 == 1 {
                v[n / 2]
            } else {
                0.5 * (v[n / 2 - 1] + v[n / 2])
            }
        }
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    impurity: f64,
    /// Rows sorted by the split feature and the left count.
    sorted: Vec<usize>,
    n_left: usize,
}

fn best_split_on(x: &[&[f64]], y: &[f64], rows: &[usize], f: usize, criterion: Criterion) -> Option<SplitChoice> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
    let n = sorted.len();
    if x[sorted[0]][f] == x[sorted[n - 1]][f] {
        return None;
    }
    // impurity of the first i+1 rows (left) and of the rest (right)
    let mut left = vec![0.0; n];
    let mut right = vec![0.0; n];
    match criterion {
        Criterion::Mse => {
            let (mut s, mut s2) = (0.0, 0.0);
            for i in 0..n {
                let v = y[sorted[i]];
                s += v;
                s2 += v * v;
                left[i] = (s2 - s * s / (i + 1) as f64).max(0.0);
            }
            let (mut s, mut s2) = (0.0, 0.0);
            for i in (0..n).rev() {
                let v = y[sorted[i]];
                s += v;
                s2 += v * v;
                right[i] = (s2 - s * s / (n - i) as f64).max(0.0);
            }
        }
        Criterion::Mae => {
            let mut acc = MedianAcc::default();
            for i in 0..n {
                acc.push(y[sorted[i]]);
                left[i] = acc.abs_dev();
            }
            let mut acc = MedianAcc::default();
            for i in (0..n).rev() {
                acc.push(y[sorted[i]]);
                right[i] = acc.abs_dev();
            }
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for i in 0..n - 1 {
        let (a, b) = (x[sorted[i]][f], x[sorted[i + 1]][f]);
        if a == b {
            continue;
        }
        let imp = left[i] + right[i + 1];
        if best.is_none_or(|(_, bi)| imp < bi) {
            best = Some((i, imp));
        }
    }
    let (i, impurity) = best?;
    let (a, b) = (x[sorted[i]][f], x[sorted[i + 1]][f]);
    let mut threshold = 0.5 * (a + b);
    if threshold >= b || threshold < a {
        threshold = a;
    }
    Some(SplitChoice { feature: f, threshold, impurity, sorted, n_left: i + 1 })
}

fn fit_tree(x: &[&[f64]], y: &[f64], rows: Vec<usize>, params: TreeParams, rng: &mut ChaCha8Rng) -> Tree {
    let m = x.first().map_or(0, |r| r.len());
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    // (node index, rows, depth)
    let mut stack = vec![(0usize, rows, 0usize)];
    while let Some((at, rows, depth)) = stack.pop() {
        let value = leaf_value(y, &rows, params.criterion);
        let pure = rows.iter().all(|&r| y[r] == y[rows[0]]);
        let depth_ok = params.max_depth.is_none_or(|d| depth < d);
        if pure || rows.len() < 2 || !depth_ok || m == 0 {
            nodes[at] = Node::Leaf { value };
            continue;
        }
        let k = params.max_features.unwrap_or(m).min(m);
        let mut order: Vec<usize> = if k < m {
            let mut first = index::sample(rng, m, k).into_vec();
            let chosen: std::collections::HashSet<usize> = first.iter().copied().collect();
            let mut rest: Vec<usize> = (0..m).filter(|f| !chosen.contains(f)).collect();
            rest.shuffle(rng);
            first.extend(rest);
            first
        } else {
            (0..m).collect()
        };
        let mut best: Option<SplitChoice> = None;
        let mut examined = 0;
        for f in order.drain(..) {
            // keep looking past the subsample only while no valid split exists
            if examined >= k && best.is_some() {
                break;
            }
            examined += 1;
            if let Some(c) = best_split_on(x, y, &rows, f, params.criterion) {
                if best.as_ref().is_none_or(|b| c.impurity < b.impurity) {
                    best = Some(c);
                }
            }
        }
        let Some(c) = best else {
            nodes[at] = Node::Leaf { value };
            continue;
        };
        let left_rows = c.sorted[..c.n_left].to_vec();
        let right_rows = c.sorted[c.n_left..].to_vec();
        let (l, r) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[at] = Node::Split { feature: c.feature, threshold: c.threshold, left: l, right: r };
        stack.push((r, right_rows, depth + 1));
        stack.push((l, left_rows, depth + 1));
    }
    Tree { nodes }
}

/// Independent per-tree seed so forests do not depend on thread scheduling.
fn tree_seed(seed: u64, tree: u64) -> u64 {
    let mut z = seed ^ tree.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Model {
    Tree { tree: Tree },
    Forest { trees: Vec<Tree> },
    Knn { x: Vec<Vec<f64>>, y: Vec<f64>, n_neighbors: usize, p: u32 },
}

impl Model {
    pub fn fit(spec: &RegressorSpec, x: &[Transformed], y: &[f64], seed: u64) -> Result<Model, OracleError> {
        spec.validate()?;
        if x.is_empty() || x.len() != y.len() {
            return Err(OracleError::TooFewRows(x.len()));
        }
        let xs: Vec<&[f64]> = x.iter().map(Transformed::as_slice).collect();
        let n = xs.len();
        let m = xs[0].len();
        Ok(match *spec {
            RegressorSpec::DecisionTree { criterion, max_depth } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let params = TreeParams { criterion, max_depth, max_features: None };
                Model::Tree { tree: fit_tree(&xs, y, (0..n).collect(), params, &mut rng) }
            }
            RegressorSpec::RandomForest { n_estimators, max_depth, max_features } => {
                let k = match max_features {
                    MaxFeatures::All => None,
                    MaxFeatures::Sqrt => Some(((m as f64).sqrt().floor() as usize).max(1)),
                };
                let params = TreeParams { criterion: Criterion::Mse, max_depth, max_features: k };
                let trees = (0..n_estimators as u64)
                    .into_par_iter()
                    .map(|t| {
                        let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, t));
                        let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                        fit_tree(&xs, y, rows, params, &mut rng)
                    })
                    .collect();
                Model::Forest { trees }
            }
            RegressorSpec::Knn { n_neighbors, p } => Model::Knn {
                x: xs.iter().map(|r| r.to_vec()).collect(),
                y: y.to_vec(),
                n_neighbors,
                p,
            },
        })
    }

    pub fn predict(&self, x: &Transformed) -> f64 {
        let x = x.as_slice();
        match self {
            Model::Tree { tree } => tree.predict(x),
            Model::Forest { trees } => trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64,
            Model::Knn { x: train, y, n_neighbors, p } => {
                let mut d: Vec<(f64, usize)> = train
                    .iter()
                    .enumerate()
                    .map(|(i, r)| (minkowski(r, x, *p), i))
                    .collect();
                let k = (*n_neighbors).min(d.len());
                let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
                if k < d.len() {
                    d.select_nth_unstable_by(k - 1, cmp);
                }
                d[..k].iter().map(|&(_, i)| y[i]).sum::<f64>() / k as f64
            }
        }
    }
}

fn minkowski(a: &[f64], b: &[f64], p: u32) -> f64 {
    match p {
        1 => a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum(),
        2 => a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt(),
        _ => a.iter().zip(b).map(|(u, v)| (u - v).abs().powi(p as i32)).sum::<f64>().powf(1.0 / p as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_mae_matches_direct_sum() {
        let vals = [3.0, -1.0, 7.5, 2.0, 2.0, 10.0, -4.0];
        let mut acc = MedianAcc::default();
        for (i, v) in vals.iter().enumerate() {
            acc.push(*v);
            let mut s = vals[..=i].to_vec();
            s.sort_by(f64::total_cmp);
            let med = s[(s.len() - 1) / 2];
            let direct: f64 = s.iter().map(|x| (x - med).abs()).sum();
            assert!((acc.abs_dev() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_seeds_differ() {
        assert_ne!(tree_seed(1, 0), tree_seed(1, 1));
        assert_ne!(tree_seed(1, 0), tree_seed(2, 0));
    }
}
