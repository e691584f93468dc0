//! Gradient-boosted regression trees on the binomial log loss.
//!
//! Each stage fits a depth-limited regression tree to the residuals
//! `y - p` with exact greedy splits over all rows (Friedman MSE criterion),
//! then replaces each leaf value with the Newton step
//! `sum(residual) / sum(p (1 - p))`.

use serde::{Deserialize, Serialize};

use super::logistic::sigmoid;
use super::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GBoostConfig {
    pub n_estimators: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    pub random_state: u64,
}

impl Default for GBoostConfig {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            learning_rate: 0.1,
            max_depth: 3,
            min_samples_split: 2,
            min_samples_leaf: 1,
            random_state: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => k = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], k: usize) -> usize {
            match &nodes[k] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GBoostFit {
    /// Prior log-odds every prediction starts from.
    pub init_raw: f64,
    pub learning_rate: f64,
    pub trees: Vec<RegressionTree>,
}

impl GBoostFit {
    pub fn raw_score(&self, x: &[f64]) -> f64 {
        self.init_raw
            + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }
}

/// Mean binomial log loss of raw scores.
pub fn log_loss(raw: &[f64], y: &[bool]) -> f64 {
    raw.iter()
        .zip(y)
        .map(|(&f, &yi)| {
            let z = if yi { -f } else { f };
            if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            }
        })
        .sum::<f64>()
        / raw.len() as f64
}

#[derive(Clone, Copy, Default)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

#[derive(Clone, Copy, Default)]
struct ScanState {
    count: usize,
    sum: f64,
    last: f64,
}

struct Grower<'a> {
    x: &'a Matrix,
    order: &'a [Vec<u32>],
    cfg: &'a GBoostConfig,
}

impl Grower<'_> {
    fn grow(&self, residual: &[f64], hessian: &[f64]) -> RegressionTree {
        let n = self.x.n_rows;
        let d = self.x.n_cols;
        let mut nodes: Vec<TreeNode> = vec![TreeNode::Leaf { value: 0.0 }];
        // Node index of each row; usize::MAX once the row sits in a finished leaf.
        let mut node_of = vec![0usize; n];
        let mut frontier: Vec<usize> = vec![0];

        for depth in 0..=self.cfg.max_depth {
            if frontier.is_empty() {
                break;
            }
            let slot: std::collections::HashMap<usize, usize> =
                frontier.iter().enumerate().map(|(s, &k)| (k, s)).collect();
            let m = frontier.len();
            let mut count = vec![0usize; m];
            let mut sum = vec![0.0; m];
            let mut sum_sq = vec![0.0; m];
            let mut row_slot = vec![usize::MAX; n];
            for i in 0..n {
                if let Some(&s) = slot.get(&node_of[i]) {
                    row_slot[i] = s;
                    count[s] += 1;
                    sum[s] += residual[i];
                    sum_sq[s] += residual[i] * residual[i];
                }
            }

            let splittable: Vec<bool> = (0..m)
                .map(|s| {
                    let c = count[s] as f64;
                    let impurity = sum_sq[s] / c - (sum[s] / c).powi(2);
                    depth < self.cfg.max_depth
                        && count[s] >= self.cfg.min_samples_split
                        && count[s] >= 2 * self.cfg.min_samples_leaf
                        && impurity > f64::EPSILON
                })
                .collect();

            let mut best: Vec<Option<Candidate>> = vec![None; m];
            if splittable.iter().any(|&s| s) {
                let mut state = vec![ScanState::default(); m];
                for j in 0..d {
                    state.iter_mut().for_each(|s| *s = ScanState::default());
                    for &i in &self.order[j] {
                        let i = i as usize;
                        let s = row_slot[i];
                        if s == usize::MAX || !splittable[s] {
                            continue;
                        }
                        let v = self.x.get(i, j);
                        let st = &mut state[s];
                        if st.count >= self.cfg.min_samples_leaf
                            && v > st.last
                            && count[s] - st.count >= self.cfg.min_samples_leaf
                        {
                            let nl = st.count as f64;
                            let nr = (count[s] - st.count) as f64;
                            let diff = st.sum / nl - (sum[s] - st.sum) / nr;
                            let gain = nl * nr * diff * diff / (nl + nr);
                            if best[s].is_none_or(|b| gain > b.gain) {
                                let mut threshold = 0.5 * (st.last + v);
                                if threshold >= v {
                                    threshold = st.last;
                                }
                                best[s] = Some(Candidate {
                                    gain,
                                    feature: j,
                                    threshold,
                                });
                            }
                        }
                        st.count += 1;
                        st.sum += residual[i];
                        st.last = v;
                    }
                }
            }

            let mut next = Vec::new();
            let mut children: Vec<Option<(usize, usize, usize, f64)>> = vec![None; m];
            for (s, &k) in frontier.iter().enumerate() {
                match best[s] {
                    Some(c) if splittable[s] => {
                        let left = nodes.len();
                        nodes.push(TreeNode::Leaf { value: 0.0 });
                        nodes.push(TreeNode::Leaf { value: 0.0 });
                        nodes[k] = TreeNode::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                        };
                        children[s] = Some((left, left + 1, c.feature, c.threshold));
                        next.push(left);
                        next.push(left + 1);
                    }
                    _ => {}
                }
            }
            // Route rows; rows of finished leaves accumulate Newton statistics.
            let mut num = vec![0.0; m];
            let mut den = vec![0.0; m];
            for i in 0..n {
                let s = row_slot[i];
                if s == usize::MAX {
                    continue;
                }
                match children[s] {
                    Some((l, r, f, t)) => node_of[i] = if self.x.get(i, f) <= t { l } else { r },
                    None => {
                        num[s] += residual[i];
                        den[s] += hessian[i];
                        node_of[i] = usize::MAX;
                    }
                }
            }
            for (s, &k) in frontier.iter().enumerate() {
                if children[s].is_none() {
                    let value = if den[s].abs() < 1e-150 { 0.0 } else { num[s] / den[s] };
                    nodes[k] = TreeNode::Leaf { value };
                }
            }
            frontier = next;
        }
        RegressionTree { nodes }
    }
}

/// Rows sorted by value per column, ties broken by row index.
fn presort(x: &Matrix) -> Vec<Vec<u32>> {
    (0..x.n_cols)
        .map(|j| {
            let mut idx: Vec<u32> = (0..x.n_rows as u32).collect();
            idx.sort_by(|&a, &b| {
                x.get(a as usize, j)
                    .total_cmp(&x.get(b as usize, j))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect()
}

/// Fits the ensemble; `on_stage` sees the raw scores after every stage.
pub(crate) fn fit_gboost_with(
    x: &Matrix,
    y: &[bool],
    cfg: &GBoostConfig,
    mut on_stage: impl FnMut(&[f64]),
) -> GBoostFit {
    let n = x.n_rows;
    let prior = y.iter().filter(|&&v| v).count() as f64 / n as f64;
    let init_raw = (prior / (1.0 - prior)).ln();
    let target: Vec<f64> = y.iter().map(|&v| f64::from(u8::from(v))).collect();
    let mut raw = vec![init_raw; n];
    let order = presort(x);
    let grower = Grower { x, order: &order, cfg };
    let mut residual = vec![0.0; n];
    let mut hessian = vec![0.0; n];
    let mut trees = Vec::with_capacity(cfg.n_estimators);
    for _ in 0..cfg.n_estimators {
        for i in 0..n {
            let p = sigmoid(raw[i]);
            residual[i] = target[i] - p;
            hessian[i] = p * (1.0 - p);
        }
        let tree = grower.grow(&residual, &hessian);
        for (i, r) in raw.iter_mut().enumerate() {
            *r += cfg.learning_rate * tree.predict(x.row(i));
        }
        trees.push(tree);
        on_stage(&raw);
    }
    GBoostFit {
        init_raw,
        learning_rate: cfg.learning_rate,
        trees,
    }
}

pub(crate) fn fit_gboost(x: &Matrix, y: &[bool], cfg: &GBoostConfig) -> GBoostFit {
    fit_gboost_with(x, y, cfg, |_| {})
}
