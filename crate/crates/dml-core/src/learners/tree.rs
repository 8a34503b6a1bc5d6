//! CART regression tree.
//!
//! Splits minimize total squared error; candidate thresholds sit at
//! midpoints between consecutive distinct sorted feature values. Since the
//! total sum of squares at a node is constant across candidates, the
//! search minimizes `-(sum_L^2/n_L + sum_R^2/n_R)` via one prefix-sum
//! sweep per feature. Ties break to the lowest feature index, then the
//! smallest threshold: features are scanned in ascending order, thresholds
//! in ascending order, and only strict improvements are accepted.
//!
//! Growth is an explicit work stack in preorder (node, left subtree, right
//! subtree), which also fixes the order in which forest trees consume
//! their per-node feature-sampling draws.

use crate::rng::DetRng;

#[derive(Debug, Clone, Copy)]
pub struct TreeParams {
    pub max_depth: Option<u32>,
    pub min_leaf: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// A fitted regression tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTree {
    nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut idx = 0;
        loop {
            match &self.nodes[idx] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    idx = if row[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

struct WorkItem {
    rows: Vec<usize>,
    depth: u32,
    slot: usize,
}

struct BestSplit {
    score: f64,
    feature: usize,
    threshold: f64,
}

/// Grows a tree over `rows` (duplicates allowed, as in bootstrap samples).
/// `n_candidates` features are sampled per node from the RNG when it is
/// fewer than the full width; with the full width no draws are consumed.
pub(super) fn grow(
    x: &super::Matrix,
    y: &[f64],
    rows: &[usize],
    params: &TreeParams,
    n_candidates: usize,
    mut rng: Option<&mut DetRng>,
) -> RegressionTree {
    assert!(!rows.is_empty(), "cannot grow a tree on zero rows");
    let q = x.n_cols();
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let mut stack = vec![WorkItem { rows: rows.to_vec(), depth: 0, slot: 0 }];
    let mut feat_buf: Vec<usize> = (0..q).collect();

    while let Some(item) = stack.pop() {
        let n = item.rows.len();
        let first_y = y[item.rows[0]];
        let pure = item.rows.iter().all(|&r| y[r] == first_y);
        let depth_ok = params.max_depth.map_or(true, |d| item.depth < d);

        let mut chosen = None;
        if !pure && depth_ok && n >= 2 * params.min_leaf {
            let feats: &[usize] = if n_candidates < q {
                let rng = rng
                    .as_deref_mut()
                    .expect("feature subsampling requires an RNG");
                sample_features(&mut feat_buf, n_candidates, rng)
            } else {
                feat_buf.sort_unstable();
                &feat_buf
            };
            chosen = best_split(x, y, &item.rows, feats, params.min_leaf);
        }

        match chosen {
            Some(split) => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = item
                    .rows
                    .iter()
                    .partition(|&&r| x.get(r, split.feature) <= split.threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                let right = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[item.slot] = Node::Split {
                    feature: split.feature,
                    threshold: split.threshold,
                    left,
                    right,
                };
                // Right pushed first so the left child is processed next.
                stack.push(WorkItem { rows: right_rows, depth: item.depth + 1, slot: right });
                stack.push(WorkItem { rows: left_rows, depth: item.depth + 1, slot: left });
            }
            None => {
                let value = if pure {
                    first_y
                } else {
                    item.rows.iter().map(|&r| y[r]).sum::<f64>() / n as f64
                };
                nodes[item.slot] = Node::Leaf { value };
            }
        }
    }
    RegressionTree { nodes }
}

/// Partial Fisher-Yates: draws `k` distinct feature indices into the front
/// of `buf`, then sorts them so the tie rule sees ascending features.
fn sample_features<'a>(buf: &'a mut [usize], k: usize, rng: &mut DetRng) -> &'a [usize] {
    let q = buf.len();
    buf.sort_unstable();
    for i in 0..k {
        let j = i + rng.next_below((q - i) as u64) as usize;
        buf.swap(i, j);
    }
    buf[..k].sort_unstable();
    &buf[..k]
}

fn best_split(
    x: &super::Matrix,
    y: &[f64],
    rows: &[usize],
    feats: &[usize],
    min_leaf: usize,
) -> Option<BestSplit> {
    let n = rows.len();
    let total: f64 = rows.iter().map(|&r| y[r]).sum();
    let parent_score = -(total * total / n as f64);

    let mut best: Option<BestSplit> = None;
    let mut order = rows.to_vec();
    for &f in feats {
        order.sort_unstable_by(|&a, &b| {
            x.get(a, f)
                .partial_cmp(&x.get(b, f))
                .expect("finite feature values")
                .then(a.cmp(&b))
        });
        let mut left_sum = 0.0;
        for i in 0..n - 1 {
            left_sum += y[order[i]];
            let lo = x.get(order[i], f);
            let hi = x.get(order[i + 1], f);
            if lo == hi {
                continue;
            }
            let n_left = i + 1;
            let n_right = n - n_left;
            if n_left < min_leaf || n_right < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            let score = -(left_sum * left_sum / n_left as f64
                + right_sum * right_sum / n_right as f64);
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(BestSplit { score, feature: f, threshold: (lo + hi) * 0.5 });
            }
        }
    }
    best.filter(|b| b.score < parent_score)
}
