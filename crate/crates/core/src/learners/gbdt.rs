//! Gradient-boosted regression trees on the weighted logistic objective.
//!
//! Each row carries a positive weight `w⁺` and a negative weight `w⁻`, i.e.
//! two virtual instances `(x, 1)` and `(x, 0)`. With `p = σ(margin)` their
//! summed gradient and hessian with respect to the margin are
//! `g = (w⁺ + w⁻) p - w⁺` and `h = (w⁺ + w⁻) p (1 - p)`.
//!
//! Trees grow level by level with exact greedy split search over sorted
//! distinct values. A split sends `x <= threshold` left, where `threshold` is
//! a value seen in training, so any strictly increasing feature map yields the
//! same partitions. Gain ties go to the lower feature index, then the lower
//! threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtParams {
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub l2_leaf_penalty: f64,
    pub min_child_weight: f64,
    pub seed: u64,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            rounds: 100,
            max_depth: 6,
            learning_rate: 0.3,
            l2_leaf_penalty: 1.0,
            min_child_weight: 1.0,
            seed: 0,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::invalid("gbdt max_depth must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("gbdt learning_rate must be positive"));
        }
        if !(self.l2_leaf_penalty >= 0.0) || !(self.min_child_weight >= 0.0) {
            return Err(Error::invalid("gbdt l2_leaf_penalty and min_child_weight must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
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
    pub fn leaf_value(&self, x: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if x[*feature] <= *threshold { left } else { right },
            }
        }
    }

    pub fn count_nodes(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => 1 + left.count_nodes() + right.count_nodes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub learning_rate: f64,
    pub base_margin: f64,
    pub trees: Vec<TreeNode>,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl GbdtModel {
    pub fn margin(&self, x: &[f64]) -> f64 {
        let mut m = self.base_margin;
        for tree in &self.trees {
            m += self.learning_rate * tree.leaf_value(x);
        }
        m
    }

    pub fn predict_row(&self, x: &[f64]) -> f64 {
        sigmoid(self.margin(x))
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Stats {
    g: f64,
    h: f64,
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

enum FlatNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

/// Relative size below which a split gain is treated as rounding noise.
const GAIN_EPSILON: f64 = 1e-12;

fn score(s: Stats, lambda: f64) -> f64 {
    let denom = s.h + lambda;
    if denom > 0.0 {
        s.g * s.g / denom
    } else {
        0.0
    }
}

fn leaf_weight(s: Stats, lambda: f64) -> f64 {
    let denom = s.h + lambda;
    if denom > 0.0 {
        -s.g / denom
    } else {
        0.0
    }
}

fn into_tree(nodes: &[FlatNode], at: usize) -> TreeNode {
    match nodes[at] {
        FlatNode::Leaf(value) => TreeNode::Leaf { value },
        FlatNode::Split {
            feature,
            threshold,
            left,
            right,
        } => TreeNode::Split {
            feature,
            threshold,
            left: Box::new(into_tree(nodes, left)),
            right: Box::new(into_tree(nodes, right)),
        },
    }
}

/// Fits a booster on the row-major `n × p` matrix `x`.
pub fn fit(params: &GbdtParams, x: &[f64], p: usize, w_pos: &[f64], w_neg: &[f64]) -> Result<GbdtModel> {
    params.validate()?;
    let n = w_pos.len();
    if w_neg.len() != n || x.len() != n * p {
        return Err(Error::LengthMismatch {
            expected: n,
            found: w_neg.len(),
        });
    }
    let lambda = params.l2_leaf_penalty;
    let mcw = params.min_child_weight;

    // Row indices sorted by each feature; stable so equal values keep row order.
    let sorted: Vec<Vec<u32>> = (0..p)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| {
                x[a as usize * p + f]
                    .partial_cmp(&x[b as usize * p + f])
                    .expect("finite features")
            });
            idx
        })
        .collect();

    let mut margins = vec![0.0; n];
    let mut grad = vec![Stats::default(); n];
    let mut trees = Vec::with_capacity(params.rounds);
    let mut node_of = vec![0usize; n];

    for _ in 0..params.rounds {
        for i in 0..n {
            let prob = sigmoid(margins[i]);
            let total = w_pos[i] + w_neg[i];
            grad[i] = Stats {
                g: total * prob - w_pos[i],
                h: total * prob * (1.0 - prob),
            };
        }

        let mut nodes: Vec<FlatNode> = vec![FlatNode::Leaf(0.0)];
        let mut node_stats = vec![Stats::default()];
        for s in &grad {
            node_stats[0].g += s.g;
            node_stats[0].h += s.h;
        }
        node_of.iter_mut().for_each(|v| *v = 0);
        let mut active: Vec<usize> = vec![0];

        for _depth in 0..params.max_depth {
            if active.is_empty() {
                break;
            }
            // level slot of each node id, usize::MAX when inactive
            let mut slot = vec![usize::MAX; nodes.len()];
            for (k, &id) in active.iter().enumerate() {
                slot[id] = k;
            }
            let mut best: Vec<Option<Candidate>> = vec![None; active.len()];
            let mut left_acc = vec![Stats::default(); active.len()];
            let mut last: Vec<Option<f64>> = vec![None; active.len()];

            for (f, order) in sorted.iter().enumerate() {
                left_acc.iter_mut().for_each(|s| *s = Stats::default());
                last.iter_mut().for_each(|v| *v = None);
                for &r in order {
                    let r = r as usize;
                    let k = slot[node_of[r]];
                    if k == usize::MAX {
                        continue;
                    }
                    let v = x[r * p + f];
                    if let Some(prev) = last[k] {
                        if v != prev {
                            let total = node_stats[active[k]];
                            let left = left_acc[k];
                            let right = Stats {
                                g: total.g - left.g,
                                h: total.h - left.h,
                            };
                            if left.h >= mcw && right.h >= mcw {
                                let (sl, sr, st) = (score(left, lambda), score(right, lambda), score(total, lambda));
                                let gain = sl + sr - st;
                                // Differences at rounding level are not real: a
                                // gain that small counts as zero, and candidates
                                // that close are ties (the incumbent, with the
                                // lower feature and threshold, keeps the split).
                                // Partitions reached through different features
                                // sum their rows in different orders.
                                let noise = GAIN_EPSILON * (sl + sr + st);
                                if gain > noise && best[k].is_none_or(|b| gain - b.gain > noise) {
                                    best[k] = Some(Candidate {
                                        gain,
                                        feature: f,
                                        threshold: prev,
                                    });
                                }
                            }
                        }
                    }
                    left_acc[k].g += grad[r].g;
                    left_acc[k].h += grad[r].h;
                    last[k] = Some(v);
                }
            }

            let mut next = Vec::new();
            let mut child_of: Vec<Option<(usize, usize, usize, f64)>> = vec![None; active.len()];
            for (k, &id) in active.iter().enumerate() {
                if let Some(c) = best[k] {
                    let left = nodes.len();
                    nodes.push(FlatNode::Leaf(0.0));
                    nodes.push(FlatNode::Leaf(0.0));
                    node_stats.push(Stats::default());
                    node_stats.push(Stats::default());
                    nodes[id] = FlatNode::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left,
                        right: left + 1,
                    };
                    child_of[k] = Some((left, left + 1, c.feature, c.threshold));
                    next.push(left);
                    next.push(left + 1);
                }
            }
            for r in 0..n {
                let k = slot[node_of[r]];
                if k == usize::MAX {
                    continue;
                }
                if let Some((l, rt, f, t)) = child_of[k] {
                    let child = if x[r * p + f] <= t { l } else { rt };
                    node_of[r] = child;
                    node_stats[child].g += grad[r].g;
                    node_stats[child].h += grad[r].h;
                }
            }
            active = next;
        }

        for (id, node) in nodes.iter_mut().enumerate() {
            if let FlatNode::Leaf(v) = node {
                *v = leaf_weight(node_stats[id], lambda);
            }
        }
        for r in 0..n {
            if let FlatNode::Leaf(v) = nodes[node_of[r]] {
                margins[r] += params.learning_rate * v;
            }
        }
        trees.push(into_tree(&nodes, 0));
    }

    Ok(GbdtModel {
        learning_rate: params.learning_rate,
        base_margin: 0.0,
        trees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rounds_predicts_one_half() {
        let params = GbdtParams {
            rounds: 0,
            ..GbdtParams::default()
        };
        let m = fit(&params, &[1.0, 2.0], 1, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(m.predict_row(&[1.0]), 0.5);
        assert_eq!(m.predict_row(&[123.0]), 0.5);
    }

    #[test]
    fn single_split_leaf_values() {
        // two rows, one split: each leaf has g = ±0.5, h = 0.25 at p = 0.5
        let params = GbdtParams {
            rounds: 1,
            max_depth: 1,
            learning_rate: 1.0,
            l2_leaf_penalty: 0.0,
            min_child_weight: 0.0,
            seed: 0,
        };
        let m = fit(&params, &[0.0, 1.0], 1, &[0.0, 1.0], &[1.0, 0.0]).unwrap();
        match &m.trees[0] {
            TreeNode::Split { threshold, left, right, .. } => {
                assert_eq!(*threshold, 0.0);
                assert_eq!(**left, TreeNode::Leaf { value: -2.0 });
                assert_eq!(**right, TreeNode::Leaf { value: 2.0 });
            }
            other => panic!("expected a split, got {other:?}"),
        }
    }

    #[test]
    fn min_child_weight_blocks_small_children() {
        let params = GbdtParams {
            rounds: 1,
            min_child_weight: 10.0,
            ..GbdtParams::default()
        };
        let m = fit(&params, &[0.0, 1.0, 2.0], 1, &[0.0, 1.0, 1.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(m.trees[0], TreeNode::Leaf { .. }));
    }

    #[test]
    fn gain_ties_prefer_lower_feature() {
        // features 0 and 1 are identical, so every candidate ties
        let x = [0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
        let params = GbdtParams {
            rounds: 1,
            max_depth: 1,
            min_child_weight: 0.0,
            ..GbdtParams::default()
        };
        let m = fit(&params, &x, 2, &[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(m.trees[0], TreeNode::Split { feature: 0, threshold, .. } if threshold == 1.0));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
