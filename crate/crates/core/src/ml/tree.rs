//! CART-style decision trees and a bagged random forest, trained with the
//! Gini impurity criterion on bootstrap samples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Forest hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 25,
            max_depth: 10,
            min_leaf: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        class: u8,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict(&self, row: &[f64]) -> u8 {
        match self {
            TreeNode::Leaf { class } => *class,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.predict(row)
                } else {
                    right.predict(row)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomForest {
    pub trees: Vec<TreeNode>,
    pub params: ForestParams,
}

impl RandomForest {
    pub fn predict(&self, row: &[f64]) -> u8 {
        let positive = self.trees.iter().filter(|t| t.predict(row) == 1).count();
        u8::from(2 * positive > self.trees.len())
    }
}

fn gini(counts: [usize; 2]) -> f64 {
    let total = (counts[0] + counts[1]) as f64;
    if total == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / total;
    let p1 = counts[1] as f64 / total;
    1.0 - p0 * p0 - p1 * p1
}

fn majority(ys: &[u8]) -> u8 {
    let ones = ys.iter().filter(|&&y| y == 1).count();
    u8::from(2 * ones > ys.len())
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    max_depth: usize,
    min_leaf: usize,
    n_features_per_split: usize,
}

impl TreeBuilder<'_> {
    fn build(&self, indices: &[usize], depth: usize, rng: &mut ChaCha20Rng) -> TreeNode {
        let ys: Vec<u8> = indices.iter().map(|&i| self.y[i]).collect();
        let ones = ys.iter().filter(|&&y| y == 1).count();
        if depth >= self.max_depth
            || indices.len() < 2 * self.min_leaf
            || ones == 0
            || ones == ys.len()
        {
            return TreeNode::Leaf {
                class: majority(&ys),
            };
        }

        let n_features = self.x[0].len();
        let mut feature_pool: Vec<usize> = (0..n_features).collect();
        feature_pool.shuffle(rng);
        feature_pool.truncate(self.n_features_per_split);
        feature_pool.sort_unstable();

        let mut best: Option<(f64, usize, f64)> = None; // (impurity, feature, threshold)
        for &feat in &feature_pool {
            let mut vals: Vec<(f64, u8)> = indices
                .iter()
                .map(|&i| (self.x[i][feat], self.y[i]))
                .collect();
            vals.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total_ones = ones;
            let n = vals.len();
            let mut left_counts = [0usize; 2];
            for w in 0..n - 1 {
                left_counts[vals[w].1 as usize] += 1;
                if vals[w].0 == vals[w + 1].0 {
                    continue;
                }
                let left_n = w + 1;
                let right_counts = [
                    (n - total_ones) - left_counts[0],
                    total_ones - left_counts[1],
                ];
                if left_n < self.min_leaf || n - left_n < self.min_leaf {
                    continue;
                }
                let impurity = (left_n as f64 * gini(left_counts)
                    + (n - left_n) as f64 * gini(right_counts))
                    / n as f64;
                let threshold = (vals[w].0 + vals[w + 1].0) / 2.0;
                if best.is_none_or(|(b, _, _)| impurity < b) {
                    best = Some((impurity, feat, threshold));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return TreeNode::Leaf {
                class: majority(&ys),
            };
        };
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
            .iter()
            .partition(|&&i| self.x[i][feature] <= threshold);
        if left_idx.is_empty() || right_idx.is_empty() {
            return TreeNode::Leaf {
                class: majority(&ys),
            };
        }
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.build(&left_idx, depth + 1, rng)),
            right: Box::new(self.build(&right_idx, depth + 1, rng)),
        }
    }
}

/// Fit a random forest. Deterministic given the seed: per-tree RNG streams
/// derive from the master seed.
pub fn fit_forest(x: &[Vec<f64>], y: &[u8], params: &ForestParams) -> RandomForest {
    let n = x.len();
    let n_features = x[0].len();
    let per_split = ((n_features as f64).sqrt().round() as usize).clamp(1, n_features);
    let builder = TreeBuilder {
        x,
        y,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        n_features_per_split: per_split,
    };
    let trees = (0..params.n_trees)
        .map(|t| {
            let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
            rng.set_stream(t as u64 + 1);
            let bootstrap: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n)).collect();
            builder.build(&bootstrap, 0, &mut rng)
        })
        .collect();
    RandomForest {
        trees,
        params: params.clone(),
    }
}
