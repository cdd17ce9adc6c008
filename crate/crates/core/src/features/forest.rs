//! Random forest of CART classification trees grown on Gini impurity.
//!
//! Every tree sees a bootstrap sample of the rows and draws `⌈√d⌉`
//! candidate features at each node. Trees are grown until their leaves are
//! pure or hold fewer than two samples. Tree `t` uses stream `t` of a ChaCha
//! generator keyed by the forest seed, so the forest is identical no matter
//! how many threads build it.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `1 − p₀² − p₁²` of a binary label multiset.
pub fn gini(labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Data("gini impurity of an empty set".into()));
    }
    let ones = labels.iter().filter(|&&l| l == 1).count();
    Ok(gini_counts(labels.len() - ones, ones))
}

fn gini_counts(n0: usize, n1: usize) -> f64 {
    let n = (n0 + n1) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (p0, p1) = (n0 as f64 / n, n1 as f64 / n);
    1.0 - p0 * p0 - p1 * p1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        left: usize,
        right: usize,
        samples: usize,
        impurity: f64,
    },
    Leaf {
        /// Class counts `[negatives, positives]` of the bootstrap rows that landed here.
        counts: [usize; 2],
        impurity: f64,
    },
}

impl Node {
    pub fn samples(&self) -> usize {
        match self {
            Node::Split { samples, .. } => *samples,
            Node::Leaf { counts, .. } => counts[0] + counts[1],
        }
    }

    pub fn impurity(&self) -> f64 {
        match self {
            Node::Split { impurity, .. } | Node::Leaf { impurity, .. } => *impurity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_for(&self, row: &[f64]) -> &Node {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                leaf => return leaf,
            }
        }
    }

    /// Fraction of positive training rows in the leaf reached by `row`.
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        match self.leaf_for(row) {
            Node::Leaf { counts, .. } => counts[1] as f64 / (counts[0] + counts[1]).max(1) as f64,
            Node::Split { .. } => unreachable!(),
        }
    }

    /// Mean decrease in impurity per feature, weighted by node share of the root.
    fn impurity_decrease(&self, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        let root = self.nodes[0].samples().max(1) as f64;
        for node in &self.nodes {
            if let Node::Split {
                feature,
                left,
                right,
                samples,
                impurity,
                ..
            } = node
            {
                let n = *samples as f64;
                let (l, r) = (&self.nodes[*left], &self.nodes[*right]);
                let children = (l.samples() as f64 * l.impurity() + r.samples() as f64 * r.impurity()) / n;
                out[*feature] += (impurity - children) * (n / root);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub seed: u64,
    /// Out-of-bag accuracy over rows left out by at least one tree.
    pub oob_accuracy: Option<f64>,
}

struct Builder<'a> {
    x: &'a [f64],
    y: &'a [u8],
    d: usize,
    n_candidates: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> [usize; 2] {
        let ones = idx.iter().filter(|&&i| self.y[i] == 1).count();
        [idx.len() - ones, ones]
    }

    fn best_split(&self, idx: &[usize], parent: f64, rng: &mut ChaCha8Rng) -> Option<BestSplit> {
        let mut feats = sample(rng, self.d, self.n_candidates).into_vec();
        feats.sort_unstable();
        let n = idx.len();
        let [t0, t1] = self.counts(idx);
        let mut best: Option<BestSplit> = None;
        let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(n);
        for f in feats {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x[i * self.d + f], self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            let (mut l0, mut l1) = (0usize, 0usize);
            for k in 0..n - 1 {
                if pairs[k].1 == 1 { l1 += 1 } else { l0 += 1 }
                let (lo, hi) = (pairs[k].0, pairs[k + 1].0);
                if lo == hi {
                    continue;
                }
                let nl = (k + 1) as f64;
                let nr = (n - k - 1) as f64;
                let weighted = (nl * gini_counts(l0, l1) + nr * gini_counts(t0 - l0, t1 - l1)) / n as f64;
                let gain = parent - weighted;
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mid = 0.5 * (lo + hi);
                    let threshold = if mid < hi { mid } else { lo };
                    best = Some(BestSplit {
                        feature: f,
                        threshold,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&self, rows: Vec<usize>, rng: &mut ChaCha8Rng) -> Tree {
        let mut nodes: Vec<Node> = Vec::new();
        // (node slot, rows reaching it)
        let mut stack: Vec<(usize, Vec<usize>)> = Vec::new();
        nodes.push(Node::Leaf {
            counts: [0, 0],
            impurity: 0.0,
        });
        stack.push((0, rows));
        while let Some((slot, idx)) = stack.pop() {
            let counts = self.counts(&idx);
            let impurity = gini_counts(counts[0], counts[1]);
            let pure = counts[0] == 0 || counts[1] == 0;
            let split = if pure || idx.len() < 2 {
                None
            } else {
                self.best_split(&idx, impurity, rng)
            };
            match split {
                None => nodes[slot] = Node::Leaf { counts, impurity },
                Some(s) => {
                    let (left, right): (Vec<usize>, Vec<usize>) =
                        idx.iter().partition(|&&i| self.x[i * self.d + s.feature] <= s.threshold);
                    let l = nodes.len();
                    nodes.push(Node::Leaf {
                        counts: [0, 0],
                        impurity: 0.0,
                    });
                    nodes.push(Node::Leaf {
                        counts: [0, 0],
                        impurity: 0.0,
                    });
                    nodes[slot] = Node::Split {
                        feature: s.feature,
                        threshold: s.threshold,
                        left: l,
                        right: l + 1,
                        samples: idx.len(),
                        impurity,
                    };
                    stack.push((l + 1, right));
                    stack.push((l, left));
                }
            }
        }
        Tree { nodes }
    }
}

/// Fits a forest on `x` (`m × d`) and binary labels `y`.
pub fn train_random_forest(x: &Tensor, y: &[u8], n_trees: usize, seed: u64) -> Result<Forest> {
    let (m, d) = (x.rows(), x.cols());
    if x.shape().len() != 2 || m != y.len() {
        return Err(Error::Dimension(format!(
            "forest inputs: X shape {:?} but {} labels",
            x.shape(),
            y.len()
        )));
    }
    if m < 2 || d == 0 {
        return Err(Error::Data(format!("forest needs at least 2 rows and 1 feature, got {m}×{d}")));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(Error::Data("labels must be 0 or 1".into()));
    }
    let ones = y.iter().filter(|&&l| l == 1).count();
    if ones == 0 || ones == m {
        return Err(Error::Data("degenerate labels: only one class present".into()));
    }
    if n_trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let builder = Builder {
        x: x.values(),
        y,
        d,
        n_candidates: ((d as f64).sqrt().ceil() as usize).clamp(1, d),
    };
    let grown: Vec<(Tree, Vec<bool>)> = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let rows: Vec<usize> = (0..m).map(|_| rng.gen_range(0..m)).collect();
            let mut in_bag = vec![false; m];
            rows.iter().for_each(|&i| in_bag[i] = true);
            (builder.grow(rows, &mut rng), in_bag)
        })
        .collect();

    let mut votes = vec![(0.0, 0usize); m];
    for (tree, in_bag) in &grown {
        for i in (0..m).filter(|&i| !in_bag[i]) {
            votes[i].0 += tree.predict_proba(x.row(i));
            votes[i].1 += 1;
        }
    }
    let scored: Vec<(usize, bool)> = votes
        .iter()
        .enumerate()
        .filter(|(_, v)| v.1 > 0)
        .map(|(i, v)| (i, (v.0 / v.1 as f64 > 0.5) == (y[i] == 1)))
        .collect();
    let oob_accuracy = (!scored.is_empty())
        .then(|| scored.iter().filter(|s| s.1).count() as f64 / scored.len() as f64);

    Ok(Forest {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        n_features: d,
        seed,
        oob_accuracy,
    })
}

impl Forest {
    pub fn predict_proba(&self, row: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict_proba(row)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict(&self, row: &[f64]) -> u8 {
        u8::from(self.predict_proba(row) > 0.5)
    }
}

/// Mean-decrease-in-impurity importances, averaged over trees and
/// normalized to sum to one. A forest without a single split yields a
/// uniform vector.
pub fn feature_importances(forest: &Forest) -> Vec<f64> {
    let d = forest.n_features;
    let mut total = vec![0.0; d];
    for tree in &forest.trees {
        for (acc, v) in total.iter_mut().zip(tree.impurity_decrease(d)) {
            *acc += v;
        }
    }
    let n_trees = forest.trees.len().max(1) as f64;
    total.iter_mut().for_each(|v| *v = (*v / n_trees).max(0.0));
    let sum: f64 = total.iter().sum();
    if sum > 0.0 {
        total.iter_mut().for_each(|v| *v /= sum);
    } else {
        total.fill(1.0 / d as f64);
    }
    total
}
