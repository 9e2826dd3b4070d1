//! Random forest of Gini-split decision trees over flattened feature vectors.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::argmax;
use crate::seed;
use crate::series::{flatten, Dataset};

/// `1 - sum p_c^2`; an empty histogram has impurity 0.
pub fn gini(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: Vec<usize>,
    },
}

/// Nodes in creation order; the root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf_for(&self, row: &[f64]) -> &[usize] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                TreeNode::Leaf { counts } => return counts,
            }
        }
    }

    /// Majority class of the reached leaf; ties go to the lowest class.
    pub fn predict(&self, row: &[f64]) -> usize {
        let counts = self.leaf_for(row);
        let mut best = 0;
        for (c, &v) in counts.iter().enumerate() {
            if v > counts[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features drawn per node; `None` is `floor(sqrt(F))`.
    pub mtry: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 500,
            mtry: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub n_features: usize,
    pub n_classes: usize,
    pub n_features_per_split: usize,
    pub seed: u64,
}

/// Row-major training data shared by every tree.
struct Training<'a> {
    x: &'a [f64],
    f: usize,
    y: &'a [usize],
    classes: usize,
    mtry: usize,
    /// Column read for each feature key; keys order the random draws and ties.
    keys: &'a [usize],
}

struct Best {
    key: usize,
    threshold: f64,
    score: f64,
}

impl Training<'_> {
    fn value(&self, i: usize, col: usize) -> f64 {
        self.x[i * self.f + col]
    }

    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Best midpoint split on one feature key. The score is
    /// `sum_l c^2 / n_l + sum_r c^2 / n_r`, which a Gini split maximizes.
    fn best_for_key(&self, idx: &[usize], key: usize, total: &[usize], pairs: &mut Vec<(f64, usize)>) -> Option<Best> {
        let col = self.keys[key];
        pairs.clear();
        pairs.extend(idx.iter().map(|&i| (self.value(i, col), self.y[i])));
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
        let n = pairs.len();
        let mut left = vec![0usize; self.classes];
        let mut right = total.to_vec();
        let mut sq_left = 0usize;
        let mut sq_right: usize = total.iter().map(|c| c * c).sum();
        let mut best: Option<Best> = None;
        for s in 0..n - 1 {
            let c = pairs[s].1;
            sq_left += 2 * left[c] + 1;
            left[c] += 1;
            sq_right -= 2 * right[c] - 1;
            right[c] -= 1;
            let (lo, hi) = (pairs[s].0, pairs[s + 1].0);
            if lo == hi {
                continue;
            }
            let nl = (s + 1) as f64;
            let score = sq_left as f64 / nl + sq_right as f64 / (n as f64 - nl);
            if best.as_ref().is_none_or(|b| score > b.score) {
                let mid = lo + (hi - lo) / 2.0;
                let threshold = if mid < hi { mid } else { lo };
                best = Some(Best { key, threshold, score });
            }
        }
        best
    }

    fn better(candidate: &Best, current: &Option<Best>) -> bool {
        match current {
            None => true,
            Some(b) => {
                candidate.score > b.score
                    || (candidate.score == b.score && (candidate.key, candidate.threshold) < (b.key, b.threshold))
            }
        }
    }

    fn grow(&self, sample_idx: Vec<usize>, rng: &mut seed::Rng) -> Tree {
        let mut nodes = Vec::new();
        let mut pairs = Vec::with_capacity(sample_idx.len());
        // (node slot, sample indices)
        let mut stack = vec![(0usize, sample_idx)];
        nodes.push(TreeNode::Leaf { counts: Vec::new() });
        while let Some((slot, idx)) = stack.pop() {
            let counts = self.counts(&idx);
            let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
            if pure || idx.len() < 2 {
                nodes[slot] = TreeNode::Leaf { counts };
                continue;
            }
            let mut keys: Vec<usize> = sample(rng, self.f, self.mtry).into_vec();
            keys.sort_unstable();
            let mut best: Option<Best> = None;
            for &k in &keys {
                if let Some(b) = self.best_for_key(&idx, k, &counts, &mut pairs) {
                    if Self::better(&b, &best) {
                        best = Some(b);
                    }
                }
            }
            if best.is_none() {
                // Every drawn feature is constant here: fall back to the rest.
                for k in (0..self.f).filter(|k| keys.binary_search(k).is_err()) {
                    if let Some(b) = self.best_for_key(&idx, k, &counts, &mut pairs) {
                        if Self::better(&b, &best) {
                            best = Some(b);
                        }
                    }
                }
            }
            let Some(best) = best else {
                nodes[slot] = TreeNode::Leaf { counts };
                continue;
            };
            let col = self.keys[best.key];
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.value(i, col) <= best.threshold);
            let left = nodes.len();
            nodes.push(TreeNode::Leaf { counts: Vec::new() });
            let right = nodes.len();
            nodes.push(TreeNode::Leaf { counts: Vec::new() });
            nodes[slot] = TreeNode::Split {
                feature: col,
                threshold: best.threshold,
                left,
                right,
            };
            stack.push((right, r));
            stack.push((left, l));
        }
        Tree { nodes }
    }
}

pub fn default_mtry(n_features: usize) -> usize {
    ((n_features as f64).sqrt().floor() as usize).max(1)
}

/// Fits on row-major `x` (`y.len()` rows of `n_features`). Each tree draws a
/// bootstrap of `n` rows and grows to purity or single-sample nodes.
pub fn fit_forest(
    x: &[f64],
    n_features: usize,
    y: &[usize],
    n_classes: usize,
    cfg: &ForestConfig,
) -> Result<ForestModel> {
    let keys: Vec<usize> = (0..n_features).collect();
    fit_forest_keyed(x, n_features, y, n_classes, cfg, &keys)
}

/// As [`fit_forest`], reading column `keys[k]` wherever the random feature
/// draws and tie-breaks refer to feature `k`.
pub fn fit_forest_keyed(
    x: &[f64],
    n_features: usize,
    y: &[usize],
    n_classes: usize,
    cfg: &ForestConfig,
    keys: &[usize],
) -> Result<ForestModel> {
    let n = y.len();
    if n == 0 {
        return Err(Error::InvalidInput(
            "cannot fit a forest on an empty training set".into(),
        ));
    }
    if n_features == 0 || x.len() != n * n_features || keys.len() != n_features {
        return Err(Error::Shape(format!(
            "{} values for {n} rows of {n_features} features",
            x.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::InvalidInput(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    if cfg.n_trees == 0 {
        return Err(Error::InvalidInput("a forest needs at least one tree".into()));
    }
    let mtry = cfg
        .mtry
        .unwrap_or_else(|| default_mtry(n_features))
        .clamp(1, n_features);
    let training = Training {
        x,
        f: n_features,
        y,
        classes: n_classes,
        mtry,
        keys,
    };
    let trees = (0..cfg.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seed::stream(cfg.seed, "tree", t as u64);
            let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            training.grow(boot, &mut rng)
        })
        .collect();
    Ok(ForestModel {
        trees,
        n_features,
        n_classes,
        n_features_per_split: mtry,
        seed: cfg.seed,
    })
}

/// Row-major feature matrix of a fully valid dataset.
pub fn feature_matrix(dataset: &Dataset) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(dataset.len() * dataset.n_timesteps() * dataset.n_channels());
    for s in dataset.samples() {
        x.extend(flatten(&s.series)?);
    }
    Ok(x)
}

pub fn fit_forest_dataset(train: &Dataset, cfg: &ForestConfig) -> Result<ForestModel> {
    let x = feature_matrix(train)?;
    let f = train.n_timesteps() * train.n_channels();
    fit_forest(&x, f, &train.labels(), train.n_classes(), cfg)
}

pub const FOREST_HEADER: &str = "tempcnn-forest";
pub const FOREST_FORMAT_VERSION: u32 = 1;

impl ForestModel {
    /// Number of trees voting for each class.
    pub fn vote_counts(&self, row: &[f64]) -> Vec<usize> {
        let mut votes = vec![0; self.n_classes];
        for t in &self.trees {
            votes[t.predict(row)] += 1;
        }
        votes
    }

    /// Majority vote; ties go to the lowest class.
    pub fn predict_row(&self, row: &[f64]) -> usize {
        let votes: Vec<f64> = self.vote_counts(row).iter().map(|&v| v as f64).collect();
        argmax(&votes)
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<usize>> {
        if !x.len().is_multiple_of(self.n_features) {
            return Err(Error::Shape(format!(
                "{} values are not rows of {} features",
                x.len(),
                self.n_features
            )));
        }
        Ok(x.par_chunks(self.n_features).map(|r| self.predict_row(r)).collect())
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<usize>> {
        self.predict(&feature_matrix(dataset)?)
    }

    /// Versioned text: a header block, a metadata JSON line, then one node
    /// table per tree (`S feature threshold left right` or `L counts...`).
    pub fn to_text(&self, metadata: &serde_json::Value) -> String {
        let mut out = String::new();
        writeln!(out, "{FOREST_HEADER} {FOREST_FORMAT_VERSION}").unwrap();
        writeln!(out, "metadata {metadata}").unwrap();
        writeln!(
            out,
            "features {} classes {} mtry {} seed {} trees {}",
            self.n_features,
            self.n_classes,
            self.n_features_per_split,
            self.seed,
            self.trees.len()
        )
        .unwrap();
        for (i, t) in self.trees.iter().enumerate() {
            writeln!(out, "tree {i} {}", t.nodes.len()).unwrap();
            for node in &t.nodes {
                match node {
                    TreeNode::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => writeln!(out, "S {feature} {threshold:?} {left} {right}").unwrap(),
                    TreeNode::Leaf { counts } => {
                        out.push('L');
                        for c in counts {
                            write!(out, " {c}").unwrap();
                        }
                        out.push('\n');
                    }
                }
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<(Self, serde_json::Value)> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Format(format!("forest file ends before {what}")))
        };
        let bad = |line: usize, msg: &str| Error::Format(format!("forest line {}: {msg}", line + 1));
        let (ln, header) = next("header")?;
        if header != format!("{FOREST_HEADER} {FOREST_FORMAT_VERSION}") {
            return Err(bad(ln, "not a version-1 forest file"));
        }
        let (ln, meta) = next("metadata")?;
        let metadata: serde_json::Value = meta
            .strip_prefix("metadata ")
            .and_then(|m| serde_json::from_str(m).ok())
            .ok_or_else(|| bad(ln, "bad metadata line"))?;
        let (ln, dims) = next("dimensions")?;
        let fields: Vec<&str> = dims.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> {
            fields
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(ln, "bad dimensions line"))
        };
        if fields.len() != 10 {
            return Err(bad(ln, "bad dimensions line"));
        }
        let (n_features, n_classes, mtry, seed, n_trees) = (num(1)?, num(3)?, num(5)?, num(7)? as u64, num(9)?);
        let mut trees = Vec::with_capacity(n_trees);
        for t in 0..n_trees {
            let (ln, head) = next("tree header")?;
            let count: usize = head
                .strip_prefix(&format!("tree {t} "))
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad(ln, "bad tree header"))?;
            let mut nodes = Vec::with_capacity(count);
            for _ in 0..count {
                let (ln, line) = next("node")?;
                let f: Vec<&str> = line.split_whitespace().collect();
                let node = match f.first() {
                    Some(&"S") if f.len() == 5 => {
                        let p = |i: usize| f[i].parse::<usize>().map_err(|_| bad(ln, "bad split"));
                        let threshold: f64 = f[2].parse().map_err(|_| bad(ln, "bad threshold"))?;
                        let (feature, left, right) = (p(1)?, p(3)?, p(4)?);
                        if feature >= n_features || left >= count || right >= count {
                            return Err(bad(ln, "split index out of range"));
                        }
                        TreeNode::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        }
                    }
                    Some(&"L") if f.len() == n_classes + 1 => TreeNode::Leaf {
                        counts: f[1..]
                            .iter()
                            .map(|v| v.parse().map_err(|_| bad(ln, "bad leaf count")))
                            .collect::<Result<_>>()?,
                    },
                    _ => return Err(bad(ln, "bad node")),
                };
                nodes.push(node);
            }
            trees.push(Tree { nodes });
        }
        if lines.next().is_some() {
            return Err(Error::Format("trailing data after forest".into()));
        }
        Ok((
            ForestModel {
                trees,
                n_features,
                n_classes,
                n_features_per_split: mtry,
                seed,
            },
            metadata,
        ))
    }
}
