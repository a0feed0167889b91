//! CART classification trees on Gini impurity, mean-decrease-in-impurity
//! importances and a bagged forest.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_f64, read_to_string, write_csv_with};
use crate::matrix::Matrix;
use crate::rng::{derive_indexed, Rng};

pub const DEFAULT_MAX_DEPTH: usize = 12;
pub const DEFAULT_MIN_LEAF: usize = 5;
pub const DEFAULT_N_TREES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Leaf {
        class_counts: Vec<usize>,
    },
    Split {
        feature: usize,
        /// Rows with `x[feature] <= threshold` go left.
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
        n_samples: usize,
        impurity_decrease: f64,
    },
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self, TreeNode::Leaf { .. })
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn leaf_counts(&self, row: &[f64]) -> &[usize] {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { class_counts } => return class_counts,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }
}

/// Index of the largest count; ties go to the lower class.
fn argmax_low(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeParams {
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `None` examines all of them.
    pub features_per_split: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            max_depth: DEFAULT_MAX_DEPTH,
            min_leaf: DEFAULT_MIN_LEAF,
            features_per_split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub root: TreeNode,
    pub n_features: usize,
    pub n_classes: usize,
    pub n_train: usize,
}

impl DecisionTree {
    pub fn predict_row(&self, row: &[f64]) -> usize {
        argmax_low(self.root.leaf_counts(row))
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        x.rows().map(|r| self.predict_row(r)).collect()
    }

    /// Normalized mean decrease in impurity per input column. All zeros when
    /// the tree never splits.
    pub fn feature_importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        let mut stack = vec![&self.root];
        while let Some(node) = stack.pop() {
            if let TreeNode::Split {
                feature,
                left,
                right,
                n_samples,
                impurity_decrease,
                ..
            } = node
            {
                imp[*feature] += *n_samples as f64 / self.n_train as f64 * impurity_decrease;
                stack.push(left);
                stack.push(right);
            }
        }
        normalize(&mut imp);
        imp
    }
}

fn normalize(v: &mut [f64]) {
    let total: f64 = v.iter().sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x /= total);
    }
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a [usize],
    n_classes: usize,
    params: TreeParams,
    rng: Option<Rng>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    decrease: f64,
}

impl Builder<'_> {
    fn counts(&self, idx: &[usize]) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize) -> TreeNode {
        let counts = self.counts(&idx);
        let n = idx.len();
        let parent = gini(&counts, n);
        if depth >= self.params.max_depth || parent <= 0.0 || n < 2 * self.params.min_leaf {
            return TreeNode::Leaf {
                class_counts: counts,
            };
        }
        let Some(best) = self.best_split(&idx, &counts, parent) else {
            return TreeNode::Leaf {
                class_counts: counts,
            };
        };
        let (left, right): (Vec<usize>, Vec<usize>) = idx
            .iter()
            .partition(|&&i| self.x.get(i, best.feature) <= best.threshold);
        TreeNode::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: Box::new(self.build(left, depth + 1)),
            right: Box::new(self.build(right, depth + 1)),
            n_samples: n,
            impurity_decrease: best.decrease,
        }
    }

    fn best_split(&mut self, idx: &[usize], counts: &[usize], parent: f64) -> Option<Candidate> {
        let d = self.x.n_cols();
        let mut order: Vec<usize> = (0..d).collect();
        let wanted = match (&mut self.rng, self.params.features_per_split) {
            (Some(rng), Some(m)) => {
                rng.shuffle(&mut order);
                m.clamp(1, d)
            }
            _ => d,
        };

        let n = idx.len();
        let min_leaf = self.params.min_leaf.max(1);
        // Draw features until `wanted` non-constant ones are found, then scan
        // them in index order so tie-breaking does not depend on the draw.
        let mut chosen = Vec::with_capacity(wanted);
        for &f in &order {
            if chosen.len() >= wanted {
                break;
            }
            let first = self.x.get(idx[0], f);
            if idx.iter().any(|&i| self.x.get(i, f) != first) {
                chosen.push(f);
            }
        }
        chosen.sort_unstable();

        let mut best: Option<Candidate> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
        for f in chosen {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x.get(i, f), self.y[i])));
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

            let mut left = vec![0usize; self.n_classes];
            let mut left_sq = 0.0f64;
            let mut right_sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
            let mut right = counts.to_vec();
            for i in 0..n - 1 {
                let cls = pairs[i].1;
                left_sq += (2 * left[cls] + 1) as f64;
                left[cls] += 1;
                right_sq -= (2 * right[cls] - 1) as f64;
                right[cls] -= 1;
                let nl = i + 1;
                let nr = n - nl;
                if pairs[i].0 == pairs[i + 1].0 || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let gl = 1.0 - left_sq / (nl * nl) as f64;
                let gr = 1.0 - right_sq / (nr * nr) as f64;
                let child = (nl as f64 * gl + nr as f64 * gr) / n as f64;
                let decrease = (parent - child).max(0.0);
                if best.as_ref().is_none_or(|b| decrease > b.decrease) {
                    best = Some(Candidate {
                        feature: f,
                        threshold: 0.5 * (pairs[i].0 + pairs[i + 1].0),
                        decrease,
                    });
                }
            }
        }
        best
    }
}

fn check_xy(x: &Matrix, y: &[usize], n_classes: usize) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Data("no training labels".into()));
    }
    if x.n_rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            x.n_rows(),
            y.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!(
            "label {bad} outside 0..{n_classes}"
        )));
    }
    Ok(())
}

fn fit_with_rng(
    x: &Matrix,
    y: &[usize],
    n_classes: usize,
    params: TreeParams,
    idx: Vec<usize>,
    rng: Option<Rng>,
) -> DecisionTree {
    let n_train = idx.len();
    let mut b = Builder {
        x,
        y,
        n_classes,
        params,
        rng,
    };
    DecisionTree {
        root: b.build(idx, 0),
        n_features: x.n_cols(),
        n_classes,
        n_train,
    }
}

/// Greedy CART on Gini impurity. Splits with zero impurity decrease are
/// accepted while the node is impure, so XOR-like patterns still resolve.
pub fn fit_tree(x: &Matrix, y: &[usize], n_classes: usize, params: TreeParams) -> Result<DecisionTree> {
    check_xy(x, y, n_classes)?;
    if params.min_leaf == 0 || x.n_rows() < 2 * params.min_leaf {
        return Err(Error::Config(format!(
            "need at least 2*min_leaf rows (min_leaf {}, rows {})",
            params.min_leaf,
            x.n_rows()
        )));
    }
    let rng = params.features_per_split.map(|_| Rng::new(0));
    Ok(fit_with_rng(x, y, n_classes, params, (0..x.n_rows()).collect(), rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Defaults to `ceil(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: DEFAULT_N_TREES,
            features_per_split: None,
            max_depth: DEFAULT_MAX_DEPTH,
            min_leaf: DEFAULT_MIN_LEAF,
            bootstrap: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub n_trees: usize,
    pub features_per_split: usize,
    pub seed: u64,
    pub n_classes: usize,
}

pub fn fit_forest(x: &Matrix, y: &[usize], n_classes: usize, params: ForestParams) -> Result<ForestModel> {
    check_xy(x, y, n_classes)?;
    if params.n_trees == 0 {
        return Err(Error::Config("forest needs at least one tree".into()));
    }
    let d = x.n_cols();
    let mtry = params
        .features_per_split
        .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
        .clamp(1, d.max(1));
    let tree_params = TreeParams {
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
        features_per_split: Some(mtry),
    };
    let n = x.n_rows();
    let trees = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = Rng::new(derive_indexed(params.seed, t as u64));
            let idx = if params.bootstrap {
                (0..n).map(|_| rng.below(n)).collect()
            } else {
                (0..n).collect()
            };
            fit_with_rng(x, y, n_classes, tree_params, idx, Some(rng))
        })
        .collect();
    Ok(ForestModel {
        trees,
        n_trees: params.n_trees,
        features_per_split: mtry,
        seed: params.seed,
        n_classes,
    })
}

impl ForestModel {
    /// Majority vote; ties go to the lower class index.
    pub fn predict_row(&self, row: &[f64]) -> usize {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict_row(row)] += 1;
        }
        argmax_low(&votes)
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        (0..x.n_rows())
            .into_par_iter()
            .map(|r| self.predict_row(x.row(r)))
            .collect()
    }

    pub fn feature_importance(&self) -> Vec<f64> {
        let d = self.trees[0].n_features;
        let mut acc = vec![0.0; d];
        for t in &self.trees {
            for (a, v) in acc.iter_mut().zip(t.feature_importance()) {
                *a += v;
            }
        }
        normalize(&mut acc);
        acc
    }
}

/// Sum encoded-column importances back onto their source columns, in order
/// of first appearance.
pub fn aggregate_importance(importance: &[f64], sources: &[(String, String)]) -> Result<Vec<(String, f64)>> {
    if importance.len() != sources.len() {
        return Err(Error::Shape(format!(
            "{} importances for {} columns",
            importance.len(),
            sources.len()
        )));
    }
    let mut out: Vec<(String, f64)> = Vec::new();
    for (v, (_, src)) in importance.iter().zip(sources) {
        match out.iter_mut().find(|(n, _)| n == src) {
            Some((_, acc)) => *acc += v,
            None => out.push((src.clone(), *v)),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRank {
    pub feature: String,
    pub importance: f64,
    /// 1-based.
    pub rank: usize,
}

/// Descending importance, ties by name.
pub fn rank_features(importances: &[(String, f64)]) -> Vec<FeatureRank> {
    let mut v = importances.to_vec();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v.into_iter()
        .enumerate()
        .map(|(i, (feature, importance))| FeatureRank {
            feature,
            importance,
            rank: i + 1,
        })
        .collect()
}

/// Top `k` ranked features after dropping the compound-feature excludelist.
pub fn select_features(ranked: &[FeatureRank], excludelist: &[String], k: usize) -> Vec<String> {
    ranked
        .iter()
        .filter(|r| !excludelist.contains(&r.feature))
        .take(k)
        .map(|r| r.feature.clone())
        .collect()
}

pub fn write_importance_csv(path: &Path, ranked: &[FeatureRank]) -> Result<()> {
    write_csv_with(path, |w| {
        w.write_record(["feature", "importance", "rank"])?;
        for r in ranked {
            w.write_record([r.feature.clone(), fmt_f64(r.importance), r.rank.to_string()])?;
        }
        Ok(())
    })
}

/// Newline-delimited names; blank lines and `#` comments ignored.
pub fn read_excludelist(path: &Path) -> Result<Vec<String>> {
    Ok(parse_excludelist(&read_to_string(path)?))
}

pub fn parse_excludelist(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(min_leaf: usize) -> TreeParams {
        TreeParams {
            max_depth: 12,
            min_leaf,
            features_per_split: None,
        }
    }

    #[test]
    fn perfect_separator_single_split() {
        let x = Matrix::from_rows(&[
            vec![0.1, 5.0],
            vec![0.2, 1.0],
            vec![0.3, 3.0],
            vec![0.7, 2.0],
            vec![0.8, 4.0],
            vec![0.9, 0.0],
        ])
        .unwrap();
        let y = [0, 0, 0, 1, 1, 1];
        let t = fit_tree(&x, &y, 2, params(1)).unwrap();
        match &t.root {
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
                ..
            } => {
                assert_eq!(*feature, 0);
                assert!((threshold - 0.5).abs() < 1e-12);
                assert!(left.is_leaf() && right.is_leaf());
            }
            _ => panic!("expected a split"),
        }
        assert_eq!(t.feature_importance(), vec![1.0, 0.0]);
    }

    #[test]
    fn pure_input_is_leaf() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let t = fit_tree(&x, &[2, 2, 2], 3, params(1)).unwrap();
        assert!(t.root.is_leaf());
        assert_eq!(t.feature_importance(), vec![0.0]);
    }

    #[test]
    fn identical_rows_mixed_labels_majority_leaf() {
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]).unwrap();
        let t = fit_tree(&x, &[1, 0, 1], 2, params(1)).unwrap();
        assert_eq!(t.root, TreeNode::Leaf { class_counts: vec![1, 2] });
    }

    /// Every axis-aligned depth-2 tree over the four XOR corners, brute force.
    fn xor_oracle_best_accuracy(x: &[[f64; 2]], y: &[usize]) -> f64 {
        let mut best: f64 = 0.0;
        for f1 in 0..2 {
            for f2 in 0..2 {
                for f3 in 0..2 {
                    let leaf = |rows: &[usize]| {
                        let ones = rows.iter().filter(|&&r| y[r] == 1).count();
                        ones.max(rows.len() - ones)
                    };
                    let (l, r): (Vec<usize>, Vec<usize>) = (0..4).partition(|&i| x[i][f1] <= 0.5);
                    let split = |rows: &[usize], f: usize| {
                        let (a, b): (Vec<usize>, Vec<usize>) =
                            rows.iter().partition(|&&i| x[i][f] <= 0.5);
                        leaf(&a) + leaf(&b)
                    };
                    let correct = split(&l, f2).max(leaf(&l)) + split(&r, f3).max(leaf(&r));
                    best = best.max(correct as f64 / 4.0);
                }
            }
        }
        best
    }

    #[test]
    fn xor_resolves_at_depth_two() {
        let pts = [[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]];
        let y = [0, 1, 1, 0];
        assert_eq!(xor_oracle_best_accuracy(&pts, &y), 1.0);
        let x = Matrix::from_rows(&pts.iter().map(|p| p.to_vec()).collect::<Vec<_>>()).unwrap();
        let t = fit_tree(&x, &y, 2, params(1)).unwrap();
        assert_eq!(t.root.depth(), 2);
        assert_eq!(t.predict(&x), y.to_vec());
    }

    #[test]
    fn min_leaf_precondition() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        assert!(fit_tree(&x, &[0, 1, 0], 2, params(2)).is_err());
        assert!(fit_tree(&x, &[0, 1, 5], 2, params(1)).is_err());
    }

    #[test]
    fn forest_reduces_to_single_tree() {
        let mut rng = Rng::new(3);
        let rows: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.uniform(), rng.uniform()]).collect();
        let y: Vec<usize> = rows.iter().map(|r| usize::from(r[0] + 0.3 * r[1] > 0.6)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let tree = fit_tree(&x, &y, 2, params(1)).unwrap();
        let forest = fit_forest(
            &x,
            &y,
            2,
            ForestParams {
                n_trees: 1,
                features_per_split: Some(2),
                max_depth: 12,
                min_leaf: 1,
                bootstrap: false,
                seed: 9,
            },
        )
        .unwrap();
        assert_eq!(forest.trees[0].root, tree.root);
        assert_eq!(forest.predict(&x), tree.predict(&x));
        assert_eq!(forest.feature_importance(), tree.feature_importance());
    }

    #[test]
    fn forest_of_identical_trees_matches_tree_importance() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 1.0], vec![3.0, 0.0]]).unwrap();
        let y = [0, 0, 1, 1];
        let tree = fit_tree(&x, &y, 2, params(1)).unwrap();
        let forest = ForestModel {
            trees: vec![tree.clone(); 4],
            n_trees: 4,
            features_per_split: 2,
            seed: 0,
            n_classes: 2,
        };
        assert_eq!(forest.feature_importance(), tree.feature_importance());
    }

    #[test]
    fn separable_blobs_forest_fits_training_set() {
        let mut rng = Rng::new(11);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            let off = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![off + rng.uniform_range(-1.0, 1.0), off + rng.uniform_range(-1.0, 1.0)]);
            y.push(c);
        }
        let x = Matrix::from_rows(&rows).unwrap();
        // single unrestricted tree is the oracle for separability
        let tree = fit_tree(&x, &y, 2, params(1)).unwrap();
        assert_eq!(tree.predict(&x), y);
        let forest = fit_forest(
            &x,
            &y,
            2,
            ForestParams {
                n_trees: 25,
                min_leaf: 1,
                seed: 5,
                ..ForestParams::default()
            },
        )
        .unwrap();
        assert_eq!(forest.predict(&x), y);
    }

    #[test]
    fn vote_tie_goes_to_lower_ordinal() {
        let leaf = |c: usize| DecisionTree {
            root: TreeNode::Leaf {
                class_counts: (0..6).map(|k| usize::from(k == c)).collect(),
            },
            n_features: 1,
            n_classes: 6,
            n_train: 1,
        };
        let forest = ForestModel {
            trees: vec![leaf(4), leaf(3)],
            n_trees: 2,
            features_per_split: 1,
            seed: 0,
            n_classes: 6,
        };
        assert_eq!(forest.predict_row(&[0.0]), 3);
        let reversed = ForestModel {
            trees: vec![leaf(3), leaf(4)],
            ..forest.clone()
        };
        assert_eq!(reversed.predict_row(&[0.0]), 3);
    }

    #[test]
    fn forest_is_seed_deterministic() {
        let mut rng = Rng::new(2);
        let rows: Vec<Vec<f64>> = (0..80).map(|_| (0..4).map(|_| rng.uniform()).collect()).collect();
        let y: Vec<usize> = rows.iter().map(|r| usize::from(r[1] > 0.5) + usize::from(r[2] > 0.7)).collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let p = ForestParams {
            n_trees: 10,
            seed: 77,
            min_leaf: 1,
            ..ForestParams::default()
        };
        let a = fit_forest(&x, &y, 3, p).unwrap();
        let b = fit_forest(&x, &y, 3, p).unwrap();
        assert_eq!(a, b);
        let imp = a.feature_importance();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(imp.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn aggregation_and_top_40_of_211() {
        let sources = vec![
            ("x".to_string(), "x".to_string()),
            ("county=a".to_string(), "county".to_string()),
            ("county=b".to_string(), "county".to_string()),
        ];
        let agg = aggregate_importance(&[0.5, 0.2, 0.3], &sources).unwrap();
        assert_eq!(agg, vec![("x".to_string(), 0.5), ("county".to_string(), 0.5)]);

        let names: Vec<(String, f64)> = (0..211)
            .map(|i| {
                let n = match i {
                    0 => "total_primary_energy".to_string(),
                    1 => "co2_emissions".to_string(),
                    _ => format!("f{i:03}"),
                };
                (n, 211.0 - i as f64)
            })
            .collect();
        let ranked = rank_features(&names);
        assert_eq!(ranked[0].feature, "total_primary_energy");
        let exclude = parse_excludelist("# compound\ntotal_primary_energy\n\nco2_emissions\n");
        let picked = select_features(&ranked, &exclude, 40);
        assert_eq!(picked.len(), 40);
        assert_eq!(picked[0], "f002");
        assert_eq!(picked[39], "f041");
        assert!(!picked.iter().any(|p| exclude.contains(p)));
    }
}
