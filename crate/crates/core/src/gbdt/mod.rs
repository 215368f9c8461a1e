//! Multiclass gradient boosting over oblivious (symmetric) trees.
//!
//! Every tree applies the same `(feature, threshold)` test to all nodes of
//! a level, so a depth-`d` tree has exactly `2^d` leaves and a row's leaf
//! index is the bit pattern of its test outcomes. Leaves hold one raw
//! value per class plus the number of training rows that reached them;
//! those covers are what path-dependent TreeSHAP conditions on.

mod bins;
mod train;

use serde::{Deserialize, Serialize};

pub use bins::{bin_index, quantile_edges};
pub use train::{fit, fit_with_history, TrainHistory};

pub const MODEL_FORMAT_VERSION: u32 = 1;
pub const MAX_DEPTH: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GbdtError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("training labels contain a single class `{0}`")]
    SingleClassDataset(String),
    #[error("non-finite feature at row {row}, column {feature}")]
    NonFiniteFeature { row: usize, feature: usize },
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{features} feature rows but {labels} labels")]
    LabelCountMismatch { features: usize, labels: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("class index {index} out of range for {classes} classes")]
    UnknownClass { index: usize, classes: usize },
    #[error("malformed model: {0}")]
    MalformedModel(String),
}

fn default_validation_fraction() -> f64 {
    0.2
}

/// Boosting hyper-parameters. Defaults mirror the reference meta-classifier
/// configuration: 1000 rounds, learning rate 0.03, depth 6, 8 workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub depth: usize,
    pub l2_leaf_reg: f64,
    pub bins: usize,
    pub seed: u64,
    pub worker_parallelism: usize,
    /// Stop after this many rounds without validation improvement.
    pub early_stopping_rounds: Option<usize>,
    #[serde(default = "default_validation_fraction")]
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1000,
            learning_rate: 0.03,
            depth: 6,
            l2_leaf_reg: 3.0,
            bins: 255,
            seed: 0,
            worker_parallelism: 8,
            early_stopping_rounds: None,
            validation_fraction: default_validation_fraction(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: &str| Err(GbdtError::InvalidConfig(m.to_string()));
        if self.iterations == 0 {
            return bad("iterations must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return bad("depth must be in 1..=16");
        }
        if !(self.l2_leaf_reg >= 0.0 && self.l2_leaf_reg.is_finite()) {
            return bad("l2_leaf_reg must be non-negative");
        }
        if !(2..=65535).contains(&self.bins) {
            return bad("bins must be in 2..=65535");
        }
        if self.worker_parallelism == 0 {
            return bad("worker_parallelism must be positive");
        }
        if self.early_stopping_rounds.is_some()
            && !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0)
        {
            return bad("validation_fraction must be in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    /// Rows with `x[feature] > threshold` take the 1-branch.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObliviousTree {
    pub level_splits: Vec<Split>,
    /// Indexed by the bit pattern of split outcomes, level `l` in bit `l`.
    pub leaves: Vec<Leaf>,
}

impl ObliviousTree {
    pub fn depth(&self) -> usize {
        self.level_splits.len()
    }

    pub fn leaf_index(&self, x: &[f64]) -> usize {
        self.level_splits.iter().enumerate().fold(0, |acc, (l, s)| {
            acc | (usize::from(x[s.feature] > s.threshold) << l)
        })
    }

    pub fn has_covers(&self) -> bool {
        self.leaves.iter().all(|l| l.cover.is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeEnsemble {
    pub format_version: u32,
    pub classes: Vec<String>,
    pub base_scores: Vec<f64>,
    pub feature_count: usize,
    pub bin_edges: Vec<Vec<f64>>,
    pub trees: Vec<ObliviousTree>,
}

impl TreeEnsemble {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Checks structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<(), GbdtError> {
        let k = self.classes.len();
        let bad = |m: String| Err(GbdtError::MalformedModel(m));
        if self.format_version != MODEL_FORMAT_VERSION {
            return bad(format!(
                "unsupported format_version {}",
                self.format_version
            ));
        }
        if k == 0 || self.base_scores.len() != k {
            return bad("base_scores must have one entry per class".into());
        }
        for (t, tree) in self.trees.iter().enumerate() {
            if tree.depth() > MAX_DEPTH || tree.leaves.len() != 1 << tree.depth() {
                return bad(format!("tree {t}: leaf count does not match depth"));
            }
            if tree
                .level_splits
                .iter()
                .any(|s| s.feature >= self.feature_count)
            {
                return bad(format!("tree {t}: split feature out of range"));
            }
            if tree.leaves.iter().any(|l| l.values.len() != k) {
                return bad(format!(
                    "tree {t}: leaf value count differs from class count"
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<(), GbdtError> {
        if x.len() != self.feature_count {
            return Err(GbdtError::DimensionMismatch {
                expected: self.feature_count,
                actual: x.len(),
            });
        }
        Ok(())
    }

    /// Per-class margins: base score plus the reached leaf of every tree.
    pub fn predict_raw(&self, x: &[f64]) -> Result<Vec<f64>, GbdtError> {
        self.check_input(x)?;
        let mut m = self.base_scores.clone();
        for tree in &self.trees {
            let leaf = &tree.leaves[tree.leaf_index(x)];
            for (acc, v) in m.iter_mut().zip(&leaf.values) {
                *acc += v;
            }
        }
        Ok(m)
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>, GbdtError> {
        Ok(softmax(&self.predict_raw(x)?))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, GbdtError> {
        let m: TreeEnsemble =
            serde_json::from_str(text).map_err(|e| GbdtError::MalformedModel(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }
}

/// Numerically stable softmax.
pub fn softmax(margins: &[f64]) -> Vec<f64> {
    let max = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = margins.iter().map(|m| (m - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean multiclass cross-entropy of `margins` (row-major, `k` per row).
pub fn log_loss(margins: &[f64], labels: &[usize], k: usize) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &margins[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|m| (m - max).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stump_ensemble(trees: Vec<ObliviousTree>) -> TreeEnsemble {
        TreeEnsemble {
            format_version: MODEL_FORMAT_VERSION,
            classes: vec!["a".into(), "b".into()],
            base_scores: vec![0.1, -0.3],
            feature_count: 2,
            bin_edges: vec![vec![], vec![]],
            trees,
        }
    }

    #[test]
    fn zero_trees_predict_base_scores() {
        let e = stump_ensemble(vec![]);
        assert_eq!(e.predict_raw(&[0.0, 0.0]).unwrap(), vec![0.1, -0.3]);
    }

    #[test]
    fn depth_zero_tree_adds_leaf() {
        let t = ObliviousTree {
            level_splits: vec![],
            leaves: vec![Leaf {
                values: vec![0.2, -0.2],
                cover: Some(4),
            }],
        };
        let e = stump_ensemble(vec![t]);
        let m = e.predict_raw(&[5.0, 5.0]).unwrap();
        assert_eq!(m, vec![0.1 + 0.2, -0.3 - 0.2]);
    }

    #[test]
    fn wrong_length_is_dimension_mismatch() {
        let e = stump_ensemble(vec![]);
        assert_eq!(
            e.predict_raw(&[1.0]),
            Err(GbdtError::DimensionMismatch {
                expected: 2,
                actual: 1
            })
        );
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0; 13]);
        assert!(p.iter().all(|v| (v - 1.0 / 13.0).abs() < 1e-15));
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn leaf_index_uses_level_bits() {
        let t = ObliviousTree {
            level_splits: vec![
                Split {
                    feature: 0,
                    threshold: 0.5,
                },
                Split {
                    feature: 1,
                    threshold: 0.0,
                },
            ],
            leaves: (0..4)
                .map(|i| Leaf {
                    values: vec![i as f64],
                    cover: Some(1),
                })
                .collect(),
        };
        assert_eq!(t.leaf_index(&[0.0, -1.0]), 0);
        assert_eq!(t.leaf_index(&[1.0, -1.0]), 1);
        assert_eq!(t.leaf_index(&[0.0, 1.0]), 2);
        assert_eq!(t.leaf_index(&[0.6, 0.1]), 3);
    }

    #[test]
    fn malformed_json_models_are_rejected() {
        let mut e = stump_ensemble(vec![ObliviousTree {
            level_splits: vec![Split {
                feature: 0,
                threshold: 0.0,
            }],
            leaves: vec![Leaf {
                values: vec![0.0, 0.0],
                cover: Some(1),
            }],
        }]);
        assert!(matches!(
            TreeEnsemble::from_json(&e.to_json()),
            Err(GbdtError::MalformedModel(_))
        ));
        e.trees.clear();
        assert_eq!(TreeEnsemble::from_json(&e.to_json()).unwrap(), e);
    }

    #[test]
    fn config_bounds() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            depth: 17,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            bins: 1,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
