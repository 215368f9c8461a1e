//! Exact path-dependent TreeSHAP for [`TreeEnsemble`]s.
//!
//! The game is the cover-weighted conditional expectation: features in the
//! coalition follow `x`, the others are split between both children in
//! proportion to training cover. A node whose own cover is zero splits
//! one half to each side. [`brute_force_shap`] evaluates the same game by
//! subset enumeration and serves as the reference.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::gbdt::{ObliviousTree, TreeEnsemble};

/// Largest feature count accepted by [`brute_force_shap`].
pub const BRUTE_FORCE_MAX_FEATURES: usize = 20;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ShapError {
    #[error("tree {0} has leaves without recorded cover")]
    MissingCovers(usize),
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("class index {index} out of range for {classes} classes")]
    UnknownClass { index: usize, classes: usize },
    #[error(
        "brute-force Shapley values need at most {BRUTE_FORCE_MAX_FEATURES} features, got {0}"
    )]
    TooManyFeatures(usize),
    #[error("malformed attribution CSV: {0}")]
    Csv(String),
}

/// Per-feature Shapley values of one class margin for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapAttribution {
    pub sample_id: String,
    pub class: usize,
    pub phi: Vec<f64>,
    /// Expected margin of `class` under the cover distribution.
    pub base_value: f64,
}

impl ShapAttribution {
    pub fn total(&self) -> f64 {
        self.base_value + self.phi.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone)]
enum Node {
    Internal {
        feature: usize,
        threshold: f64,
        /// Child taken when `x[feature] <= threshold`.
        low: usize,
        high: usize,
        cover: f64,
    },
    Leaf {
        leaf: usize,
        cover: f64,
    },
}

impl Node {
    fn cover(&self) -> f64 {
        match self {
            Node::Internal { cover, .. } | Node::Leaf { cover, .. } => *cover,
        }
    }
}

/// Full binary tree equivalent to one oblivious tree.
#[derive(Debug, Clone)]
struct ExpandedTree {
    nodes: Vec<Node>,
}

impl ExpandedTree {
    fn from_oblivious(tree: &ObliviousTree) -> Self {
        let mut nodes = Vec::with_capacity((2 << tree.depth()) - 1);
        Self::expand(tree, 0, 0, &mut nodes);
        Self { nodes }
    }

    /// Builds the subtree for leaf-index prefix `bits` (levels `< level`
    /// fixed) and returns its node id.
    fn expand(tree: &ObliviousTree, level: usize, bits: usize, nodes: &mut Vec<Node>) -> usize {
        let id = nodes.len();
        if level == tree.depth() {
            let cover = tree.leaves[bits].cover.unwrap_or(0) as f64;
            nodes.push(Node::Leaf { leaf: bits, cover });
            return id;
        }
        nodes.push(Node::Leaf {
            leaf: 0,
            cover: 0.0,
        });
        let low = Self::expand(tree, level + 1, bits, nodes);
        let high = Self::expand(tree, level + 1, bits | (1 << level), nodes);
        let split = tree.level_splits[level];
        nodes[id] = Node::Internal {
            feature: split.feature,
            threshold: split.threshold,
            low,
            high,
            cover: nodes[low].cover() + nodes[high].cover(),
        };
        id
    }
}

/// Fractions of `parent` mass sent to each child.
#[inline]
fn child_fractions(parent: f64, low: f64, high: f64) -> (f64, f64) {
    if parent > 0.0 {
        (low / parent, high / parent)
    } else {
        (0.5, 0.5)
    }
}

#[derive(Debug, Clone, Copy)]
struct PathElement {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend_path(path: &mut Vec<PathElement>, zero: f64, one: f64, feature: Option<usize>) {
    let depth = path.len();
    path.push(PathElement {
        feature,
        zero,
        one,
        weight: if depth == 0 { 1.0 } else { 0.0 },
    });
    let d1 = (depth + 1) as f64;
    for i in (0..depth).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / d1;
        path[i].weight = zero * path[i].weight * (depth - i) as f64 / d1;
    }
}

fn unwind_path(path: &mut Vec<PathElement>, index: usize) {
    let depth = path.len() - 1;
    let one = path[index].one;
    let zero = path[index].zero;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = path[i].weight;
            path[i].weight = next_one * d1 / ((i + 1) as f64 * one);
            next_one = tmp - path[i].weight * zero * (depth - i) as f64 / d1;
        } else {
            path[i].weight = path[i].weight * d1 / (zero * (depth - i) as f64);
        }
    }
    for i in index..depth {
        path[i].feature = path[i + 1].feature;
        path[i].zero = path[i + 1].zero;
        path[i].one = path[i + 1].one;
    }
    path.pop();
}

/// Total permutation weight of the path with element `index` removed.
fn unwound_path_sum(path: &[PathElement], index: usize) -> f64 {
    let depth = path.len() - 1;
    let one = path[index].one;
    let zero = path[index].zero;
    let d1 = (depth + 1) as f64;
    let mut next_one = path[depth].weight;
    let mut total = 0.0;
    for i in (0..depth).rev() {
        if one != 0.0 {
            let tmp = next_one * d1 / ((i + 1) as f64 * one);
            total += tmp;
            next_one = path[i].weight - tmp * zero * (depth - i) as f64 / d1;
        } else if zero != 0.0 {
            total += path[i].weight / zero / ((depth - i) as f64 / d1);
        }
    }
    total
}

struct Recursion<'a> {
    tree: &'a ExpandedTree,
    leaves: &'a ObliviousTree,
    x: &'a [f64],
    k: usize,
    /// `phi[f * k + c]`
    phi: &'a mut [f64],
}

impl Recursion<'_> {
    fn run(
        &mut self,
        node: usize,
        parent: &[PathElement],
        zero: f64,
        one: f64,
        feature: Option<usize>,
    ) {
        let mut path = Vec::with_capacity(parent.len() + 1);
        path.extend_from_slice(parent);
        extend_path(&mut path, zero, one, feature);

        match self.tree.nodes[node] {
            Node::Leaf { leaf, .. } => {
                let values = &self.leaves.leaves[leaf].values;
                for i in 1..path.len() {
                    let w = unwound_path_sum(&path, i);
                    let el = path[i];
                    let f = el.feature.expect("only the root element has no feature");
                    let scale = w * (el.one - el.zero);
                    for (c, v) in values.iter().enumerate() {
                        self.phi[f * self.k + c] += scale * v;
                    }
                }
            }
            Node::Internal {
                feature: split,
                threshold,
                low,
                high,
                cover,
            } => {
                let (low_frac, high_frac) = child_fractions(
                    cover,
                    self.tree.nodes[low].cover(),
                    self.tree.nodes[high].cover(),
                );
                let (hot, cold, hot_frac, cold_frac) = if self.x[split] > threshold {
                    (high, low, high_frac, low_frac)
                } else {
                    (low, high, low_frac, high_frac)
                };
                let mut incoming_zero = 1.0;
                let mut incoming_one = 1.0;
                if let Some(i) = (1..path.len()).find(|&i| path[i].feature == Some(split)) {
                    incoming_zero = path[i].zero;
                    incoming_one = path[i].one;
                    unwind_path(&mut path, i);
                }
                let hz = hot_frac * incoming_zero;
                if hz != 0.0 || incoming_one != 0.0 {
                    self.run(hot, &path, hz, incoming_one, Some(split));
                }
                let cz = cold_frac * incoming_zero;
                if cz != 0.0 {
                    self.run(cold, &path, cz, 0.0, Some(split));
                }
            }
        }
    }
}

/// Cover-weighted mean leaf value per class.
fn expected_values(
    tree: &ExpandedTree,
    leaves: &ObliviousTree,
    node: usize,
    out: &mut [f64],
    w: f64,
) {
    match tree.nodes[node] {
        Node::Leaf { leaf, .. } => {
            for (o, v) in out.iter_mut().zip(&leaves.leaves[leaf].values) {
                *o += w * v;
            }
        }
        Node::Internal {
            low, high, cover, ..
        } => {
            let (lf, hf) =
                child_fractions(cover, tree.nodes[low].cover(), tree.nodes[high].cover());
            if lf != 0.0 {
                expected_values(tree, leaves, low, out, w * lf);
            }
            if hf != 0.0 {
                expected_values(tree, leaves, high, out, w * hf);
            }
        }
    }
}

/// Precomputed expansion of an ensemble for repeated explanation.
pub struct TreeExplainer<'a> {
    ensemble: &'a TreeEnsemble,
    trees: Vec<ExpandedTree>,
    base_values: Vec<f64>,
}

impl<'a> TreeExplainer<'a> {
    pub fn new(ensemble: &'a TreeEnsemble) -> Result<Self, ShapError> {
        let k = ensemble.n_classes();
        let mut base_values = ensemble.base_scores.clone();
        let mut trees = Vec::with_capacity(ensemble.trees.len());
        for (t, tree) in ensemble.trees.iter().enumerate() {
            if !tree.has_covers() {
                return Err(ShapError::MissingCovers(t));
            }
            let expanded = ExpandedTree::from_oblivious(tree);
            let mut ev = vec![0.0; k];
            expected_values(&expanded, tree, 0, &mut ev, 1.0);
            for (b, e) in base_values.iter_mut().zip(ev) {
                *b += e;
            }
            trees.push(expanded);
        }
        Ok(Self {
            ensemble,
            trees,
            base_values,
        })
    }

    /// Expected margin per class.
    pub fn base_values(&self) -> &[f64] {
        &self.base_values
    }

    /// Attributions for every class, in class order.
    pub fn explain(&self, sample_id: &str, x: &[f64]) -> Result<Vec<ShapAttribution>, ShapError> {
        let nf = self.ensemble.feature_count;
        if x.len() != nf {
            return Err(ShapError::DimensionMismatch {
                expected: nf,
                actual: x.len(),
            });
        }
        let k = self.ensemble.n_classes();
        let mut phi = vec![0.0; nf * k];
        for (expanded, tree) in self.trees.iter().zip(&self.ensemble.trees) {
            let mut r = Recursion {
                tree: expanded,
                leaves: tree,
                x,
                k,
                phi: &mut phi,
            };
            r.run(0, &[], 1.0, 1.0, None);
        }
        Ok((0..k)
            .map(|c| ShapAttribution {
                sample_id: sample_id.to_string(),
                class: c,
                phi: (0..nf).map(|f| phi[f * k + c]).collect(),
                base_value: self.base_values[c],
            })
            .collect())
    }

    pub fn explain_class(
        &self,
        sample_id: &str,
        x: &[f64],
        class: usize,
    ) -> Result<ShapAttribution, ShapError> {
        let k = self.ensemble.n_classes();
        if class >= k {
            return Err(ShapError::UnknownClass {
                index: class,
                classes: k,
            });
        }
        Ok(self.explain(sample_id, x)?.swap_remove(class))
    }
}

/// TreeSHAP values of one class margin.
pub fn shap_values(
    ensemble: &TreeEnsemble,
    x: &[f64],
    class: usize,
) -> Result<ShapAttribution, ShapError> {
    TreeExplainer::new(ensemble)?.explain_class("", x, class)
}

/// Value of coalition `set` (bitmask over features) for one oblivious tree,
/// evaluated leaf by leaf.
fn coalition_value(tree: &ObliviousTree, x: &[f64], set: u32, class: usize) -> f64 {
    let depth = tree.depth();
    let cover = |bits: usize, levels: usize| -> f64 {
        let mask = (1usize << levels) - 1;
        tree.leaves
            .iter()
            .enumerate()
            .filter(|(j, _)| j & mask == bits & mask)
            .map(|(_, l)| l.cover.unwrap_or(0) as f64)
            .sum()
    };
    let mut v = 0.0;
    for (j, leaf) in tree.leaves.iter().enumerate() {
        let mut w = 1.0;
        for (l, split) in tree.level_splits.iter().enumerate() {
            let bit = (j >> l) & 1;
            if set & (1 << split.feature) != 0 {
                let goes = usize::from(x[split.feature] > split.threshold);
                if goes != bit {
                    w = 0.0;
                    break;
                }
            } else {
                let parent = cover(j, l);
                let low = cover(j & !(1 << l), l + 1);
                let high = cover(j | (1 << l), l + 1);
                let (lf, hf) = child_fractions(parent, low, high);
                w *= if bit == 1 { hf } else { lf };
            }
        }
        if w != 0.0 {
            v += w * leaf.values[class];
        }
        debug_assert!(depth <= 16);
    }
    v
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Shapley values by enumerating all `2^F` coalitions.
pub fn brute_force_shap(
    ensemble: &TreeEnsemble,
    x: &[f64],
    class: usize,
) -> Result<ShapAttribution, ShapError> {
    let nf = ensemble.feature_count;
    if nf > BRUTE_FORCE_MAX_FEATURES {
        return Err(ShapError::TooManyFeatures(nf));
    }
    if x.len() != nf {
        return Err(ShapError::DimensionMismatch {
            expected: nf,
            actual: x.len(),
        });
    }
    let k = ensemble.n_classes();
    if class >= k {
        return Err(ShapError::UnknownClass {
            index: class,
            classes: k,
        });
    }
    if let Some(t) = ensemble.trees.iter().position(|t| !t.has_covers()) {
        return Err(ShapError::MissingCovers(t));
    }
    let n_sets = 1usize << nf;
    let values: Vec<f64> = (0..n_sets as u32)
        .map(|s| {
            ensemble.base_scores[class]
                + ensemble
                    .trees
                    .iter()
                    .map(|t| coalition_value(t, x, s, class))
                    .sum::<f64>()
        })
        .collect();
    let weights: Vec<f64> = (0..nf)
        .map(|s| 1.0 / (nf as f64 * binomial(nf - 1, s)))
        .collect();
    let mut phi = vec![0.0; nf];
    for (i, p) in phi.iter_mut().enumerate() {
        let bit = 1usize << i;
        for s in 0..n_sets {
            if s & bit == 0 {
                let size = s.count_ones() as usize;
                *p += weights[size] * (values[s | bit] - values[s]);
            }
        }
    }
    Ok(ShapAttribution {
        sample_id: String::new(),
        class,
        phi,
        base_value: values[0],
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    sample_id: String,
    class: String,
    feature_index: String,
    phi: f64,
}

/// Writes attributions as `sample_id,class,feature_index,phi` rows; each
/// (sample, class) also gets one row with `feature_index = base` carrying
/// the base value.
pub fn write_shap_csv<W: Write>(
    out: W,
    attributions: &[ShapAttribution],
    classes: &[String],
) -> Result<(), ShapError> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| ShapError::Csv(e.to_string());
    for a in attributions {
        let class = classes
            .get(a.class)
            .ok_or(ShapError::UnknownClass {
                index: a.class,
                classes: classes.len(),
            })?
            .clone();
        w.serialize(CsvRow {
            sample_id: a.sample_id.clone(),
            class: class.clone(),
            feature_index: "base".into(),
            phi: a.base_value,
        })
        .map_err(err)?;
        for (f, p) in a.phi.iter().enumerate() {
            w.serialize(CsvRow {
                sample_id: a.sample_id.clone(),
                class: class.clone(),
                feature_index: f.to_string(),
                phi: *p,
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| ShapError::Csv(e.to_string()))
}

/// Reads the format produced by [`write_shap_csv`].
pub fn read_shap_csv<R: Read>(
    input: R,
    classes: &[String],
) -> Result<Vec<ShapAttribution>, ShapError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out: Vec<ShapAttribution> = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| ShapError::Csv(e.to_string()))?;
        let class = classes
            .iter()
            .position(|c| *c == row.class)
            .ok_or_else(|| ShapError::Csv(format!("unknown class `{}`", row.class)))?;
        if row.feature_index == "base" {
            out.push(ShapAttribution {
                sample_id: row.sample_id,
                class,
                phi: Vec::new(),
                base_value: row.phi,
            });
            continue;
        }
        let f: usize = row
            .feature_index
            .parse()
            .map_err(|_| ShapError::Csv(format!("bad feature_index `{}`", row.feature_index)))?;
        let cur = out
            .last_mut()
            .filter(|a| a.sample_id == row.sample_id && a.class == class)
            .ok_or_else(|| ShapError::Csv("feature row before its base row".into()))?;
        if f != cur.phi.len() {
            return Err(ShapError::Csv(format!("feature {f} out of order")));
        }
        cur.phi.push(row.phi);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gbdt::{Leaf, Split, MODEL_FORMAT_VERSION};

    fn ensemble(feature_count: usize, trees: Vec<ObliviousTree>) -> TreeEnsemble {
        let k = trees.first().map_or(1, |t| t.leaves[0].values.len());
        TreeEnsemble {
            format_version: MODEL_FORMAT_VERSION,
            classes: (0..k).map(|c| format!("c{c}")).collect(),
            base_scores: vec![0.0; k],
            feature_count,
            bin_edges: vec![vec![]; feature_count],
            trees,
        }
    }

    fn leaf(v: f64, cover: u64) -> Leaf {
        Leaf {
            values: vec![v],
            cover: Some(cover),
        }
    }

    #[test]
    fn constant_model_has_zero_phi() {
        let t = ObliviousTree {
            level_splits: vec![],
            leaves: vec![leaf(0.7, 10)],
        };
        let e = ensemble(3, vec![t]);
        let a = shap_values(&e, &[1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(a.phi, vec![0.0; 3]);
        assert_eq!(a.base_value, 0.7);
        let b = brute_force_shap(&e, &[1.0, 2.0, 3.0], 0).unwrap();
        assert_eq!(b.phi, vec![0.0; 3]);
    }

    #[test]
    fn single_split_example() {
        let t = ObliviousTree {
            level_splits: vec![Split {
                feature: 0,
                threshold: 0.5,
            }],
            leaves: vec![leaf(0.0, 50), leaf(1.0, 50)],
        };
        let e = ensemble(2, vec![t]);
        let a = shap_values(&e, &[0.2, 9.0], 0).unwrap();
        assert_eq!(a.base_value, 0.5);
        assert_eq!(a.phi, vec![-0.5, 0.0]);
        let b = brute_force_shap(&e, &[0.2, 9.0], 0).unwrap();
        assert_eq!(b.phi, vec![-0.5, 0.0]);
        assert_eq!(b.base_value, 0.5);
    }

    #[test]
    fn symmetric_features_share_credit() {
        // f0 and f1 split at the same threshold with symmetric covers/values
        let t = ObliviousTree {
            level_splits: vec![
                Split {
                    feature: 0,
                    threshold: 0.0,
                },
                Split {
                    feature: 1,
                    threshold: 0.0,
                },
            ],
            leaves: vec![leaf(0.0, 25), leaf(1.0, 25), leaf(1.0, 25), leaf(2.0, 25)],
        };
        let e = ensemble(3, vec![t]);
        let x = [1.0, 1.0, 0.0];
        let a = shap_values(&e, &x, 0).unwrap();
        let b = brute_force_shap(&e, &x, 0).unwrap();
        assert!((a.phi[0] - a.phi[1]).abs() < 1e-15);
        assert!((b.phi[0] - b.phi[1]).abs() < 1e-15);
        assert_eq!(a.phi[2], 0.0);
    }

    #[test]
    fn repeated_feature_and_empty_leaves_match_oracle() {
        let t = ObliviousTree {
            level_splits: vec![
                Split {
                    feature: 0,
                    threshold: 0.0,
                },
                Split {
                    feature: 1,
                    threshold: 1.0,
                },
                Split {
                    feature: 0,
                    threshold: 2.0,
                },
            ],
            leaves: vec![
                leaf(0.3, 4),
                leaf(-0.2, 0),
                leaf(0.5, 7),
                leaf(0.1, 2),
                leaf(0.9, 0),
                leaf(-0.4, 5),
                leaf(0.05, 0),
                leaf(1.1, 3),
            ],
        };
        let e = ensemble(2, vec![t]);
        for x in [[-1.0, 0.0], [0.5, 2.0], [3.0, 0.5], [3.0, 3.0]] {
            let a = shap_values(&e, &x, 0).unwrap();
            let b = brute_force_shap(&e, &x, 0).unwrap();
            for (p, q) in a.phi.iter().zip(&b.phi) {
                assert!((p - q).abs() < 1e-12, "{p} vs {q} at {x:?}");
            }
            let raw = e.predict_raw(&x).unwrap()[0];
            assert!((a.total() - raw).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_covers_and_bad_inputs() {
        let t = ObliviousTree {
            level_splits: vec![],
            leaves: vec![Leaf {
                values: vec![1.0],
                cover: None,
            }],
        };
        let e = ensemble(1, vec![t]);
        assert_eq!(shap_values(&e, &[0.0], 0), Err(ShapError::MissingCovers(0)));
        let e = ensemble(21, vec![]);
        assert_eq!(
            brute_force_shap(&e, &[0.0; 21], 0),
            Err(ShapError::TooManyFeatures(21))
        );
        assert!(matches!(
            shap_values(&e, &[0.0; 3], 0),
            Err(ShapError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn csv_round_trip() {
        let classes = vec!["A07".to_string(), "bonafide".to_string()];
        let attrs = vec![
            ShapAttribution {
                sample_id: "s1".into(),
                class: 0,
                phi: vec![0.25, -1.5e-7],
                base_value: -0.1,
            },
            ShapAttribution {
                sample_id: "s1".into(),
                class: 1,
                phi: vec![0.0, 3.0],
                base_value: 0.2,
            },
        ];
        let mut buf = Vec::new();
        write_shap_csv(&mut buf, &attrs, &classes).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,class,feature_index,phi\n"));
        assert_eq!(read_shap_csv(&buf[..], &classes).unwrap(), attrs);
    }
}
