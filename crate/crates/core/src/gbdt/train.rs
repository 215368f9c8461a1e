use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::bins::{bin_index, quantile_edges};
use super::{
    log_loss, GbdtError, Leaf, ObliviousTree, Split, TrainConfig, TreeEnsemble,
    MODEL_FORMAT_VERSION,
};

/// Loss trajectory recorded during [`fit_with_history`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// `train_loss[0]` is the loss of the base scores alone; entry `t` is
    /// the loss after `t` trees.
    pub train_loss: Vec<f64>,
    /// Same indexing; empty unless early stopping is enabled.
    pub validation_loss: Vec<f64>,
}

/// Trains an ensemble of oblivious trees on softmax cross-entropy.
pub fn fit<R, S>(rows: &[R], labels: &[S], config: &TrainConfig) -> Result<TreeEnsemble, GbdtError>
where
    R: AsRef<[f64]> + Sync,
    S: AsRef<str>,
{
    fit_with_history(rows, labels, config).map(|(m, _)| m)
}

struct Binned {
    edges: Vec<Vec<f64>>,
    /// Column-major bin indices, `bins[f][i]`.
    bins: Vec<Vec<u16>>,
    /// Row indices sorted by bin (stable), per feature.
    order: Vec<Vec<u32>>,
    /// `order[f][starts[f][b]..starts[f][b + 1]]` are the rows in bin `b`.
    starts: Vec<Vec<u32>>,
}

fn bin_features<R: AsRef<[f64]>>(rows: &[&R], n_features: usize, max_bins: usize) -> Binned {
    let mut edges = Vec::with_capacity(n_features);
    let mut bins = Vec::with_capacity(n_features);
    let mut order = Vec::with_capacity(n_features);
    let mut starts = Vec::with_capacity(n_features);
    for f in 0..n_features {
        let col: Vec<f64> = rows.iter().map(|r| r.as_ref()[f]).collect();
        let e = quantile_edges(&col, max_bins);
        let b: Vec<u16> = col.iter().map(|&x| bin_index(&e, x) as u16).collect();
        let mut counts = vec![0u32; e.len() + 2];
        for &v in &b {
            counts[v as usize + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut o = vec![0u32; b.len()];
        for (i, &v) in b.iter().enumerate() {
            o[fill[v as usize] as usize] = i as u32;
            fill[v as usize] += 1;
        }
        bins.push(b);
        edges.push(e);
        order.push(o);
        starts.push(counts);
    }
    Binned {
        edges,
        bins,
        order,
        starts,
    }
}

#[inline]
fn newton_score(g: f64, h: f64, l2: f64) -> f64 {
    let d = h + l2;
    if d > 0.0 {
        g * g / d
    } else {
        0.0
    }
}

/// Per-partition gradient and hessian totals, `n_parts × k`.
struct PartitionTotals {
    g: Vec<f64>,
    h: Vec<f64>,
}

fn partition_totals(
    partition: &[u32],
    n_parts: usize,
    grad: &[f64],
    hess: &[f64],
    k: usize,
) -> PartitionTotals {
    let mut g = vec![0.0; n_parts * k];
    let mut h = vec![0.0; n_parts * k];
    for (i, &p) in partition.iter().enumerate() {
        let base = p as usize * k;
        for c in 0..k {
            g[base + c] += grad[i * k + c];
            h[base + c] += hess[i * k + c];
        }
    }
    PartitionTotals { g, h }
}

/// Best threshold index of feature `f` given current partitions, as
/// `(score, threshold index)`. The score of threshold `t` sums, over
/// partitions in order, the Newton scores of the rows with bin `≤ t` and
/// the rest. Lowest index wins ties.
#[allow(clippy::too_many_arguments)]
fn best_threshold(
    f: usize,
    data: &Binned,
    partition: &[u32],
    totals: &PartitionTotals,
    grad: &[f64],
    hess: &[f64],
    k: usize,
    l2: f64,
) -> Option<(f64, usize)> {
    let n_edges = data.edges[f].len();
    if n_edges == 0 {
        return None;
    }
    let n_parts = totals.g.len() / k;
    let mut lg = vec![0.0; n_parts * k];
    let mut lh = vec![0.0; n_parts * k];
    let part_score = |p: usize, lg: &[f64], lh: &[f64]| -> f64 {
        let mut s = 0.0;
        for c in 0..k {
            let (g, h) = (lg[p * k + c], lh[p * k + c]);
            s += newton_score(g, h, l2)
                + newton_score(totals.g[p * k + c] - g, totals.h[p * k + c] - h, l2);
        }
        s
    };
    let mut part: Vec<f64> = (0..n_parts).map(|p| part_score(p, &lg, &lh)).collect();
    let mut dirty = vec![false; n_parts];
    let mut touched: Vec<usize> = Vec::with_capacity(n_parts);
    let order = &data.order[f];
    let starts = &data.starts[f];

    let mut best: Option<(f64, usize)> = None;
    for t in 0..n_edges {
        for &i in &order[starts[t] as usize..starts[t + 1] as usize] {
            let i = i as usize;
            let p = partition[i] as usize;
            for c in 0..k {
                lg[p * k + c] += grad[i * k + c];
                lh[p * k + c] += hess[i * k + c];
            }
            if !dirty[p] {
                dirty[p] = true;
                touched.push(p);
            }
        }
        for &p in &touched {
            part[p] = part_score(p, &lg, &lh);
            dirty[p] = false;
        }
        touched.clear();
        let score: f64 = part.iter().sum();
        if best.is_none_or(|(bs, _)| score > bs) {
            best = Some((score, t));
        }
    }
    best
}

fn grow_tree(
    data: &Binned,
    grad: &[f64],
    hess: &[f64],
    k: usize,
    config: &TrainConfig,
    pool: &rayon::ThreadPool,
) -> ObliviousTree {
    let n = grad.len() / k;
    let n_features = data.edges.len();
    let mut leaf_of = vec![0u32; n];
    let mut splits = Vec::with_capacity(config.depth);

    for level in 0..config.depth {
        // Compact ids over non-empty partitions only; empty ones add nothing.
        let mut remap = vec![u32::MAX; 1 << level];
        let mut n_parts = 0u32;
        let compact: Vec<u32> = leaf_of
            .iter()
            .map(|&p| {
                let slot = &mut remap[p as usize];
                if *slot == u32::MAX {
                    *slot = n_parts;
                    n_parts += 1;
                }
                *slot
            })
            .collect();

        let totals = partition_totals(&compact, n_parts as usize, grad, hess, k);
        let candidates: Vec<Option<(f64, usize)>> = pool.install(|| {
            (0..n_features)
                .into_par_iter()
                .map(|f| {
                    best_threshold(
                        f,
                        data,
                        &compact,
                        &totals,
                        grad,
                        hess,
                        k,
                        config.l2_leaf_reg,
                    )
                })
                .collect()
        });
        let mut best: Option<(f64, usize, usize)> = None;
        for (f, cand) in candidates.into_iter().enumerate() {
            if let Some((s, t)) = cand {
                if best.is_none_or(|(bs, _, _)| s > bs) {
                    best = Some((s, f, t));
                }
            }
        }
        let Some((_, f, t)) = best else { break };
        splits.push(Split {
            feature: f,
            threshold: data.edges[f][t],
        });
        for (i, leaf) in leaf_of.iter_mut().enumerate() {
            if data.bins[f][i] as usize > t {
                *leaf |= 1 << level;
            }
        }
    }

    let n_leaves = 1usize << splits.len();
    let mut g = vec![0.0; n_leaves * k];
    let mut h = vec![0.0; n_leaves * k];
    let mut cover = vec![0u64; n_leaves];
    for (i, &leaf) in leaf_of.iter().enumerate() {
        let l = leaf as usize;
        cover[l] += 1;
        for c in 0..k {
            g[l * k + c] += grad[i * k + c];
            h[l * k + c] += hess[i * k + c];
        }
    }
    let leaves = (0..n_leaves)
        .map(|l| Leaf {
            values: (0..k)
                .map(|c| {
                    let d = h[l * k + c] + config.l2_leaf_reg;
                    if d > 0.0 {
                        -config.learning_rate * g[l * k + c] / d
                    } else {
                        0.0
                    }
                })
                .collect(),
            cover: Some(cover[l]),
        })
        .collect();
    ObliviousTree {
        level_splits: splits,
        leaves,
    }
}

fn gradients(margins: &[f64], labels: &[usize], k: usize, grad: &mut [f64], hess: &mut [f64]) {
    for (i, &y) in labels.iter().enumerate() {
        let row = &margins[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..k {
            let e = (row[c] - max).exp();
            grad[i * k + c] = e;
            sum += e;
        }
        for c in 0..k {
            let p = grad[i * k + c] / sum;
            grad[i * k + c] = p - if c == y { 1.0 } else { 0.0 };
            hess[i * k + c] = p * (1.0 - p);
        }
    }
}

/// [`fit`] plus the per-iteration loss trajectory.
pub fn fit_with_history<R, S>(
    rows: &[R],
    labels: &[S],
    config: &TrainConfig,
) -> Result<(TreeEnsemble, TrainHistory), GbdtError>
where
    R: AsRef<[f64]> + Sync,
    S: AsRef<str>,
{
    config.validate()?;
    if rows.is_empty() {
        return Err(GbdtError::EmptyDataset);
    }
    if rows.len() != labels.len() {
        return Err(GbdtError::LabelCountMismatch {
            features: rows.len(),
            labels: labels.len(),
        });
    }
    let n_features = rows[0].as_ref().len();
    for (i, r) in rows.iter().enumerate() {
        let r = r.as_ref();
        if r.len() != n_features {
            return Err(GbdtError::DimensionMismatch {
                expected: n_features,
                actual: r.len(),
            });
        }
        if let Some(f) = r.iter().position(|v| !v.is_finite()) {
            return Err(GbdtError::NonFiniteFeature { row: i, feature: f });
        }
    }
    let classes: Vec<String> = labels
        .iter()
        .map(|l| l.as_ref())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    if classes.len() < 2 {
        return Err(GbdtError::SingleClassDataset(classes[0].clone()));
    }
    let k = classes.len();
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.iter().position(|c| c == l.as_ref()).unwrap())
        .collect();

    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut val_idx = Vec::new();
    if config.early_stopping_rounds.is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        order.shuffle(&mut rng);
        let n_val = ((rows.len() as f64 * config.validation_fraction).round() as usize)
            .clamp(1, rows.len() - 1);
        val_idx = order.split_off(rows.len() - n_val);
        order.sort_unstable();
        val_idx.sort_unstable();
    }
    let train_rows: Vec<&R> = order.iter().map(|&i| &rows[i]).collect();
    let train_y: Vec<usize> = order.iter().map(|&i| y[i]).collect();
    if train_y.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(GbdtError::SingleClassDataset(classes[train_y[0]].clone()));
    }
    let val_y: Vec<usize> = val_idx.iter().map(|&i| y[i]).collect();

    let n = train_rows.len();
    let mut counts = vec![0usize; k];
    for &c in &train_y {
        counts[c] += 1;
    }
    let base_scores: Vec<f64> = counts
        .iter()
        .map(|&c| ((c as f64).max(0.5) / n as f64).ln())
        .collect();

    let data = bin_features(&train_rows, n_features, config.bins);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.worker_parallelism)
        .build()
        .map_err(|e| GbdtError::InvalidConfig(e.to_string()))?;

    let mut margins: Vec<f64> = (0..n).flat_map(|_| base_scores.iter().copied()).collect();
    let mut val_margins: Vec<f64> = (0..val_idx.len())
        .flat_map(|_| base_scores.iter().copied())
        .collect();
    let mut grad = vec![0.0; n * k];
    let mut hess = vec![0.0; n * k];
    let mut history = TrainHistory {
        train_loss: vec![log_loss(&margins, &train_y, k)],
        validation_loss: Vec::new(),
    };
    if !val_idx.is_empty() {
        history
            .validation_loss
            .push(log_loss(&val_margins, &val_y, k));
    }
    let mut trees = Vec::with_capacity(config.iterations);
    let mut best = (f64::INFINITY, 0usize);

    for it in 0..config.iterations {
        gradients(&margins, &train_y, k, &mut grad, &mut hess);
        let tree = grow_tree(&data, &grad, &hess, k, config, &pool);
        for (i, row) in train_rows.iter().enumerate() {
            let leaf = &tree.leaves[tree.leaf_index(row.as_ref())];
            for c in 0..k {
                margins[i * k + c] += leaf.values[c];
            }
        }
        history.train_loss.push(log_loss(&margins, &train_y, k));
        trees.push(tree);

        if let Some(patience) = config.early_stopping_rounds {
            let tree = trees.last().unwrap();
            for (j, &i) in val_idx.iter().enumerate() {
                let leaf = &tree.leaves[tree.leaf_index(rows[i].as_ref())];
                for c in 0..k {
                    val_margins[j * k + c] += leaf.values[c];
                }
            }
            let vl = log_loss(&val_margins, &val_y, k);
            history.validation_loss.push(vl);
            if vl < best.0 {
                best = (vl, it + 1);
            } else if it + 1 - best.1 >= patience {
                trees.truncate(best.1);
                break;
            }
        }
    }

    Ok((
        TreeEnsemble {
            format_version: MODEL_FORMAT_VERSION,
            classes,
            base_scores,
            feature_count: n_features,
            bin_edges: data.edges,
            trees,
        },
        history,
    ))
}
