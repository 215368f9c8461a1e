//! Aggregation of per-feature Shapley values into component and branch
//! level strategy measures.
//!
//! For one attack class: each component's per-sample attribution is the sum
//! of its `k` eigenvalue features' phi on the attack's own class margin.
//! Branch sums add the component means, confidence scores discount the
//! absolute sum by the dispersion of the component means, and a softmax
//! over blocks turns confidences into contribution shares.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataio::{ComponentId, Layout};
use crate::treeshap::ShapAttribution;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AttrError {
    #[error("no samples for attack `{0}`")]
    NoSamplesForAttack(String),
    #[error("attribution has {actual} features, layout expects {expected}")]
    LayoutMismatch { expected: usize, actual: usize },
    #[error("block `{0}` has no components")]
    EmptyBlock(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 values, got {0}")]
    DegenerateLength(usize),
    #[error("rank correlation undefined for a constant ranking")]
    ConstantRanking,
    #[error("need at least 2 samples, got {0}")]
    InsufficientSamples(usize),
    #[error("unsupported alpha {0}; use 0.10, 0.05 or 0.01")]
    UnsupportedAlpha(f64),
    #[error("non-finite value in input")]
    NonFinite,
    #[error("unknown penalty `{0}`")]
    UnknownPenalty(String),
}

/// Denominator applied to `|Φ_b|` in the confidence score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Penalty {
    /// `1 + σ`
    #[serde(rename = "LINEAR")]
    Linear,
    /// `1 + σ²`
    #[serde(rename = "QUADRATIC")]
    Quadratic,
    /// `e^σ`
    #[serde(rename = "EXPONENTIAL")]
    Exponential,
    #[serde(rename = "NONE")]
    None,
}

impl Penalty {
    pub const ALL: [Penalty; 4] = [
        Penalty::Linear,
        Penalty::Quadratic,
        Penalty::Exponential,
        Penalty::None,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Penalty::Linear => "LINEAR",
            Penalty::Quadratic => "QUADRATIC",
            Penalty::Exponential => "EXPONENTIAL",
            Penalty::None => "NONE",
        }
    }

    pub fn apply(self, abs_sum: f64, sigma: f64) -> f64 {
        match self {
            Penalty::Linear => abs_sum / (1.0 + sigma),
            Penalty::Quadratic => abs_sum / (1.0 + sigma * sigma),
            Penalty::Exponential => abs_sum / sigma.exp(),
            Penalty::None => abs_sum,
        }
    }
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Penalty {
    type Err = AttrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Penalty::ALL
            .into_iter()
            .find(|p| p.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| AttrError::UnknownPenalty(s.to_string()))
    }
}

/// Divisor convention for the within-block dispersion σ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Dispersion {
    /// Divide by `n`; singleton blocks get σ = 0.
    #[default]
    #[serde(rename = "POPULATION")]
    Population,
    /// Divide by `n - 1`; singleton blocks get σ = 0.
    #[serde(rename = "SAMPLE")]
    Sample,
}

impl Dispersion {
    pub fn std(self, values: &[f64]) -> f64 {
        let n = values.len();
        if n < 2 {
            return 0.0;
        }
        // shifted by the first value so identical inputs give exactly 0
        let d: Vec<f64> = values.iter().map(|v| v - values[0]).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let ss: f64 = d.iter().map(|v| (v - mean) * (v - mean)).sum();
        let div = match self {
            Dispersion::Population => n as f64,
            Dispersion::Sample => (n - 1) as f64,
        };
        (ss / div).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentAttribution {
    pub attack: String,
    pub component: ComponentId,
    pub mean_phi: f64,
    pub n: usize,
    pub ci_half_width: f64,
    /// Per-sample component attribution, in sample order.
    pub per_sample: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchAttribution {
    pub attack: String,
    pub block: String,
    pub phi_sum: f64,
    pub ci_half_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    pub attack: String,
    pub block: String,
    pub penalty: Penalty,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareVector {
    pub attack: String,
    pub blocks: Vec<String>,
    pub shares: Vec<f64>,
}

impl ShareVector {
    /// Index and value of the largest share; earliest block wins ties.
    pub fn dominant(&self) -> (usize, f64) {
        argmax_first(&self.shares)
    }
}

pub(crate) fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub mean: f64,
    pub std: f64,
    pub se: f64,
    pub ci_half_width: f64,
    pub n: usize,
    pub alpha: f64,
}

/// Two-sided standard normal quantile `z_{1-α/2}` for the supported levels.
pub fn z_quantile(alpha: f64) -> Result<f64, AttrError> {
    const TABLE: [(f64, f64); 3] = [(0.10, 1.645), (0.05, 1.96), (0.01, 2.576)];
    TABLE
        .iter()
        .find(|(a, _)| (a - alpha).abs() < 1e-12)
        .map(|&(_, z)| z)
        .ok_or(AttrError::UnsupportedAlpha(alpha))
}

/// Mean with a normal-approximation confidence half-width.
pub fn mean_ci(values: &[f64], alpha: f64) -> Result<SummaryStats, AttrError> {
    let z = z_quantile(alpha)?;
    let n = values.len();
    if n < 2 {
        return Err(AttrError::InsufficientSamples(n));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AttrError::NonFinite);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let se = std / (n as f64).sqrt();
    Ok(SummaryStats {
        mean,
        std,
        se,
        ci_half_width: z * se,
        n,
        alpha,
    })
}

/// Half-width for `values`, or 0 when fewer than two are available.
fn half_width(values: &[f64], alpha: f64) -> Result<f64, AttrError> {
    if values.len() < 2 {
        z_quantile(alpha)?;
        return Ok(0.0);
    }
    Ok(mean_ci(values, alpha)?.ci_half_width)
}

/// Component-level mean attribution for one attack.
///
/// `samples` pairs each attribution with its sample's class label; only
/// rows labelled `attack` whose attribution targets `attack_class` count.
pub fn component_phi(
    samples: &[(&str, &ShapAttribution)],
    layout: &Layout,
    attack: &str,
    attack_class: usize,
    k: usize,
    alpha: f64,
) -> Result<Vec<ComponentAttribution>, AttrError> {
    let expected = layout.len() * k;
    let rows: Vec<&ShapAttribution> = samples
        .iter()
        .filter(|(label, a)| *label == attack && a.class == attack_class)
        .map(|(_, a)| *a)
        .collect();
    if rows.is_empty() {
        return Err(AttrError::NoSamplesForAttack(attack.to_string()));
    }
    if let Some(bad) = rows.iter().find(|a| a.phi.len() != expected) {
        return Err(AttrError::LayoutMismatch {
            expected,
            actual: bad.phi.len(),
        });
    }
    layout
        .component_ids()
        .enumerate()
        .map(|(ci, id)| {
            let per_sample: Vec<f64> = rows
                .iter()
                .map(|a| a.phi[ci * k..(ci + 1) * k].iter().sum())
                .collect();
            let n = per_sample.len();
            let mean_phi = per_sample.iter().sum::<f64>() / n as f64;
            Ok(ComponentAttribution {
                attack: attack.to_string(),
                component: id,
                mean_phi,
                n,
                ci_half_width: half_width(&per_sample, alpha)?,
                per_sample,
            })
        })
        .collect()
}

fn block_members<'a>(
    components: &'a [ComponentAttribution],
    block: &str,
) -> Result<Vec<&'a ComponentAttribution>, AttrError> {
    let members: Vec<_> = components
        .iter()
        .filter(|c| c.component.block == block)
        .collect();
    if members.is_empty() {
        return Err(AttrError::EmptyBlock(block.to_string()));
    }
    Ok(members)
}

/// Per-sample block sums, when every member has the same sample count.
fn per_sample_block_sums(members: &[&ComponentAttribution]) -> Option<Vec<f64>> {
    let n = members[0].per_sample.len();
    if members.iter().any(|m| m.per_sample.len() != n) {
        return None;
    }
    Some(
        (0..n)
            .map(|s| members.iter().map(|m| m.per_sample[s]).sum())
            .collect(),
    )
}

/// Branch attribution sum `Φ_b` over the block's components.
pub fn branch_sum(
    components: &[ComponentAttribution],
    block: &str,
    alpha: f64,
) -> Result<BranchAttribution, AttrError> {
    let members = block_members(components, block)?;
    let phi_sum = members.iter().map(|c| c.mean_phi).sum();
    let ci_half_width = match per_sample_block_sums(&members) {
        Some(sums) => half_width(&sums, alpha)?,
        None => 0.0,
    };
    Ok(BranchAttribution {
        attack: members[0].attack.clone(),
        block: block.to_string(),
        phi_sum,
        ci_half_width,
    })
}

/// Confidence score from a block's component means.
pub fn confidence_value(means: &[f64], penalty: Penalty, dispersion: Dispersion) -> f64 {
    let abs_sum = means.iter().sum::<f64>().abs();
    penalty.apply(abs_sum, dispersion.std(means))
}

/// Variance-penalised confidence of one block.
pub fn confidence(
    components: &[ComponentAttribution],
    block: &str,
    penalty: Penalty,
    dispersion: Dispersion,
) -> Result<ConfidenceScore, AttrError> {
    let members = block_members(components, block)?;
    let means: Vec<f64> = members.iter().map(|c| c.mean_phi).collect();
    Ok(ConfidenceScore {
        attack: members[0].attack.clone(),
        block: block.to_string(),
        penalty,
        value: confidence_value(&means, penalty, dispersion),
    })
}

/// Softmax of block scores.
pub fn softmax_shares(scores: &[f64]) -> Result<Vec<f64>, AttrError> {
    if scores.len() < 2 {
        return Err(AttrError::DegenerateLength(scores.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(AttrError::NonFinite);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn shares(attack: &str, scores: &[f64], blocks: &[String]) -> Result<ShareVector, AttrError> {
    if scores.len() != blocks.len() {
        return Err(AttrError::LengthMismatch(scores.len(), blocks.len()));
    }
    Ok(ShareVector {
        attack: attack.to_string(),
        blocks: blocks.to_vec(),
        shares: softmax_shares(scores)?,
    })
}

/// Kendall τ-b, computed with Knight's sort-and-merge algorithm.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64, AttrError> {
    if a.len() != b.len() {
        return Err(AttrError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(AttrError::DegenerateLength(n));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(AttrError::NonFinite);
    }
    let mut pairs: Vec<(f64, f64)> = a.iter().copied().zip(b.iter().copied()).collect();
    pairs.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.total_cmp(&q.1)));

    let tie_pairs = |run: usize| (run * (run - 1) / 2) as u64;
    let (mut ties_a, mut ties_joint) = (0u64, 0u64);
    let (mut run_a, mut run_joint) = (1usize, 1usize);
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 {
            run_a += 1;
            if w[0].1 == w[1].1 {
                run_joint += 1;
            } else {
                ties_joint += tie_pairs(run_joint);
                run_joint = 1;
            }
        } else {
            ties_a += tie_pairs(run_a);
            ties_joint += tie_pairs(run_joint);
            run_a = 1;
            run_joint = 1;
        }
    }
    ties_a += tie_pairs(run_a);
    ties_joint += tie_pairs(run_joint);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_count(&mut ys);

    let mut ties_b = 0u64;
    let mut run_b = 1usize;
    for w in ys.windows(2) {
        if w[0] == w[1] {
            run_b += 1;
        } else {
            ties_b += tie_pairs(run_b);
            run_b = 1;
        }
    }
    ties_b += tie_pairs(run_b);

    let total = tie_pairs(n);
    if ties_a == total || ties_b == total {
        return Err(AttrError::ConstantRanking);
    }
    let numerator =
        total as f64 - ties_a as f64 - ties_b as f64 + ties_joint as f64 - 2.0 * swaps as f64;
    let denom = ((total - ties_a) as f64 * (total - ties_b) as f64).sqrt();
    Ok((numerator / denom).clamp(-1.0, 1.0))
}

/// Sorts ascending and returns the number of strict inversions.
fn merge_count(v: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid]) + merge_count(&mut v[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if v[j] < v[i] {
            swaps += (mid - i) as u64;
            merged.push(v[j]);
            j += 1;
        } else {
            merged.push(v[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&v[i..mid]);
    merged.extend_from_slice(&v[j..n]);
    v.copy_from_slice(&merged);
    swaps
}

/// Scores, shares and intervals for one block ordering under one penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyView {
    pub penalty: Penalty,
    pub scores: Vec<f64>,
    pub score_ci: Vec<f64>,
    pub shares: Vec<f64>,
    pub share_ci: Vec<f64>,
    pub dominant: usize,
}

/// Everything the reports need about one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackAttribution {
    pub attack: String,
    pub n: usize,
    pub components: Vec<ComponentAttribution>,
    pub branches: Vec<BranchAttribution>,
    pub views: Vec<PenaltyView>,
}

impl AttackAttribution {
    pub fn view(&self, penalty: Penalty) -> Option<&PenaltyView> {
        self.views.iter().find(|v| v.penalty == penalty)
    }
}

/// Runs the full aggregation for one attack.
///
/// Score and share intervals come from the spread of the same quantities
/// computed on each sample individually; the point values use the
/// aggregated component means.
#[allow(clippy::too_many_arguments)]
pub fn analyze_attack(
    samples: &[(&str, &ShapAttribution)],
    layout: &Layout,
    attack: &str,
    attack_class: usize,
    k: usize,
    alpha: f64,
    penalties: &[Penalty],
    dispersion: Dispersion,
) -> Result<AttackAttribution, AttrError> {
    let components = component_phi(samples, layout, attack, attack_class, k, alpha)?;
    let blocks = layout.blocks();
    let branches = blocks
        .iter()
        .map(|b| branch_sum(&components, b, alpha))
        .collect::<Result<Vec<_>, _>>()?;
    let n = components[0].n;
    let members: Vec<Vec<usize>> = blocks.iter().map(|b| layout.block_members(b)).collect();

    let mut views = Vec::with_capacity(penalties.len());
    for &penalty in penalties {
        let scores = blocks
            .iter()
            .map(|b| confidence(&components, b, penalty, dispersion).map(|c| c.value))
            .collect::<Result<Vec<_>, _>>()?;
        let share_vec = softmax_shares(&scores)?;

        let mut per_sample_scores = vec![Vec::with_capacity(n); blocks.len()];
        let mut per_sample_shares = vec![Vec::with_capacity(n); blocks.len()];
        for s in 0..n {
            let sample_scores: Vec<f64> = members
                .iter()
                .map(|m| {
                    let vals: Vec<f64> = m.iter().map(|&ci| components[ci].per_sample[s]).collect();
                    confidence_value(&vals, penalty, dispersion)
                })
                .collect();
            let sample_shares = softmax_shares(&sample_scores)?;
            for b in 0..blocks.len() {
                per_sample_scores[b].push(sample_scores[b]);
                per_sample_shares[b].push(sample_shares[b]);
            }
        }
        let score_ci = per_sample_scores
            .iter()
            .map(|v| half_width(v, alpha))
            .collect::<Result<Vec<_>, _>>()?;
        let share_ci = per_sample_shares
            .iter()
            .map(|v| half_width(v, alpha))
            .collect::<Result<Vec<_>, _>>()?;
        let dominant = argmax_first(&share_vec).0;
        views.push(PenaltyView {
            penalty,
            scores,
            score_ci,
            shares: share_vec,
            share_ci,
            dominant,
        });
    }
    Ok(AttackAttribution {
        attack: attack.to_string(),
        n,
        components,
        branches,
        views,
    })
}

/// Ranks (1 = largest) of `scores`, ties sharing the earliest position's
/// rank order by index.
pub fn block_ranking(scores: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut ranks = vec![0.0; scores.len()];
    for (r, i) in idx.into_iter().enumerate() {
        ranks[i] = (r + 1) as f64;
    }
    ranks
}

/// Groups attributions by sample label, preserving input order.
pub fn group_by_label<'a>(
    samples: &[(&'a str, &'a ShapAttribution)],
) -> BTreeMap<&'a str, Vec<(&'a str, &'a ShapAttribution)>> {
    let mut out: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    for &(label, a) in samples {
        out.entry(label).or_default().push((label, a));
    }
    out
}
