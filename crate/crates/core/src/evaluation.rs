//! Detection performance and strategy analytics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::z_quantile;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("score set needs bona fide and spoof scores")]
    EmptyScores,
    #[error("non-finite score")]
    NonFinite,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 paired values, got {0}")]
    TooFewValues(usize),
    #[error("input has zero variance")]
    ZeroVariance,
    #[error("empty input")]
    EmptyInput,
    #[error("{what} = {value} is outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid archetype thresholds: {0}")]
    InvalidThresholds(String),
    #[error("unsupported alpha {0}")]
    UnsupportedAlpha(f64),
}

/// Detector scores, higher meaning more spoof-like.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreSet {
    pub bona_scores: Vec<f64>,
    pub spoof_scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EerResult {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate at the interpolated crossing of FRR and FAR.
///
/// At threshold θ, `FRR = #{bona ≥ θ}/n_bona` and `FAR = #{spoof < θ}/n_spoof`.
/// Operating points are taken at every distinct pooled score plus one
/// point above the maximum; the crossing is linearly interpolated between
/// the last point with FRR > FAR and the first with FRR ≤ FAR.
pub fn eer(scores: &ScoreSet) -> Result<EerResult, EvalError> {
    let (bona, spoof) = (&scores.bona_scores, &scores.spoof_scores);
    if bona.is_empty() || spoof.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    if bona.iter().chain(spoof).any(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let mut b = bona.clone();
    let mut s = spoof.clone();
    b.sort_by(f64::total_cmp);
    s.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = b.iter().chain(&s).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let top = thresholds[thresholds.len() - 1];
    let above = top + top.abs().max(1.0);

    let nb = b.len() as f64;
    let ns = s.len() as f64;
    let point = |t: f64| {
        let frr = (b.len() - b.partition_point(|&v| v < t)) as f64 / nb;
        let far = s.partition_point(|&v| v < t) as f64 / ns;
        (frr, far)
    };

    let mut prev = (thresholds[0], point(thresholds[0]));
    for &t in thresholds[1..].iter().chain(std::iter::once(&above)) {
        let cur = (t, point(t));
        let d_prev = prev.1 .0 - prev.1 .1;
        let d_cur = cur.1 .0 - cur.1 .1;
        if d_cur <= 0.0 {
            let w = d_prev / (d_prev - d_cur);
            let far = prev.1 .1 + w * (cur.1 .1 - prev.1 .1);
            return Ok(EerResult {
                eer: far,
                threshold: prev.0 + w * (cur.0 - prev.0),
            });
        }
        prev = cur;
    }
    unreachable!("FRR - FAR reaches -1 above the largest score")
}

/// EER with a bootstrap half-width (`z · sd` over `resamples` resampled
/// score sets, both classes resampled with replacement).
pub fn eer_with_ci(
    scores: &ScoreSet,
    alpha: f64,
    resamples: usize,
    seed: u64,
) -> Result<(EerResult, f64), EvalError> {
    let base = eer(scores)?;
    let z = z_quantile(alpha).map_err(|_| EvalError::UnsupportedAlpha(alpha))?;
    if resamples < 2 {
        return Ok((base, 0.0));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |src: &[f64], rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..src.len())
            .map(|_| src[rng.gen_range(0..src.len())])
            .collect()
    };
    let mut vals = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let rs = ScoreSet {
            bona_scores: draw(&scores.bona_scores, &mut rng),
            spoof_scores: draw(&scores.spoof_scores, &mut rng),
        };
        vals.push(eer(&rs)?.eer);
    }
    let m = vals.iter().sum::<f64>() / resamples as f64;
    let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (resamples - 1) as f64).sqrt();
    Ok((base, z * sd))
}

fn check_pairs(xs: &[f64], ys: &[f64]) -> Result<(), EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewValues(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    Ok(())
}

/// Pearson product-moment correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    check_pairs(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    check_pairs(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// Unweighted mean of per-class F1 over the union of observed labels.
pub fn f1_macro<S: AsRef<str>>(predicted: &[S], actual: &[S]) -> Result<f64, EvalError> {
    if predicted.len() != actual.len() {
        return Err(EvalError::LengthMismatch(predicted.len(), actual.len()));
    }
    if predicted.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let labels: BTreeSet<&str> = predicted.iter().chain(actual).map(|s| s.as_ref()).collect();
    let mut total = 0.0;
    for &label in &labels {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (p, a) in predicted.iter().zip(actual) {
            match (p.as_ref() == label, a.as_ref() == label) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    Ok(total / labels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ArchetypeLabel {
    #[serde(rename = "EFFECTIVE_SPECIALIZATION")]
    EffectiveSpecialization,
    #[serde(rename = "EFFECTIVE_CONSENSUS")]
    EffectiveConsensus,
    #[serde(rename = "INEFFECTIVE_CONSENSUS")]
    IneffectiveConsensus,
    #[serde(rename = "INEFFECTIVE_SPECIALIZATION")]
    IneffectiveSpecialization,
    #[serde(rename = "FLAWED_SPECIALIZATION")]
    FlawedSpecialization,
}

impl ArchetypeLabel {
    pub const ALL: [ArchetypeLabel; 5] = [
        ArchetypeLabel::EffectiveSpecialization,
        ArchetypeLabel::EffectiveConsensus,
        ArchetypeLabel::IneffectiveConsensus,
        ArchetypeLabel::IneffectiveSpecialization,
        ArchetypeLabel::FlawedSpecialization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchetypeLabel::EffectiveSpecialization => "EFFECTIVE_SPECIALIZATION",
            ArchetypeLabel::EffectiveConsensus => "EFFECTIVE_CONSENSUS",
            ArchetypeLabel::IneffectiveConsensus => "INEFFECTIVE_CONSENSUS",
            ArchetypeLabel::IneffectiveSpecialization => "INEFFECTIVE_SPECIALIZATION",
            ArchetypeLabel::FlawedSpecialization => "FLAWED_SPECIALIZATION",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for ArchetypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Quadrant boundaries, all in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchetypeThresholds {
    pub eer_low: f64,
    pub eer_high: f64,
    pub share: f64,
}

impl Default for ArchetypeThresholds {
    fn default() -> Self {
        Self {
            eer_low: 1.0,
            eer_high: 10.0,
            share: 20.0,
        }
    }
}

impl ArchetypeThresholds {
    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.eer_low < self.eer_high) {
            return Err(EvalError::InvalidThresholds(
                "eer_low must be below eer_high".into(),
            ));
        }
        if !(self.share > 0.0 && self.share < 100.0) {
            return Err(EvalError::InvalidThresholds(
                "share must be in (0, 100)".into(),
            ));
        }
        Ok(())
    }
}

/// Quadrant rule over (EER %, dominant share %).
pub fn classify_archetype(
    eer_percent: f64,
    dominant_share_percent: f64,
    t: &ArchetypeThresholds,
) -> Result<ArchetypeLabel, EvalError> {
    if !(0.0..=100.0).contains(&eer_percent) {
        return Err(EvalError::OutOfRange {
            what: "eer",
            value: eer_percent,
            lo: 0.0,
            hi: 100.0,
        });
    }
    if !(dominant_share_percent > 0.0 && dominant_share_percent < 100.0) {
        return Err(EvalError::OutOfRange {
            what: "dominant share",
            value: dominant_share_percent,
            lo: 0.0,
            hi: 100.0,
        });
    }
    let specialized = dominant_share_percent >= t.share;
    use ArchetypeLabel::*;
    Ok(if eer_percent < t.eer_low {
        if specialized {
            EffectiveSpecialization
        } else {
            EffectiveConsensus
        }
    } else if eer_percent <= t.eer_high {
        if specialized {
            IneffectiveSpecialization
        } else {
            IneffectiveConsensus
        }
    } else if specialized {
        FlawedSpecialization
    } else {
        IneffectiveConsensus
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub label: ArchetypeLabel,
    pub mean: f64,
    pub std: f64,
    pub var: f64,
    pub count: usize,
}

/// Per-archetype mean/std/var of dominant shares (sample std; singletons
/// report 0). Output follows [`ArchetypeLabel`] order.
pub fn group_stats(records: &[(ArchetypeLabel, f64)]) -> Result<Vec<GroupStats>, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut groups: BTreeMap<ArchetypeLabel, Vec<f64>> = BTreeMap::new();
    for &(l, s) in records {
        groups.entry(l).or_default().push(s);
    }
    Ok(groups
        .into_iter()
        .map(|(label, v)| {
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 {
                v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
            } else {
                0.0
            };
            GroupStats {
                label,
                mean,
                std: var.sqrt(),
                var,
                count: n,
            }
        })
        .collect())
}
