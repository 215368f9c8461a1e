//! Eigenvalue-count and penalty-function ablations.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{argmax_first, block_ranking, kendall_tau, AttackAttribution, Penalty};
use crate::dataio::load_manifest;
use crate::evaluation::f1_macro;
use crate::gbdt::fit;

use super::{
    aggregate_stage, extract_features, shap_stage, train_stage, ActivationSource, PipelineConfig,
    PipelineError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigRecord {
    pub k: usize,
    pub f1_macro: f64,
    pub memory_bytes: u64,
    pub f1_retention_pct: f64,
    pub memory_savings_pct: f64,
}

/// Deterministic stratified split. Each class contributes
/// `round(test_fraction · n)` test rows, clamped to `1..n` when `n ≥ 2`.
/// Returns sorted (train, test) index lists.
pub fn stratified_split<S: AsRef<str>>(
    labels: &[S],
    test_fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        by_class.entry(l.as_ref()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for mut idx in by_class.into_values() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let n_test = if n < 2 {
            0
        } else {
            ((test_fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        test.extend_from_slice(&idx[..n_test]);
        train.extend_from_slice(&idx[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Held-out macro-F1 and the linear memory model for each `k` in `ks`.
pub fn eig_curve<S: ActivationSource + ?Sized>(
    source: &S,
    config: &PipelineConfig,
    ks: &[usize],
) -> Result<Vec<EigRecord>, PipelineError> {
    config.validate()?;
    if ks.is_empty() || ks.contains(&0) {
        return Err(PipelineError::ConfigInvalid(
            "ks must be non-empty and each >= 1".into(),
        ));
    }
    let k_max = *ks.iter().max().unwrap();
    let features = extract_features(source, k_max, config.group_size, config.jobs())?;
    let labels = features.labels();
    let (train, test) = stratified_split(&labels, 0.2, config.seed);
    let train_cfg = config.effective_train();
    let n_samples = features.samples.len() as u64;
    let n_comp = features.layout.len() as u64;

    let mut f1s = Vec::with_capacity(ks.len());
    for &k in ks {
        let rows = features.rows(k);
        let tr_rows: Vec<&[f64]> = train.iter().map(|&i| rows[i].as_slice()).collect();
        let tr_labels: Vec<&str> = train.iter().map(|&i| labels[i]).collect();
        let model = fit(&tr_rows, &tr_labels, &train_cfg)?;
        let mut predicted = Vec::with_capacity(test.len());
        for &i in &test {
            let p = model.predict_proba(&rows[i])?;
            predicted.push(model.classes[argmax_first(&p).0].as_str());
        }
        let actual: Vec<&str> = test.iter().map(|&i| labels[i]).collect();
        f1s.push(f1_macro(&predicted, &actual)?);
    }
    let best = f1s.iter().copied().fold(0.0, f64::max);
    Ok(ks
        .iter()
        .zip(f1s)
        .map(|(&k, f1)| EigRecord {
            k,
            f1_macro: f1,
            memory_bytes: n_samples * n_comp * k as u64 * 8,
            f1_retention_pct: if best > 0.0 { 100.0 * f1 / best } else { 0.0 },
            memory_savings_pct: 100.0 * (1.0 - k as f64 / k_max as f64),
        })
        .collect())
}

/// Loads the configured dataset and runs [`eig_curve`].
pub fn ablate_eigencount(
    config: &PipelineConfig,
    ks: &[usize],
) -> Result<Vec<EigRecord>, PipelineError> {
    let manifest = load_manifest(config.dataset_path()?)?;
    eig_curve(&manifest, config, ks)
}

/// Dominant block per (attack, penalty) and Kendall τ of each penalty's
/// concatenated block ranking against LINEAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyAblation {
    pub penalties: Vec<Penalty>,
    pub dominant: Vec<(String, Vec<String>)>,
    pub tau: Vec<f64>,
}

/// Builds the ablation table from attributions computed under every
/// penalty in [`Penalty::ALL`].
pub fn penalty_table(
    attributions: &[AttackAttribution],
    blocks: &[String],
) -> Result<PenaltyAblation, PipelineError> {
    let penalties = Penalty::ALL.to_vec();
    let mut dominant = Vec::with_capacity(attributions.len());
    let mut ranks: Vec<Vec<f64>> = vec![Vec::new(); penalties.len()];
    for a in attributions {
        let mut row = Vec::with_capacity(penalties.len());
        for (pi, &p) in penalties.iter().enumerate() {
            let view = a.view(p).ok_or_else(|| {
                PipelineError::ConfigInvalid(format!(
                    "attribution for {} lacks penalty {p}",
                    a.attack
                ))
            })?;
            row.push(blocks[view.dominant].clone());
            ranks[pi].extend(block_ranking(&view.scores));
        }
        dominant.push((a.attack.clone(), row));
    }
    let linear = penalties
        .iter()
        .position(|&p| p == Penalty::Linear)
        .unwrap();
    let tau = ranks
        .iter()
        .map(|r| kendall_tau(&ranks[linear], r))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PenaltyAblation {
        penalties,
        dominant,
        tau,
    })
}

/// Runs the attribution stages under all four penalties and tabulates.
pub fn ablate_penalty_on<S: ActivationSource + ?Sized>(
    source: &S,
    config: &PipelineConfig,
) -> Result<PenaltyAblation, PipelineError> {
    config.validate()?;
    let features = extract_features(source, config.k, config.group_size, config.jobs())?;
    let model = train_stage(&features, config.k, config)?;
    let shap = shap_stage(&model, &features, config.jobs())?;
    let attributions = aggregate_stage(&model, &features, &shap, config, &Penalty::ALL)?;
    penalty_table(&attributions, features.layout.blocks())
}

pub fn ablate_penalty(config: &PipelineConfig) -> Result<PenaltyAblation, PipelineError> {
    let manifest = load_manifest(config.dataset_path()?)?;
    ablate_penalty_on(&manifest, config)
}
