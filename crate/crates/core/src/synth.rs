//! Synthetic multi-branch activation datasets with planted strategies.
//!
//! A plant rescales a few orthonormal directions of a component's
//! covariance: columns are `x = z + (√a - 1)·Q·Qᵀ·z` with `z ~ N(0, I)`, so
//! the covariance is `I + (a - 1)·Q·Qᵀ`, eigenvalue `a` along `Q` and 1
//! elsewhere. Per-feature means are untouched; only the spectrum moves.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    manifest_json, tensor, ActivationMatrix, DataError, Layout, Role, SampleRecord, TensorEntry,
};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// How a class uses the architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    /// Every component of one block carries the signal.
    Expert(String),
    /// All blocks carry a mild signal.
    Consensus,
    /// HSGAL components of the block amplify, its POOL component shrinks.
    Conflict(String),
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::Expert(b) => write!(f, "EXPERT({b})"),
            Strategy::Consensus => f.write_str("CONSENSUS"),
            Strategy::Conflict(b) => write!(f, "CONFLICT({b})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: Vec<String>,
    /// Label of the unplanted reference class, if it appears in `classes`.
    pub bonafide_label: String,
    pub layout: Layout,
    /// Feature dimension D of every component.
    pub rows: usize,
    /// Column count N of every component.
    pub cols: usize,
    pub samples_per_class: usize,
    pub strategy_map: BTreeMap<String, Strategy>,
    pub signal_strength: f64,
    pub noise_scale: f64,
    /// Signature length the plant targets; `ceil(k/2)` directions move.
    pub k: usize,
    pub seed: u64,
    /// Mean detector score of attack samples (bona fide scores are N(0, 1)).
    /// `None` leaves `detector_score` unset.
    pub score_separation: Option<f64>,
    /// Per-class overrides of `score_separation`.
    pub class_score_separation: BTreeMap<String, f64>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            classes: Vec::new(),
            bonafide_label: "bonafide".into(),
            layout: Layout::canonical(),
            rows: 16,
            cols: 32,
            samples_per_class: 200,
            strategy_map: BTreeMap::new(),
            signal_strength: 4.0,
            noise_scale: 1.0,
            k: 10,
            seed: 0,
            score_separation: None,
            class_score_separation: BTreeMap::new(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.classes.len() < 2 {
            return bad("need at least 2 classes".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.classes {
            if c.is_empty() || !seen.insert(c) {
                return bad(format!("class labels must be unique and non-empty ({c:?})"));
            }
        }
        if self.samples_per_class < 2 {
            return bad("samples_per_class must be at least 2".into());
        }
        if self.rows == 0 || self.cols == 0 {
            return bad("rows and cols must be positive".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return bad("signal_strength must be finite and >= 0".into());
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return bad("noise_scale must be finite and > 0".into());
        }
        for c in &self.classes {
            if *c == self.bonafide_label {
                continue;
            }
            match self.strategy_map.get(c) {
                None => return bad(format!("no strategy for class {c}")),
                Some(Strategy::Expert(b)) | Some(Strategy::Conflict(b)) => {
                    if !self.layout.blocks().contains(b) {
                        return bad(format!("class {c} targets unknown block {b}"));
                    }
                }
                Some(Strategy::Consensus) => {}
            }
        }
        for c in self.strategy_map.keys() {
            if !self.classes.contains(c) {
                return bad(format!("strategy given for unknown class {c}"));
            }
        }
        for v in self
            .score_separation
            .iter()
            .chain(self.class_score_separation.values())
        {
            if !v.is_finite() {
                return bad("score separations must be finite".into());
            }
        }
        Ok(())
    }

    /// Number of planted directions per component.
    pub fn planted_directions(&self) -> usize {
        self.k.div_ceil(2).min(self.rows)
    }

    /// Covariance factor along the planted directions for each layout
    /// component under `strategy`.
    fn factors(&self, strategy: Option<&Strategy>) -> Vec<f64> {
        let s = self.signal_strength;
        self.layout
            .components()
            .iter()
            .map(|c| match strategy {
                None => 1.0,
                Some(Strategy::Expert(b)) if *b == c.block => 1.0 + s,
                Some(Strategy::Expert(_)) => 1.0,
                Some(Strategy::Consensus) => 1.0 + s / 4.0,
                Some(Strategy::Conflict(b)) if *b == c.block => match c.role {
                    Role::Pool => 1.0 / (1.0 + s),
                    _ => 1.0 + s,
                },
                Some(Strategy::Conflict(_)) => 1.0,
            })
            .collect()
    }
}

/// Generated dataset held in memory. `activations[sample][component]`
/// follows the layout's component order.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub layout: Layout,
    pub samples: Vec<SampleRecord>,
    pub activations: Vec<Vec<ActivationMatrix>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// `m` orthonormal vectors of length `d` (modified Gram-Schmidt on
/// Gaussian draws, redrawn on the rare near-dependent vector).
fn random_orthonormal(d: usize, m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        for q in &basis {
            let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Draws one D×N matrix with column covariance `scale²·(I + (factor - 1)·Q·Qᵀ)`.
fn planted_matrix(
    rows: usize,
    cols: usize,
    q: &[Vec<f64>],
    factor: f64,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    // draw row-major so the RNG stream order is independent of the plant
    let mut z: Vec<f64> = (0..rows * cols).map(|_| normal(rng)).collect();
    if factor != 1.0 {
        let stretch = factor.sqrt() - 1.0;
        let mut proj = vec![0.0; q.len()];
        for c in 0..cols {
            for (p, dir) in proj.iter_mut().zip(q) {
                *p = (0..rows).map(|r| dir[r] * z[r * cols + c]).sum();
            }
            for r in 0..rows {
                let back: f64 = proj.iter().zip(q).map(|(p, dir)| p * dir[r]).sum();
                z[r * cols + c] += stretch * back;
            }
        }
    }
    if scale != 1.0 {
        z.iter_mut().for_each(|v| *v *= scale);
    }
    z
}

/// Generates the dataset. Bit-identical for identical configs.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_comp = config.layout.len();
    let m = config.planted_directions();

    // class- and component-specific directions come first in the stream
    let directions: Vec<Vec<Vec<Vec<f64>>>> = config
        .classes
        .iter()
        .map(|_| {
            (0..n_comp)
                .map(|_| random_orthonormal(config.rows, m, &mut rng))
                .collect()
        })
        .collect();

    let ids: Vec<_> = config.layout.component_ids().collect();
    let total = config.classes.len() * config.samples_per_class;
    let mut samples = Vec::with_capacity(total);
    let mut activations = Vec::with_capacity(total);
    for (ci, class) in config.classes.iter().enumerate() {
        let factors = config.factors(config.strategy_map.get(class));
        let separation = if *class == config.bonafide_label {
            config.score_separation.map(|_| 0.0)
        } else {
            config
                .class_score_separation
                .get(class)
                .copied()
                .or(config.score_separation)
        };
        for i in 0..config.samples_per_class {
            let mats = (0..n_comp)
                .map(|c| {
                    let values = planted_matrix(
                        config.rows,
                        config.cols,
                        &directions[ci][c],
                        factors[c],
                        config.noise_scale,
                        &mut rng,
                    );
                    ActivationMatrix::new(ids[c].clone(), config.rows, config.cols, values)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let detector_score = separation.map(|mu| mu + normal(&mut rng));
            samples.push(SampleRecord {
                sample_id: format!("{class}_{i:04}"),
                class_label: class.clone(),
                detector_score,
            });
            activations.push(mats);
        }
    }
    Ok(SynthDataset {
        layout: config.layout.clone(),
        samples,
        activations,
    })
}

impl SynthDataset {
    /// Writes `manifest.json` plus one packed tensor file per sample under
    /// `dir`; returns the manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, SynthError> {
        let tdir = dir.join("tensors");
        fs::create_dir_all(&tdir).map_err(|e| DataError::io(&tdir, e))?;
        let mut entries = Vec::new();
        for (sample, mats) in self.samples.iter().zip(&self.activations) {
            let rel = format!("tensors/{}.bin", sample.sample_id);
            let mut bytes = Vec::new();
            for m in mats {
                entries.push(TensorEntry {
                    sample: sample.sample_id.clone(),
                    component: m.component().to_string(),
                    path: rel.clone(),
                    offset: bytes.len() as u64,
                    rows: m.rows() as u64,
                    cols: m.cols() as u64,
                });
                bytes.extend_from_slice(&tensor::encode(m));
            }
            let path = dir.join(&rel);
            fs::write(&path, bytes).map_err(|e| DataError::io(&path, e))?;
        }
        let manifest = dir.join("manifest.json");
        fs::write(
            &manifest,
            manifest_json(&self.layout, &self.samples, &entries),
        )
        .map_err(|e| DataError::io(&manifest, e))?;
        Ok(manifest)
    }
}
