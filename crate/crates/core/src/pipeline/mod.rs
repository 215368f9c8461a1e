//! End-to-end orchestration: signatures, meta-classifier, SHAP, aggregation,
//! EER and archetypes, plus the ablation studies.

mod ablation;
mod features;
mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    analyze_attack, z_quantile, AttackAttribution, AttrError, Dispersion, Penalty,
};
use crate::dataio::{load_manifest, DataError};
use crate::evaluation::{
    classify_archetype, eer_with_ci, group_stats, pearson, spearman, ArchetypeLabel,
    ArchetypeThresholds, EvalError, GroupStats, ScoreSet,
};
use crate::gbdt::{fit, GbdtError, TrainConfig, TreeEnsemble};
use crate::spectral::SpectralError;
use crate::synth::{SynthConfig, SynthError};
use crate::treeshap::{write_shap_csv, ShapAttribution, ShapError, TreeExplainer};

pub use ablation::{
    ablate_eigencount, ablate_penalty, ablate_penalty_on, eig_curve, penalty_table,
    stratified_split, EigRecord, PenaltyAblation,
};
pub use features::{cross_sample_groups, extract_features, ActivationSource, FeatureTable};
pub use report::{
    emit_strategy_matrix, read_eig_csv, read_penalty_csv, read_strategy_csv, read_table1,
    read_table3, read_table4, strategy_matrix_svg, strategy_points, table1_rows, table3_rows,
    table4_rows, write_eig_csv, write_penalty_csv, write_reports, StrategyPoint, Table1Row,
    Table3Row, Table4Row,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    ConfigInvalid(String),
    #[error("dataio: {0}")]
    Data(#[from] DataError),
    #[error("spectral: {0}")]
    Spectral(#[from] SpectralError),
    #[error("gbdt: {0}")]
    Gbdt(#[from] GbdtError),
    #[error("treeshap: {0}")]
    Shap(#[from] ShapError),
    #[error("attribution: {0}")]
    Attribution(#[from] AttrError),
    #[error("evaluation: {0}")]
    Evaluation(#[from] EvalError),
    #[error("synth: {0}")]
    Synth(#[from] SynthError),
    #[error("scores: {0}")]
    Scores(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn format(path: &Path, message: impl ToString) -> Self {
        PipelineError::Format {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    /// Process exit status: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigInvalid(_)
            | PipelineError::Gbdt(GbdtError::InvalidConfig(_))
            | PipelineError::Synth(SynthError::InvalidConfig(_)) => 2,
            _ => 3,
        }
    }
}

fn default_penalties() -> Vec<Penalty> {
    Penalty::ALL.to_vec()
}

/// Pipeline configuration, read from JSON with these exact key names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Manifest path; relative paths resolve against the config file.
    pub dataset: Option<PathBuf>,
    pub k: usize,
    pub train: TrainConfig,
    #[serde(default = "default_penalties")]
    pub penalties: Vec<Penalty>,
    pub thresholds: ArchetypeThresholds,
    pub alpha: f64,
    pub output_dir: PathBuf,
    /// Drives training, the ablation split and EER bootstrap.
    pub seed: u64,
    /// Worker threads; defaults to `train.worker_parallelism`.
    pub jobs: Option<usize>,
    /// Samples per covariance group for CROSS_SAMPLE components.
    pub group_size: usize,
    /// CSV `sample_id,label,score`; takes precedence over detector scores.
    pub scores: Option<PathBuf>,
    /// Use the meta-classifier's `1 - P(bonafide)` as the detector score.
    pub use_meta_scores: bool,
    pub bonafide_label: String,
    pub dispersion: Dispersion,
    pub bootstrap_resamples: usize,
    pub eig_ks: Vec<usize>,
    /// Parameters for the `synth` subcommand.
    pub synth: Option<SynthConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            k: 10,
            train: TrainConfig::default(),
            penalties: default_penalties(),
            thresholds: ArchetypeThresholds::default(),
            alpha: 0.05,
            output_dir: PathBuf::from("out"),
            seed: 0,
            jobs: None,
            group_size: 8,
            scores: None,
            use_meta_scores: false,
            bonafide_label: "bonafide".into(),
            dispersion: Dispersion::Population,
            bootstrap_resamples: 1000,
            eig_ks: vec![2, 5, 10, 20, 35],
            synth: None,
        }
    }
}

impl PipelineConfig {
    /// Parses a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                PipelineError::ConfigInvalid(format!("{} not found", path.display()))
            }
            _ => PipelineError::io(path, e),
        })?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::ConfigInvalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.dataset.as_mut().map(resolve);
        cfg.scores.as_mut().map(resolve);
        resolve(&mut cfg.output_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::ConfigInvalid(m.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.penalties.is_empty() {
            return bad("penalties must not be empty");
        }
        if z_quantile(self.alpha).is_err() {
            return bad("alpha must be one of 0.10, 0.05, 0.01");
        }
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if self.jobs == Some(0) {
            return bad("jobs must be positive");
        }
        if self.eig_ks.contains(&0) {
            return bad("eig_ks entries must be at least 1");
        }
        self.thresholds
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| PipelineError::ConfigInvalid(e.to_string()))
    }

    pub fn jobs(&self) -> usize {
        self.jobs.unwrap_or(self.train.worker_parallelism)
    }

    /// Training parameters with the pipeline seed and worker count applied.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            worker_parallelism: self.jobs(),
            ..self.train.clone()
        }
    }

    /// Penalty whose shares decide the dominant block: LINEAR when
    /// configured, otherwise the first listed.
    pub fn primary_penalty(&self) -> Penalty {
        if self.penalties.contains(&Penalty::Linear) {
            Penalty::Linear
        } else {
            self.penalties[0]
        }
    }

    pub fn dataset_path(&self) -> Result<&Path, PipelineError> {
        self.dataset
            .as_deref()
            .ok_or_else(|| PipelineError::ConfigInvalid("dataset path missing".into()))
    }
}

pub(crate) fn with_pool<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> T {
    match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
    {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// Penalty-specific scores and shares of one attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltyScores {
    pub penalty: Penalty,
    pub confidence: Vec<f64>,
    pub confidence_ci: Vec<f64>,
    pub shares: Vec<f64>,
    pub share_ci: Vec<f64>,
    pub dominant_block: String,
}

/// One attack's synthesis of performance and internal strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyRecord {
    pub attack: String,
    pub n: usize,
    pub eer_pct: f64,
    pub eer_ci_pct: f64,
    pub blocks: Vec<String>,
    pub phi: Vec<f64>,
    pub phi_ci: Vec<f64>,
    pub penalties: Vec<PenaltyScores>,
    pub primary_penalty: Penalty,
    pub dominant_block: String,
    pub dominant_share_pct: f64,
    pub archetype: ArchetypeLabel,
}

impl StrategyRecord {
    pub fn primary(&self) -> &PenaltyScores {
        self.penalties
            .iter()
            .find(|p| p.penalty == self.primary_penalty)
            .expect("primary penalty present")
    }
}

/// Everything persisted in `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub k: usize,
    pub alpha: f64,
    pub seed: u64,
    pub thresholds: ArchetypeThresholds,
    pub classes: Vec<String>,
    pub records: Vec<StrategyRecord>,
    /// EER vs dominant share over attacks; absent with < 3 attacks or
    /// constant inputs.
    pub pearson_eer_share: Option<f64>,
    pub spearman_eer_share: Option<f64>,
    pub group_stats: Vec<GroupStats>,
}

/// Trains the meta-classifier on `features` at signature length `k`.
pub fn train_stage(
    features: &FeatureTable,
    k: usize,
    config: &PipelineConfig,
) -> Result<TreeEnsemble, PipelineError> {
    let rows = features.rows(k);
    Ok(fit(&rows, &features.labels(), &config.effective_train())?)
}

/// Own-class SHAP attribution for every sample.
pub fn shap_stage(
    model: &TreeEnsemble,
    features: &FeatureTable,
    jobs: usize,
) -> Result<Vec<ShapAttribution>, PipelineError> {
    let explainer = TreeExplainer::new(model)?;
    let k = model.feature_count / features.layout.len().max(1);
    let rows = features.rows(k);
    with_pool(jobs, || {
        features
            .samples
            .par_iter()
            .zip(rows.par_iter())
            .map(|(s, x)| {
                let class =
                    model
                        .class_index(&s.class_label)
                        .ok_or_else(|| PipelineError::Format {
                            path: PathBuf::from("model"),
                            message: format!("model has no class `{}`", s.class_label),
                        })?;
                Ok(explainer.explain_class(&s.sample_id, x, class)?)
            })
            .collect()
    })
}

/// Attack labels: every class except bona fide, sorted.
pub fn attack_classes(features: &FeatureTable, bonafide: &str) -> Vec<String> {
    let mut v: Vec<String> = features
        .samples
        .iter()
        .map(|s| s.class_label.clone())
        .filter(|l| l != bonafide)
        .collect();
    v.sort();
    v.dedup();
    v
}

/// Per-attack aggregation under `penalties`.
pub fn aggregate_stage(
    model: &TreeEnsemble,
    features: &FeatureTable,
    shap: &[ShapAttribution],
    config: &PipelineConfig,
    penalties: &[Penalty],
) -> Result<Vec<AttackAttribution>, PipelineError> {
    let k = model.feature_count / features.layout.len().max(1);
    let by_id: BTreeMap<&str, &str> = features
        .samples
        .iter()
        .map(|s| (s.sample_id.as_str(), s.class_label.as_str()))
        .collect();
    let pairs: Vec<(&str, &ShapAttribution)> = shap
        .iter()
        .map(|a| {
            by_id
                .get(a.sample_id.as_str())
                .map(|&l| (l, a))
                .ok_or_else(|| PipelineError::Scores(format!("unknown sample `{}`", a.sample_id)))
        })
        .collect::<Result<_, _>>()?;
    attack_classes(features, &config.bonafide_label)
        .iter()
        .map(|attack| {
            let class = model
                .class_index(attack)
                .ok_or_else(|| PipelineError::Scores(format!("model lacks class `{attack}`")))?;
            Ok(analyze_attack(
                &pairs,
                &features.layout,
                attack,
                class,
                k,
                config.alpha,
                penalties,
                config.dispersion,
            )?)
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    sample_id: String,
    label: String,
    score: f64,
}

/// Reads `sample_id,label,score` rows.
pub fn read_score_file(path: &Path) -> Result<Vec<(String, String, f64)>, PipelineError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PipelineError::format(path, e))?;
    rdr.deserialize::<ScoreRow>()
        .map(|r| {
            let r = r.map_err(|e| PipelineError::format(path, e))?;
            if !r.score.is_finite() {
                return Err(PipelineError::format(
                    path,
                    format!("non-finite score for {}", r.sample_id),
                ));
            }
            Ok((r.sample_id, r.label, r.score))
        })
        .collect()
}

/// Detector scores grouped by label, from the configured source:
/// meta-classifier (when flagged), then score file, then `detector_score`.
pub fn collect_scores(
    features: &FeatureTable,
    model: Option<&TreeEnsemble>,
    config: &PipelineConfig,
) -> Result<BTreeMap<String, Vec<f64>>, PipelineError> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if config.use_meta_scores {
        let model =
            model.ok_or_else(|| PipelineError::Scores("meta scores need a model".into()))?;
        let bona = model.class_index(&config.bonafide_label).ok_or_else(|| {
            PipelineError::Scores(format!("model has no `{}` class", config.bonafide_label))
        })?;
        let k = model.feature_count / features.layout.len().max(1);
        for (s, x) in features.samples.iter().zip(features.rows(k)) {
            let p = model.predict_proba(&x)?;
            out.entry(s.class_label.clone())
                .or_default()
                .push(1.0 - p[bona]);
        }
    } else if let Some(path) = &config.scores {
        for (_, label, score) in read_score_file(path)? {
            out.entry(label).or_default().push(score);
        }
    } else {
        for s in &features.samples {
            let score = s.detector_score.ok_or_else(|| {
                PipelineError::Scores(format!(
                    "sample `{}` has no detector_score and no score file was given",
                    s.sample_id
                ))
            })?;
            out.entry(s.class_label.clone()).or_default().push(score);
        }
    }
    Ok(out)
}

/// Joins attributions with EERs into strategy records.
pub fn classify_stage(
    attributions: &[AttackAttribution],
    blocks: &[String],
    scores: &BTreeMap<String, Vec<f64>>,
    config: &PipelineConfig,
) -> Result<Vec<StrategyRecord>, PipelineError> {
    let bona = scores
        .get(&config.bonafide_label)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| PipelineError::Scores(format!("no `{}` scores", config.bonafide_label)))?;
    let primary = config.primary_penalty();
    attributions
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let spoof = scores
                .get(&a.attack)
                .ok_or_else(|| PipelineError::Scores(format!("no scores for `{}`", a.attack)))?;
            let set = ScoreSet {
                bona_scores: bona.clone(),
                spoof_scores: spoof.clone(),
            };
            let seed = config.seed.wrapping_add(i as u64);
            let (eer, ci) = eer_with_ci(&set, config.alpha, config.bootstrap_resamples, seed)?;
            let penalties: Vec<PenaltyScores> = a
                .views
                .iter()
                .map(|v| PenaltyScores {
                    penalty: v.penalty,
                    confidence: v.scores.clone(),
                    confidence_ci: v.score_ci.clone(),
                    shares: v.shares.clone(),
                    share_ci: v.share_ci.clone(),
                    dominant_block: blocks[v.dominant].clone(),
                })
                .collect();
            let view = a.view(primary).ok_or_else(|| {
                PipelineError::ConfigInvalid("primary penalty not computed".into())
            })?;
            let share_pct = 100.0 * view.shares[view.dominant];
            let eer_pct = 100.0 * eer.eer;
            Ok(StrategyRecord {
                attack: a.attack.clone(),
                n: a.n,
                eer_pct,
                eer_ci_pct: 100.0 * ci,
                blocks: blocks.to_vec(),
                phi: a.branches.iter().map(|b| b.phi_sum).collect(),
                phi_ci: a.branches.iter().map(|b| b.ci_half_width).collect(),
                penalties,
                primary_penalty: primary,
                dominant_block: blocks[view.dominant].clone(),
                dominant_share_pct: share_pct,
                archetype: classify_archetype(eer_pct, share_pct, &config.thresholds)?,
            })
        })
        .collect()
}

/// Builds the summary, including EER/share correlations where defined.
pub fn summarize(
    records: Vec<StrategyRecord>,
    classes: Vec<String>,
    config: &PipelineConfig,
) -> Summary {
    let eers: Vec<f64> = records.iter().map(|r| r.eer_pct).collect();
    let shares: Vec<f64> = records.iter().map(|r| r.dominant_share_pct).collect();
    let (p, s) = if records.len() >= 3 {
        (pearson(&eers, &shares).ok(), spearman(&eers, &shares).ok())
    } else {
        (None, None)
    };
    let labelled: Vec<(ArchetypeLabel, f64)> = records
        .iter()
        .map(|r| (r.archetype, r.dominant_share_pct))
        .collect();
    Summary {
        k: config.k,
        alpha: config.alpha,
        seed: config.seed,
        thresholds: config.thresholds,
        classes,
        group_stats: group_stats(&labelled).unwrap_or_default(),
        pearson_eer_share: p,
        spearman_eer_share: s,
        records,
    }
}

/// Output of [`run_on_source`].
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub features: FeatureTable,
    pub model: TreeEnsemble,
    pub shap: Vec<ShapAttribution>,
    pub attributions: Vec<AttackAttribution>,
    pub summary: Summary,
}

/// Runs the attribution part of the pipeline (no EER) on any source.
pub fn analyze_source<S: ActivationSource + ?Sized>(
    source: &S,
    config: &PipelineConfig,
) -> Result<
    (
        FeatureTable,
        TreeEnsemble,
        Vec<ShapAttribution>,
        Vec<AttackAttribution>,
    ),
    PipelineError,
> {
    config.validate()?;
    let features = extract_features(source, config.k, config.group_size, config.jobs())?;
    let model = train_stage(&features, config.k, config)?;
    let shap = shap_stage(&model, &features, config.jobs())?;
    let attributions = aggregate_stage(&model, &features, &shap, config, &config.penalties)?;
    Ok((features, model, shap, attributions))
}

/// Full pipeline on an in-memory or on-disk source, without writing files.
pub fn run_on_source<S: ActivationSource + ?Sized>(
    source: &S,
    config: &PipelineConfig,
) -> Result<PipelineRun, PipelineError> {
    let (features, model, shap, attributions) = analyze_source(source, config)?;
    let scores = collect_scores(&features, Some(&model), config)?;
    let records = classify_stage(&attributions, features.layout.blocks(), &scores, config)?;
    let summary = summarize(records, model.classes.clone(), config);
    Ok(PipelineRun {
        features,
        model,
        shap,
        attributions,
        summary,
    })
}

/// Loads the configured dataset, runs every stage and writes all reports
/// into `config.output_dir`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<Vec<StrategyRecord>, PipelineError> {
    config.validate()?;
    let manifest = load_manifest(config.dataset_path()?)?;
    let run = run_on_source(&manifest, config)?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    write_file(&out.join("model.json"), run.model.to_json().as_bytes())?;
    let mut shap_csv = Vec::new();
    write_shap_csv(&mut shap_csv, &run.shap, &run.model.classes)?;
    write_file(&out.join("shap_values.csv"), &shap_csv)?;
    write_reports(&run.summary, out)?;
    Ok(run.summary.records)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, bytes).map_err(|e| PipelineError::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| PipelineError::format(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::format(path, e))
}

pub use self::io::{load_features, load_summary, save_features, save_summary};

mod io {
    use super::*;

    pub fn save_features(path: &Path, f: &FeatureTable) -> Result<(), PipelineError> {
        write_json(path, f)
    }

    pub fn load_features(path: &Path) -> Result<FeatureTable, PipelineError> {
        read_json(path)
    }

    pub fn save_summary(path: &Path, s: &Summary) -> Result<(), PipelineError> {
        write_json(path, s)
    }

    pub fn load_summary(path: &Path) -> Result<Summary, PipelineError> {
        read_json(path)
    }
}
