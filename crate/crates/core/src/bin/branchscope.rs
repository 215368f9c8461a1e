use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use branchscope::attribution::{AttackAttribution, Penalty};
use branchscope::dataio::load_manifest;
use branchscope::gbdt::TreeEnsemble;
use branchscope::pipeline::{
    ablate_eigencount, ablate_penalty, aggregate_stage, classify_stage, collect_scores,
    extract_features, load_features, load_summary, run_pipeline, save_features, shap_stage,
    summarize, train_stage, write_eig_csv, write_penalty_csv, write_reports, PipelineConfig,
    PipelineError,
};
use branchscope::synth::generate;
use branchscope::treeshap::{read_shap_csv, write_shap_csv};

#[derive(Parser)]
#[command(
    name = "branchscope",
    version,
    about = "Spectral attribution of multi-branch classifiers"
)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for extraction, training and SHAP.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Detector score CSV: sample_id,label,score.
    #[arg(long, global = true)]
    scores: Option<PathBuf>,
    /// Eigenvalues kept per component.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spectral signatures for every sample -> features.json
    Extract,
    /// Fit the meta-classifier on features.json -> model.json
    Train,
    /// Own-class SHAP values -> shap_values.csv
    Shap,
    /// Per-attack component, branch and share aggregates -> attribution.json
    Aggregate,
    /// EER, archetypes and all report tables from attribution.json
    Classify,
    /// Eigenvalue-count ablation -> eig_ablation.csv
    AblateEig {
        /// Comma-separated k values (defaults to `eig_ks`).
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Penalty-function ablation -> penalty_ablation.csv
    AblatePenalty,
    /// Write the synthetic dataset described by the config's `synth` section
    Synth,
    /// Full pipeline
    Run,
    /// Re-render tables and the strategy matrix from summary.json
    Report,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(j) = cli.jobs {
        cfg.jobs = Some(j);
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = &cli.scores {
        cfg.scores = Some(s.clone());
    }
    if let Some(k) = cli.k {
        cfg.k = k;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &PipelineConfig) -> Result<&Path, PipelineError> {
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).map_err(|e| PipelineError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(dir)
}

fn read_text(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &[u8]) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_model(dir: &Path) -> Result<TreeEnsemble, PipelineError> {
    Ok(TreeEnsemble::from_json(&read_text(
        &dir.join("model.json"),
    )?)?)
}

fn load_attributions(dir: &Path) -> Result<Vec<AttackAttribution>, PipelineError> {
    let path = dir.join("attribution.json");
    serde_json::from_str(&read_text(&path)?).map_err(|e| PipelineError::Format {
        path,
        message: e.to_string(),
    })
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Extract => {
            let manifest = load_manifest(cfg.dataset_path()?)?;
            let features = extract_features(&manifest, cfg.k, cfg.group_size, cfg.jobs())?;
            let dir = out_dir(&cfg)?;
            save_features(&dir.join("features.json"), &features)?;
            let csv = features.to_csv().map_err(|e| PipelineError::Format {
                path: dir.join("features.csv"),
                message: e.to_string(),
            })?;
            write_text(&dir.join("features.csv"), &csv)?;
            eprintln!(
                "extracted {} samples x {} features",
                features.samples.len(),
                features.k * features.layout.len()
            );
        }
        Command::Train => {
            let dir = out_dir(&cfg)?;
            let features = load_features(&dir.join("features.json"))?;
            let model = train_stage(&features, cfg.k.min(features.k), &cfg)?;
            write_text(&dir.join("model.json"), model.to_json().as_bytes())?;
            eprintln!(
                "trained {} trees over {} classes",
                model.trees.len(),
                model.n_classes()
            );
        }
        Command::Shap => {
            let dir = out_dir(&cfg)?;
            let features = load_features(&dir.join("features.json"))?;
            let model = load_model(dir)?;
            let shap = shap_stage(&model, &features, cfg.jobs())?;
            let mut buf = Vec::new();
            write_shap_csv(&mut buf, &shap, &model.classes)?;
            write_text(&dir.join("shap_values.csv"), &buf)?;
            eprintln!("explained {} samples", shap.len());
        }
        Command::Aggregate => {
            let dir = out_dir(&cfg)?;
            let features = load_features(&dir.join("features.json"))?;
            let model = load_model(dir)?;
            let shap_path = dir.join("shap_values.csv");
            let file = fs::File::open(&shap_path).map_err(|e| PipelineError::Io {
                path: shap_path.clone(),
                source: e,
            })?;
            let shap = read_shap_csv(file, &model.classes)?;
            let attributions = aggregate_stage(&model, &features, &shap, &cfg, &cfg.penalties)?;
            let json = serde_json::to_string_pretty(&attributions).expect("attributions serialize");
            write_text(&dir.join("attribution.json"), json.as_bytes())?;
            eprintln!("aggregated {} attacks", attributions.len());
        }
        Command::Classify => {
            let dir = out_dir(&cfg)?;
            let features = load_features(&dir.join("features.json"))?;
            let attributions = load_attributions(dir)?;
            let model = if cfg.use_meta_scores {
                Some(load_model(dir)?)
            } else {
                None
            };
            let scores = collect_scores(&features, model.as_ref(), &cfg)?;
            let records = classify_stage(&attributions, features.layout.blocks(), &scores, &cfg)?;
            let mut classes: Vec<String> = features
                .samples
                .iter()
                .map(|s| s.class_label.clone())
                .collect();
            classes.sort();
            classes.dedup();
            write_reports(&summarize(records, classes, &cfg), dir)?;
            eprintln!("wrote reports to {}", dir.display());
        }
        Command::AblateEig { ks } => {
            let ks = ks.clone().unwrap_or_else(|| cfg.eig_ks.clone());
            let records = ablate_eigencount(&cfg, &ks)?;
            let dir = out_dir(&cfg)?;
            write_eig_csv(&dir.join("eig_ablation.csv"), &records)?;
            for r in &records {
                eprintln!(
                    "k={:<3} f1={:.4} retention={:.1}% savings={:.1}%",
                    r.k, r.f1_macro, r.f1_retention_pct, r.memory_savings_pct
                );
            }
        }
        Command::AblatePenalty => {
            let table = ablate_penalty(&cfg)?;
            let dir = out_dir(&cfg)?;
            write_penalty_csv(&dir.join("penalty_ablation.csv"), &table)?;
            for (p, t) in table.penalties.iter().zip(&table.tau) {
                eprintln!("{:<12} tau vs {} = {t:.4}", p.as_str(), Penalty::Linear);
            }
        }
        Command::Synth => {
            let synth = cfg.synth.as_ref().ok_or_else(|| {
                PipelineError::ConfigInvalid("config has no `synth` section".into())
            })?;
            let dataset = generate(synth)?;
            let manifest = dataset.write(out_dir(&cfg)?)?;
            eprintln!(
                "wrote {} samples, manifest {}",
                dataset.samples.len(),
                manifest.display()
            );
        }
        Command::Run => {
            let records = run_pipeline(&cfg)?;
            for r in &records {
                eprintln!(
                    "{:<10} EER {:>6.2}%  {} {:>5.2}%  {}",
                    r.attack, r.eer_pct, r.dominant_block, r.dominant_share_pct, r.archetype
                );
            }
        }
        Command::Report => {
            let dir = out_dir(&cfg)?;
            let summary = load_summary(&dir.join("summary.json"))?;
            write_reports(&summary, dir)?;
            eprintln!("re-rendered {} records", summary.records.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
