//! Report files: Table-1/3/4 shaped CSVs, the strategy matrix and the
//! ablation tables. Every CSV has a matching reader.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::Penalty;
use crate::evaluation::{ArchetypeLabel, ArchetypeThresholds};

use super::ablation::{EigRecord, PenaltyAblation};
use super::{save_summary, write_file, PipelineError, StrategyRecord, Summary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub attack: String,
    pub n: usize,
    pub eer_pct: f64,
    pub eer_ci_pct: f64,
    pub dominant_block: String,
    pub dominant_share_pct: f64,
    pub dominant_share_ci_pct: f64,
    pub second_block: String,
    pub second_share_pct: f64,
    pub dominant_confidence: f64,
    pub second_confidence: f64,
    pub penalty: Penalty,
    pub archetype: ArchetypeLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table3Row {
    pub attack: String,
    pub block: String,
    pub phi_sum: f64,
    pub phi_ci: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table4Row {
    pub attack: String,
    pub penalty: Penalty,
    pub block: String,
    pub confidence: f64,
    pub confidence_ci: f64,
    pub share_pct: f64,
    pub share_ci_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPoint {
    pub attack: String,
    pub eer_pct: f64,
    pub dominant_share_pct: f64,
    pub archetype: ArchetypeLabel,
}

fn top_two(shares: &[f64]) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..shares.len()).collect();
    idx.sort_by(|&i, &j| shares[j].total_cmp(&shares[i]).then(i.cmp(&j)));
    (idx[0], idx.get(1).copied().unwrap_or(idx[0]))
}

pub fn table1_rows(records: &[StrategyRecord]) -> Vec<Table1Row> {
    records
        .iter()
        .map(|r| {
            let p = r.primary();
            let (a, b) = top_two(&p.shares);
            Table1Row {
                attack: r.attack.clone(),
                n: r.n,
                eer_pct: r.eer_pct,
                eer_ci_pct: r.eer_ci_pct,
                dominant_block: r.blocks[a].clone(),
                dominant_share_pct: 100.0 * p.shares[a],
                dominant_share_ci_pct: 100.0 * p.share_ci[a],
                second_block: r.blocks[b].clone(),
                second_share_pct: 100.0 * p.shares[b],
                dominant_confidence: p.confidence[a],
                second_confidence: p.confidence[b],
                penalty: p.penalty,
                archetype: r.archetype,
            }
        })
        .collect()
}

pub fn table3_rows(records: &[StrategyRecord]) -> Vec<Table3Row> {
    records
        .iter()
        .flat_map(|r| {
            r.blocks.iter().enumerate().map(move |(i, b)| Table3Row {
                attack: r.attack.clone(),
                block: b.clone(),
                phi_sum: r.phi[i],
                phi_ci: r.phi_ci[i],
            })
        })
        .collect()
}

pub fn table4_rows(records: &[StrategyRecord]) -> Vec<Table4Row> {
    let mut out = Vec::new();
    for r in records {
        for p in &r.penalties {
            for (i, b) in r.blocks.iter().enumerate() {
                out.push(Table4Row {
                    attack: r.attack.clone(),
                    penalty: p.penalty,
                    block: b.clone(),
                    confidence: p.confidence[i],
                    confidence_ci: p.confidence_ci[i],
                    share_pct: 100.0 * p.shares[i],
                    share_ci_pct: 100.0 * p.share_ci[i],
                });
            }
        }
    }
    out
}

pub fn strategy_points(records: &[StrategyRecord]) -> Vec<StrategyPoint> {
    records
        .iter()
        .map(|r| StrategyPoint {
            attack: r.attack.clone(),
            eer_pct: r.eer_pct,
            dominant_share_pct: r.dominant_share_pct,
            archetype: r.archetype,
        })
        .collect()
}

fn csv_bytes<T: Serialize>(rows: &[T], header: &[&str]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), PipelineError> {
    let bytes = csv_bytes(rows, header).map_err(|e| PipelineError::format(path, e))?;
    write_file(path, &bytes)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PipelineError::format(path, e))?;
    rdr.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| PipelineError::format(path, e))
}

pub fn read_table1(path: &Path) -> Result<Vec<Table1Row>, PipelineError> {
    read_csv(path)
}

pub fn read_table3(path: &Path) -> Result<Vec<Table3Row>, PipelineError> {
    read_csv(path)
}

pub fn read_table4(path: &Path) -> Result<Vec<Table4Row>, PipelineError> {
    read_csv(path)
}

pub fn read_strategy_csv(path: &Path) -> Result<Vec<StrategyPoint>, PipelineError> {
    read_csv(path)
}

/// Writes `table1.csv`, `table3_phi.csv`, `table4_shares.csv`,
/// `strategy_matrix.{svg,csv}` and `summary.json` into `dir`.
pub fn write_reports(summary: &Summary, dir: &Path) -> Result<(), PipelineError> {
    let r = &summary.records;
    write_csv(
        &dir.join("table1.csv"),
        &table1_rows(r),
        &[
            "attack",
            "n",
            "eer_pct",
            "eer_ci_pct",
            "dominant_block",
            "dominant_share_pct",
            "dominant_share_ci_pct",
            "second_block",
            "second_share_pct",
            "dominant_confidence",
            "second_confidence",
            "penalty",
            "archetype",
        ],
    )?;
    write_csv(
        &dir.join("table3_phi.csv"),
        &table3_rows(r),
        &["attack", "block", "phi_sum", "phi_ci"],
    )?;
    write_csv(
        &dir.join("table4_shares.csv"),
        &table4_rows(r),
        &[
            "attack",
            "penalty",
            "block",
            "confidence",
            "confidence_ci",
            "share_pct",
            "share_ci_pct",
        ],
    )?;
    if !r.is_empty() {
        emit_strategy_matrix(r, &summary.thresholds, &dir.join("strategy_matrix.svg"))?;
    }
    save_summary(&dir.join("summary.json"), summary)
}

fn archetype_color(l: ArchetypeLabel) -> &'static str {
    match l {
        ArchetypeLabel::EffectiveSpecialization => "#1b7837",
        ArchetypeLabel::EffectiveConsensus => "#5aae61",
        ArchetypeLabel::IneffectiveConsensus => "#878787",
        ArchetypeLabel::IneffectiveSpecialization => "#e08214",
        ArchetypeLabel::FlawedSpecialization => "#c51b7d",
    }
}

/// Scatter of (dominant share, EER) with quadrant guides.
pub fn strategy_matrix_svg(points: &[StrategyPoint], t: &ArchetypeThresholds) -> String {
    const W: f64 = 640.0;
    const H: f64 = 480.0;
    const L: f64 = 70.0;
    const R: f64 = 30.0;
    const T: f64 = 40.0;
    const B: f64 = 60.0;
    let shares = points.iter().map(|p| p.dominant_share_pct);
    let eers = points.iter().map(|p| p.eer_pct);
    let x_lo = shares
        .clone()
        .fold(t.share - 5.0, f64::min)
        .floor()
        .max(0.0);
    let x_hi = shares.fold(t.share + 5.0, f64::max).ceil().min(100.0);
    let y_hi = (eers.fold(t.eer_high, f64::max) * 1.1).ceil().min(100.0);
    let sx = |v: f64| L + (v - x_lo) / (x_hi - x_lo) * (W - L - R);
    let sy = |v: f64| H - B - v / y_hi * (H - T - B);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">Internal strategy matrix</text>"#,
        W / 2.0
    );
    // axes
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        H - B,
        W - R,
        H - B
    );
    let _ = writeln!(
        s,
        r#"<line x1="{L}" y1="{T}" x2="{L}" y2="{:.2}" stroke="black"/>"#,
        H - B
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Dominant share (%)</text>"#,
        (L + W - R) / 2.0,
        H - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{:.2}" text-anchor="middle" transform="rotate(-90 18 {:.2})">EER (%)</text>"#,
        (T + H - B) / 2.0,
        (T + H - B) / 2.0
    );
    for (x, label) in [(x_lo, x_lo), (x_hi, x_hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{label}</text>"#,
            sx(x),
            H - B + 16.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y_hi}</text>"#,
        L - 6.0,
        sy(y_hi) + 4.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="end">0</text>"#,
        L - 6.0,
        sy(0.0) + 4.0
    );

    // guides
    let gx = sx(t.share);
    let _ = writeln!(
        s,
        r##"<line class="guide-share" x1="{gx:.2}" y1="{T}" x2="{gx:.2}" y2="{:.2}" stroke="#444" stroke-dasharray="6 4"/>"##,
        H - B
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}">share {}%</text>"#,
        gx + 4.0,
        T + 12.0,
        t.share
    );
    for (class, v) in [("guide-eer-low", t.eer_low), ("guide-eer-high", t.eer_high)] {
        let gy = sy(v);
        let _ = writeln!(
            s,
            r##"<line class="{class}" x1="{L}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#444" stroke-dasharray="6 4"/>"##,
            W - R
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">EER {v}%</text>"#,
            W - R - 4.0,
            gy - 4.0
        );
    }

    for p in points {
        let (x, y) = (sx(p.dominant_share_pct), sy(p.eer_pct));
        let _ = writeln!(
            s,
            r#"<circle class="point" cx="{x:.2}" cy="{y:.2}" r="5" fill="{}"><title>{} {}</title></circle>"#,
            archetype_color(p.archetype),
            p.attack,
            p.archetype
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 7.0,
            y - 6.0,
            p.attack
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes the SVG at `path` and its CSV twin next to it.
pub fn emit_strategy_matrix(
    records: &[StrategyRecord],
    thresholds: &ArchetypeThresholds,
    path: &Path,
) -> Result<(), PipelineError> {
    if records.is_empty() {
        return Err(PipelineError::Scores(
            "strategy matrix needs at least one record".into(),
        ));
    }
    let points = strategy_points(records);
    write_file(path, strategy_matrix_svg(&points, thresholds).as_bytes())?;
    write_csv(
        &path.with_extension("csv"),
        &points,
        &["attack", "eer_pct", "dominant_share_pct", "archetype"],
    )
}

pub fn write_eig_csv(path: &Path, records: &[EigRecord]) -> Result<(), PipelineError> {
    write_csv(
        path,
        records,
        &[
            "k",
            "f1_macro",
            "memory_bytes",
            "f1_retention_pct",
            "memory_savings_pct",
        ],
    )
}

pub fn read_eig_csv(path: &Path) -> Result<Vec<EigRecord>, PipelineError> {
    read_csv(path)
}

/// Wide layout: one row per attack with the dominant block under each
/// penalty, then a `kendall_tau` row against LINEAR.
pub fn write_penalty_csv(path: &Path, table: &PenaltyAblation) -> Result<(), PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| PipelineError::format(path, e);
    let mut header = vec!["attack".to_string()];
    header.extend(table.penalties.iter().map(|p| p.to_string()));
    w.write_record(&header).map_err(err)?;
    for (attack, doms) in &table.dominant {
        let mut rec = vec![attack.clone()];
        rec.extend(doms.iter().cloned());
        w.write_record(&rec).map_err(err)?;
    }
    let mut rec = vec!["kendall_tau".to_string()];
    rec.extend(table.tau.iter().map(|t| t.to_string()));
    w.write_record(&rec).map_err(err)?;
    let bytes = w
        .into_inner()
        .map_err(|e| PipelineError::format(path, e.into_error()))?;
    write_file(path, &bytes)
}

pub fn read_penalty_csv(path: &Path) -> Result<PenaltyAblation, PipelineError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| PipelineError::format(path, e))?;
    let header = rdr
        .headers()
        .map_err(|e| PipelineError::format(path, e))?
        .clone();
    let penalties = header
        .iter()
        .skip(1)
        .map(|h| {
            h.parse::<Penalty>()
                .map_err(|e| PipelineError::format(path, e))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut dominant = Vec::new();
    let mut tau = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| PipelineError::format(path, e))?;
        let rest: Vec<String> = rec.iter().skip(1).map(str::to_string).collect();
        if &rec[0] == "kendall_tau" {
            tau = Some(
                rest.iter()
                    .map(|v| v.parse::<f64>().map_err(|e| PipelineError::format(path, e)))
                    .collect::<Result<Vec<_>, _>>()?,
            );
        } else {
            dominant.push((rec[0].to_string(), rest));
        }
    }
    Ok(PenaltyAblation {
        penalties,
        dominant,
        tau: tau.ok_or_else(|| PipelineError::format(path, "missing kendall_tau row"))?,
    })
}
