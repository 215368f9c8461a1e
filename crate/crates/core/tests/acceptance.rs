//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! to the process stderr (bypassing libtest capture) before asserting.
//!
//! Tests share a lock so the timed criteria are not measured while a
//! heavy end-to-end run occupies the cores.

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use branchscope::attribution::{confidence_value, kendall_tau, mean_ci, Dispersion, Penalty};
use branchscope::dataio::{ActivationMatrix, ComponentId, Role};
use branchscope::evaluation::{
    classify_archetype, eer, ArchetypeLabel, ArchetypeThresholds, ScoreSet,
};
use branchscope::gbdt::{fit, ObliviousTree, TrainConfig, TreeEnsemble};
use branchscope::pipeline::{eig_curve, run_on_source, PipelineConfig};
use branchscope::spectral::{center, covariance, eig_sym, eigenvalues_sym, SquareMatrix};
use branchscope::synth::{generate, Strategy, SynthConfig};
use branchscope::treeshap::{brute_force_shap, TreeExplainer};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: u32, pass: bool, detail: impl AsRef<str>) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n:>2}: {verdict}  {}",
        detail.as_ref()
    );
}

fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> SquareMatrix {
    let mut m = SquareMatrix::zeros(n);
    let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
    for i in 0..n {
        for j in i..n {
            let v = rng.gen_range(-1.0..1.0) * scale;
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    m
}

#[test]
fn c01_eigensolver_residual() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let (mut worst_res, mut worst_trace) = (0.0f64, 0.0f64);
    for _ in 0..500 {
        let n = rng.gen_range(2..=64);
        let c = random_symmetric(&mut rng, n);
        let fro = c.frobenius_norm();
        let d = eig_sym(&c).unwrap();
        for (lambda, v) in d.eigenvalues.iter().zip(&d.eigenvectors) {
            let cv = c.mul_vec(v);
            let r = cv
                .iter()
                .zip(v)
                .map(|(a, b)| (a - lambda * b).powi(2))
                .sum::<f64>()
                .sqrt();
            worst_res = worst_res.max(r / fro);
        }
        let sum: f64 = d.eigenvalues.iter().sum();
        let trace: f64 = (0..n).map(|i| c.get(i, i)).sum();
        worst_trace = worst_trace.max((sum - trace).abs() / fro.max(trace.abs()));
    }
    let elapsed = start.elapsed();
    let pass = worst_res <= 1e-8 && worst_trace <= 1e-9 && elapsed < Duration::from_secs(30);
    report(
        1,
        pass,
        format!("max residual/|C|_F {worst_res:.2e}, trace rel {worst_trace:.2e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn c02_covariance_psd() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = f64::INFINITY;
    let mut ok = true;
    for t in 0..200 {
        let d = rng.gen_range(2..=48);
        // include rank-deficient cases with fewer columns than rows
        let n = rng.gen_range(2..=64);
        let scale = 10f64.powf(rng.gen_range(-4.0..4.0));
        let vals: Vec<f64> = (0..d * n)
            .map(|_| rng.gen_range(-1.0..1.0) * scale)
            .collect();
        let a = ActivationMatrix::new(ComponentId::new(format!("T{t}"), Role::Global), d, n, vals)
            .unwrap();
        let ev = eigenvalues_sym(&covariance(&center(&a)).unwrap()).unwrap();
        let (max, min) = (ev[0], ev[ev.len() - 1]);
        let bound = -1e-10 * max.max(1.0);
        ok &= min >= bound;
        worst = worst.min(min / max.max(1.0));
    }
    report(
        2,
        ok,
        format!("min eigenvalue / max(1, lambda_max) = {worst:.2e}"),
    );
    assert!(ok);
}

/// Random multiclass ensemble trained on noisy data.
fn random_ensemble(
    rng: &mut ChaCha8Rng,
    nf: usize,
    trees: usize,
    depth: usize,
    classes: usize,
) -> TreeEnsemble {
    let n = 120;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..nf).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let mut labels: Vec<String> = rows
        .iter()
        .map(|r| {
            let s = r[0] + 0.5 * r[nf - 1] + rng.gen_range(-1.0..1.0);
            let c = ((s + 3.0) / 6.0 * classes as f64).floor() as i64;
            format!("c{}", c.clamp(0, classes as i64 - 1))
        })
        .collect();
    // every class must be present
    for c in 0..classes {
        labels[c] = format!("c{c}");
    }
    let cfg = TrainConfig {
        iterations: trees,
        depth,
        learning_rate: rng.gen_range(0.05..0.5),
        bins: rng.gen_range(4..=32),
        seed: rng.gen(),
        worker_parallelism: 1,
        ..TrainConfig::default()
    };
    fit(&rows, &labels, &cfg).unwrap()
}

#[test]
fn c03_treeshap_local_accuracy() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let nf = rng.gen_range(2..=24);
        let trees = rng.gen_range(1..=60);
        let depth = rng.gen_range(1..=6);
        let classes = rng.gen_range(2..=4);
        let model = random_ensemble(&mut rng, nf, trees, depth, classes);
        let ex = TreeExplainer::new(&model).unwrap();
        for s in 0..100 {
            let x: Vec<f64> = (0..nf).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let raw = model.predict_raw(&x).unwrap();
            for a in ex.explain(&format!("s{s}"), &x).unwrap() {
                worst = worst.max((a.total() - raw[a.class]).abs());
            }
        }
    }
    let pass = worst <= 1e-9;
    report(
        3,
        pass,
        format!("max |base + sum(phi) - margin| = {worst:.2e}"),
    );
    assert!(pass);
}

/// Path-dependent conditional expectation of one tree's class output
/// given that only features in `set` are known.
fn tree_value(tree: &ObliviousTree, x: &[f64], set: u32, class: usize) -> f64 {
    fn rec(
        tree: &ObliviousTree,
        x: &[f64],
        set: u32,
        class: usize,
        level: usize,
        prefix: usize,
    ) -> (f64, f64) {
        if level == tree.level_splits.len() {
            let leaf = &tree.leaves[prefix];
            return (leaf.values[class], leaf.cover.unwrap() as f64);
        }
        let s = tree.level_splits[level];
        let (lo_v, lo_c) = rec(tree, x, set, class, level + 1, prefix);
        let (hi_v, hi_c) = rec(tree, x, set, class, level + 1, prefix | (1 << level));
        let cover = lo_c + hi_c;
        let v = if set & (1 << s.feature) != 0 {
            if x[s.feature] > s.threshold {
                hi_v
            } else {
                lo_v
            }
        } else if cover > 0.0 {
            (lo_c * lo_v + hi_c * hi_v) / cover
        } else {
            0.5 * (lo_v + hi_v)
        };
        (v, cover)
    }
    rec(tree, x, set, class, 0, 0).0
}

/// Shapley values by the permutation-free subset formula.
fn oracle_shap(model: &TreeEnsemble, x: &[f64], class: usize) -> Vec<f64> {
    let nf = model.feature_count;
    let v: Vec<f64> = (0..1u32 << nf)
        .map(|s| model.trees.iter().map(|t| tree_value(t, x, s, class)).sum())
        .collect();
    let fact = |n: usize| (1..=n).map(|i| i as f64).product::<f64>();
    (0..nf)
        .map(|i| {
            let mut phi = 0.0;
            for s in 0..1u32 << nf {
                if s & (1 << i) == 0 {
                    let m = s.count_ones() as usize;
                    let w = fact(m) * fact(nf - m - 1) / fact(nf);
                    phi += w * (v[(s | (1 << i)) as usize] - v[s as usize]);
                }
            }
            phi
        })
        .collect()
}

#[test]
fn c04_treeshap_oracle_equivalence() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let start = Instant::now();
    let (mut worst_bf, mut worst_oracle) = (0.0f64, 0.0f64);
    for _ in 0..12 {
        let nf = rng.gen_range(1..=10);
        let trees = rng.gen_range(1..=30);
        let depth = rng.gen_range(1..=4);
        let classes = rng.gen_range(2..=3);
        let model = random_ensemble(&mut rng, nf, trees, depth, classes);
        let ex = TreeExplainer::new(&model).unwrap();
        for s in 0..4 {
            let x: Vec<f64> = (0..nf).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for a in ex.explain(&format!("s{s}"), &x).unwrap() {
                let bf = brute_force_shap(&model, &x, a.class).unwrap();
                let or = oracle_shap(&model, &x, a.class);
                for f in 0..nf {
                    worst_bf = worst_bf.max((a.phi[f] - bf.phi[f]).abs());
                    worst_oracle = worst_oracle.max((a.phi[f] - or[f]).abs());
                }
                worst_bf = worst_bf.max((a.base_value - bf.base_value).abs());
            }
        }
    }
    let elapsed = start.elapsed();
    let pass = worst_bf <= 1e-8 && worst_oracle <= 1e-8 && elapsed < Duration::from_secs(120);
    report(
        4,
        pass,
        format!("max |dphi| vs brute force {worst_bf:.2e}, vs test oracle {worst_oracle:.2e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn c05_gbdt_sanity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 400;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            vec![if i % 2 == 0 {
                rng.gen_range(0.0..1.0)
            } else {
                rng.gen_range(2.0..3.0)
            }]
        })
        .collect();
    let labels: Vec<&str> = (0..n)
        .map(|i| if i % 2 == 0 { "neg" } else { "pos" })
        .collect();
    let cfg = TrainConfig {
        iterations: 200,
        ..TrainConfig::default()
    };
    let model = fit(&rows, &labels, &cfg).unwrap();
    let mut correct = 0;
    let mut worst_sum = 0.0f64;
    for (r, l) in rows.iter().zip(&labels) {
        let p = model.predict_proba(r).unwrap();
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
        let pred = if p[1] > p[0] { "pos" } else { "neg" };
        correct += usize::from(pred == *l);
    }
    let acc = correct as f64 / n as f64;

    // determinism on a harder multi-feature problem
    let rows: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let labels: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "k{}",
                usize::from(r[0] + r[3] > 0.0) + usize::from(r[7] > 0.3)
            )
        })
        .collect();
    let run = |workers: usize| {
        let cfg = TrainConfig {
            iterations: 40,
            depth: 5,
            worker_parallelism: workers,
            seed: 11,
            ..TrainConfig::default()
        };
        fit(&rows, &labels, &cfg).unwrap().to_json()
    };
    let a = run(1);
    let deterministic = a == run(1) && a == run(4) && a == run(7);

    let pass = acc >= 0.99 && worst_sum <= 1e-9 && deterministic;
    report(
        5,
        pass,
        format!("train acc {acc:.4}, max |sum p - 1| {worst_sum:.1e}, bitwise deterministic {deterministic}"),
    );
    assert!(pass);
}

/// Table 1: attack, EER %, dominant share %, second share %, dominant C,
/// second C, identified strategy.
const TABLE1: [(&str, f64, f64, f64, f64, f64, &str); 13] = [
    (
        "A09",
        0.05,
        22.85,
        21.85,
        2.30,
        2.26,
        "Effective Specialization",
    ),
    (
        "A14",
        0.27,
        26.22,
        18.48,
        1.87,
        1.52,
        "Effective Specialization",
    ),
    (
        "A07",
        0.40,
        22.62,
        18.84,
        1.68,
        1.50,
        "Effective Specialization",
    ),
    ("A11", 0.67, 19.50, 19.16, 1.40, 1.38, "Effective Consensus"),
    ("A16", 0.74, 19.82, 19.19, 1.32, 1.29, "Effective Consensus"),
    (
        "A19",
        0.97,
        20.09,
        20.02,
        1.45,
        1.45,
        "Effective Specialization",
    ),
    (
        "A13",
        1.23,
        20.45,
        20.16,
        1.45,
        1.43,
        "Ineffective Specialization",
    ),
    (
        "A15",
        2.77,
        19.55,
        18.99,
        1.23,
        1.20,
        "Ineffective Consensus",
    ),
    (
        "A08",
        3.13,
        20.19,
        19.43,
        1.22,
        1.18,
        "Ineffective Specialization",
    ),
    (
        "A12",
        7.91,
        24.00,
        19.12,
        1.63,
        1.40,
        "Ineffective Specialization",
    ),
    (
        "A17",
        14.27,
        23.91,
        19.20,
        1.59,
        1.37,
        "Flawed Specialization (Vulnerability)",
    ),
    (
        "A10",
        17.28,
        22.78,
        20.59,
        1.66,
        1.56,
        "Ineffective Specialization",
    ),
    (
        "A18",
        28.61,
        24.24,
        20.97,
        2.08,
        1.93,
        "Flawed Specialization (Vulnerability)",
    ),
];

fn table_label(s: &str) -> ArchetypeLabel {
    match s {
        "Effective Specialization" => ArchetypeLabel::EffectiveSpecialization,
        "Effective Consensus" => ArchetypeLabel::EffectiveConsensus,
        "Ineffective Specialization" => ArchetypeLabel::IneffectiveSpecialization,
        "Ineffective Consensus" => ArchetypeLabel::IneffectiveConsensus,
        "Flawed Specialization (Vulnerability)" => ArchetypeLabel::FlawedSpecialization,
        other => panic!("unknown label {other}"),
    }
}

#[test]
fn c06_archetype_reproduction() {
    let t = ArchetypeThresholds::default();
    let mismatches: Vec<&str> = TABLE1
        .iter()
        .filter(|r| classify_archetype(r.1, r.2, &t).unwrap() != table_label(r.6))
        .map(|r| r.0)
        .collect();
    let pass = mismatches == ["A10"];
    report(
        6,
        pass,
        format!(
            "{}/13 reproduced; mismatches {mismatches:?} (A10 is the known table inconsistency)",
            13 - mismatches.len()
        ),
    );
    assert!(pass);
    assert_eq!(
        classify_archetype(17.28, 22.78, &t).unwrap(),
        ArchetypeLabel::FlawedSpecialization
    );
}

#[test]
fn c07_share_score_consistency() {
    let mut worst = 0.0f64;
    for &(_, _, s1, s2, c1, c2, _) in &TABLE1 {
        let rel = ((s1 / s2) / (c1 - c2).exp() - 1.0).abs();
        worst = worst.max(rel);
    }
    let pass = worst <= 0.02;
    report(
        7,
        pass,
        format!(
            "max relative deviation of S1/S2 from exp(C1-C2): {:.3}%",
            100.0 * worst
        ),
    );
    assert!(pass);
}

#[test]
fn c08_penalty_collapse_and_ordering() {
    let mut collapse = true;
    for means in [
        vec![0.7; 3],
        vec![-1.3; 3],
        vec![2.5],
        vec![0.0; 3],
        vec![1e-9; 2],
    ] {
        for d in [Dispersion::Population, Dispersion::Sample] {
            let vals: Vec<f64> = Penalty::ALL
                .iter()
                .map(|&p| confidence_value(&means, p, d))
                .collect();
            collapse &= vals.iter().all(|v| v.to_bits() == vals[0].to_bits());
        }
    }
    let mut ordering = true;
    for i in 0..=400 {
        let sigma = i as f64 * 0.01;
        let l = Penalty::Linear.apply(1.0, sigma);
        let q = Penalty::Quadratic.apply(1.0, sigma);
        let e = Penalty::Exponential.apply(1.0, sigma);
        ordering &= e <= l;
        if sigma < 1.0 {
            ordering &= q >= l;
        } else if sigma > 1.0 {
            ordering &= q <= l;
        } else {
            ordering &= q == l;
        }
    }
    let pass = collapse && ordering;
    report(
        8,
        pass,
        format!("sigma=0 collapse {collapse}, ordering on 401-point grid {ordering}"),
    );
    assert!(pass);
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn tau_pairs(a: &[f64], b: &[f64]) -> f64 {
    let (mut c, mut d, mut ta, mut tb) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let x = (a[i] - a[j]).signum() as i64 * i64::from(a[i] != a[j]);
            let y = (b[i] - b[j]).signum() as i64 * i64::from(b[i] != b[j]);
            match (x, y) {
                (0, 0) => {}
                (0, _) => ta += 1,
                (_, 0) => tb += 1,
                _ if x == y => c += 1,
                _ => d += 1,
            }
        }
    }
    (c - d) as f64 / (((c + d + ta) * (c + d + tb)) as f64).sqrt()
}

#[test]
fn c09_kendall_exactness() {
    let _g = serial();
    let start = Instant::now();
    let mut cases = 0usize;
    let mut worst = 0.0f64;
    for n in 2..=8 {
        let id: Vec<f64> = (0..n).map(|i| i as f64).collect();
        for p in permutations(n) {
            let b: Vec<f64> = p.iter().map(|&i| i as f64).collect();
            worst = worst.max((kendall_tau(&id, &b).unwrap() - tau_pairs(&id, &b)).abs());
            cases += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(10);
    report(
        9,
        pass,
        format!("{cases} permutations, max |dtau| {worst:.1e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

/// FRR/FAR at every candidate threshold by direct counting; the EER is the
/// linear interpolation where FRR - FAR changes sign.
fn eer_sweep(bona: &[f64], spoof: &[f64]) -> f64 {
    let mut ts: Vec<f64> = bona.iter().chain(spoof).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let top = *ts.last().unwrap();
    ts.push(top + top.abs().max(1.0));
    let rates = |t: f64| {
        let frr = bona.iter().filter(|&&s| s >= t).count() as f64 / bona.len() as f64;
        let far = spoof.iter().filter(|&&s| s < t).count() as f64 / spoof.len() as f64;
        (frr, far)
    };
    let pts: Vec<(f64, f64)> = ts.iter().map(|&t| rates(t)).collect();
    for w in pts.windows(2) {
        let (d0, d1) = (w[0].0 - w[0].1, w[1].0 - w[1].1);
        if d1 <= 0.0 {
            let f = d0 / (d0 - d1);
            return w[0].1 + f * (w[1].1 - w[0].1);
        }
    }
    unreachable!()
}

#[test]
fn c10_eer_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let nb = rng.gen_range(1..=60);
        let ns = rng.gen_range(1..=60);
        let shift = rng.gen_range(-2.0..4.0);
        // coarse grids produce ties
        let grid = if rng.gen_bool(0.4) { 4.0 } else { 1e6 };
        let q = |v: f64| (v * grid).round() / grid;
        let bona: Vec<f64> = (0..nb).map(|_| q(rng.gen_range(-1.0..1.0))).collect();
        let spoof: Vec<f64> = (0..ns)
            .map(|_| q(rng.gen_range(-1.0..1.0) + shift))
            .collect();
        let got = eer(&ScoreSet {
            bona_scores: bona.clone(),
            spoof_scores: spoof.clone(),
        })
        .unwrap()
        .eer;
        worst = worst.max((got - eer_sweep(&bona, &spoof)).abs());
    }
    let set = |b: &[f64], s: &[f64]| {
        eer(&ScoreSet {
            bona_scores: b.to_vec(),
            spoof_scores: s.to_vec(),
        })
        .unwrap()
        .eer
    };
    let separable = set(&[0.1, 0.2, 0.3], &[0.5, 0.9]);
    let identical = set(&[0.4, 0.4, 0.4], &[0.4, 0.4]);
    let hand = set(&[0.1, 0.2, 0.6], &[0.4, 0.7, 0.8]);
    let pass =
        worst <= 1e-9 && separable == 0.0 && identical == 0.5 && (hand - 1.0 / 3.0).abs() <= 1e-12;
    report(
        10,
        pass,
        format!("500 sets max |dEER| {worst:.1e}; separable {separable}, identical {identical}, hand {hand:.6}"),
    );
    assert!(pass);
}

#[test]
fn c11_ci_hand_check() {
    let s = mean_ci(&[1.0, 2.0, 3.0, 4.0], 0.05).unwrap();
    let pass = (s.mean - 2.5).abs() <= 1e-3 && (s.ci_half_width - 1.2654).abs() <= 1e-3;
    report(
        11,
        pass,
        format!("{:.4} +/- {:.4}", s.mean, s.ci_half_width),
    );
    assert!(pass);
}

const EXPERTS: [(&str, &str); 4] = [("A01", "B0"), ("A02", "B1"), ("A03", "B2"), ("A04", "B3")];

fn planted(seed: u64, consensus: bool) -> SynthConfig {
    let mut classes: Vec<String> = EXPERTS.iter().map(|(c, _)| c.to_string()).collect();
    if consensus {
        classes.push("A05".into());
    }
    classes.push("bonafide".into());
    let mut cfg = SynthConfig {
        classes,
        seed,
        signal_strength: 4.0,
        samples_per_class: 200,
        k: 10,
        score_separation: Some(2.0),
        ..SynthConfig::default()
    };
    for (c, b) in EXPERTS {
        cfg.strategy_map
            .insert(c.into(), Strategy::Expert(b.into()));
    }
    if consensus {
        cfg.strategy_map.insert("A05".into(), Strategy::Consensus);
    }
    cfg
}

/// Reduced boosting budget for the multi-seed runs; the full 1000-round
/// configuration costs minutes per seed on one core.
fn e2e_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        k: 10,
        seed,
        bootstrap_resamples: 100,
        ..PipelineConfig::default()
    };
    cfg.train.iterations = 100;
    cfg.train.depth = 6;
    cfg.train.learning_rate = 0.03;
    cfg
}

#[test]
fn c12_planted_expert_recovery() {
    let _g = serial();
    let start = Instant::now();
    let (mut hits, mut expert_total) = (0usize, 0usize);
    let (mut diffuse, mut consensus_total) = (0usize, 0usize);
    let mut consensus_max = Vec::new();
    for seed in 0..20u64 {
        let data = generate(&planted(seed, true)).unwrap();
        let run = run_on_source(&data, &e2e_config(seed)).unwrap();
        for r in &run.summary.records {
            if let Some((_, block)) = EXPERTS.iter().find(|(c, _)| *c == r.attack) {
                expert_total += 1;
                hits += usize::from(r.dominant_block == *block);
            } else if r.attack == "A05" {
                consensus_total += 1;
                diffuse += usize::from(r.dominant_share_pct < 20.0);
                consensus_max.push(r.dominant_share_pct);
            }
        }
    }
    let elapsed = start.elapsed();
    let expert_rate = hits as f64 / expert_total as f64;
    let consensus_rate = diffuse as f64 / consensus_total as f64;
    let mean_max = consensus_max.iter().sum::<f64>() / consensus_max.len() as f64;
    let pass = expert_total == 80
        && consensus_total == 20
        && expert_rate >= 0.9
        && consensus_rate >= 0.8
        && elapsed < Duration::from_secs(600);
    report(
        12,
        pass,
        format!(
            "expert recovery {hits}/{expert_total} ({:.0}%), consensus max share < 20% in {diffuse}/{consensus_total} (mean max share {mean_max:.1}%), {elapsed:.1?}",
            100.0 * expert_rate
        ),
    );
    assert!(expert_rate >= 0.9, "expert recovery {expert_rate}");
    assert!(
        consensus_rate >= 0.8,
        "consensus diffuse rate {consensus_rate}"
    );
    assert!(elapsed < Duration::from_secs(600));
}

#[test]
fn c13_eigencount_ablation() {
    let _g = serial();
    let ks = [2, 5, 10, 20, 35];
    let mut monotone = true;
    let mut savings_ok = true;
    let mut detail = Vec::new();
    for seed in 0..2u64 {
        let data = generate(&planted(100 + seed, false)).unwrap();
        let mut cfg = e2e_config(seed);
        cfg.train.depth = 4;
        let recs = eig_curve(&data, &cfg, &ks).unwrap();
        let at = |k: usize| recs.iter().find(|r| r.k == k).unwrap();
        let saving = at(10).memory_savings_pct;
        let mem_ratio = at(10).memory_bytes as f64 / at(35).memory_bytes as f64;
        savings_ok &= format!("{saving:.1}") == "71.4" && (mem_ratio - 10.0 / 35.0).abs() < 1e-15;
        monotone &= at(10).f1_macro >= at(2).f1_macro;
        detail.push(format!(
            "seed {seed}: F1(2) {:.3} F1(10) {:.3} savings {saving:.3}%",
            at(2).f1_macro,
            at(10).f1_macro
        ));
    }
    let pass = monotone && savings_ok;
    report(13, pass, detail.join("; "));
    assert!(pass);
}
