//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use tff_core::ablation::{average_precision, evaluate, oracle_threshold, EvalOptions, ThresholdMode};
use tff_core::ffrs::{compute_ff_rs, layer_shares, select, FfrsOptions, OmegaTable, SelectMode};
use tff_core::graph::build::{conv, linear, simple};
use tff_core::graph::{load_model_dir, LayerKind, Normalization, INPUT_ID};
use tff_core::imageio::{dataset_dirs, load_png, prepare, scan_dataset, DatasetEntry, Label, Transform};
use tff_core::lrp::{beta0_redistribute, lrp_backward, SeedMode, DEFAULT_EPS};
use tff_core::lrpmax::{extract_patch, lrp_max_explain};
use tff_core::report::read_json;
use tff_core::stats::{color_test, moods_median_test, MedianTestOptions, Ties};
use tff_core::synthfix::{write_fixture, FixtureSpec, FixtureTruth};
use tff_core::{FeatureMapId, ModelGraph, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    model: ModelGraph,
    entries: Vec<DatasetEntry>,
    truth: FixtureTruth,
}

impl Fixture {
    fn build() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        write_fixture(&FixtureSpec::default(), &root).expect("fixture");
        let model = load_model_dir(&root.join("model")).expect("model");
        let (real, fake) = dataset_dirs(&root.join("data"));
        let entries = scan_dataset(&real, &fake, None).expect("dataset");
        let truth = read_json(&root.join("fixture_truth.json")).expect("truth");
        Fixture { _dir: dir, root, model, entries, truth }
    }

    fn fakes(&self) -> Vec<DatasetEntry> {
        self.entries.iter().filter(|e| e.label == Label::Fake).cloned().collect()
    }
}

fn single_neuron_rule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut conserving = 0;
    let mut empty = 0;
    for case in 0..1000 {
        let n = rng.random_range(1..=32);
        // a tenth of the cases have only non-positive contributions
        let all_negative = case % 10 == 0;
        let inputs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-3.0..3.0);
                let w: f64 = rng.random_range(-3.0..3.0);
                if all_negative {
                    (x.abs(), -w.abs())
                } else {
                    (x, w)
                }
            })
            .collect();
        let r_y: f64 = rng.random_range(-10.0..10.0);
        let got = beta0_redistribute(&inputs, r_y);
        let denom: f64 = inputs.iter().filter(|(x, w)| x * w > 0.0).map(|(x, w)| x * w).sum();
        for (i, &(x, w)) in inputs.iter().enumerate() {
            let expected = if denom > 0.0 && x * w > 0.0 { r_y * x * w / denom } else { 0.0 };
            check(
                (got[i] - expected).abs() <= 1e-6 * expected.abs().max(1e-12),
                format!("case {} input {}: {} vs {}", case, i, got[i], expected),
            )?;
        }
        if denom > 0.0 {
            let total: f64 = got.iter().sum();
            check(
                (total - r_y).abs() <= 1e-6 * r_y.abs().max(1e-12),
                format!("case {}: sum {} vs {}", case, total, r_y),
            )?;
            conserving += 1;
        } else {
            empty += 1;
        }
    }
    Ok(format!("1000 cases, {} conserving, {} with zero denominator", conserving, empty))
}

/// Bias-free conv stack: up to four 3×3 convs with ReLU, an optional 2×2
/// maxpool after the first, global average pooling and one linear output.
fn random_model(rng: &mut ChaCha8Rng) -> ModelGraph {
    let n_conv = rng.random_range(1..=4);
    let pool = rng.random_bool(0.5);
    let mut layers = Vec::new();
    let mut params = BTreeMap::new();
    let mut prev = INPUT_ID.to_string();
    let mut in_ch = 3;
    for i in 0..n_conv {
        let out = rng.random_range(1..=16);
        let id = format!("conv{}", i + 1);
        layers.push(conv(&id, &prev, out, 3, 1, false));
        let w: Vec<f32> = (0..out * in_ch * 9).map(|_| rng.random_range(-0.5..1.0)).collect();
        params.insert(format!("{}.weight", id), Tensor::new(vec![out, in_ch, 3, 3], w).unwrap());
        let relu = format!("relu{}", i + 1);
        layers.push(simple(&relu, &id, LayerKind::Relu));
        prev = relu;
        if i == 0 && pool {
            layers.push(simple("pool", &prev, LayerKind::MaxPool2d { kernel: [2, 2], stride: [2, 2] }));
            prev = "pool".into();
        }
        in_ch = out;
    }
    layers.push(simple("gap", &prev, LayerKind::GlobalAvgPool));
    layers.push(simple("flat", "gap", LayerKind::Flatten));
    layers.push(linear("fc", "flat", 1, false));
    let w: Vec<f32> = (0..in_ch).map(|_| rng.random_range(-1.0..1.0)).collect();
    params.insert("fc.weight".into(), Tensor::new(vec![1, in_ch], w).unwrap());
    ModelGraph::new([3, 16, 16], Normalization::default(), layers, params).unwrap()
}

fn random_input(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![3, 16, 16], (0..3 * 256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}

fn network_conservation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for m in 0..20 {
        let g = random_model(&mut rng);
        let x = random_input(&mut rng);
        let trace = g.forward(&x, None).map_err(|e| e.to_string())?;
        let seed = trace.logit as f64;
        check(seed != 0.0, format!("model {} has a zero logit", m))?;
        let rec = lrp_backward(&g, &trace, seed, 1e-9).map_err(|e| e.to_string())?;
        let total: f64 = rec.input().iter().sum();
        let err = (total - seed).abs() / seed.abs();
        worst = worst.max(err);
        check(err <= 1e-3, format!("model {}: input sum {} vs seed {}", m, total, seed))?;
    }
    Ok(format!("20 models, worst relative error {:.2e}", worst))
}

fn omega_contract(f: &Fixture) -> Outcome {
    // hand example: one layer, two channels of two positions each
    let shares = layer_shares(&[2.0, -1.0, 1.0, 0.0], 2);
    check(shares == vec![0.5, 0.25], format!("hand example gave {:?}", shares))?;
    let ids = [FeatureMapId::new("c", 0), FeatureMapId::new("c", 1)];
    let t = OmegaTable::from_shares(&ids, &[shares], String::new(), 0).map_err(|e| e.to_string())?;
    check(t.get(&ids[0]) == Some(0.5) && t.get(&ids[1]) == Some(0.25), "hand table mismatch")?;

    let mut tables = 1;
    let logit = compute_ff_rs(&f.model, &f.fakes(), &FfrsOptions::default()).map_err(|e| e.to_string())?;
    logit.check_bounds()?;
    let unit = compute_ff_rs(&f.model, &f.fakes(), &FfrsOptions { seed_mode: SeedMode::Unit, ..Default::default() })
        .map_err(|e| e.to_string())?;
    unit.check_bounds()?;
    tables += 2;
    let mut worst: f64 = 0.0;
    for e in &logit.entries {
        let d = (e.omega - unit.get(&e.id()).unwrap()).abs();
        worst = worst.max(d);
    }
    check(worst <= 1e-9, format!("fixture ω moved by {:.3e} between logit and unit seeds", worst))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for m in 0..20 {
        let g = random_model(&mut rng);
        let images: Vec<Tensor> = (0..4).map(|_| random_input(&mut rng)).collect();
        let per_scale: Vec<Vec<Vec<f64>>> = [1.0, 37.5]
            .iter()
            .map(|&scale| {
                images
                    .iter()
                    .map(|x| {
                        let trace = g.forward(x, None).unwrap();
                        let rec = lrp_backward(&g, &trace, scale * trace.logit.abs() as f64 + 1e-3, DEFAULT_EPS).unwrap();
                        g.conv_layers()
                            .into_iter()
                            .flat_map(|i| layer_shares(rec.layer(i), g.output_shape(i)[0]))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let fmaps = g.feature_maps();
        let a = OmegaTable::from_shares(&fmaps, &per_scale[0], String::new(), 0).map_err(|e| e.to_string())?;
        let b = OmegaTable::from_shares(&fmaps, &per_scale[1], String::new(), 0).map_err(|e| e.to_string())?;
        a.check_bounds().map_err(|e| format!("model {}: {}", m, e))?;
        b.check_bounds().map_err(|e| format!("model {}: {}", m, e))?;
        tables += 2;
        for e in &a.entries {
            let d = (e.omega - b.get(&e.id()).unwrap()).abs();
            worst = worst.max(d);
            check(d <= 1e-9, format!("model {} {}: ω {} vs {}", m, e.id(), e.omega, b.get(&e.id()).unwrap()))?;
        }
    }
    Ok(format!("{} tables in bounds, worst rescaling drift {:.2e}, hand example exact", tables, worst))
}

fn dropout_table(f: &Fixture) -> Outcome {
    let table = compute_ff_rs(&f.model, &f.fakes(), &FfrsOptions::default()).map_err(|e| e.to_string())?;
    let color = f.truth.planted_set().ids[0].clone();
    check(
        table.entries[0].id() == color && table.entries[0].omega > table.entries[1].omega,
        format!("rank 1 is {} (ω {})", table.entries[0].id(), table.entries[0].omega),
    )?;

    let base = evaluate(&f.model, &f.entries, &EvalOptions::default()).map_err(|e| e.to_string())?;
    check(base.acc_fake >= 95.0, format!("baseline fake accuracy {:.2}", base.acc_fake))?;
    let fixed = ThresholdMode::Fixed(base.threshold);
    let run = |mask: Vec<FeatureMapId>| {
        evaluate(&f.model, &f.entries, &EvalOptions { mask, threshold: fixed, ..Default::default() }).map_err(|e| e.to_string())
    };

    let top = select(&table, SelectMode::Top, 1, 0, &[]).map_err(|e| e.to_string())?;
    let top_r = run(top.ids.clone())?;
    let low = select(&table, SelectMode::Low, 1, 0, &[]).map_err(|e| e.to_string())?;
    let low_r = run(low.ids.clone())?;
    let planted = f.truth.planted_set().ids;
    let random = select(&table, SelectMode::Random, 1, 0, &planted).map_err(|e| e.to_string())?;
    let rnd_r = run(random.ids.clone())?;

    let summary = format!(
        "baseline AP {:.2} fake {:.2}; top-1 {} fake {:.2} real {:.2}; low-1 {} ΔAP {:.2}; random-1 {} Δfake {:.2}",
        base.ap,
        base.acc_fake,
        top.ids[0],
        top_r.acc_fake,
        top_r.acc_real,
        low.ids[0],
        low_r.ap - base.ap,
        random.ids[0],
        rnd_r.acc_fake - base.acc_fake
    );
    check(top_r.acc_fake <= 10.0 && top_r.acc_real >= 90.0, format!("top-1 dropout too weak: {}", summary))?;
    check((low_r.ap - base.ap).abs() <= 1.0, format!("low-1 dropout moved AP: {}", summary))?;
    check((rnd_r.acc_fake - base.acc_fake).abs() <= 5.0, format!("random-1 dropout moved fake accuracy: {}", summary))?;
    Ok(summary)
}

fn color_split(f: &Fixture) -> Outcome {
    let planted = f.truth.planted_set();
    let r = color_test(&f.model, &f.fakes(), &planted.ids, 0.05, MedianTestOptions::default(), None).map_err(|e| e.to_string())?;
    let (color, texture) = (&r.entries[0], &r.entries[1]);
    let summary = format!(
        "color p={:.3e}, texture p={:.3e}, {:.1}% color-conditional",
        color.p, texture.p, r.summary.percent_color_conditional
    );
    check(color.p < 0.05 && texture.p > 0.05, summary.clone())?;
    check(r.summary.percent_color_conditional == 50.0, summary.clone())?;
    Ok(summary)
}

fn grayscale_drop(f: &Fixture) -> Outcome {
    let base = evaluate(&f.model, &f.entries, &EvalOptions::default()).map_err(|e| e.to_string())?;
    let gray = evaluate(
        &f.model,
        &f.entries,
        &EvalOptions {
            transform: Transform::Grayscale,
            threshold: ThresholdMode::Fixed(base.threshold),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let drop = 1.0 - gray.median_prob_fake / base.median_prob_fake;
    let summary = format!(
        "median p(fake) {:.4} -> {:.4} ({:.1}% drop); real accuracy {:.2} -> {:.2}",
        base.median_prob_fake,
        gray.median_prob_fake,
        100.0 * drop,
        base.acc_real,
        gray.acc_real
    );
    check(drop >= 0.5 && (gray.acc_real - base.acc_real).abs() <= 5.0, summary.clone())?;
    Ok(summary)
}

/// Mood's median test written out directly: grand median by sorting,
/// values equal to it counted as below, expected counts from the margins.
fn median_oracle(a: &[f64], b: &[f64], yates: bool) -> (f64, f64) {
    let mut all: Vec<f64> = a.iter().chain(b).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = all.len();
    let med = if n % 2 == 1 { all[n / 2] } else { (all[n / 2 - 1] + all[n / 2]) / 2.0 };
    let above = |s: &[f64]| s.iter().filter(|&&v| v > med).count() as f64;
    let obs = [
        [above(a), above(b)],
        [a.len() as f64 - above(a), b.len() as f64 - above(b)],
    ];
    let total = n as f64;
    let mut chi2 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let row = obs[i][0] + obs[i][1];
            let col = obs[0][j] + obs[1][j];
            if row == 0.0 || col == 0.0 {
                return (0.0, 1.0);
            }
            let e = row * col / total;
            let mut d = (obs[i][j] - e).abs();
            if yates {
                d -= d.min(0.5);
            }
            chi2 += d * d / e;
        }
    }
    let p = if chi2 == 0.0 { 1.0 } else { ChiSquared::new(1.0).unwrap().sf(chi2) };
    (chi2, p)
}

fn stats_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_chi2: f64 = 0.0;
    let mut worst_p: f64 = 0.0;
    for case in 0..100 {
        let na = rng.random_range(2..40);
        let nb = rng.random_range(2..40);
        // coarse grid so ties with the median occur
        let shift = rng.random_range(0..6) as f64;
        let a: Vec<f64> = (0..na).map(|_| rng.random_range(0..20) as f64).collect();
        let b: Vec<f64> = (0..nb).map(|_| rng.random_range(0..20) as f64 + shift).collect();
        let yates = case % 2 == 0;
        let got = moods_median_test(&a, &b, MedianTestOptions { correction: yates, ties: Ties::Below }).map_err(|e| e.to_string())?;
        let (chi2, p) = median_oracle(&a, &b, yates);
        let dc = (got.chi2 - chi2).abs() / chi2.max(1.0);
        let dp = (got.p_value - p).abs() / p.max(1.0);
        worst_chi2 = worst_chi2.max(dc);
        worst_p = worst_p.max(dp);
        check(dc <= 1e-9 && dp <= 1e-9, format!("case {}: ({}, {}) vs oracle ({}, {})", case, got.chi2, got.p_value, chi2, p))?;
    }

    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [5.0, 6.0, 7.0, 8.0];
    let plain = moods_median_test(&a, &b, MedianTestOptions { correction: false, ties: Ties::Below }).map_err(|e| e.to_string())?;
    let yates = moods_median_test(&a, &b, MedianTestOptions { correction: true, ties: Ties::Below }).map_err(|e| e.to_string())?;
    let sig4 = |v: f64| format!("{:.3e}", v);
    check(plain.chi2 == 8.0 && sig4(plain.p_value) == "4.678e-3", format!("plain example: χ² {} p {}", plain.chi2, plain.p_value))?;
    check(yates.chi2 == 4.5 && sig4(yates.p_value) == "3.389e-2", format!("Yates example: χ² {} p {}", yates.chi2, yates.p_value))?;
    Ok(format!(
        "100 pairs, worst χ² {:.1e} p {:.1e}; χ²=8 p={:.5}, χ²=4.5 p={:.4}",
        worst_chi2, worst_p, plain.p_value, yates.p_value
    ))
}

/// Precision accumulated at each rank of a descending sort; equal scores
/// keep their input order.
fn pr_curve_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap().then(i.cmp(&j)));
    let positives = labels.iter().filter(|&&l| l).count() as f64;
    let mut hits = 0.0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1.0;
            sum += hits / (rank + 1) as f64;
        }
    }
    100.0 * sum / positives
}

fn metrics_oracle() -> Outcome {
    let ap = average_precision(&[0.9, 0.8, 0.4, 0.3], &[true, true, false, true]).map_err(|e| e.to_string())?;
    check(format!("{:.2}", ap) == "91.67", format!("worked example gave {}", ap))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for case in 0..200 {
        let n = rng.random_range(2..60);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = rng.random_range(2..30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let got = average_precision(&scores, &labels).map_err(|e| e.to_string())?;
        let want = pr_curve_ap(&scores, &labels);
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-9, format!("case {}: AP {} vs {}", case, got, want))?;

        let real: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
        let fake: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
        let choice = oracle_threshold(&real, &fake).map_err(|e| e.to_string())?;
        let mut best = (f64::NEG_INFINITY, f64::INFINITY);
        for &t in &scores {
            let tpr = fake.iter().filter(|&&s| s >= t).count() as f64 / fake.len() as f64;
            let tnr = real.iter().filter(|&&s| s < t).count() as f64 / real.len() as f64;
            let g = (tpr * tnr).sqrt();
            if g > best.0 || (g == best.0 && t < best.1) {
                best = (g, t);
            }
        }
        check(
            choice.gmean == best.0 && choice.threshold == best.1,
            format!("case {}: threshold {} (g {}) vs scan {} (g {})", case, choice.threshold, choice.gmean, best.1, best.0),
        )?;
    }
    Ok(format!("worked example {:.2}; 200 sets, worst AP error {:.1e}, thresholds identical", ap, worst))
}

fn localization(f: &Fixture) -> Outcome {
    let color = f.truth.planted_set().ids[0].clone();
    let mut hits = 0;
    let mut peaks_inside = 0;
    for t in &f.truth.fakes[..50] {
        let px = load_png(&f.root.join("data").join(&t.path)).map_err(|e| e.to_string())?;
        let x = prepare(&px, Transform::None, None, f.model.normalization()).map_err(|e| e.to_string())?;
        let e = lrp_max_explain(&f.model, &x, &color, SeedMode::Logit, DEFAULT_EPS).map_err(|e| e.to_string())?;
        if e.degenerate {
            continue;
        }
        if t.patch.contains(e.argmax_input.0, e.argmax_input.1) {
            peaks_inside += 1;
        }
        let (_, b) = extract_patch(&px, &e, 64).map_err(|e| e.to_string())?;
        if b.intersects(&t.patch) {
            hits += 1;
        }
    }
    let summary = format!("64px patch hits {}/50; explanation peak inside the box {}/50", hits, peaks_inside);
    check(hits >= 45, summary.clone())?;
    Ok(summary)
}

fn tff(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_tff"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("tff {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)),
    )
}

const OUTPUTS: &[&str] = &[
    "fx/fixture.json",
    "fx/fixture_truth.json",
    "fx/planted_fmaps.json",
    "fx/model/model.json",
    "fx/model/weights.bin",
    "omega.json",
    "fmaps.json",
    "random.json",
    "ablation.json",
    "colortest.json",
    "report.json",
    "gray.json",
    "scores.csv",
    "explain/meta.json",
    "explain/heatmap.png",
    "explain/patch.png",
];

fn cli_pipeline(dir: &Path, threads: Option<&str>) -> Result<(), String> {
    let model = ["--model", "fx/model", "--data", "fx/data"];
    let runs: Vec<Vec<&str>> = vec![
        vec!["fixture", "--out", "fx"],
        [&["rank"][..], &model, &["--out", "omega.json"]].concat(),
        vec!["select", "--omega", "omega.json", "-k", "1"],
        vec!["select", "--omega", "omega.json", "-k", "1", "--mode", "random", "--seed", "7", "--out", "random.json"],
        [&["ablate"][..], &model, &["--fmaps", "fmaps.json"]].concat(),
        [&["colortest"][..], &model, &["--fmaps", "fx/planted_fmaps.json"]].concat(),
        [&["eval"][..], &model, &["--scores-csv", "scores.csv"]].concat(),
        [&["eval"][..], &model, &["--grayscale", "--fixed-threshold", "report.json", "--out", "gray.json"]].concat(),
        vec!["explain", "--model", "fx/model", "--image", "fx/data/fake/0000.png", "--fmap", "conv1:0", "--out-dir", "explain"],
    ];
    for args in runs {
        let mut full = Vec::new();
        if let Some(t) = threads {
            full.extend(["--threads", t]);
        }
        full.extend(args);
        tff(dir, &full)?;
    }
    Ok(())
}

fn without_threads(mut v: Value) -> Value {
    if let Some(c) = v.get_mut("config").and_then(Value::as_object_mut) {
        c.remove("threads");
    }
    v
}

fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs: Vec<PathBuf> = ["a", "b", "serial"].iter().map(|d| root.path().join(d)).collect();
    for d in &dirs {
        fs::create_dir_all(d).map_err(|e| e.to_string())?;
    }
    cli_pipeline(&dirs[0], None)?;
    cli_pipeline(&dirs[1], None)?;
    cli_pipeline(&dirs[2], Some("1"))?;
    for name in OUTPUTS {
        let read = |d: &Path| fs::read(d.join(name)).map_err(|e| format!("{}: {}", name, e));
        let (a, b, s) = (read(&dirs[0])?, read(&dirs[1])?, read(&dirs[2])?);
        check(a == b, format!("{} differs between identical runs", name))?;
        if name.ends_with(".json") {
            let pa: Value = serde_json::from_slice(&a).map_err(|e| e.to_string())?;
            let ps: Value = serde_json::from_slice(&s).map_err(|e| e.to_string())?;
            check(without_threads(pa) == without_threads(ps), format!("{} differs with --threads 1", name))?;
        } else {
            check(a == s, format!("{} differs with --threads 1", name))?;
        }
    }
    Ok(format!("{} output files byte-identical across reruns and equal under --threads 1", OUTPUTS.len()))
}

fn main() -> ExitCode {
    let built = Instant::now();
    let fixture = Fixture::build();
    println!("fixture generated in {:.2}s", built.elapsed().as_secs_f64());

    type Criterion<'a> = (&'static str, Option<Duration>, Box<dyn Fn() -> Outcome + 'a>);
    let f = &fixture;
    let criteria: Vec<Criterion> = vec![
        ("1 single-neuron relevance rule", Some(Duration::from_secs(1)), Box::new(single_neuron_rule)),
        ("2 network conservation", Some(Duration::from_secs(10)), Box::new(network_conservation)),
        ("3 relevance-share contract", None, Box::new(move || omega_contract(f))),
        ("4 feature dropout on fixture", Some(Duration::from_secs(60)), Box::new(move || dropout_table(f))),
        ("5 color test on fixture", None, Box::new(move || color_split(f))),
        ("6 grayscale ablation on fixture", None, Box::new(move || grayscale_drop(f))),
        ("7 median test oracle", None, Box::new(stats_oracle)),
        ("8 AP and threshold oracle", None, Box::new(metrics_oracle)),
        ("9 explanation localization", None, Box::new(move || localization(f))),
        ("10 CLI determinism", None, Box::new(determinism)),
    ];

    let mut failed = 0;
    for (name, limit, run) in &criteria {
        let start = Instant::now();
        let outcome = run();
        let took = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(msg), Some(l)) if took > *l => Err(format!("{} but took {:.2}s (limit {:.0}s)", msg, took.as_secs_f64(), l.as_secs_f64())),
            (o, _) => o,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {} [{:.2}s]: {}", name, took.as_secs_f64(), msg),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} [{:.2}s]: {}", name, took.as_secs_f64(), msg);
            }
        }
    }
    println!("{}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
