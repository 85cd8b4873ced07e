use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::Value;

use tff_core::ablation::{evaluate, write_scores_csv, Deltas, EvalOptions, EvalReport, ThresholdMode};
use tff_core::ffrs::{compute_ff_rs, default_k, select as select_fmaps, FeatureMapSet, FfrsOptions, OmegaTable, SelectMode};
use tff_core::graph::{load_model, load_model_dir};
use tff_core::imageio::{load_png, prepare, scan_dataset, DatasetEntry, Label, Transform};
use tff_core::lrp::{SeedMode, DEFAULT_EPS};
use tff_core::lrpmax::{lrp_max_explain, write_explanation, DEFAULT_PATCH_SIDE};
use tff_core::report::{read_json, write_json};
use tff_core::stats::{color_test, MedianTestOptions, Ties};
use tff_core::synthfix::{write_fixture, FixtureSpec};
use tff_core::{Error, FeatureMapId, ModelGraph, Result};

#[derive(Args, Debug, Serialize)]
pub struct ModelArgs {
    /// Directory holding model.json and weights.bin.
    #[arg(long, value_name = "DIR")]
    pub model: Option<PathBuf>,
    /// Explicit manifest path (use with --weights).
    #[arg(long, requires = "weights")]
    pub manifest: Option<PathBuf>,
    /// Explicit weight blob path (use with --manifest).
    #[arg(long, requires = "manifest")]
    pub weights: Option<PathBuf>,
}

impl ModelArgs {
    fn load(&self) -> Result<ModelGraph> {
        let g = match (&self.manifest, &self.weights, &self.model) {
            (Some(m), Some(w), _) => load_model(m, w)?,
            (_, _, Some(dir)) => load_model_dir(dir)?,
            _ => return Err(Error::Config("give --model DIR or --manifest and --weights".into())),
        };
        // relevance rules need batchnorm folded into the preceding conv
        if g.is_fused() {
            Ok(g)
        } else {
            g.fuse_batchnorm()
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct DataArgs {
    /// Dataset root containing real/ and fake/.
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Overrides <data>/real.
    #[arg(long, value_name = "DIR")]
    pub real_dir: Option<PathBuf>,
    /// Overrides <data>/fake.
    #[arg(long, value_name = "DIR")]
    pub fake_dir: Option<PathBuf>,
    /// Use at most this many images per class.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Center-crop every image to SIZE×SIZE before normalization.
    #[arg(long, value_name = "SIZE")]
    pub center_crop: Option<usize>,
}

impl DataArgs {
    fn dir(&self, explicit: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
        match (explicit, &self.data) {
            (Some(d), _) => Ok(d.clone()),
            (None, Some(root)) => Ok(root.join(name)),
            (None, None) => Err(Error::Config(format!("give --data or --{}-dir", name))),
        }
    }

    fn entries(&self) -> Result<Vec<DatasetEntry>> {
        if self.limit == Some(0) {
            return Err(Error::Config("--limit must be at least 1".into()));
        }
        scan_dataset(&self.dir(&self.real_dir, "real")?, &self.dir(&self.fake_dir, "fake")?, self.limit)
    }

    fn fakes(&self) -> Result<Vec<DatasetEntry>> {
        if self.limit == Some(0) {
            return Err(Error::Config("--limit must be at least 1".into()));
        }
        let dir = self.dir(&self.fake_dir, "fake")?;
        let mut paths = tff_core::imageio::list_pngs(&dir)?;
        if let Some(n) = self.limit {
            paths.truncate(n);
        }
        if paths.is_empty() {
            return Err(Error::EmptyDataset(format!("no PNG images under {}", dir.display())));
        }
        Ok(paths.into_iter().map(|path| DatasetEntry { path, label: Label::Fake }).collect())
    }

    fn crop(&self) -> Result<Option<(usize, usize)>> {
        match self.center_crop {
            Some(0) => Err(Error::Config("--center-crop must be at least 1".into())),
            c => Ok(c.map(|s| (s, s))),
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct RelevanceArgs {
    /// Stabilizer of the output-layer ε rule.
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
    /// Relevance injected at the output: the logit or 1.0.
    #[arg(long, default_value = "logit", value_parser = parse_seed_mode)]
    pub seed_mode: SeedMode,
}

impl RelevanceArgs {
    fn validate(&self) -> Result<()> {
        if self.eps > 0.0 && self.eps.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("--eps must be positive, got {}", self.eps)))
        }
    }
}

fn parse_seed_mode(s: &str) -> std::result::Result<SeedMode, String> {
    match s {
        "logit" => Ok(SeedMode::Logit),
        "unit" => Ok(SeedMode::Unit),
        _ => Err(format!("expected logit or unit, got '{}'", s)),
    }
}

/// Settings echoed into every output file.
#[derive(Serialize)]
struct Echo<'a, A: Serialize> {
    command: &'static str,
    threads: Option<usize>,
    #[serde(flatten)]
    args: &'a A,
}

#[derive(Serialize)]
struct Output<'a, C: Serialize, B: Serialize> {
    config: C,
    #[serde(flatten)]
    body: &'a B,
}

fn emit<A: Serialize, B: Serialize>(path: &Path, command: &'static str, threads: Option<usize>, args: &A, body: &B) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let out = Output {
        config: Echo { command, threads, args },
        body,
    };
    write_json(path, &out)
}

fn read_fmaps(path: &Path) -> Result<FeatureMapSet> {
    read_json(path).map_err(|e| Error::Config(format!("cannot read feature-map set {}: {}", path.display(), e)))
}

#[derive(Args, Debug, Serialize)]
pub struct FixtureArgs {
    /// Output directory (model/, data/, fixture_truth.json, ...).
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub n_real: usize,
    #[arg(long, default_value_t = 64)]
    pub n_fake: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 12)]
    pub patch_size: usize,
    /// Do not plant the luminance-texture channel.
    #[arg(long)]
    pub no_texture_channel: bool,
}

pub fn fixture(a: &FixtureArgs, threads: Option<usize>) -> Result<()> {
    let spec = FixtureSpec {
        image_size: a.image_size,
        n_real: a.n_real,
        n_fake: a.n_fake,
        patch_size: a.patch_size,
        texture_channel: !a.no_texture_channel,
        rng_seed: a.seed,
    };
    spec.validate()?;
    let summary = write_fixture(&spec, &a.out)?;
    emit(&a.out.join("fixture.json"), "fixture", threads, a, &summary)?;
    println!(
        "fixture written to {} ({} real, {} fake); baseline AP {:.2}",
        a.out.display(),
        spec.n_real,
        spec.n_fake,
        summary.baseline_ap
    );
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct RankArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub relevance: RelevanceArgs,
    #[arg(long, default_value = "omega.json")]
    pub out: PathBuf,
}

pub fn rank(a: &RankArgs, threads: Option<usize>) -> Result<()> {
    a.relevance.validate()?;
    let crop = a.data.crop()?;
    let fakes = a.data.fakes()?;
    let g = a.model.load()?;
    let opts = FfrsOptions {
        eps: a.relevance.eps,
        seed_mode: a.relevance.seed_mode,
        crop,
    };
    let table = compute_ff_rs(&g, &fakes, &opts)?;
    emit(&a.out, "rank", threads, a, &table)?;
    println!("{:>4}  {:<24} {:>12}", "rank", "feature map", "omega");
    for (i, e) in table.entries.iter().take(20).enumerate() {
        println!("{:>4}  {:<24} {:>12.6}", i + 1, format!("{}:{}", e.layer, e.channel), e.omega);
    }
    println!("{} images ({} skipped), {} feature maps", table.n_images, table.n_skipped, table.len());
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct SelectArgs {
    /// Score table written by `rank`.
    #[arg(long, default_value = "omega.json")]
    pub omega: PathBuf,
    #[arg(long, default_value = "top", value_parser = ["top", "low", "random"])]
    pub mode: String,
    /// Number of maps; defaults to 0.5% of all maps (at least 1).
    #[arg(short, long)]
    pub k: Option<usize>,
    /// Random-mode seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// In random mode, never pick maps from the top-k set.
    #[arg(long)]
    pub exclude: bool,
    #[arg(long, default_value = "fmaps.json")]
    pub out: PathBuf,
}

pub fn select(a: &SelectArgs, threads: Option<usize>) -> Result<()> {
    let mode: SelectMode = a.mode.parse()?;
    let table: OmegaTable =
        read_json(&a.omega).map_err(|e| Error::Config(format!("cannot read {}: {}", a.omega.display(), e)))?;
    let k = a.k.unwrap_or_else(|| default_k(table.len()));
    let exclude = if a.exclude && mode == SelectMode::Random {
        select_fmaps(&table, SelectMode::Top, k, 0, &[])?.ids
    } else {
        Vec::new()
    };
    let set = select_fmaps(&table, mode, k, a.seed, &exclude)?;
    emit(&a.out, "select", threads, a, &set)?;
    for id in &set.ids {
        println!("{}", id);
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Feature-map set written by `select`.
    #[arg(long, default_value = "fmaps.json")]
    pub fmaps: PathBuf,
    /// Recalibrate the threshold on the masked run instead of reusing the
    /// baseline threshold.
    #[arg(long)]
    pub recalibrate: bool,
    #[arg(long, default_value = "ablation.json")]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct AblationBody<'a> {
    fmaps: &'a FeatureMapSet,
    baseline: &'a EvalReport,
    masked: &'a EvalReport,
    deltas: Deltas,
}

pub fn ablate(a: &AblateArgs, threads: Option<usize>) -> Result<()> {
    let crop = a.data.crop()?;
    let set = read_fmaps(&a.fmaps)?;
    let entries = a.data.entries()?;
    let g = a.model.load()?;
    g.dropout_mask(&set.ids)?;
    let base = evaluate(&g, &entries, &EvalOptions { crop, ..Default::default() })?;
    let threshold = if a.recalibrate { ThresholdMode::Oracle } else { ThresholdMode::Fixed(base.threshold) };
    let masked = evaluate(
        &g,
        &entries,
        &EvalOptions {
            mask: set.ids.clone(),
            threshold,
            crop,
            ..Default::default()
        },
    )?;
    let deltas = Deltas::between(&base, &masked);
    println!("{:<10} {:>8} {:>8} {:>8}", "", "AP", "real", "fake");
    println!("{:<10} {:>8.2} {:>8.2} {:>8.2}", "baseline", base.ap, base.acc_real, base.acc_fake);
    println!("{:<10} {:>8.2} {:>8.2} {:>8.2}", "masked", masked.ap, masked.acc_real, masked.acc_fake);
    println!("{:<10} {:>8.2} {:>8.2} {:>8.2}", "delta", deltas.ap, deltas.acc_real, deltas.acc_fake);
    let body = AblationBody {
        fmaps: &set,
        baseline: &base,
        masked: &masked,
        deltas,
    };
    emit(&a.out, "ablate", threads, a, &body)
}

#[derive(Args, Debug, Serialize)]
pub struct ExplainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// PNG image to explain.
    #[arg(long)]
    pub image: PathBuf,
    /// Feature map as layer:channel.
    #[arg(long)]
    pub fmap: String,
    /// Side of the extracted patch in pixels.
    #[arg(long, default_value_t = DEFAULT_PATCH_SIDE)]
    pub side: usize,
    #[arg(long, value_name = "SIZE")]
    pub center_crop: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub relevance: RelevanceArgs,
    /// Also dump the explanation as raw little-endian f32.
    #[arg(long)]
    pub raw: bool,
    /// Directory for heatmap.png, patch.png and meta.json.
    #[arg(long, default_value = "explain")]
    pub out_dir: PathBuf,
}

pub fn explain(a: &ExplainArgs, threads: Option<usize>) -> Result<()> {
    a.relevance.validate()?;
    let fmap: FeatureMapId = a.fmap.parse()?;
    if a.side == 0 {
        return Err(Error::Config("--side must be at least 1".into()));
    }
    if a.center_crop == Some(0) {
        return Err(Error::Config("--center-crop must be at least 1".into()));
    }
    let g = a.model.load()?;
    g.resolve_fmap(&fmap)?;
    let mut pixels = load_png(&a.image)?;
    if let Some(s) = a.center_crop {
        pixels = tff_core::imageio::center_crop(&pixels, s, s)?;
    }
    let x = prepare(&pixels, Transform::None, None, g.normalization())?;
    let e = lrp_max_explain(&g, &x, &fmap, a.relevance.seed_mode, a.relevance.eps)?;
    fs::create_dir_all(&a.out_dir).map_err(|err| Error::io(&a.out_dir, err))?;
    let meta = write_explanation(&a.out_dir, &pixels, &e, a.side)?;
    if a.raw {
        let bytes: Vec<u8> = e.values.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let raw = a.out_dir.join("explanation.f32");
        fs::write(&raw, bytes).map_err(|err| Error::io(&raw, err))?;
        let sidecar = serde_json::json!({ "shape": e.values.shape(), "file": "explanation.f32" });
        write_json(&a.out_dir.join("explanation.json"), &sidecar)?;
    }
    emit(&a.out_dir.join("meta.json"), "explain", threads, a, &meta)?;
    if meta.degenerate {
        println!("{}: feature map carries no relevance on this image", fmap);
    } else {
        println!(
            "{}: peak at {:?}, patch {}x{} at ({}, {})",
            fmap, e.argmax_input, meta.patch.height, meta.patch.width, meta.patch.top, meta.patch.left
        );
    }
    Ok(())
}

#[derive(Args, Debug, Serialize)]
pub struct ColortestArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Feature-map set to test.
    #[arg(long, default_value = "fmaps.json")]
    pub fmaps: PathBuf,
    /// Significance level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Disable the Yates continuity correction.
    #[arg(long)]
    pub no_correction: bool,
    /// Where values equal to the grand median go.
    #[arg(long, default_value = "below", value_parser = ["below", "above", "ignore"])]
    pub ties: String,
    #[arg(long, default_value = "colortest.json")]
    pub out: PathBuf,
}

pub fn colortest(a: &ColortestArgs, threads: Option<usize>) -> Result<()> {
    if !(a.alpha > 0.0 && a.alpha <= 1.0) {
        return Err(Error::Config(format!("--alpha must lie in (0, 1], got {}", a.alpha)));
    }
    let ties: Ties = a.ties.parse()?;
    let crop = a.data.crop()?;
    let set = read_fmaps(&a.fmaps)?;
    let fakes = a.data.fakes()?;
    let g = a.model.load()?;
    let opts = MedianTestOptions {
        correction: !a.no_correction,
        ties,
    };
    let report = color_test(&g, &fakes, &set.ids, a.alpha, opts, crop)?;
    for e in &report.entries {
        println!(
            "{:<20} p={:<12.4e} chi2={:<10.4} {}",
            format!("{}:{}", e.layer, e.channel),
            e.p,
            e.chi2,
            if e.color_conditional { "color-conditional" } else { "-" }
        );
    }
    println!("{:.1}% color-conditional at alpha={}", report.summary.percent_color_conditional, a.alpha);
    emit(&a.out, "colortest", threads, a, &report)
}

#[derive(Args, Debug, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub data: DataArgs,
    /// Convert images to grayscale before scoring.
    #[arg(long)]
    pub grayscale: bool,
    /// Optional feature-map set to drop.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// A threshold value, or a prior report whose threshold is reused.
    #[arg(long, value_name = "VALUE|REPORT")]
    pub fixed_threshold: Option<String>,
    /// Also write per-image probabilities as CSV.
    #[arg(long)]
    pub scores_csv: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

fn threshold_from(spec: &str) -> Result<f64> {
    if let Ok(t) = spec.parse::<f64>() {
        return Ok(t);
    }
    let v: Value = read_json(Path::new(spec)).map_err(|e| Error::Config(format!("cannot read threshold from {}: {}", spec, e)))?;
    v.get("threshold")
        .or_else(|| v.get("baseline").and_then(|b| b.get("threshold")))
        .and_then(Value::as_f64)
        .ok_or_else(|| Error::Config(format!("{} has no threshold field", spec)))
}

pub fn eval(a: &EvalArgs, threads: Option<usize>) -> Result<()> {
    let threshold = match &a.fixed_threshold {
        Some(s) => ThresholdMode::Fixed(threshold_from(s)?),
        None => ThresholdMode::Oracle,
    };
    let crop = a.data.crop()?;
    let mask = match &a.mask {
        Some(p) => read_fmaps(p)?.ids,
        None => Vec::new(),
    };
    let entries = a.data.entries()?;
    let g = a.model.load()?;
    let opts = EvalOptions {
        mask,
        transform: if a.grayscale { Transform::Grayscale } else { Transform::None },
        threshold,
        crop,
    };
    let report = evaluate(&g, &entries, &opts)?;
    println!(
        "AP {:.2}  real {:.2}%  fake {:.2}%  threshold {:.6}  median p(fake) {:.4}",
        report.ap, report.acc_real, report.acc_fake, report.threshold, report.median_prob_fake
    );
    if let Some(csv) = &a.scores_csv {
        write_scores_csv(csv, &report)?;
    }
    emit(&a.out, "eval", threads, a, &report)
}
