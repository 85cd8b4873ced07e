//! Planted-feature fixture: a hand-built detector whose evidence is known by
//! construction, plus a matching corpus of textured "real" images and
//! "fake" images carrying one magenta patch.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{evaluate, EvalOptions};
use crate::error::{Error, Result};
use crate::ffrs::{FeatureMapSet, SelectMode};
use crate::graph::{build, sigmoid, FeatureMapId, LayerKind, ModelGraph, Normalization};
use crate::imageio::{grayscale, list_pngs, load_png, save_png_rgb, scan_dataset, LUMA};
use crate::lrpmax::PatchBox;
use crate::report::write_json;
use crate::tensor::Tensor;

pub const COLOR_LAYER: &str = "conv1";
pub const COLOR_CHANNEL: usize = 0;
pub const TEXTURE_CHANNEL: usize = 1;

const CONV1_CHANNELS: usize = 8;
const CONV2_CHANNELS: usize = 4;
/// Logit of a plain gray image.
const BLANK_LOGIT: f64 = -3.0;
/// Logit gained by a centered magenta patch on plain gray.
const PATCH_MARGIN: f64 = 10.0;
const STRIPE_GAIN: f32 = 0.08;
const MAGENTA: [f32; 3] = [1.0, 0.0, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub image_size: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub patch_size: usize,
    pub texture_channel: bool,
    pub rng_seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            image_size: 64,
            n_real: 64,
            n_fake: 64,
            patch_size: 12,
            texture_channel: true,
            rng_seed: 0,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || self.image_size % 2 != 0 {
            return Err(Error::Config(format!("image_size must be even and >= 8, got {}", self.image_size)));
        }
        if self.patch_size < 3 || self.patch_size > self.image_size {
            return Err(Error::Config(format!(
                "patch_size must lie in [3, {}], got {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_real < 2 || self.n_fake < 2 {
            return Err(Error::Config("the fixture needs at least 2 images per class".into()));
        }
        Ok(())
    }

    pub fn color_fmap(&self) -> FeatureMapId {
        FeatureMapId::new(COLOR_LAYER, COLOR_CHANNEL)
    }

    pub fn texture_fmap(&self) -> Option<FeatureMapId> {
        self.texture_channel.then(|| FeatureMapId::new(COLOR_LAYER, TEXTURE_CHANNEL))
    }
}

/// Probabilities measured while calibrating the fixture model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub patch_weight: f64,
    pub bias: f64,
    pub blank_prob: f64,
    pub probe_prob: f64,
    pub gray_probe_prob: f64,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn conv_weights(out: usize, inp: usize, f: impl Fn(usize, usize, usize, usize) -> f32) -> Tensor {
    let mut d = Vec::with_capacity(out * inp * 9);
    for o in 0..out {
        for i in 0..inp {
            for ky in 0..3 {
                for kx in 0..3 {
                    d.push(f(o, i, ky, kx));
                }
            }
        }
    }
    Tensor::new(vec![out, inp, 3, 3], d).expect("shape matches")
}

fn layers() -> Vec<crate::graph::LayerSpec> {
    use build::*;
    vec![
        conv("conv1", "input", CONV1_CHANNELS, 3, 1, true),
        simple("relu1", "conv1", LayerKind::Relu),
        simple("pool1", "relu1", LayerKind::MaxPool2d { kernel: [2, 2], stride: [2, 2] }),
        conv("conv2", "pool1", CONV2_CHANNELS, 3, 1, true),
        simple("relu2", "conv2", LayerKind::Relu),
        simple("gap", "relu2", LayerKind::GlobalAvgPool),
        simple("flat", "gap", LayerKind::Flatten),
        linear("fc", "flat", 1, true),
    ]
}

fn assemble(size: usize, texture: bool, noise: &[f32], fc_weight: [f32; 4], fc_bias: f32) -> Result<ModelGraph> {
    const VERTICAL: [f32; 3] = [-1.0, 2.0, -1.0];
    let conv1_w = conv_weights(CONV1_CHANNELS, 3, |o, i, ky, kx| match o {
        // R − 2G + B vanishes on every gray pixel
        0 => [1.0, -2.0, 1.0][i] / 9.0,
        // vertical second difference of luma, horizontally averaged
        1 if texture => LUMA[i] * VERTICAL[ky] / 3.0,
        2 => 1.0 / 27.0,
        _ => noise[((o * 3 + i) * 3 + ky) * 3 + kx],
    });
    let conv1_b = Tensor::new(vec![CONV1_CHANNELS], {
        let mut b = vec![0.0; CONV1_CHANNELS];
        b[0] = -0.3;
        b[1] = if texture { -0.1 } else { 0.0 };
        b
    })?;
    let off = CONV1_CHANNELS * 27;
    let conv2_w = conv_weights(CONV2_CHANNELS, CONV1_CHANNELS, |o, i, ky, kx| match (o, i) {
        (0, 0) => 1.0 / 9.0,
        (1, 1) => 1.0 / 9.0,
        (1, 0) => 0.01 / 9.0,
        (2, 2) => 1.0 / 9.0,
        (2, i) if i >= 3 => noise[off + ((i - 3) * 3 + ky) * 3 + kx],
        _ => 0.0,
    });
    // channel 3 is driven by its bias alone
    let conv2_b = Tensor::new(vec![CONV2_CHANNELS], vec![0.0, 0.0, 0.0, 0.5])?;
    let mut params = BTreeMap::new();
    params.insert("conv1.weight".to_string(), conv1_w);
    params.insert("conv1.bias".to_string(), conv1_b);
    params.insert("conv2.weight".to_string(), conv2_w);
    params.insert("conv2.bias".to_string(), conv2_b);
    params.insert("fc.weight".to_string(), Tensor::new(vec![1, 4], fc_weight.to_vec())?);
    params.insert("fc.bias".to_string(), Tensor::new(vec![1], vec![fc_bias])?);
    ModelGraph::new([3, size, size], Normalization::default(), layers(), params)
}

fn uniform_gray(size: usize, v: f32) -> Tensor {
    Tensor::filled(&[3, size, size], v)
}

fn paint_patch(img: &mut Tensor, b: &PatchBox) {
    let size = img.shape()[2];
    let plane = img.shape()[1] * size;
    let d = img.data_mut();
    for y in b.top..b.top + b.height {
        for x in b.left..b.left + b.width {
            for (c, v) in MAGENTA.iter().enumerate() {
                d[c * plane + y * size + x] = *v;
            }
        }
    }
}

fn centered_probe(spec: &FixtureSpec) -> Tensor {
    let mut img = uniform_gray(spec.image_size, 0.5);
    let start = (spec.image_size - spec.patch_size) / 2;
    paint_patch(
        &mut img,
        &PatchBox { top: start, left: start, height: spec.patch_size, width: spec.patch_size },
    );
    img
}

fn logit(g: &ModelGraph, img: &Tensor) -> Result<f64> {
    Ok(g.forward(img, None)?.logit as f64)
}

/// Builds the fixture detector and calibrates its output layer so that a
/// plain gray image scores low and a centered magenta patch scores high.
pub fn build_fixture_model(spec: &FixtureSpec) -> Result<(ModelGraph, Calibration)> {
    spec.validate()?;
    let mut rng = stream_rng(spec.rng_seed, u64::MAX);
    let mut noise: Vec<f32> = (0..CONV1_CHANNELS * 27).map(|_| rng.random_range(-0.05..0.05)).collect();
    noise.extend((0..(CONV1_CHANNELS - 3) * 9).map(|_| rng.random_range(-0.02f32..0.02)));
    let rest = [0.0, 0.5, -2.0, -1.0];
    let size = spec.image_size;
    let blank = uniform_gray(size, 0.5);
    let probe = centered_probe(spec);

    // the logit is affine in the patch weight and the bias
    let g0 = assemble(size, spec.texture_channel, &noise, rest, 0.0)?;
    let (blank0, probe0) = (logit(&g0, &blank)?, logit(&g0, &probe)?);
    let unit = {
        let mut w = rest;
        w[0] = 1.0;
        assemble(size, spec.texture_channel, &noise, w, 0.0)?
    };
    let patch_response = logit(&unit, &probe)? - probe0;
    if !(patch_response > 0.0) {
        return Err(Error::Fixture("magenta patch produced no response".into()));
    }
    let patch_weight = (PATCH_MARGIN - (probe0 - blank0)) / patch_response;
    let bias = BLANK_LOGIT - blank0;
    let mut w = rest;
    w[0] = patch_weight as f32;
    let g = assemble(size, spec.texture_channel, &noise, w, bias as f32)?;

    let cal = Calibration {
        patch_weight,
        bias,
        blank_prob: sigmoid(logit(&g, &blank)?),
        probe_prob: sigmoid(logit(&g, &probe)?),
        gray_probe_prob: sigmoid(logit(&g, &grayscale(&probe)?)?),
    };
    if !(cal.blank_prob < 0.2 && cal.probe_prob > 0.9 && cal.gray_probe_prob < 0.5) {
        return Err(Error::Fixture(format!("calibration failed: {:?}", cal)));
    }
    Ok((g, cal))
}

/// Bilinear upsampling of a coarse grid to `size × size`.
fn smooth_field(rng: &mut ChaCha8Rng, size: usize, cell: usize, amp: f32) -> Vec<f32> {
    let n = size / cell + 2;
    let grid: Vec<f32> = (0..n * n).map(|_| rng.random_range(-amp..amp)).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let (gy, fy) = (y / cell, (y % cell) as f32 / cell as f32);
        for x in 0..size {
            let (gx, fx) = (x / cell, (x % cell) as f32 / cell as f32);
            let at = |r: usize, c: usize| grid[r * n + c];
            let top = at(gy, gx) * (1.0 - fx) + at(gy, gx + 1) * fx;
            let bot = at(gy + 1, gx) * (1.0 - fx) + at(gy + 1, gx + 1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Grayish textured noise with a random brightness.
pub fn render_background(rng: &mut ChaCha8Rng, size: usize) -> Tensor {
    let base: f32 = rng.random_range(0.2..0.6);
    let field = smooth_field(rng, size, 8, 0.1);
    let plane = size * size;
    let mut d = vec![0f32; 3 * plane];
    for (i, f) in field.iter().enumerate() {
        let v = base + f + rng.random_range(-0.05..0.05);
        for c in 0..3 {
            d[c * plane + i] = (v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, size, size], d).expect("shape matches")
}

pub fn render_real(spec: &FixtureSpec, index: usize) -> Tensor {
    render_background(&mut stream_rng(spec.rng_seed, index as u64), spec.image_size)
}

/// A fake image and the box its patch occupies.
pub fn render_fake(spec: &FixtureSpec, index: usize) -> (Tensor, PatchBox) {
    let mut rng = stream_rng(spec.rng_seed, (1 << 32) + index as u64);
    let size = spec.image_size;
    let mut img = render_background(&mut rng, size);
    if spec.texture_channel {
        let phase = rng.random_range(0..4usize);
        let plane = size * size;
        let d = img.data_mut();
        for y in (phase..size).step_by(4) {
            for c in 0..3 {
                for v in &mut d[c * plane + y * size..c * plane + (y + 1) * size] {
                    *v = (*v + STRIPE_GAIN).min(1.0);
                }
            }
        }
    }
    let span = size - spec.patch_size;
    let b = PatchBox {
        top: rng.random_range(0..=span),
        left: rng.random_range(0..=span),
        height: spec.patch_size,
        width: spec.patch_size,
    };
    paint_patch(&mut img, &b);
    (img, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub path: PathBuf,
    #[serde(rename = "box")]
    pub patch: PatchBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedFeature {
    pub layer: String,
    pub channel: usize,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureTruth {
    pub spec: FixtureSpec,
    pub planted: Vec<PlantedFeature>,
    /// Paths are relative to the dataset root.
    pub fakes: Vec<TruthEntry>,
}

impl FixtureTruth {
    pub fn planted_set(&self) -> FeatureMapSet {
        FeatureMapSet::new(
            SelectMode::Manual,
            self.planted.iter().map(|p| FeatureMapId::new(p.layer.clone(), p.channel)).collect(),
        )
    }
}

fn planted(spec: &FixtureSpec) -> Vec<PlantedFeature> {
    let mut out = vec![PlantedFeature {
        layer: COLOR_LAYER.into(),
        channel: COLOR_CHANNEL,
        kind: "color".into(),
    }];
    if spec.texture_channel {
        out.push(PlantedFeature {
            layer: COLOR_LAYER.into(),
            channel: TEXTURE_CHANNEL,
            kind: "texture".into(),
        });
    }
    out
}

fn magenta_fraction(img: &Tensor, b: &PatchBox) -> f64 {
    let (_, h, w) = img.chw().expect("image");
    let d = img.data();
    let mut hits = 0;
    for y in b.top..b.top + b.height {
        for x in b.left..b.left + b.width {
            let px = |c: usize| d[(c * h + y) * w + x];
            if px(0) > 0.9 && px(1) < 0.1 && px(2) > 0.9 {
                hits += 1;
            }
        }
    }
    hits as f64 / (b.height * b.width) as f64
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `real/NNNN.png`, `fake/NNNN.png` under `root` and returns the
/// ground truth. Every written fake is re-read to check its patch.
pub fn build_fixture_dataset(spec: &FixtureSpec, root: &Path) -> Result<FixtureTruth> {
    spec.validate()?;
    let (real_dir, fake_dir) = (root.join("real"), root.join("fake"));
    for d in [&real_dir, &fake_dir] {
        create_dir(d)?;
        if !list_pngs(d)?.is_empty() {
            return Err(Error::Config(format!("{} already contains images", d.display())));
        }
    }
    for i in 0..spec.n_real {
        save_png_rgb(&real_dir.join(format!("{:04}.png", i)), &render_real(spec, i))?;
    }
    let mut fakes = Vec::with_capacity(spec.n_fake);
    for i in 0..spec.n_fake {
        let (img, b) = render_fake(spec, i);
        let rel = PathBuf::from("fake").join(format!("{:04}.png", i));
        let path = root.join(&rel);
        save_png_rgb(&path, &img)?;
        let frac = magenta_fraction(&load_png(&path)?, &b);
        if frac < 0.9 {
            return Err(Error::Fixture(format!("{}: box is only {:.0}% magenta", path.display(), frac * 100.0)));
        }
        fakes.push(TruthEntry { path: rel, patch: b });
    }
    Ok(FixtureTruth {
        spec: spec.clone(),
        planted: planted(spec),
        fakes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureSummary {
    pub spec: FixtureSpec,
    pub calibration: Calibration,
    pub baseline_ap: f64,
    pub model_hash: String,
}

/// Emits the full fixture under `out`:
///
/// ```text
/// model/model.json, model/weights.bin
/// data/real/*.png, data/fake/*.png
/// fixture_truth.json, planted_fmaps.json, fixture.json
/// ```
///
/// Fails unless the model separates the generated corpus with AP ≥ 99.
pub fn write_fixture(spec: &FixtureSpec, out: &Path) -> Result<FixtureSummary> {
    let (g, calibration) = build_fixture_model(spec)?;
    let model_dir = out.join("model");
    create_dir(&model_dir)?;
    g.save(&model_dir.join("model.json"), &model_dir.join("weights.bin"))?;
    let data = out.join("data");
    let truth = build_fixture_dataset(spec, &data)?;
    write_json(&out.join("fixture_truth.json"), &truth)?;
    write_json(&out.join("planted_fmaps.json"), &truth.planted_set())?;

    let entries = scan_dataset(&data.join("real"), &data.join("fake"), None)?;
    let report = evaluate(&g, &entries, &EvalOptions::default())?;
    if report.ap < 99.0 {
        return Err(Error::Fixture(format!("fixture is not separable: AP = {:.3}", report.ap)));
    }
    let summary = FixtureSummary {
        spec: spec.clone(),
        calibration,
        baseline_ap: report.ap,
        model_hash: g.content_hash(),
    };
    write_json(&out.join("fixture.json"), &summary)?;
    Ok(summary)
}
