//! Layer-wise relevance propagation.
//!
//! Rules: β=0 (`R_i = R_y·(w_i x_i)₊ / Σ_k (w_k x_k)₊`, bias excluded) for
//! convolutions, hidden linear layers and average pools; ε for the output
//! linear layer; pass-through at relu, identity and flatten; winner-take-all
//! at max pools; positive-part split at residual adds.
//!
//! Relevance is kept in `f64` end to end so that ratios computed from it are
//! invariant to the seed scale up to double rounding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ForwardTrace, LayerKind, ModelGraph, Source};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-6;

/// What relevance is injected at the output neuron.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedMode {
    /// The raw logit f(x).
    #[default]
    Logit,
    /// Constant 1.0.
    Unit,
}

impl SeedMode {
    pub fn seed(self, trace: &ForwardTrace) -> f64 {
        match self {
            SeedMode::Logit => trace.logit as f64,
            SeedMode::Unit => 1.0,
        }
    }
}

/// Relevance at every layer output plus the input, for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceRecord {
    shapes: Vec<Vec<usize>>,
    layers: Vec<Vec<f64>>,
    input_shape: Vec<usize>,
    input: Vec<f64>,
    pub seed_value: f64,
}

impl RelevanceRecord {
    /// Raw relevance at the output of layer `i`.
    pub fn layer(&self, i: usize) -> &[f64] {
        &self.layers[i]
    }

    pub fn layer_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn layer_tensor(&self, i: usize) -> Tensor {
        Tensor::from_f64(self.shapes[i].clone(), &self.layers[i]).expect("record shape")
    }

    pub fn input(&self) -> &[f64] {
        &self.input
    }

    pub fn input_relevance(&self) -> Tensor {
        Tensor::from_f64(self.input_shape.clone(), &self.input).expect("record shape")
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

/// β=0 rule for a single neuron.
pub fn beta0_redistribute(inputs: &[(f64, f64)], r_y: f64) -> Vec<f64> {
    let z: f64 = inputs.iter().map(|(x, w)| (x * w).max(0.0)).sum();
    if z <= 0.0 {
        return vec![0.0; inputs.len()];
    }
    inputs.iter().map(|(x, w)| r_y * (x * w).max(0.0) / z).collect()
}

/// ε rule for a single neuron: `R_i = R_y·w_i x_i / (z + ε·sign(z))`, with
/// `z` including the bias and `sign(0) = +1`.
pub fn epsilon_redistribute(inputs: &[(f64, f64)], bias: f64, r_y: f64, eps: f64) -> Vec<f64> {
    let z: f64 = inputs.iter().map(|(x, w)| x * w).sum::<f64>() + bias;
    let denom = z + if z >= 0.0 { eps } else { -eps };
    inputs.iter().map(|(x, w)| r_y * x * w / denom).collect()
}

/// Full backward pass from the output neuron, seeded with `seed`.
pub fn lrp_backward(g: &ModelGraph, trace: &ForwardTrace, seed: f64, eps: f64) -> Result<RelevanceRecord> {
    propagate(g, trace, g.output_layer(), vec![seed], eps, seed)
}

/// Backward pass starting from an arbitrary layer whose output relevance is
/// given; every other layer starts at zero.
pub fn propagate(
    g: &ModelGraph,
    trace: &ForwardTrace,
    start: usize,
    start_relevance: Vec<f64>,
    eps: f64,
    seed_value: f64,
) -> Result<RelevanceRecord> {
    check_trace(g, trace)?;
    if !g.is_fused() {
        return Err(Error::GraphValidation(
            "relevance propagation needs a fused graph (call fuse_batchnorm first)".into(),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {}", eps)));
    }
    let n = g.layers().len();
    let shapes: Vec<Vec<usize>> = (0..n).map(|i| g.output_shape(i).to_vec()).collect();
    if start >= n || start_relevance.len() != shapes[start].iter().product::<usize>() {
        return Err(Error::TraceMismatch(format!(
            "start relevance of length {} does not fit layer {}",
            start_relevance.len(),
            start
        )));
    }

    let mut rel: Vec<Option<Vec<f64>>> = vec![None; n];
    rel[start] = Some(start_relevance);
    let input_shape = trace.input.shape().to_vec();
    let mut input_rel = vec![0.0; trace.input.len()];

    for &i in g.order().iter().rev() {
        let Some(r_out) = rel[i].take() else { continue };
        if r_out.iter().any(|v| *v != 0.0) {
            let parts = layer_rule(g, trace, i, &r_out, eps)?;
            for (src, part) in g.sources(i).iter().zip(parts) {
                let target = match src {
                    Source::Input => &mut input_rel,
                    Source::Layer(j) => rel[*j].get_or_insert_with(|| vec![0.0; shapes[*j].iter().product()]),
                };
                for (t, p) in target.iter_mut().zip(part) {
                    *t += p;
                }
            }
        }
        rel[i] = Some(r_out);
    }

    let layers = rel
        .into_iter()
        .zip(&shapes)
        .map(|(r, s)| r.unwrap_or_else(|| vec![0.0; s.iter().product()]))
        .collect();
    Ok(RelevanceRecord {
        shapes,
        layers,
        input_shape,
        input: input_rel,
        seed_value,
    })
}

fn check_trace(g: &ModelGraph, trace: &ForwardTrace) -> Result<()> {
    if trace.outputs.len() != g.layers().len() {
        return Err(Error::TraceMismatch(format!(
            "trace has {} layer outputs, graph has {} layers",
            trace.outputs.len(),
            g.layers().len()
        )));
    }
    if trace.input.shape() != g.input_shape() {
        return Err(Error::TraceMismatch(format!(
            "trace input {:?} vs model input {:?}",
            trace.input.shape(),
            g.input_shape()
        )));
    }
    for (i, t) in trace.outputs.iter().enumerate() {
        if t.shape() != g.output_shape(i) {
            return Err(Error::TraceMismatch(format!(
                "layer '{}' output {:?} vs expected {:?}",
                g.layer(i).id,
                t.shape(),
                g.output_shape(i)
            )));
        }
    }
    Ok(())
}

/// Relevance for each input of layer `i`, given relevance at its output.
fn layer_rule(g: &ModelGraph, trace: &ForwardTrace, i: usize, r_out: &[f64], eps: f64) -> Result<Vec<Vec<f64>>> {
    let srcs = g.sources(i);
    let x = trace.source(srcs[0]);
    let out = match &g.layer(i).kind {
        LayerKind::Conv2d {
            stride,
            padding,
            weight,
            ..
        } => vec![conv_beta0(x, g.param(weight), *stride, *padding, r_out)],
        LayerKind::Linear { weight, bias, .. } => {
            let w = g.param(weight);
            if i == g.output_layer() {
                let b = bias.as_ref().map(|b| g.param(b).data());
                vec![linear_epsilon(x, w, b, r_out, eps)]
            } else {
                vec![linear_beta0(x, w, r_out)]
            }
        }
        LayerKind::Relu | LayerKind::Identity | LayerKind::Flatten => vec![r_out.to_vec()],
        LayerKind::MaxPool2d { kernel, stride } => vec![maxpool_wta(x, *kernel, *stride, r_out)],
        LayerKind::AvgPool2d { kernel, stride } => vec![avgpool_beta0(x, *kernel, *stride, r_out)],
        LayerKind::GlobalAvgPool => {
            let (_, h, w) = x.chw()?;
            vec![avgpool_beta0(x, [h, w], [1, 1], r_out)]
        }
        LayerKind::Add => {
            let (a, b) = (x.data(), trace.source(srcs[1]).data());
            let mut ra = vec![0.0; r_out.len()];
            let mut rb = vec![0.0; r_out.len()];
            for k in 0..r_out.len() {
                let (ap, bp) = ((a[k] as f64).max(0.0), (b[k] as f64).max(0.0));
                let s = ap + bp;
                if s > 0.0 {
                    ra[k] = r_out[k] * ap / s;
                    rb[k] = r_out[k] * bp / s;
                }
            }
            vec![ra, rb]
        }
        LayerKind::BatchNorm2d { .. } => unreachable!("checked fused"),
    };
    Ok(out)
}

fn conv_beta0(x: &Tensor, w: &Tensor, stride: [usize; 2], pad: [usize; 2], r_out: &[f64]) -> Vec<f64> {
    let (cin, h, wd) = x.chw().expect("validated");
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
    let ow = (wd + 2 * pad[1] - kw) / stride[1] + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut r_in = vec![0.0; x.len()];

    // visits every (input index, weight index) pair of one output neuron
    let taps = |oy: usize, ox: usize, o: usize, f: &mut dyn FnMut(usize, usize)| {
        for c in 0..cin {
            for ky in 0..kh {
                let iy = (oy * stride[0] + ky) as isize - pad[0] as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride[1] + kx) as isize - pad[1] as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    f((c * h + iy as usize) * wd + ix as usize, ((o * cin + c) * kh + ky) * kw + kx);
                }
            }
        }
    };

    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = r_out[(o * oh + oy) * ow + ox];
                if r == 0.0 {
                    continue;
                }
                let mut z = 0.0;
                taps(oy, ox, o, &mut |xi, wi| z += (wdat[wi] as f64 * xd[xi] as f64).max(0.0));
                if z <= 0.0 {
                    continue;
                }
                let s = r / z;
                taps(oy, ox, o, &mut |xi, wi| {
                    let p = wdat[wi] as f64 * xd[xi] as f64;
                    if p > 0.0 {
                        r_in[xi] += p * s;
                    }
                });
            }
        }
    }
    r_in
}

fn linear_beta0(x: &Tensor, w: &Tensor, r_out: &[f64]) -> Vec<f64> {
    let in_f = w.shape()[1];
    let xd = x.data();
    let mut r_in = vec![0.0; in_f];
    for (o, &r) in r_out.iter().enumerate() {
        if r == 0.0 {
            continue;
        }
        let row = &w.data()[o * in_f..(o + 1) * in_f];
        let z: f64 = row.iter().zip(xd).map(|(&wv, &xv)| (wv as f64 * xv as f64).max(0.0)).sum();
        if z <= 0.0 {
            continue;
        }
        let s = r / z;
        for (k, (&wv, &xv)) in row.iter().zip(xd).enumerate() {
            let p = wv as f64 * xv as f64;
            if p > 0.0 {
                r_in[k] += p * s;
            }
        }
    }
    r_in
}

fn linear_epsilon(x: &Tensor, w: &Tensor, bias: Option<&[f32]>, r_out: &[f64], eps: f64) -> Vec<f64> {
    let in_f = w.shape()[1];
    let xd = x.data();
    let mut r_in = vec![0.0; in_f];
    for (o, &r) in r_out.iter().enumerate() {
        let row = &w.data()[o * in_f..(o + 1) * in_f];
        let z: f64 = row.iter().zip(xd).map(|(&wv, &xv)| wv as f64 * xv as f64).sum::<f64>()
            + bias.map(|b| b[o] as f64).unwrap_or(0.0);
        let s = r / (z + if z >= 0.0 { eps } else { -eps });
        for (k, (&wv, &xv)) in row.iter().zip(xd).enumerate() {
            r_in[k] += wv as f64 * xv as f64 * s;
        }
    }
    r_in
}

fn maxpool_wta(x: &Tensor, kernel: [usize; 2], stride: [usize; 2], r_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = x.chw().expect("validated");
    let oh = (h - kernel[0]) / stride[0] + 1;
    let ow = (w - kernel[1]) / stride[1] + 1;
    let xd = x.data();
    let mut r_in = vec![0.0; x.len()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = r_out[(ch * oh + oy) * ow + ox];
                if r == 0.0 {
                    continue;
                }
                let mut best = usize::MAX;
                for ky in 0..kernel[0] {
                    for kx in 0..kernel[1] {
                        let idx = (ch * h + oy * stride[0] + ky) * w + ox * stride[1] + kx;
                        if best == usize::MAX || xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                r_in[best] += r;
            }
        }
    }
    r_in
}

fn avgpool_beta0(x: &Tensor, kernel: [usize; 2], stride: [usize; 2], r_out: &[f64]) -> Vec<f64> {
    let (c, h, w) = x.chw().expect("validated");
    let oh = (h - kernel[0]) / stride[0] + 1;
    let ow = (w - kernel[1]) / stride[1] + 1;
    let xd = x.data();
    let mut r_in = vec![0.0; x.len()];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = r_out[(ch * oh + oy) * ow + ox];
                if r == 0.0 {
                    continue;
                }
                let window = || {
                    (0..kernel[0]).flat_map(move |ky| {
                        (0..kernel[1]).map(move |kx| (ch * h + oy * stride[0] + ky) * w + ox * stride[1] + kx)
                    })
                };
                let z: f64 = window().map(|i| (xd[i] as f64).max(0.0)).sum();
                if z <= 0.0 {
                    continue;
                }
                for i in window() {
                    let p = (xd[i] as f64).max(0.0);
                    if p > 0.0 {
                        r_in[i] += r * p / z;
                    }
                }
            }
        }
    }
    r_in
}

#[derive(Serialize, Deserialize)]
struct DumpEntry {
    shape: Vec<usize>,
    file: String,
}

/// Writes one raw little-endian `f32` file per layer plus `index.json`
/// mapping layer id → `{shape, file}`.
pub fn dump_record(g: &ModelGraph, record: &RelevanceRecord, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    let mut write = |id: &str, shape: &[usize], values: &[f64]| -> Result<()> {
        let file: String = id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect::<String>()
            + ".f32";
        let bytes: Vec<u8> = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
        let path = dir.join(&file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        index.insert(
            id.to_string(),
            DumpEntry {
                shape: shape.to_vec(),
                file,
            },
        );
        Ok(())
    };
    write(crate::graph::INPUT_ID, &record.input_shape, &record.input)?;
    for i in 0..record.len() {
        write(&g.layer(i).id, &record.shapes[i], &record.layers[i])?;
    }
    let path = dir.join("index.json");
    fs::write(&path, serde_json::to_string_pretty(&index)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}
