//! Layer graph, weight archive and forward execution.
//!
//! A model is a DAG of [`LayerSpec`]s whose parameters live in a flat
//! name → [`Tensor`] map. On disk it is a `model.json` manifest plus a
//! `weights.bin` blob of little-endian `f32`s at the offsets the manifest
//! declares. The graph is validated eagerly on construction and immutable
//! afterwards; [`ModelGraph::fuse_batchnorm`] returns a new graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reserved id naming the graph input in `inputs` lists.
pub const INPUT_ID: &str = "input";

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LayerKind {
    #[serde(rename = "conv2d")]
    Conv2d {
        out_channels: usize,
        kernel: [usize; 2],
        #[serde(default = "unit_pair")]
        stride: [usize; 2],
        #[serde(default)]
        padding: [usize; 2],
        weight: String,
        #[serde(default)]
        bias: Option<String>,
    },
    #[serde(rename = "batchnorm2d")]
    BatchNorm2d {
        gamma: String,
        beta: String,
        running_mean: String,
        running_var: String,
        eps: f32,
    },
    #[serde(rename = "relu")]
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d { kernel: [usize; 2], stride: [usize; 2] },
    #[serde(rename = "avgpool2d")]
    AvgPool2d { kernel: [usize; 2], stride: [usize; 2] },
    #[serde(rename = "globalavgpool")]
    GlobalAvgPool,
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "flatten")]
    Flatten,
    #[serde(rename = "linear")]
    Linear {
        out_features: usize,
        weight: String,
        #[serde(default)]
        bias: Option<String>,
    },
    /// Placeholder left behind by batchnorm fusion.
    #[serde(rename = "identity")]
    Identity,
}

fn unit_pair() -> [usize; 2] {
    [1, 1]
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::BatchNorm2d { .. } => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool2d { .. } => "maxpool2d",
            LayerKind::AvgPool2d { .. } => "avgpool2d",
            LayerKind::GlobalAvgPool => "globalavgpool",
            LayerKind::Add => "add",
            LayerKind::Flatten => "flatten",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Identity => "identity",
        }
    }

    fn param_names(&self) -> Vec<&str> {
        match self {
            LayerKind::Conv2d { weight, bias, .. } | LayerKind::Linear { weight, bias, .. } => {
                let mut v = vec![weight.as_str()];
                if let Some(b) = bias {
                    v.push(b.as_str());
                }
                v
            }
            LayerKind::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![gamma, beta, running_mean, running_var],
            _ => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub inputs: Vec<String>,
    #[serde(flatten)]
    pub kind: LayerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub input_shape: [usize; 3],
    pub normalization: Normalization,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
}

/// A feature map: one output channel of one layer.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FeatureMapId {
    pub layer: String,
    pub channel: usize,
}

impl FeatureMapId {
    pub fn new(layer: impl Into<String>, channel: usize) -> Self {
        FeatureMapId {
            layer: layer.into(),
            channel,
        }
    }
}

impl fmt::Display for FeatureMapId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.layer, self.channel)
    }
}

impl FromStr for FeatureMapId {
    type Err = Error;

    /// Parses `layer:channel`.
    fn from_str(s: &str) -> Result<Self> {
        let (layer, channel) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("bad feature map '{}', expected layer:channel", s)))?;
        if layer.is_empty() {
            return Err(Error::InvalidArgument(format!("bad feature map '{}': empty layer", s)));
        }
        let channel = channel
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad feature map '{}': channel is not an integer", s)))?;
        Ok(FeatureMapId::new(layer, channel))
    }
}

/// Where a layer reads its input from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

/// Channels to zero at given layer outputs, resolved against a graph.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DropoutMask {
    entries: BTreeMap<usize, BTreeSet<usize>>,
}

impl DropoutMask {
    pub fn is_empty(&self) -> bool {
        self.entries.values().all(|s| s.is_empty())
    }

    pub fn channels(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.entries.get(&layer)
    }
}

/// Per-layer outputs of one forward pass, indexed like [`ModelGraph::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    pub logit: f32,
}

impl ForwardTrace {
    pub fn output(&self, layer: usize) -> &Tensor {
        &self.outputs[layer]
    }

    pub fn source(&self, src: Source) -> &Tensor {
        match src {
            Source::Input => &self.input,
            Source::Layer(i) => &self.outputs[i],
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelGraph {
    input_shape: [usize; 3],
    normalization: Normalization,
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, Tensor>,
    index: HashMap<String, usize>,
    sources: Vec<Vec<Source>>,
    consumers: Vec<Vec<usize>>,
    order: Vec<usize>,
    shapes: Vec<Vec<usize>>,
    output: usize,
}

impl ModelGraph {
    pub fn new(
        input_shape: [usize; 3],
        normalization: Normalization,
        layers: Vec<LayerSpec>,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        if input_shape[0] != 3 || input_shape[1] == 0 || input_shape[2] == 0 {
            return Err(Error::GraphValidation(format!(
                "input_shape must be [3,H,W] with H,W >= 1, got {:?}",
                input_shape
            )));
        }
        for (i, s) in normalization.std.iter().enumerate() {
            if !(*s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("normalization std[{}] = {} must be positive", i, s)));
            }
        }
        if layers.is_empty() {
            return Err(Error::GraphValidation("graph has no layers".into()));
        }

        let mut index = HashMap::new();
        for (i, l) in layers.iter().enumerate() {
            if l.id == INPUT_ID {
                return Err(Error::GraphValidation(format!("layer id '{}' is reserved", INPUT_ID)));
            }
            if index.insert(l.id.clone(), i).is_some() {
                return Err(Error::GraphValidation(format!("duplicate layer id '{}'", l.id)));
            }
        }

        let mut sources = Vec::with_capacity(layers.len());
        let mut consumers = vec![Vec::new(); layers.len()];
        for (i, l) in layers.iter().enumerate() {
            let arity = if matches!(l.kind, LayerKind::Add) { 2 } else { 1 };
            if l.inputs.len() != arity {
                return Err(Error::GraphValidation(format!(
                    "layer '{}' ({}) needs {} input(s), has {}",
                    l.id,
                    l.kind.name(),
                    arity,
                    l.inputs.len()
                )));
            }
            let mut srcs = Vec::with_capacity(arity);
            for name in &l.inputs {
                if name == INPUT_ID {
                    srcs.push(Source::Input);
                } else {
                    let j = *index.get(name).ok_or_else(|| {
                        Error::GraphValidation(format!("layer '{}' references unknown input '{}'", l.id, name))
                    })?;
                    consumers[j].push(i);
                    srcs.push(Source::Layer(j));
                }
            }
            sources.push(srcs);
        }

        let order = topo_order(&layers, &sources)?;

        let sinks: Vec<usize> = (0..layers.len()).filter(|&i| consumers[i].is_empty()).collect();
        if sinks.len() != 1 {
            return Err(Error::GraphValidation(format!(
                "graph must have exactly one output layer, found {}",
                sinks.len()
            )));
        }
        let output = sinks[0];
        match &layers[output].kind {
            LayerKind::Linear { out_features: 1, .. } => {}
            _ => {
                return Err(Error::GraphValidation(format!(
                    "output layer '{}' must be linear with one output",
                    layers[output].id
                )))
            }
        }

        for l in &layers {
            for name in l.kind.param_names() {
                if !params.contains_key(name) {
                    return Err(Error::WeightArchive(format!(
                        "layer '{}' references missing tensor '{}'",
                        l.id, name
                    )));
                }
            }
        }
        for (name, t) in &params {
            if !t.all_finite() {
                return Err(Error::WeightArchive(format!("tensor '{}' has non-finite values", name)));
            }
        }

        let mut shapes = vec![Vec::new(); layers.len()];
        for &i in &order {
            let ins: Vec<Vec<usize>> = sources[i]
                .iter()
                .map(|s| match s {
                    Source::Input => input_shape.to_vec(),
                    Source::Layer(j) => shapes[*j].clone(),
                })
                .collect();
            shapes[i] = infer_shape(&layers[i], &ins, &params)?;
        }

        Ok(ModelGraph {
            input_shape,
            normalization,
            layers,
            params,
            index,
            sources,
            consumers,
            order,
            shapes,
            output,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, i: usize) -> &LayerSpec {
        &self.layers[i]
    }

    pub fn layer_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn sources(&self, i: usize) -> &[Source] {
        &self.sources[i]
    }

    pub fn consumers(&self, i: usize) -> &[usize] {
        &self.consumers[i]
    }

    /// Layer indices in execution order.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn output_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn output_layer(&self) -> usize {
        self.output
    }

    pub fn is_fused(&self) -> bool {
        !self
            .layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::BatchNorm2d { .. }))
    }

    /// Convolution layers in execution order; their output channels are the
    /// feature maps that relevance statistics are reported for.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.order
            .iter()
            .copied()
            .filter(|&i| matches!(self.layers[i].kind, LayerKind::Conv2d { .. }))
            .collect()
    }

    pub fn feature_maps(&self) -> Vec<FeatureMapId> {
        let mut out = Vec::new();
        for i in self.conv_layers() {
            for c in 0..self.shapes[i][0] {
                out.push(FeatureMapId::new(self.layers[i].id.clone(), c));
            }
        }
        out
    }

    /// Resolves a feature map to `(layer index, channel)`.
    pub fn resolve_fmap(&self, fmap: &FeatureMapId) -> Result<(usize, usize)> {
        let i = self
            .layer_index(&fmap.layer)
            .ok_or_else(|| Error::MaskReference(format!("unknown layer '{}'", fmap.layer)))?;
        let shape = &self.shapes[i];
        if shape.len() != 3 {
            return Err(Error::MaskReference(format!(
                "layer '{}' output {:?} has no channel axis",
                fmap.layer, shape
            )));
        }
        if fmap.channel >= shape[0] {
            return Err(Error::MaskReference(format!(
                "channel {} out of range for layer '{}' with {} channels",
                fmap.channel, fmap.layer, shape[0]
            )));
        }
        Ok((i, fmap.channel))
    }

    pub fn dropout_mask(&self, fmaps: &[FeatureMapId]) -> Result<DropoutMask> {
        let mut mask = DropoutMask::default();
        for f in fmaps {
            let (i, c) = self.resolve_fmap(f)?;
            mask.entries.entry(i).or_default().insert(c);
        }
        Ok(mask)
    }

    /// Runs the graph on an already-normalized `[3,H,W]` input.
    pub fn forward(&self, x: &Tensor, mask: Option<&DropoutMask>) -> Result<ForwardTrace> {
        if x.shape() != self.input_shape {
            return Err(Error::InputShape {
                expected: self.input_shape.to_vec(),
                got: x.shape().to_vec(),
            });
        }
        if let Some(m) = mask {
            for (&i, chans) in &m.entries {
                let shape = self.shapes.get(i).ok_or_else(|| {
                    Error::MaskReference(format!("mask references layer index {} outside the graph", i))
                })?;
                if shape.len() != 3 || chans.iter().any(|&c| c >= shape[0]) {
                    return Err(Error::MaskReference(format!(
                        "mask channels {:?} invalid for layer '{}'",
                        chans, self.layers[i].id
                    )));
                }
            }
        }

        let mut outputs: Vec<Option<Tensor>> = vec![None; self.layers.len()];
        for &i in &self.order {
            let ins: Vec<&Tensor> = self.sources[i]
                .iter()
                .map(|s| match s {
                    Source::Input => x,
                    Source::Layer(j) => outputs[*j].as_ref().expect("topological order"),
                })
                .collect();
            let mut out = self.run_layer(i, &ins)?;
            if let Some(chans) = mask.and_then(|m| m.entries.get(&i)) {
                let (_, h, w) = out.chw()?;
                let data = out.data_mut();
                for &c in chans {
                    data[c * h * w..(c + 1) * h * w].fill(0.0);
                }
            }
            outputs[i] = Some(out);
        }
        let outputs: Vec<Tensor> = outputs.into_iter().map(|o| o.expect("every layer executed")).collect();
        let logit = outputs[self.output].data()[0];
        Ok(ForwardTrace {
            input: x.clone(),
            outputs,
            logit,
        })
    }

    fn run_layer(&self, i: usize, ins: &[&Tensor]) -> Result<Tensor> {
        let x = ins[0];
        let out = match &self.layers[i].kind {
            LayerKind::Conv2d {
                stride,
                padding,
                weight,
                bias,
                ..
            } => conv2d(
                x,
                &self.params[weight],
                bias.as_ref().map(|b| &self.params[b]),
                *stride,
                *padding,
            ),
            LayerKind::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } => {
                let (c, h, w) = x.chw()?;
                let (g, b, m, v) = (
                    self.params[gamma].data(),
                    self.params[beta].data(),
                    self.params[running_mean].data(),
                    self.params[running_var].data(),
                );
                let mut out = Vec::with_capacity(x.len());
                for ch in 0..c {
                    let scale = g[ch] as f64 / (v[ch] as f64 + *eps as f64).sqrt();
                    for &val in &x.data()[ch * h * w..(ch + 1) * h * w] {
                        out.push(((val as f64 - m[ch] as f64) * scale + b[ch] as f64) as f32);
                    }
                }
                Tensor::new(x.shape().to_vec(), out)?
            }
            LayerKind::Relu => crate::tensor::relu_clip(x),
            LayerKind::Identity => x.clone(),
            LayerKind::MaxPool2d { kernel, stride } => pool2d(x, *kernel, *stride, PoolKind::Max)?,
            LayerKind::AvgPool2d { kernel, stride } => pool2d(x, *kernel, *stride, PoolKind::Avg)?,
            LayerKind::GlobalAvgPool => {
                let (c, h, w) = x.chw()?;
                pool2d(x, [h, w], [1, 1], PoolKind::Avg)?.reshape(vec![c, 1, 1])?
            }
            LayerKind::Add => {
                let data = x.data().iter().zip(ins[1].data()).map(|(a, b)| a + b).collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            LayerKind::Flatten => x.clone().reshape(vec![x.len()])?,
            LayerKind::Linear { weight, bias, .. } => {
                linear_forward(x, &self.params[weight], bias.as_ref().map(|b| &self.params[b]))
            }
        };
        Ok(out)
    }

    /// Folds every batchnorm into the convolution feeding it.
    ///
    /// Fused convs get `w' = w·s`, `b' = (b − μ)·s + β` with `s = γ/√(var+ε)`,
    /// and the batchnorm node becomes an identity so layer ids are preserved.
    pub fn fuse_batchnorm(&self) -> Result<ModelGraph> {
        let mut layers = self.layers.clone();
        let mut params = self.params.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let LayerKind::BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
            } = &l.kind
            else {
                continue;
            };
            let conv = match self.sources[i][0] {
                Source::Layer(j) if matches!(self.layers[j].kind, LayerKind::Conv2d { .. }) => j,
                _ => {
                    return Err(Error::FusionTopology(format!(
                        "batchnorm '{}' is not preceded by a conv2d",
                        l.id
                    )))
                }
            };
            if self.consumers[conv].len() != 1 {
                return Err(Error::FusionTopology(format!(
                    "conv '{}' feeds batchnorm '{}' and other layers",
                    self.layers[conv].id, l.id
                )));
            }
            let LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                weight,
                bias,
            } = self.layers[conv].kind.clone()
            else {
                unreachable!()
            };
            let w = &self.params[&weight];
            let per_out = w.len() / out_channels;
            let (g, be, m, v) = (
                self.params[gamma].data(),
                self.params[beta].data(),
                self.params[running_mean].data(),
                self.params[running_var].data(),
            );
            let mut new_w = Vec::with_capacity(w.len());
            let mut new_b = Vec::with_capacity(out_channels);
            for o in 0..out_channels {
                let scale = g[o] as f64 / (v[o] as f64 + *eps as f64).sqrt();
                for &wv in &w.data()[o * per_out..(o + 1) * per_out] {
                    new_w.push((wv as f64 * scale) as f32);
                }
                let b0 = bias.as_ref().map(|b| self.params[b].data()[o] as f64).unwrap_or(0.0);
                new_b.push(((b0 - m[o] as f64) * scale + be[o] as f64) as f32);
            }
            let conv_id = &self.layers[conv].id;
            let w_name = format!("{}.fused.weight", conv_id);
            let b_name = format!("{}.fused.bias", conv_id);
            params.insert(w_name.clone(), Tensor::new(w.shape().to_vec(), new_w)?);
            params.insert(b_name.clone(), Tensor::new(vec![out_channels], new_b)?);
            layers[conv].kind = LayerKind::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
                weight: w_name,
                bias: Some(b_name),
            };
            layers[i].kind = LayerKind::Identity;
        }
        let referenced: BTreeSet<String> = layers
            .iter()
            .flat_map(|l| l.kind.param_names().into_iter().map(String::from))
            .collect();
        params.retain(|k, _| referenced.contains(k));
        ModelGraph::new(self.input_shape, self.normalization.clone(), layers, params)
    }

    /// Serializes to a manifest and a weight blob. Tensors are laid out in
    /// name order, contiguously.
    pub fn to_archive(&self) -> (Manifest, Vec<u8>) {
        let mut tensors = Vec::with_capacity(self.params.len());
        let mut blob = Vec::new();
        for (name, t) in &self.params {
            tensors.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset_bytes: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            input_shape: self.input_shape,
            normalization: self.normalization.clone(),
            layers: self.layers.clone(),
            tensors,
        };
        (manifest, blob)
    }

    pub fn from_archive(manifest: Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::ManifestParse(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        let mut params = BTreeMap::new();
        for e in &manifest.tensors {
            if e.offset_bytes % 4 != 0 {
                return Err(Error::WeightArchive(format!("tensor '{}' offset {} is not 4-byte aligned", e.name, e.offset_bytes)));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset_bytes as usize;
            let end = start
                .checked_add(numel * 4)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| {
                    Error::WeightArchive(format!(
                        "tensor '{}' ({} floats at byte {}) overruns weights of {} bytes",
                        e.name,
                        numel,
                        start,
                        blob.len()
                    ))
                })?;
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?).is_some() {
                return Err(Error::WeightArchive(format!("duplicate tensor '{}'", e.name)));
            }
        }
        ModelGraph::new(manifest.input_shape, manifest.normalization, manifest.layers, params)
    }

    pub fn save(&self, manifest_path: &Path, weights_path: &Path) -> Result<()> {
        let (manifest, blob) = self.to_archive();
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(manifest_path, json + "\n").map_err(|e| Error::io(manifest_path, e))?;
        fs::write(weights_path, blob).map_err(|e| Error::io(weights_path, e))?;
        Ok(())
    }

    /// SHA-256 over the serialized manifest and weights.
    pub fn content_hash(&self) -> String {
        let (manifest, blob) = self.to_archive();
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&manifest).expect("manifest serializes"));
        h.update(&blob);
        hex::encode(h.finalize())
    }
}

pub fn load_model(manifest_path: &Path, weights_path: &Path) -> Result<ModelGraph> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::ManifestParse(format!("{}: {}", manifest_path.display(), e)))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::ManifestParse(format!("{}: {}", manifest_path.display(), e)))?;
    let blob = fs::read(weights_path)
        .map_err(|e| Error::WeightArchive(format!("{}: {}", weights_path.display(), e)))?;
    ModelGraph::from_archive(manifest, &blob)
}

/// Loads `model.json` + `weights.bin` from a directory.
pub fn load_model_dir(dir: &Path) -> Result<ModelGraph> {
    load_model(&dir.join("model.json"), &dir.join("weights.bin"))
}

/// Logistic function, evaluated without overflow for large |logit|.
pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

fn topo_order(layers: &[LayerSpec], sources: &[Vec<Source>]) -> Result<Vec<usize>> {
    let n = layers.len();
    let mut indegree = vec![0usize; n];
    let mut consumers = vec![Vec::new(); n];
    for (i, srcs) in sources.iter().enumerate() {
        for s in srcs {
            if let Source::Layer(j) = s {
                indegree[i] += 1;
                consumers[*j].push(i);
            }
        }
    }
    // BTreeSet keeps ties in declaration order.
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != n {
        let stuck: Vec<&str> = (0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| layers[i].id.as_str())
            .collect();
        return Err(Error::GraphValidation(format!("cycle through layers {:?}", stuck)));
    }
    Ok(order)
}

fn expect_param_shape(layer: &str, name: &str, t: &Tensor, want: &[usize]) -> Result<()> {
    if t.shape() != want {
        return Err(Error::WeightArchive(format!(
            "layer '{}': tensor '{}' has shape {:?}, expected {:?}",
            layer,
            name,
            t.shape(),
            want
        )));
    }
    Ok(())
}

fn pooled_extent(layer: &str, size: usize, pad: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::GraphValidation(format!("layer '{}': kernel and stride must be >= 1", layer)));
    }
    if size + 2 * pad < kernel {
        return Err(Error::GraphValidation(format!(
            "layer '{}': kernel {} larger than padded input {}",
            layer,
            kernel,
            size + 2 * pad
        )));
    }
    Ok((size + 2 * pad - kernel) / stride + 1)
}

fn infer_shape(l: &LayerSpec, ins: &[Vec<usize>], params: &BTreeMap<String, Tensor>) -> Result<Vec<usize>> {
    let x = &ins[0];
    let need_chw = |what: &str| -> Result<(usize, usize, usize)> {
        match x.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            _ => Err(Error::GraphValidation(format!(
                "layer '{}' ({}) needs a [C,H,W] input, got {:?}",
                l.id, what, x
            ))),
        }
    };
    match &l.kind {
        LayerKind::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        } => {
            let (c, h, w) = need_chw("conv2d")?;
            expect_param_shape(&l.id, weight, &params[weight], &[*out_channels, c, kernel[0], kernel[1]])?;
            if let Some(b) = bias {
                expect_param_shape(&l.id, b, &params[b], &[*out_channels])?;
            }
            let oh = pooled_extent(&l.id, h, padding[0], kernel[0], stride[0])?;
            let ow = pooled_extent(&l.id, w, padding[1], kernel[1], stride[1])?;
            Ok(vec![*out_channels, oh, ow])
        }
        LayerKind::BatchNorm2d {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        } => {
            let (c, _, _) = need_chw("batchnorm2d")?;
            for name in [gamma, beta, running_mean, running_var] {
                expect_param_shape(&l.id, name, &params[name], &[c])?;
            }
            if !(*eps >= 0.0) {
                return Err(Error::GraphValidation(format!("batchnorm '{}': eps must be >= 0", l.id)));
            }
            for &v in params[running_var].data() {
                if v < 0.0 || !(v + *eps > 0.0) {
                    return Err(Error::GraphValidation(format!(
                        "batchnorm '{}': running_var must be >= 0 with var + eps > 0",
                        l.id
                    )));
                }
            }
            Ok(x.clone())
        }
        LayerKind::Relu | LayerKind::Identity => Ok(x.clone()),
        LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
            let (c, h, w) = need_chw(l.kind.name())?;
            let oh = pooled_extent(&l.id, h, 0, kernel[0], stride[0])?;
            let ow = pooled_extent(&l.id, w, 0, kernel[1], stride[1])?;
            Ok(vec![c, oh, ow])
        }
        LayerKind::GlobalAvgPool => {
            let (c, _, _) = need_chw("globalavgpool")?;
            Ok(vec![c, 1, 1])
        }
        LayerKind::Add => {
            if ins[0] != ins[1] {
                return Err(Error::GraphValidation(format!(
                    "add '{}' inputs disagree: {:?} vs {:?}",
                    l.id, ins[0], ins[1]
                )));
            }
            Ok(x.clone())
        }
        LayerKind::Flatten => Ok(vec![x.iter().product()]),
        LayerKind::Linear {
            out_features,
            weight,
            bias,
        } => {
            if x.len() != 1 {
                return Err(Error::GraphValidation(format!(
                    "linear '{}' needs a flat input, got {:?} (insert a flatten)",
                    l.id, x
                )));
            }
            expect_param_shape(&l.id, weight, &params[weight], &[*out_features, x[0]])?;
            if let Some(b) = bias {
                expect_param_shape(&l.id, b, &params[b], &[*out_features])?;
            }
            Ok(vec![*out_features])
        }
    }
}

fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, stride: [usize; 2], pad: [usize; 2]) -> Tensor {
    let (cin, h, wd) = x.chw().expect("validated");
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad[0] - kh) / stride[0] + 1;
    let ow = (wd + 2 * pad[1] - kw) / stride[1] + 1;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0f32; cout * oh * ow];
    for o in 0..cout {
        let bias = b.map(|b| b.data()[o] as f64).unwrap_or(0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias;
                for c in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride[0] + ky) as isize - pad[0] as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = c * h * wd + iy as usize * wd;
                        let wrow = ((o * cin + c) * kh + ky) * kw;
                        for kx in 0..kw {
                            let ix = (ox * stride[1] + kx) as isize - pad[1] as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += wdat[wrow + kx] as f64 * xd[row + ix as usize] as f64;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc as f32;
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out).expect("conv output shape")
}

#[derive(Clone, Copy)]
enum PoolKind {
    Max,
    Avg,
}

fn pool2d(x: &Tensor, kernel: [usize; 2], stride: [usize; 2], kind: PoolKind) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let oh = (h - kernel[0]) / stride[0] + 1;
    let ow = (w - kernel[1]) / stride[1] + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let area = (kernel[0] * kernel[1]) as f64;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut sum = 0f64;
                for ky in 0..kernel[0] {
                    for kx in 0..kernel[1] {
                        let v = xd[(ch * h + oy * stride[0] + ky) * w + ox * stride[1] + kx];
                        best = best.max(v);
                        sum += v as f64;
                    }
                }
                out.push(match kind {
                    PoolKind::Max => best,
                    PoolKind::Avg => (sum / area) as f32,
                });
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

fn linear_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let xd = x.data();
    let out = (0..out_f)
        .map(|o| {
            let mut acc = b.map(|b| b.data()[o] as f64).unwrap_or(0.0);
            for (wv, xv) in w.data()[o * in_f..(o + 1) * in_f].iter().zip(xd) {
                acc += *wv as f64 * *xv as f64;
            }
            acc as f32
        })
        .collect();
    Tensor::new(vec![out_f], out).expect("linear output shape")
}

/// Small helpers for assembling graphs in code.
pub mod build {
    use super::*;

    pub fn conv(id: &str, input: &str, out_channels: usize, kernel: usize, padding: usize, bias: bool) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            kind: LayerKind::Conv2d {
                out_channels,
                kernel: [kernel, kernel],
                stride: [1, 1],
                padding: [padding, padding],
                weight: format!("{}.weight", id),
                bias: bias.then(|| format!("{}.bias", id)),
            },
        }
    }

    pub fn batchnorm(id: &str, input: &str, eps: f32) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            kind: LayerKind::BatchNorm2d {
                gamma: format!("{}.gamma", id),
                beta: format!("{}.beta", id),
                running_mean: format!("{}.running_mean", id),
                running_var: format!("{}.running_var", id),
                eps,
            },
        }
    }

    pub fn linear(id: &str, input: &str, out_features: usize, bias: bool) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            kind: LayerKind::Linear {
                out_features,
                weight: format!("{}.weight", id),
                bias: bias.then(|| format!("{}.bias", id)),
            },
        }
    }

    pub fn simple(id: &str, input: &str, kind: LayerKind) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            inputs: vec![input.into()],
            kind,
        }
    }

    pub fn add(id: &str, a: &str, b: &str) -> LayerSpec {
        LayerSpec {
            id: id.into(),
            inputs: vec![a.into(), b.into()],
            kind: LayerKind::Add,
        }
    }
}
