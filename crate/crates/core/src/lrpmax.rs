//! Pixel-wise explanation of a single feature map, seeded from its
//! strongest relevance neuron, and patch extraction around the response.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureMapId, ModelGraph};
use crate::imageio::{save_heatmap_png, save_png_rgb};
use crate::lrp::{lrp_backward, propagate, SeedMode};
use crate::tensor::Tensor;

pub const DEFAULT_PATCH_SIDE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ExplanationMap {
    /// `[H,W]` input relevance summed over color channels.
    pub values: Tensor,
    pub source: FeatureMapId,
    /// `(row, col)` of the largest explanation value.
    pub argmax_input: (usize, usize),
    /// `(row, col)` of the re-seeded neuron in the feature map.
    pub fmap_argmax: (usize, usize),
    /// Relevance of the re-seeded neuron.
    pub seed: f64,
    /// The feature map carried no relevance at its maximum.
    pub degenerate: bool,
}

/// First maximum in row-major order.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Explains feature map `fmap` on the normalized input `x`.
pub fn lrp_max_explain(g: &ModelGraph, x: &Tensor, fmap: &FeatureMapId, seed_mode: SeedMode, eps: f64) -> Result<ExplanationMap> {
    let (layer, channel) = g.resolve_fmap(fmap)?;
    let (_, h, w) = x.chw()?;
    let trace = g.forward(x, None)?;
    let full = lrp_backward(g, &trace, seed_mode.seed(&trace), eps)?;

    let shape = g.output_shape(layer);
    let plane = shape[1] * shape[2];
    let map = &full.layer(layer)[channel * plane..(channel + 1) * plane];
    let peak = argmax(map);
    let seed = map[peak];
    let fmap_argmax = (peak / shape[2], peak % shape[2]);

    if seed == 0.0 {
        return Ok(ExplanationMap {
            values: Tensor::zeros(&[h, w]),
            source: fmap.clone(),
            argmax_input: (0, 0),
            fmap_argmax,
            seed,
            degenerate: true,
        });
    }

    let mut start = vec![0.0; full.layer(layer).len()];
    start[channel * plane + peak] = seed;
    let single = propagate(g, &trace, layer, start, eps, seed)?;
    let input = single.input();
    let summed: Vec<f64> = (0..h * w)
        .map(|i| input[i] + input[h * w + i] + input[2 * h * w + i])
        .collect();
    let top = argmax(&summed);
    Ok(ExplanationMap {
        values: Tensor::from_f64(vec![h, w], &summed)?,
        source: fmap.clone(),
        argmax_input: (top / w, top % w),
        fmap_argmax,
        seed,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchBox {
    /// `side × side` box centered on `center`, shifted to lie inside an
    /// `h × w` image. Sides larger than the image are clamped to it.
    pub fn around(center: (usize, usize), side: usize, h: usize, w: usize) -> Self {
        let place = |c: usize, extent: usize| {
            let s = side.min(extent);
            let start = c.saturating_sub(s / 2).min(extent - s);
            (start, s)
        };
        let (top, height) = place(center.0, h);
        let (left, width) = place(center.1, w);
        PatchBox { top, left, height, width }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.top + self.height && col >= self.left && col < self.left + self.width
    }

    pub fn intersects(&self, other: &PatchBox) -> bool {
        self.top < other.top + other.height
            && other.top < self.top + self.height
            && self.left < other.left + other.width
            && other.left < self.left + self.width
    }
}

/// Crops `image` (`[C,H,W]`) to the box around the explanation peak.
pub fn extract_patch(image: &Tensor, e: &ExplanationMap, side: usize) -> Result<(Tensor, PatchBox)> {
    if side == 0 {
        return Err(Error::InvalidArgument("patch side must be at least 1".into()));
    }
    let (c, h, w) = image.chw()?;
    let b = PatchBox::around(e.argmax_input, side, h, w);
    let d = image.data();
    let mut out = Vec::with_capacity(c * b.height * b.width);
    for ch in 0..c {
        for y in b.top..b.top + b.height {
            let start = (ch * h + y) * w + b.left;
            out.extend_from_slice(&d[start..start + b.width]);
        }
    }
    Ok((Tensor::new(vec![c, b.height, b.width], out)?, b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainMeta {
    pub layer: String,
    pub channel: usize,
    pub fmap_argmax: [usize; 2],
    pub argmax_input: [usize; 2],
    pub seed_relevance: f64,
    pub explanation_sum: f64,
    pub degenerate: bool,
    pub patch: PatchBox,
}

impl ExplainMeta {
    pub fn new(e: &ExplanationMap, patch: PatchBox) -> Self {
        ExplainMeta {
            layer: e.source.layer.clone(),
            channel: e.source.channel,
            fmap_argmax: [e.fmap_argmax.0, e.fmap_argmax.1],
            argmax_input: [e.argmax_input.0, e.argmax_input.1],
            seed_relevance: e.seed,
            explanation_sum: e.values.data().iter().map(|&v| v as f64).sum(),
            degenerate: e.degenerate,
            patch,
        }
    }
}

/// Writes `heatmap.png`, `patch.png` (cropped from the original pixels)
/// and returns the metadata describing them.
pub fn write_explanation(dir: &Path, pixels: &Tensor, e: &ExplanationMap, side: usize) -> Result<ExplainMeta> {
    let (patch, b) = extract_patch(pixels, e, side)?;
    save_heatmap_png(&dir.join("heatmap.png"), &e.values)?;
    save_png_rgb(&dir.join("patch.png"), &patch)?;
    Ok(ExplainMeta::new(e, b))
}
