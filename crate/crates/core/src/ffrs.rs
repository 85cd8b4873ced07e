//! Feature-map relevance scores (ω) over a set of counterfeits, and
//! top/low/random feature-map selection.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{FeatureMapId, ModelGraph};
use crate::imageio::{map_images, prepare, DatasetEntry, Transform};
use crate::lrp::{lrp_backward, SeedMode};
use crate::tensor::Tensor;

/// Per-channel share of a layer's positive relevance: for each channel, the
/// sum of `max(0, r)` over its positions divided by `Σ|r|` over the whole
/// layer. A layer with no relevance yields zeros.
pub fn layer_shares(relevance: &[f64], channels: usize) -> Vec<f64> {
    let denom: f64 = relevance.iter().map(|r| r.abs()).sum();
    if denom == 0.0 || channels == 0 {
        return vec![0.0; channels];
    }
    let plane = relevance.len() / channels;
    relevance
        .chunks(plane)
        .map(|ch| ch.iter().map(|r| r.max(0.0)).sum::<f64>() / denom)
        .collect()
}

/// One image's contribution to ω for every feature map, in
/// [`ModelGraph::feature_maps`] order. `x` must already be normalized.
pub fn image_shares(g: &ModelGraph, x: &Tensor, seed_mode: SeedMode, eps: f64) -> Result<Vec<f64>> {
    let trace = g.forward(x, None)?;
    let record = lrp_backward(g, &trace, seed_mode.seed(&trace), eps)?;
    let mut out = Vec::new();
    for i in g.conv_layers() {
        out.extend(layer_shares(record.layer(i), g.output_shape(i)[0]));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaEntry {
    pub layer: String,
    pub channel: usize,
    pub omega: f64,
}

impl OmegaEntry {
    pub fn id(&self) -> FeatureMapId {
        FeatureMapId::new(self.layer.clone(), self.channel)
    }
}

/// ω for every feature map, sorted by ω descending with ties broken by
/// `(layer, channel)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OmegaTable {
    pub n_images: usize,
    #[serde(default)]
    pub n_skipped: usize,
    pub model_hash: String,
    pub entries: Vec<OmegaEntry>,
}

fn by_key(a: &OmegaEntry, b: &OmegaEntry) -> Ordering {
    (a.layer.as_str(), a.channel).cmp(&(b.layer.as_str(), b.channel))
}

impl OmegaTable {
    /// Averages per-image shares (index-aligned with `fmaps`) over images.
    /// Accumulation runs in the order given, so the result does not depend
    /// on how the shares were computed.
    pub fn from_shares(fmaps: &[FeatureMapId], shares: &[Vec<f64>], model_hash: String, n_skipped: usize) -> Result<Self> {
        if shares.is_empty() {
            return Err(Error::EmptyDataset("no image could be used to compute omega".into()));
        }
        let mut acc = vec![0.0f64; fmaps.len()];
        for s in shares {
            for (a, v) in acc.iter_mut().zip(s) {
                *a += v;
            }
        }
        let n = shares.len() as f64;
        let mut entries: Vec<OmegaEntry> = fmaps
            .iter()
            .zip(acc)
            .map(|(f, a)| OmegaEntry {
                layer: f.layer.clone(),
                channel: f.channel,
                omega: a / n,
            })
            .collect();
        entries.sort_by(|a, b| b.omega.total_cmp(&a.omega).then_with(|| by_key(a, b)));
        Ok(OmegaTable {
            n_images: shares.len(),
            n_skipped,
            model_hash,
            entries,
        })
    }

    pub fn get(&self, fmap: &FeatureMapId) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.layer == fmap.layer && e.channel == fmap.channel)
            .map(|e| e.omega)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Checks `ω ∈ [0,1]` and `Σ_c ω(l,c) ≤ 1 + 1e-6` per layer.
    pub fn check_bounds(&self) -> std::result::Result<(), String> {
        let mut sums: std::collections::BTreeMap<&str, f64> = Default::default();
        for e in &self.entries {
            if !(0.0..=1.0).contains(&e.omega) {
                return Err(format!("omega({}:{}) = {} outside [0,1]", e.layer, e.channel, e.omega));
            }
            *sums.entry(&e.layer).or_default() += e.omega;
        }
        match sums.into_iter().find(|(_, s)| *s > 1.0 + 1e-6) {
            Some((l, s)) => Err(format!("omega over layer {} sums to {}", l, s)),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FfrsOptions {
    pub eps: f64,
    pub seed_mode: SeedMode,
    pub crop: Option<(usize, usize)>,
}

impl Default for FfrsOptions {
    fn default() -> Self {
        FfrsOptions {
            eps: crate::lrp::DEFAULT_EPS,
            seed_mode: SeedMode::Logit,
            crop: None,
        }
    }
}

/// Computes ω over in-memory images (`[3,H,W]` in `[0,1]`).
pub fn compute_ff_rs_images(g: &ModelGraph, images: &[Tensor], opts: &FfrsOptions) -> Result<OmegaTable> {
    use rayon::prelude::*;
    let shares = images
        .par_iter()
        .map(|px| {
            let x = prepare(px, Transform::None, opts.crop, g.normalization())?;
            image_shares(g, &x, opts.seed_mode, opts.eps)
        })
        .collect::<Result<Vec<_>>>()?;
    OmegaTable::from_shares(&g.feature_maps(), &shares, g.content_hash(), 0)
}

/// Computes ω over the counterfeit images listed in `entries`. Unreadable
/// images are skipped and counted; the call fails only if none remain.
pub fn compute_ff_rs(g: &ModelGraph, entries: &[DatasetEntry], opts: &FfrsOptions) -> Result<OmegaTable> {
    if entries.is_empty() {
        return Err(Error::EmptyDataset("no counterfeit images given".into()));
    }
    let shares = map_images(entries, |rec| {
        let x = prepare(&rec.pixels, Transform::None, opts.crop, g.normalization())?;
        image_shares(g, &x, opts.seed_mode, opts.eps)
    })?;
    let skipped = shares.iter().filter(|s| s.is_none()).count();
    if skipped > 0 {
        log::warn!("{} of {} images could not be decoded", skipped, entries.len());
    }
    let shares: Vec<Vec<f64>> = shares.into_iter().flatten().collect();
    OmegaTable::from_shares(&g.feature_maps(), &shares, g.content_hash(), skipped)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Top,
    Random,
    Low,
    /// Hand-picked maps.
    Manual,
}

impl std::str::FromStr for SelectMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(SelectMode::Top),
            "random" => Ok(SelectMode::Random),
            "low" => Ok(SelectMode::Low),
            "manual" => Ok(SelectMode::Manual),
            _ => Err(Error::InvalidArgument(format!("unknown mode '{}', expected top|random|low", s))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureMapSet {
    pub mode: SelectMode,
    pub k: usize,
    pub seed: Option<u64>,
    pub ids: Vec<FeatureMapId>,
}

impl FeatureMapSet {
    pub fn new(mode: SelectMode, ids: Vec<FeatureMapId>) -> Self {
        FeatureMapSet {
            mode,
            k: ids.len(),
            seed: None,
            ids,
        }
    }
}

/// `round(0.005 · total)`, at least 1.
pub fn default_k(total: usize) -> usize {
    ((total as f64 * 0.005).round() as usize).max(1)
}

/// Picks `k` feature maps. Maps listed in `exclude` are never picked.
/// Random mode samples uniformly without replacement using `seed`.
pub fn select(table: &OmegaTable, mode: SelectMode, k: usize, seed: u64, exclude: &[FeatureMapId]) -> Result<FeatureMapSet> {
    let excluded: BTreeSet<&FeatureMapId> = exclude.iter().collect();
    let mut pool: Vec<&OmegaEntry> = table
        .entries
        .iter()
        .filter(|e| !excluded.contains(&e.id()))
        .collect();
    if k > pool.len() {
        return Err(Error::KOutOfRange { k, available: pool.len() });
    }
    let ids = match mode {
        SelectMode::Top => {
            pool.sort_by(|a, b| b.omega.total_cmp(&a.omega).then_with(|| by_key(a, b)));
            pool[..k].iter().map(|e| e.id()).collect()
        }
        SelectMode::Low => {
            pool.sort_by(|a, b| a.omega.total_cmp(&b.omega).then_with(|| by_key(a, b)));
            pool[..k].iter().map(|e| e.id()).collect()
        }
        SelectMode::Manual => {
            return Err(Error::InvalidArgument("manual sets are not selected from a table".into()));
        }
        SelectMode::Random => {
            // a canonical candidate order keeps the draw independent of ω
            pool.sort_by(|a, b| by_key(a, b));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| pool[i].id()).collect()
        }
    };
    Ok(FeatureMapSet {
        mode,
        k,
        seed: (mode == SelectMode::Random).then_some(seed),
        ids,
    })
}
