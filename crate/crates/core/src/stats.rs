//! Color-conditionality testing: spatial-max activations under baseline and
//! grayscale inputs compared with Mood's median test.

use serde::{Deserialize, Serialize};

use crate::ablation::median;
use crate::error::{Error, Result};
use crate::graph::{FeatureMapId, ModelGraph};
use crate::imageio::{map_images, prepare, DatasetEntry, Transform};
use crate::tensor::reduce_max_spatial;

/// How values equal to the grand median are counted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ties {
    #[default]
    Below,
    Above,
    Ignore,
}

impl std::str::FromStr for Ties {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "below" => Ok(Ties::Below),
            "above" => Ok(Ties::Above),
            "ignore" => Ok(Ties::Ignore),
            _ => Err(Error::InvalidArgument(format!("unknown ties policy '{}'", s))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedianTestOptions {
    pub correction: bool,
    pub ties: Ties,
}

impl Default for MedianTestOptions {
    fn default() -> Self {
        MedianTestOptions {
            correction: true,
            ties: Ties::Below,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianTestResult {
    pub grand_median: f64,
    /// `[[above_a, above_b], [below_a, below_b]]`.
    pub contingency: [[u64; 2]; 2],
    pub chi2: f64,
    pub p_value: f64,
    /// A row or column of the table is empty; the statistic is undefined
    /// and reported as `chi2 = 0`, `p = 1`.
    pub degenerate: bool,
}

/// Survival function of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1dof(chi2: f64) -> f64 {
    libm::erfc((chi2 / 2.0).sqrt()).clamp(0.0, 1.0)
}

pub fn moods_median_test(a: &[f64], b: &[f64], opts: MedianTestOptions) -> Result<MedianTestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "median test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("median test samples must be finite".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let grand_median = median(&pooled)?;

    let mut table = [[0u64; 2]; 2];
    for (col, group) in [a, b].into_iter().enumerate() {
        for &v in group {
            let row = if v > grand_median {
                0
            } else if v < grand_median {
                1
            } else {
                match opts.ties {
                    Ties::Below => 1,
                    Ties::Above => 0,
                    Ties::Ignore => continue,
                }
            };
            table[row][col] += 1;
        }
    }

    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let total = (rows[0] + rows[1]) as f64;
    if rows.contains(&0) || cols.contains(&0) {
        return Ok(MedianTestResult {
            grand_median,
            contingency: table,
            chi2: 0.0,
            p_value: 1.0,
            degenerate: true,
        });
    }
    let term = |r: usize, c: usize| {
        let expected = rows[r] as f64 * cols[c] as f64 / total;
        let mut diff = (table[r][c] as f64 - expected).abs();
        if opts.correction {
            diff -= diff.min(0.5);
        }
        diff * diff / expected
    };
    // pairing the two groups per row keeps the sum exactly symmetric
    let chi2 = (term(0, 0) + term(0, 1)) + (term(1, 0) + term(1, 1));
    Ok(MedianTestResult {
        grand_median,
        contingency: table,
        chi2,
        p_value: chi2_sf_1dof(chi2),
        degenerate: false,
    })
}

/// Percentage of p-values strictly below `alpha`.
pub fn color_conditional_fraction(p_values: &[f64], alpha: f64) -> Result<f64> {
    if p_values.is_empty() {
        return Err(Error::InvalidArgument("no test results to summarize".into()));
    }
    check_alpha(alpha)?;
    let hits = p_values.iter().filter(|&&p| p < alpha).count();
    Ok(100.0 * hits as f64 / p_values.len() as f64)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {}", alpha)))
    }
}

/// Spatial maximum of each feature map's activation for every decodable
/// image, under the given transform. `out[f][i]` belongs to `fmaps[f]` and
/// the i-th decodable image in `entries` order.
pub fn collect_max_activations(
    g: &ModelGraph,
    entries: &[DatasetEntry],
    fmaps: &[FeatureMapId],
    transform: Transform,
    crop: Option<(usize, usize)>,
) -> Result<Vec<Vec<f64>>> {
    if fmaps.is_empty() {
        return Err(Error::InvalidArgument("no feature maps given".into()));
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset("no images given".into()));
    }
    let resolved = fmaps.iter().map(|f| g.resolve_fmap(f)).collect::<Result<Vec<_>>>()?;
    let per_image = map_images(entries, |rec| {
        let x = prepare(&rec.pixels, transform, crop, g.normalization())?;
        let trace = g.forward(&x, None)?;
        resolved
            .iter()
            .map(|&(layer, channel)| {
                let (values, _) = reduce_max_spatial(trace.output(layer))?;
                Ok(values[channel] as f64)
            })
            .collect::<Result<Vec<f64>>>()
    })?;
    let rows: Vec<Vec<f64>> = per_image.into_iter().flatten().collect();
    if rows.is_empty() {
        return Err(Error::EmptyDataset("no image could be decoded".into()));
    }
    Ok((0..fmaps.len()).map(|f| rows.iter().map(|r| r[f]).collect()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTestEntry {
    pub layer: String,
    pub channel: usize,
    pub median_baseline: f64,
    pub median_grayscale: f64,
    pub grand_median: f64,
    pub contingency: [[u64; 2]; 2],
    pub chi2: f64,
    pub p: f64,
    pub degenerate: bool,
    pub color_conditional: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTestSummary {
    pub alpha: f64,
    pub correction: bool,
    pub ties: Ties,
    pub n_images: usize,
    pub percent_color_conditional: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorTestReport {
    pub entries: Vec<ColorTestEntry>,
    pub summary: ColorTestSummary,
}

/// Runs the median test for every feature map on baseline vs grayscale
/// counterfeits.
pub fn color_test(
    g: &ModelGraph,
    entries: &[DatasetEntry],
    fmaps: &[FeatureMapId],
    alpha: f64,
    opts: MedianTestOptions,
    crop: Option<(usize, usize)>,
) -> Result<ColorTestReport> {
    check_alpha(alpha)?;
    let base = collect_max_activations(g, entries, fmaps, Transform::None, crop)?;
    let gray = collect_max_activations(g, entries, fmaps, Transform::Grayscale, crop)?;
    let mut out = Vec::with_capacity(fmaps.len());
    for ((f, a), b) in fmaps.iter().zip(&base).zip(&gray) {
        let t = moods_median_test(a, b, opts)?;
        out.push(ColorTestEntry {
            layer: f.layer.clone(),
            channel: f.channel,
            median_baseline: median(a)?,
            median_grayscale: median(b)?,
            grand_median: t.grand_median,
            contingency: t.contingency,
            chi2: t.chi2,
            p: t.p_value,
            degenerate: t.degenerate,
            color_conditional: t.p_value < alpha,
        });
    }
    let ps: Vec<f64> = out.iter().map(|e| e.p).collect();
    Ok(ColorTestReport {
        summary: ColorTestSummary {
            alpha,
            correction: opts.correction,
            ties: opts.ties,
            n_images: base[0].len(),
            percent_color_conditional: color_conditional_fraction(&ps, alpha)?,
        },
        entries: out,
    })
}
