//! Detection metrics and dataset evaluation with optional feature-map
//! dropout and color ablation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{sigmoid, FeatureMapId, ModelGraph};
use crate::imageio::{map_images, prepare, DatasetEntry, Label, Transform};

/// Sample median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Average precision as a percentage. Scores are ranked descending; equal
/// scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::UndefinedAp("need at least one positive and one negative label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(100.0 * sum / positives as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub gmean: f64,
    pub tpr: f64,
    pub tnr: f64,
}

/// Threshold maximizing `sqrt(TPR·TNR)` where an image is called fake iff
/// its score is `>= t`. Candidates are the distinct pooled scores; ties go
/// to the smallest candidate.
pub fn oracle_threshold(real: &[f64], fake: &[f64]) -> Result<ThresholdChoice> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::InvalidArgument("threshold needs both real and fake scores".into()));
    }
    let mut r = real.to_vec();
    let mut f = fake.to_vec();
    r.sort_by(f64::total_cmp);
    f.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = r.iter().chain(&f).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let (nr, nf) = (r.len() as f64, f.len() as f64);
    let (mut ri, mut fi) = (0usize, 0usize);
    let mut best: Option<ThresholdChoice> = None;
    for t in candidates {
        // ri: reals strictly below t; fi: fakes strictly below t
        while ri < r.len() && r[ri] < t {
            ri += 1;
        }
        while fi < f.len() && f[fi] < t {
            fi += 1;
        }
        let tpr = (f.len() - fi) as f64 / nf;
        let tnr = ri as f64 / nr;
        let gmean = (tpr * tnr).sqrt();
        if best.is_none_or(|b| gmean > b.gmean) {
            best = Some(ThresholdChoice { threshold: t, gmean, tpr, tnr });
        }
    }
    Ok(best.expect("at least one candidate"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Calibrate on this run's scores.
    #[default]
    Oracle,
    /// Use a threshold from elsewhere, typically a baseline run.
    Fixed(f64),
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub mask: Vec<FeatureMapId>,
    pub transform: Transform,
    pub threshold: ThresholdMode,
    pub crop: Option<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub path: PathBuf,
    pub label: Label,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub acc_real: f64,
    pub acc_fake: f64,
    pub threshold: f64,
    pub threshold_mode: String,
    pub n_real: usize,
    pub n_fake: usize,
    pub n_skipped: usize,
    pub median_prob_real: f64,
    pub median_prob_fake: f64,
    pub transform: Transform,
    pub mask: Vec<FeatureMapId>,
    pub score_real: Vec<f64>,
    pub score_fake: Vec<f64>,
    #[serde(skip)]
    pub scored: Vec<ScoredImage>,
}

/// Fraction (percent) of `scores` on the expected side of `threshold`.
fn accuracy(scores: &[f64], threshold: f64, fake: bool) -> f64 {
    let hits = scores.iter().filter(|&&s| (s >= threshold) == fake).count();
    100.0 * hits as f64 / scores.len() as f64
}

/// Builds a report from already-computed probabilities.
pub fn report_from_scores(scored: Vec<ScoredImage>, n_skipped: usize, opts: &EvalOptions) -> Result<EvalReport> {
    let pick = |label| -> Vec<f64> { scored.iter().filter(|s| s.label == label).map(|s| s.probability).collect() };
    let score_real = pick(Label::Real);
    let score_fake = pick(Label::Fake);
    if score_real.is_empty() || score_fake.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "need decodable images of both classes, got {} real and {} fake",
            score_real.len(),
            score_fake.len()
        )));
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.probability).collect();
    let labels: Vec<bool> = scored.iter().map(|s| s.label == Label::Fake).collect();
    let (threshold, threshold_mode) = match opts.threshold {
        ThresholdMode::Oracle => (oracle_threshold(&score_real, &score_fake)?.threshold, "oracle"),
        ThresholdMode::Fixed(t) => (t, "fixed"),
    };
    Ok(EvalReport {
        ap: average_precision(&scores, &labels)?,
        acc_real: accuracy(&score_real, threshold, false),
        acc_fake: accuracy(&score_fake, threshold, true),
        threshold,
        threshold_mode: threshold_mode.into(),
        n_real: score_real.len(),
        n_fake: score_fake.len(),
        n_skipped,
        median_prob_real: median(&score_real)?,
        median_prob_fake: median(&score_fake)?,
        transform: opts.transform,
        mask: opts.mask.clone(),
        score_real,
        score_fake,
        scored,
    })
}

/// Scores every image with the detector and summarizes the run.
pub fn evaluate(g: &ModelGraph, entries: &[DatasetEntry], opts: &EvalOptions) -> Result<EvalReport> {
    let mask = g.dropout_mask(&opts.mask)?;
    let mask = (!mask.is_empty()).then_some(mask);
    let probs = map_images(entries, |rec| {
        let x = prepare(&rec.pixels, opts.transform, opts.crop, g.normalization())?;
        let trace = g.forward(&x, mask.as_ref())?;
        Ok(sigmoid(trace.logit as f64))
    })?;
    let mut scored = Vec::with_capacity(entries.len());
    let mut skipped = 0;
    for (e, p) in entries.iter().zip(probs) {
        match p {
            Some(probability) => scored.push(ScoredImage {
                path: e.path.clone(),
                label: e.label,
                probability,
            }),
            None => skipped += 1,
        }
    }
    report_from_scores(scored, skipped, opts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub ap: f64,
    pub acc_real: f64,
    pub acc_fake: f64,
    pub median_prob_fake: f64,
}

impl Deltas {
    /// `after − before` for each metric.
    pub fn between(before: &EvalReport, after: &EvalReport) -> Self {
        Deltas {
            ap: after.ap - before.ap,
            acc_real: after.acc_real - before.acc_real,
            acc_fake: after.acc_fake - before.acc_fake,
            median_prob_fake: after.median_prob_fake - before.median_prob_fake,
        }
    }
}

/// Writes `path,label,transform,probability` rows.
pub fn write_scores_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(["path", "label", "transform", "probability"]).map_err(io)?;
    for s in &report.scored {
        w.write_record([
            s.path.to_string_lossy().as_ref(),
            s.label.as_str(),
            report.transform.as_str(),
            &format!("{}", crate::report::sig9(s.probability)),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
