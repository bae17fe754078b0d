//! Segmentation metrics and the language-image alignment probe.

use std::fmt;

use magnet_autograd::{rng::named_stream, AdamW, Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

pub const THRESHOLDS: [f64; 3] = [0.5, 0.7, 0.9];
pub const MIN_PROBE_SAMPLES: usize = 64;

/// Mean cosine similarity of matching and non-matching pairs after the probe.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub matching_sim: f64,
    pub nonmatching_sim: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oiou: f64,
    pub miou: f64,
    /// Fraction of samples with IoU above 0.5, 0.7 and 0.9.
    pub precision: [f64; 3],
    pub ious: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeResult>,
}

/// Binarizes logits at 0 (probability 0.5).
pub fn binarize(logits: &[f64]) -> Vec<bool> {
    logits.iter().map(|&v| v > 0.0).collect()
}

/// `(intersection, union)` pixel counts.
pub fn overlap(pred: &[bool], gt: &[bool]) -> (usize, usize) {
    pred.iter().zip(gt).fold((0, 0), |(i, u), (&p, &g)| (i + usize::from(p && g), u + usize::from(p || g)))
}

pub fn compute_metrics(preds: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<MetricsReport> {
    if preds.is_empty() {
        return input_err("metrics over an empty set");
    }
    if preds.len() != gts.len() {
        return input_err(format!("{} predictions for {} ground truths", preds.len(), gts.len()));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    let mut ious = Vec::with_capacity(preds.len());
    for (k, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return input_err(format!("sample {k}: prediction has {} pixels, target {}", p.len(), g.len()));
        }
        let (i, u) = overlap(p, g);
        inter += i;
        union += u;
        ious.push(if u == 0 { 1.0 } else { i as f64 / u as f64 });
    }
    let n = ious.len() as f64;
    let precision = THRESHOLDS.map(|t| ious.iter().filter(|&&v| v > t).count() as f64 / n);
    Ok(MetricsReport {
        oiou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
        miou: ious.iter().sum::<f64>() / n,
        precision,
        ious,
        probe: None,
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>8}", "metric", "value")?;
        writeln!(f, "{:<12} {:>8.4}", "oIoU", self.oiou)?;
        writeln!(f, "{:<12} {:>8.4}", "mIoU", self.miou)?;
        for (t, p) in THRESHOLDS.iter().zip(self.precision) {
            writeln!(f, "{:<12} {:>8.4}", format!("P@{t}"), p)?;
        }
        if let Some(p) = &self.probe {
            writeln!(f, "{:<12} {:>8.4}", "probe match", p.matching_sim)?;
            writeln!(f, "{:<12} {:>8.4}", "probe other", p.nonmatching_sim)?;
            writeln!(f, "{:<12} {:>8.4}", "probe gap", p.gap)?;
        }
        writeln!(f, "{:<12} {:>8}", "samples", self.ious.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub heldout_fraction: f64,
    pub steps: usize,
    pub lr: f64,
    pub temperature: f64,
    /// Start from the identity map (requires equal widths).
    pub identity_init: bool,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.25,
            steps: 300,
            lr: 1e-2,
            temperature: 0.1,
            identity_init: false,
            seed: 0,
        }
    }
}

fn center(rows: &[Vec<f64>], mean: &[f64]) -> Tensor<f64> {
    let cols = mean.len();
    Tensor::from_fn(rows.len(), cols, |r, c| rows[r][c] - mean[c])
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; rows[0].len()];
    for r in rows {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

fn normalize_rows(t: &Tensor<f64>) -> Tensor<f64> {
    let mut out = t.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= n);
    }
    out
}

/// Trains a linear map from language to image features with a symmetric
/// InfoNCE loss over in-batch pairs and reports cosine similarities of
/// matching and non-matching pairs on the held-out tail of the inputs.
/// Both feature sets are centered by their training-split means first.
pub fn alignment_probe(lang: &[Vec<f64>], img: &[Vec<f64>], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let n = lang.len();
    if n != img.len() {
        return input_err(format!("{n} language features for {} image features", img.len()));
    }
    if n < MIN_PROBE_SAMPLES {
        return input_err(format!("probe needs at least {MIN_PROBE_SAMPLES} samples, got {n}"));
    }
    let (d, c) = (lang[0].len(), img[0].len());
    if d == 0 || c == 0 || lang.iter().any(|v| v.len() != d) || img.iter().any(|v| v.len() != c) {
        return input_err("probe features must be non-empty and of uniform width");
    }
    if lang.iter().all(|v| v == &lang[0]) || img.iter().all(|v| v == &img[0]) {
        return input_err("degenerate probe features: every sample is identical");
    }
    if !(cfg.heldout_fraction > 0.0 && cfg.heldout_fraction < 1.0) || !(cfg.temperature > 0.0) {
        return input_err("probe needs 0 < heldout_fraction < 1 and a positive temperature");
    }
    let held = ((n as f64 * cfg.heldout_fraction).round() as usize).clamp(2, n - 2);
    let train = n - held;
    let lm = column_mean(&lang[..train]);
    let im = column_mean(&img[..train]);
    let (l_train, i_train) = (center(&lang[..train], &lm), center(&img[..train], &im));
    let (l_test, i_test) = (center(&lang[train..], &lm), center(&img[train..], &im));

    let mut params = ParamStore::<f64>::new();
    if cfg.identity_init {
        if d != c {
            return input_err(format!("identity probe needs equal widths, got {d} and {c}"));
        }
        params.insert("probe.w", Tensor::from_fn(d, c, |r, k| if r == k { 1.0 } else { 0.0 }));
    } else {
        params.init_linear(cfg.seed, "probe.w", d, c);
    }
    let targets: Vec<usize> = (0..train).collect();
    let zi = normalize_rows(&i_train);
    let mut opt = AdamW::new(0.0);
    for _ in 0..cfg.steps {
        let grads = {
            let mut g = Graph::with_params(&params);
            let w = g.param("probe.w")?;
            let x = g.constant(l_train.clone());
            let zl = g.matmul(x, w)?;
            let zl = g.l2_normalize_rows(zl);
            let zi = g.constant(zi.clone());
            let s = g.matmul_t(zl, false, zi, true)?;
            let s = g.scale(s, 1.0 / cfg.temperature);
            let st = g.transpose(s);
            let a = g.cross_entropy(s, &targets)?;
            let b = g.cross_entropy(st, &targets)?;
            let loss = g.add(a, b)?;
            let loss = g.scale(loss, 0.5);
            g.param_grads(loss)?
        };
        opt.step(&mut params, &grads, cfg.lr);
    }
    let w = params.get("probe.w")?;
    let zl = normalize_rows(&Tensor::matmul(&l_test, false, w, false)?);
    let zi = normalize_rows(&i_test);
    let sims = Tensor::matmul(&zl, false, &zi, true)?;
    let m = held;
    let matching = (0..m).map(|k| sims.get(k, k)).sum::<f64>() / m as f64;
    let nonmatching = (0..m)
        .flat_map(|a| (0..m).filter(move |&b| b != a).map(move |b| (a, b)))
        .map(|(a, b)| sims.get(a, b))
        .sum::<f64>()
        / (m * (m - 1)) as f64;
    Ok(ProbeResult {
        matching_sim: matching,
        nonmatching_sim: nonmatching,
        gap: matching - nonmatching,
    })
}

/// Probe on a copy of the inputs whose pairing is shuffled (no-signal control).
pub fn shuffled_probe(lang: &[Vec<f64>], img: &[Vec<f64>], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let mut idx: Vec<usize> = (0..img.len()).collect();
    idx.shuffle(&mut named_stream(cfg.seed, "probe/shuffle"));
    let shuffled: Vec<Vec<f64>> = idx.iter().map(|&i| img[i].clone()).collect();
    alignment_probe(lang, &shuffled, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let m = vec![vec![true, false, true, true], vec![false, true, false, false]];
        let r = compute_metrics(&m, &m).unwrap();
        assert_eq!((r.oiou, r.miou), (1.0, 1.0));
        assert_eq!(r.precision, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn precision_counts_strictly_above_threshold() {
        // IoU 3/5 and 2/5
        let gts = vec![vec![true; 5], vec![true; 5]];
        let preds = vec![
            vec![true, true, true, false, false],
            vec![true, true, false, false, false],
        ];
        let r = compute_metrics(&preds, &gts).unwrap();
        assert_eq!(r.ious, vec![0.6, 0.4]);
        assert_eq!(r.precision, [0.5, 0.0, 0.0]);
    }

    #[test]
    fn errors_on_bad_input() {
        assert!(compute_metrics(&[], &[]).is_err());
        assert!(compute_metrics(&[vec![true]], &[vec![true, false]]).is_err());
        assert!(compute_metrics(&[vec![true]], &[]).is_err());
    }

    #[test]
    fn degenerate_probe_features_are_rejected() {
        let same = vec![vec![1.0, 2.0]; 64];
        let varied: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, 1.0]).collect();
        assert!(alignment_probe(&same, &varied, &ProbeConfig::default()).is_err());
        assert!(alignment_probe(&varied[..10], &varied[..10], &ProbeConfig::default()).is_err());
    }
}
