//! Training, evaluation, probing and ablation runs with their artifacts.
//!
//! Random streams (all derived from the run seed with
//! [`magnet_autograd::rng::named_stream`]):
//!
//! | stream                         | used for                                   |
//! |--------------------------------|--------------------------------------------|
//! | `<parameter name>`             | initial value of that parameter            |
//! | `batching/epoch{e}`            | sample order of epoch `e`                  |
//! | `masking/epoch{e}/sample{id}`  | token masking of one sample in epoch `e`   |
//! | `dataset/{id}` (data seeds)    | scene of one generated sample              |
//!
//! Each consumer owns its stream, so switching a module on or off never
//! shifts the random numbers seen by the others.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use magnet_autograd::rng::named_stream;
use magnet_autograd::ParamStore;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::datagen::{generate_dataset, Sample};
use crate::error::{config_err, MagnetError, Result};
use crate::losses::{CalTerms, LossBundle};
use crate::maskgrounding::{mask_tokens, MaskedBatch};
use crate::metrics::{alignment_probe, binarize, compute_metrics, MetricsReport, ProbeConfig, ProbeResult};
use crate::plot;
use crate::segmenter::{Batch, MagNet, ModelConfig, Trainer};

const EVAL_CHUNK: usize = 32;

pub fn datasets(cfg: &ExperimentConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let d = &cfg.data;
    let size = cfg.model.image_size;
    Ok((
        generate_dataset(d.train_seed, d.train_count, d.grid, size)?,
        generate_dataset(d.val_seed, d.val_count, d.grid, size)?,
    ))
}

/// Fresh token masks for one batch of one epoch.
pub fn mask_batch(seed: u64, epoch: usize, samples: &[&Sample], rate: f64) -> Result<Vec<MaskedBatch>> {
    samples
        .iter()
        .map(|s| {
            let mut rng = named_stream(seed, &format!("masking/epoch{epoch}/sample{}", s.id));
            mask_tokens(&s.tokens, s.centroid(), rate, &mut rng)
        })
        .collect()
}

/// Sample order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut named_stream(seed, &format!("batching/epoch{epoch}")));
    idx
}

pub fn predict(model: &MagNet, params: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<Vec<bool>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        for logits in model.predict_logits(params, &refs)? {
            out.push(binarize(&logits));
        }
    }
    Ok(out)
}

pub fn ground_truth(samples: &[Sample]) -> Vec<Vec<bool>> {
    samples.iter().map(|s| s.mask.iter().map(|&m| m != 0).collect()).collect()
}

pub fn evaluate(model: &MagNet, params: &ParamStore<f32>, samples: &[Sample]) -> Result<MetricsReport> {
    compute_metrics(&predict(model, params, samples)?, &ground_truth(samples))
}

/// Pooled final-stage features of `samples` run through the probe.
pub fn probe(model: &MagNet, params: &ParamStore<f32>, samples: &[Sample], cfg: &ProbeConfig) -> Result<ProbeResult> {
    let (mut lang, mut img) = (Vec::new(), Vec::new());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (l, i) = model.pooled_features(params, &refs)?;
        lang.extend(l);
        img.extend(i);
    }
    alignment_probe(&lang, &img, cfg)
}

/// Mean loss components over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossMeans {
    pub bce: f64,
    pub dice: f64,
    pub cal: f64,
    pub grounding: f64,
    pub total: f64,
}

impl LossMeans {
    fn of(bundles: &[LossBundle]) -> Self {
        let n = bundles.len().max(1) as f64;
        let sum = |f: fn(&LossBundle) -> f64| bundles.iter().map(f).sum::<f64>() / n;
        Self {
            bce: sum(|b| b.bce),
            dice: sum(|b| b.dice),
            cal: sum(|b| b.cal),
            grounding: sum(|b| b.grounding),
            total: sum(|b| b.total),
        }
    }
}

/// Validation summary stored per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub oiou: f64,
    pub miou: f64,
    pub p50: f64,
    pub p70: f64,
    pub p90: f64,
}

impl From<&MetricsReport> for ValMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            oiou: r.oiou,
            miou: r.miou,
            p50: r.precision[0],
            p70: r.precision[1],
            p90: r.precision[2],
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train: Option<LossMeans>,
    pub val: ValMetrics,
}

pub struct TrainOutcome {
    pub trainer: Trainer<f32>,
    pub records: Vec<EpochRecord>,
    pub final_report: MetricsReport,
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Trains in memory. `on_epoch` sees every record as soon as it exists
/// (epoch 0 is the evaluation of the initial parameters).
pub fn train(
    cfg: &ExperimentConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    init: Option<(ParamStore<f32>, usize)>,
    mut on_epoch: impl FnMut(&EpochRecord, &Trainer<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = MagNet::new(cfg.model.clone())?;
    let (params, start) = match init {
        Some((p, e)) => {
            checkpoint::check_compatible(&p, &model.init_params::<f32>(cfg.seed))?;
            (p, e)
        }
        None => (model.init_params::<f32>(cfg.seed), 0),
    };
    let spe = steps_per_epoch(train_set.len(), cfg.train.batch_size);
    let mut trainer = Trainer::new(model, params, &cfg.optim, spe * cfg.train.epochs);
    trainer.step = start * spe;
    let grounding = cfg.model.grounding_enabled;
    let mut records = Vec::new();
    let mut report = evaluate(&trainer.model, &trainer.params, val_set)?;
    if start == 0 {
        let r = EpochRecord {
            epoch: 0,
            step: 0,
            lr: trainer.schedule.lr(0),
            train: None,
            val: ValMetrics::from(&report),
        };
        on_epoch(&r, &trainer)?;
        records.push(r);
    }
    for epoch in start + 1..=cfg.train.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let mut bundles = Vec::with_capacity(spe);
        for idx in order.chunks(cfg.train.batch_size) {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let masked = if grounding {
                Some(mask_batch(cfg.seed, epoch, &samples, cfg.model.grounding.mask_rate)?)
            } else {
                None
            };
            let batch = Batch::from_samples(&samples, masked)?;
            bundles.push(trainer.train_step(&batch)?);
        }
        report = evaluate(&trainer.model, &trainer.params, val_set)?;
        let r = EpochRecord {
            epoch,
            step: trainer.step,
            lr: trainer.schedule.lr(trainer.step),
            train: Some(LossMeans::of(&bundles)),
            val: ValMetrics::from(&report),
        };
        on_epoch(&r, &trainer)?;
        records.push(r);
    }
    Ok(TrainOutcome {
        trainer,
        records,
        final_report: report,
    })
}

pub fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelCard {
    pub seed: u64,
    pub git_revision: String,
    pub checkpoint_version: u32,
    pub dtype: String,
    pub parameters: usize,
    pub epochs_completed: usize,
    pub config: ExperimentConfig,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| MagnetError::io(path, e))
}

fn to_json<S: Serialize>(v: &S) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| MagnetError::Serde(e.to_string()))
}

pub struct RunSummary {
    pub dir: PathBuf,
    pub records: Vec<EpochRecord>,
    pub final_report: MetricsReport,
    pub params: ParamStore<f32>,
    pub model: MagNet,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// Trains and writes `config.json`, `config.toml`, `metrics.jsonl` (one line
/// per epoch, starting with epoch 0), `checkpoint.bin`, `model_card.json`,
/// `report.json`, `report.txt` and `loss_curve.png` into the run directory.
/// With `resume`, an existing run with an identical configuration continues
/// from its checkpoint; any other existing configuration is an error.
pub fn run_train(cfg: &ExperimentConfig, resume: bool) -> Result<RunSummary> {
    cfg.validate()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| MagnetError::io(&dir, e))?;
    let cfg_path = dir.join("config.json");
    let cfg_json = to_json(cfg)?;
    let mut init = None;
    let mut kept_lines = Vec::new();
    if resume && cfg_path.exists() {
        let old = fs::read_to_string(&cfg_path).map_err(|e| MagnetError::io(&cfg_path, e))?;
        let old: ExperimentConfig = serde_json::from_str(&old).map_err(|e| MagnetError::Config(e.to_string()))?;
        if &old != cfg {
            return config_err(format!("cannot resume {}: configuration differs from the stored one", dir.display()));
        }
        let ck = checkpoint::load::<f32>(&dir.join(CHECKPOINT_FILE))?;
        let lines = fs::read_to_string(dir.join("metrics.jsonl")).unwrap_or_default();
        kept_lines = lines.lines().take(ck.header.epoch + 1).map(str::to_string).collect();
        init = Some((ck.params, ck.header.epoch));
    }
    write_file(&cfg_path, cfg_json.as_bytes())?;
    write_file(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let (train_set, val_set) = datasets(cfg)?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).map_err(|e| MagnetError::io(&metrics_path, e))?;
    for l in &kept_lines {
        writeln!(metrics, "{l}").map_err(|e| MagnetError::io(&metrics_path, e))?;
    }
    let outcome = train(cfg, &train_set, &val_set, init, |r, tr| {
        let line = serde_json::to_string(r).map_err(|e| MagnetError::Serde(e.to_string()))?;
        writeln!(metrics, "{line}").map_err(|e| MagnetError::io(&metrics_path, e))?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &tr.params, &cfg.model, r.epoch)
    })?;
    let card = ModelCard {
        seed: cfg.seed,
        git_revision: git_revision(),
        checkpoint_version: checkpoint::FORMAT_VERSION,
        dtype: "f32".into(),
        parameters: outcome.trainer.params.num_scalars(),
        epochs_completed: cfg.train.epochs,
        config: cfg.clone(),
    };
    write_file(&dir.join("model_card.json"), to_json(&card)?.as_bytes())?;
    write_report(&dir, &outcome.final_report)?;
    let mut all_records: Vec<EpochRecord> = kept_lines.iter().filter_map(|l| serde_json::from_str(l).ok()).collect();
    all_records.extend(outcome.records.iter().cloned());
    let curves: Vec<Vec<f64>> = {
        let t: Vec<&LossMeans> = all_records.iter().filter_map(|r| r.train.as_ref()).collect();
        vec![
            t.iter().map(|m| m.total).collect(),
            t.iter().map(|m| m.bce).collect(),
            t.iter().map(|m| m.dice).collect(),
            t.iter().map(|m| m.cal).collect(),
            t.iter().map(|m| m.grounding).collect(),
        ]
    };
    plot::line_chart(&dir.join("loss_curve.png"), &curves, 480, 320)?;
    Ok(RunSummary {
        dir,
        records: all_records,
        final_report: outcome.final_report,
        params: outcome.trainer.params,
        model: outcome.trainer.model,
    })
}

pub fn write_report(dir: &Path, report: &MetricsReport) -> Result<()> {
    write_file(&dir.join("report.json"), to_json(report)?.as_bytes())?;
    write_file(&dir.join("report.txt"), report.to_string().as_bytes())
}

/// Loads a checkpoint and rebuilds its model.
pub fn load_model(path: &Path) -> Result<(MagNet, ParamStore<f32>)> {
    let ck = checkpoint::load::<f32>(path)?;
    let model = MagNet::new(ck.header.model.clone())?;
    checkpoint::check_compatible(&ck.params, &model.init_params::<f32>(0))?;
    Ok((model, ck.params))
}

/// Evaluates a checkpoint on `samples`; writes the report and up to
/// `triptychs` qualitative panels into `out` when given.
pub fn run_eval(
    checkpoint_path: &Path,
    samples: &[Sample],
    out: Option<&Path>,
    triptychs: usize,
) -> Result<MetricsReport> {
    let (model, params) = load_model(checkpoint_path)?;
    let preds = predict(&model, &params, samples)?;
    let report = compute_metrics(&preds, &ground_truth(samples))?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| MagnetError::io(dir, e))?;
        write_report(dir, &report)?;
        let n = triptychs.min(samples.len());
        if n > 0 {
            let tdir = dir.join("triptychs");
            fs::create_dir_all(&tdir).map_err(|e| MagnetError::io(&tdir, e))?;
            for (s, p) in samples.iter().zip(&preds).take(n) {
                plot::triptych(&tdir.join(format!("{:05}.png", s.id)), s, p, 4)?;
            }
        }
    }
    Ok(report)
}

/// Probe of a checkpoint on `samples`; writes `probe.json` and a bar chart
/// (matching, non-matching, gap) into `out` when given.
pub fn run_probe(checkpoint_path: &Path, samples: &[Sample], cfg: &ProbeConfig, out: Option<&Path>) -> Result<ProbeResult> {
    let (model, params) = load_model(checkpoint_path)?;
    let r = probe(&model, &params, samples, cfg)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| MagnetError::io(dir, e))?;
        write_file(&dir.join("probe.json"), to_json(&r)?.as_bytes())?;
        plot::bar_chart(&dir.join("probe.png"), &[vec![r.matching_sim, r.nonmatching_sim, r.gap]], 320, 240)?;
    }
    Ok(r)
}

/// Cells of the component ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Baseline,
    Grounding,
    Cam,
    Cal,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Baseline, Self::Grounding, Self::Cam, Self::Cal, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Grounding => "+mask-grounding",
            Self::Cam => "+cam",
            Self::Cal => "+cal",
            Self::Full => "full",
        }
    }

    /// Switches the three components of `base` according to the variant;
    /// every other setting is kept.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut m = base.clone();
        let (g, c, l) = match self {
            Self::Baseline => (false, false, false),
            Self::Grounding => (true, false, false),
            Self::Cam => (false, true, false),
            Self::Cal => (false, false, true),
            Self::Full => (true, true, true),
        };
        m.grounding_enabled = g;
        m.cam_enabled = c;
        m.losses.cal = if l {
            if base.losses.cal == CalTerms::Off {
                CalTerms::Both
            } else {
                base.losses.cal
            }
        } else {
            CalTerms::Off
        };
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub miou: f64,
    pub oiou: f64,
    pub probe_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub name: String,
    pub seeds: usize,
    pub miou_mean: f64,
    pub miou_std: f64,
    pub oiou_mean: f64,
    pub oiou_std: f64,
    pub probe_gap_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub rows: Vec<AblationRow>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

impl AblationTable {
    pub fn from_cells(mut cells: Vec<AblationCell>) -> Self {
        cells.sort_by(|a, b| (a.variant, a.seed).cmp(&(b.variant, b.seed)));
        let rows = Variant::ALL
            .iter()
            .filter_map(|&v| {
                let c: Vec<&AblationCell> = cells.iter().filter(|c| c.variant == v).collect();
                if c.is_empty() {
                    return None;
                }
                let (mm, ms) = mean_std(&c.iter().map(|c| c.miou).collect::<Vec<_>>());
                let (om, os) = mean_std(&c.iter().map(|c| c.oiou).collect::<Vec<_>>());
                let (gm, _) = mean_std(&c.iter().map(|c| c.probe_gap).collect::<Vec<_>>());
                Some(AblationRow {
                    variant: v,
                    name: v.name().to_string(),
                    seeds: c.len(),
                    miou_mean: mm,
                    miou_std: ms,
                    oiou_mean: om,
                    oiou_std: os,
                    probe_gap_mean: gm,
                })
            })
            .collect();
        Self { cells, rows }
    }

    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<18} {:>5} {:>17} {:>17} {:>10}\n",
            "variant", "seeds", "mIoU", "oIoU", "probe gap"
        );
        for r in &self.rows {
            s += &format!(
                "{:<18} {:>5} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4} {:>10.4}\n",
                r.name, r.seeds, r.miou_mean, r.miou_std, r.oiou_mean, r.oiou_std, r.probe_gap_mean
            );
        }
        s
    }
}

/// Trains one cell in memory and measures it.
pub fn run_cell(
    base: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    train_set: &[Sample],
    val_set: &[Sample],
) -> Result<AblationCell> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.model = variant.apply(&base.model);
    let out = train(&cfg, train_set, val_set, None, |_, _| Ok(()))?;
    let p = probe(&out.trainer.model, &out.trainer.params, val_set, &cfg.probe)?;
    Ok(AblationCell {
        variant,
        seed,
        miou: out.final_report.miou,
        oiou: out.final_report.oiou,
        probe_gap: p.gap,
    })
}

/// Runs `variants x seeds` cells (in that order) and writes
/// `ablation.json`, `ablation.txt` and `ablation.png` into the output
/// directory of `base`.
pub fn run_ablation(base: &ExperimentConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    base.validate()?;
    if seeds.is_empty() || variants.is_empty() {
        return config_err("ablation needs at least one variant and one seed");
    }
    let (train_set, val_set) = datasets(base)?;
    let mut cells = Vec::with_capacity(variants.len() * seeds.len());
    for &v in variants {
        for &s in seeds {
            cells.push(run_cell(base, v, s, &train_set, &val_set)?);
        }
    }
    let table = AblationTable::from_cells(cells);
    let dir = &base.out_dir;
    fs::create_dir_all(dir).map_err(|e| MagnetError::io(dir, e))?;
    write_file(&dir.join("ablation.json"), to_json(&table)?.as_bytes())?;
    write_file(&dir.join("ablation.txt"), table.to_text().as_bytes())?;
    let bars: Vec<Vec<f64>> = table.rows.iter().map(|r| vec![r.miou_mean, r.oiou_mean]).collect();
    plot::bar_chart(&dir.join("ablation.png"), &bars, 480, 320)?;
    Ok(table)
}
