//! Run directories, resumption, evaluation artifacts and the ablation runner.

use std::fs;
use std::path::Path;

use magnet::checkpoint;
use magnet::config::ExperimentConfig;
use magnet::harness::{self, EpochRecord, ModelCard, Variant};
use magnet::metrics::compute_metrics;
use magnet::MagnetError;

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = dir.to_path_buf();
    cfg.data.train_count = 16;
    cfg.data.val_count = 8;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 8;
    cfg
}

fn records(dir: &Path) -> Vec<EpochRecord> {
    fs::read_to_string(dir.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn identical_configs_write_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run_train(&tiny(a.path()), false).unwrap();
    harness::run_train(&tiny(b.path()), false).unwrap();
    let read = |d: &Path| fs::read(d.join("metrics.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let recs = records(a.path());
    assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(recs[2].step, 4);
    for f in ["config.json", "config.toml", "checkpoint.bin", "model_card.json", "report.json", "report.txt", "loss_curve.png"] {
        assert!(a.path().join(f).exists(), "{f}");
    }
}

#[test]
fn run_directory_describes_itself() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny(d.path());
    cfg.seed = 11;
    cfg.train.epochs = 1;
    harness::run_train(&cfg, false).unwrap();
    let card: ModelCard = serde_json::from_str(&fs::read_to_string(d.path().join("model_card.json")).unwrap()).unwrap();
    assert_eq!(card.seed, 11);
    assert_eq!(card.config, cfg);
    assert!(!card.git_revision.is_empty());
    assert_eq!(ExperimentConfig::load(&d.path().join("config.toml")).unwrap(), cfg);
}

#[test]
fn zero_epochs_only_evaluates() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny(d.path());
    cfg.train.epochs = 0;
    let run = harness::run_train(&cfg, false).unwrap();
    let recs = records(d.path());
    assert_eq!(recs.len(), 1);
    assert!(recs[0].train.is_none());
    assert_eq!(recs[0].val.miou, run.final_report.miou);
    let ck = checkpoint::load::<f32>(&d.path().join(harness::CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.header.epoch, 0);
}

#[test]
fn resume_continues_from_the_checkpoint() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny(d.path());
    // an interrupted run: the epoch-1 state of a 2-epoch run on disk
    let (train_set, val_set) = harness::datasets(&cfg).unwrap();
    let mut lines = Vec::new();
    let stop = harness::train(&cfg, &train_set, &val_set, None, |r, t| {
        lines.push(serde_json::to_string(r).unwrap());
        checkpoint::save(&d.path().join(harness::CHECKPOINT_FILE), &t.params, &cfg.model, r.epoch)?;
        if r.epoch == 1 {
            return Err(MagnetError::Input("interrupted".into()));
        }
        Ok(())
    });
    assert!(stop.is_err());
    fs::write(d.path().join("config.json"), serde_json::to_string(&cfg).unwrap()).unwrap();
    fs::write(d.path().join("metrics.jsonl"), lines.join("\n") + "\n").unwrap();

    let run = harness::run_train(&cfg, true).unwrap();
    let text = fs::read_to_string(d.path().join("metrics.jsonl")).unwrap();
    let kept: Vec<&str> = text.lines().take(2).collect();
    assert_eq!(kept, lines.iter().map(String::as_str).collect::<Vec<_>>());
    let recs = records(d.path());
    assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert_eq!(recs[2].step, 4);
    assert_eq!(run.records.len(), 3);

    let mut other = cfg.clone();
    other.seed = 99;
    assert!(matches!(harness::run_train(&other, true), Err(MagnetError::Config(_))));
}

#[test]
fn evaluation_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny(d.path());
    cfg.train.epochs = 0;
    harness::run_train(&cfg, false).unwrap();
    let ck = d.path().join(harness::CHECKPOINT_FILE);
    let (_, val) = harness::datasets(&cfg).unwrap();
    let out = d.path().join("eval");
    let a = harness::run_eval(&ck, &val, Some(&out), 3).unwrap();
    let b = harness::run_eval(&ck, &val, None, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(fs::read_dir(out.join("triptychs")).unwrap().count(), 3);
    let few = d.path().join("few");
    harness::run_eval(&ck, &val[..2], Some(&few), 5).unwrap();
    assert_eq!(fs::read_dir(few.join("triptychs")).unwrap().count(), 2);
    assert!(out.join("report.json").exists());

    let gt = harness::ground_truth(&val);
    let perfect = compute_metrics(&gt, &gt).unwrap();
    assert_eq!((perfect.oiou, perfect.miou, perfect.precision), (1.0, 1.0, [1.0; 3]));
}

#[test]
fn ablation_matrix_has_one_cell_per_variant_and_seed() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny(d.path());
    cfg.train.epochs = 0;
    cfg.data.val_count = 64;
    let table = harness::run_ablation(&cfg, &[Variant::Full, Variant::Baseline], &[2, 1]).unwrap();
    assert_eq!(table.cells.len(), 4);
    let keys: Vec<(Variant, u64)> = table.cells.iter().map(|c| (c.variant, c.seed)).collect();
    assert_eq!(
        keys,
        vec![(Variant::Baseline, 1), (Variant::Baseline, 2), (Variant::Full, 1), (Variant::Full, 2)]
    );
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.rows[0].variant, Variant::Baseline);
    for f in ["ablation.json", "ablation.txt", "ablation.png"] {
        assert!(d.path().join(f).exists(), "{f}");
    }
    // cells own their streams: a cell alone equals the same cell in the matrix
    let (train_set, val_set) = harness::datasets(&cfg).unwrap();
    let alone = harness::run_cell(&cfg, Variant::Full, 2, &train_set, &val_set).unwrap();
    assert_eq!(&alone, table.cells.iter().find(|c| c.variant == Variant::Full && c.seed == 2).unwrap());
}
