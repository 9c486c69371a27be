use std::path::Path;

use mixcl_core::model::load_checkpoint;
use mixcl_core::metrics::MetricsReport;
use mixcl_core::pipeline::{run_ablation_matrix, run_pipeline, tabulate_ablation, PipelineConfig, Stage};
use mixcl_core::synth::{generate, write_world, SynthConfig};
use mixcl_core::training::AblationFlags;
use mixcl_core::Error;

/// A tiny model on a small synthetic world, all paths under `dir`.
fn small_config(dir: &Path) -> PipelineConfig {
    let world = generate(&SynthConfig {
        n_dialogues: 60,
        ..Default::default()
    })
    .unwrap();
    write_world(&dir.join("data"), &world).unwrap();
    let mut c = PipelineConfig::default();
    c.paths.corpus = dir.join("data/corpus.jsonl");
    c.paths.train_dialogues = dir.join("data/train.jsonl");
    c.paths.test_dialogues = dir.join("data/test.jsonl");
    c.paths.index = dir.join("out/index.mixcl");
    c.paths.negatives = dir.join("out/negatives.jsonl");
    c.paths.checkpoint = dir.join("out/model.ckpt");
    c.paths.train_log = dir.join("out/train_log.jsonl");
    c.paths.predictions = dir.join("out/predictions.jsonl");
    c.paths.report = dir.join("out/report.json");
    c.model.d_model = 8;
    c.model.n_heads = 2;
    c.model.n_enc_layers = 1;
    c.model.n_dec_layers = 1;
    c.model.d_ff = 16;
    c.train.epochs = 1;
    c.train.batch_size = 8;
    c.train.learning_rate = 1e-3;
    c.train.refresh_samples = 1;
    c.train.validation_limit = 4;
    c.train.max_decode_len = 8;
    c
}

fn first_line(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

#[test]
fn index_and_mine_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = run_pipeline(&cfg, &[Stage::Mine, Stage::Index]).unwrap();
    let stages: Vec<Stage> = out.artifacts.iter().map(|(s, _)| *s).collect();
    assert_eq!(stages, vec![Stage::Index, Stage::Mine]);
    assert!(cfg.paths.index.exists() && cfg.paths.negatives.exists());
    let header = first_line(&cfg.paths.negatives);
    assert_eq!(header["provenance"]["config_hash"], cfg.hash());
    assert_eq!(header["provenance"]["seed"], cfg.seed());
}

#[test]
fn missing_artifacts_name_the_stage_to_run_first() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    match run_pipeline(&cfg, &[Stage::Decode]) {
        Err(Error::MissingDependency { stage, run_first, .. }) => assert_eq!((stage, run_first), ("decode", "train")),
        other => panic!("{other:?}"),
    }
    match run_pipeline(&cfg, &[Stage::Mine]) {
        Err(e @ Error::MissingDependency { .. }) => {
            assert_eq!(e.exit_code(), 3);
            assert!(e.to_string().contains("index"));
        }
        other => panic!("{other:?}"),
    }
    assert!(matches!(run_pipeline(&cfg, &[Stage::Eval]), Err(Error::MissingDependency { run_first: "decode", .. })));
}

#[test]
fn end_to_end_is_deterministic_and_stamped() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let files = [
        &cfg.paths.index,
        &cfg.paths.negatives,
        &cfg.paths.checkpoint,
        &cfg.paths.train_log,
        &cfg.paths.predictions,
        &cfg.paths.report,
    ];
    let first = run_pipeline(&cfg, &Stage::ALL).unwrap();
    assert!(first.report.is_some());
    let bytes: Vec<Vec<u8>> = files.iter().map(|p| std::fs::read(p).unwrap()).collect();
    run_pipeline(&cfg, &Stage::ALL).unwrap();
    for (p, b) in files.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(p).unwrap(), b, "{} differs between runs", p.display());
    }

    let hash = cfg.hash();
    for p in [&cfg.paths.negatives, &cfg.paths.train_log, &cfg.paths.predictions] {
        assert_eq!(first_line(p)["provenance"]["config_hash"], hash, "{}", p.display());
    }
    let index_text = std::fs::read_to_string(&cfg.paths.index).unwrap();
    let index_header: serde_json::Value = serde_json::from_str(index_text.lines().nth(1).unwrap()).unwrap();
    assert_eq!(index_header["config_hash"], hash);
    let (ckpt, _) = load_checkpoint(&cfg.paths.checkpoint).unwrap();
    assert_eq!(ckpt.provenance["config_hash"], hash);
    assert_eq!(ckpt.optimizer, "adamw(wd=0)");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg.paths.report).unwrap()).unwrap();
    assert_eq!(report["provenance"]["config_hash"], hash);
    assert!(report["metrics"]["kf1"].is_number());
    assert!(cfg.paths.report.with_extension("txt").exists());
}

#[test]
fn ablation_matrix_rows_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert!(matches!(run_ablation_matrix(&cfg, &[]), Err(Error::InvalidArgument(_))));
    run_pipeline(&cfg, &[Stage::Index, Stage::Mine]).unwrap();
    let table = run_ablation_matrix(&cfg, &[AblationFlags::parse("mle_only").unwrap()]).unwrap();
    assert_eq!(table.variants.len(), 1);
    assert_eq!(table.variants[0].variant, "mle_only");
    let deltas = table.deltas(&table.variants[0]);
    assert!((deltas[2].unwrap() - (table.variants[0].kf1.unwrap() - table.base.kf1.unwrap())).abs() < 1e-12);
    let rendered = table.to_string();
    assert!(rendered.contains("-mle_only"));
}

#[test]
fn ablation_failures_stay_in_their_row() {
    let report = MetricsReport {
        f1: 0.5,
        rouge_l: 0.5,
        bleu2: 0.2,
        bleu4: 0.1,
        kf1: 0.4,
        ef1: 0.3,
        acc: None,
        n_examples: 10,
    };
    let variants = ["disable_mcl", "mle_only"].map(|v| AblationFlags::parse(v).unwrap());
    let table = tabulate_ablation(&variants, |flags| {
        if flags.mle_only {
            Err(Error::NonFinite { term: "J", step: 3 })
        } else {
            Ok(report.clone())
        }
    })
    .unwrap();
    assert_eq!(table.base.kf1, Some(40.0));
    assert!(table.variants[0].error.is_none());
    assert_eq!(table.deltas(&table.variants[0]), [Some(0.0), Some(0.0), Some(0.0)]);
    assert!(table.variants[1].error.as_ref().unwrap().contains("J"));
    assert_eq!(table.deltas(&table.variants[1]), [None, None, None]);
    assert!(table.to_string().lines().last().unwrap().contains("failed"));
}

#[test]
fn config_file_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mixcl.toml");
    std::fs::write(&path, "epochs = 2\nseed = 5\nbeta_neg = 0.25\n").unwrap();
    let cfg = PipelineConfig::load(Some(&path)).unwrap();
    assert_eq!((cfg.train.epochs, cfg.train.beta_neg), (2, 0.25));
    std::fs::write(&path, "epochs = 0\n").unwrap();
    let err = PipelineConfig::load(Some(&path)).unwrap_err();
    assert_eq!(err.exit_code(), 2);

    std::fs::write(&path, "seed = 5\n").unwrap();
    std::env::set_var("MIXCL_SEED", "77");
    let overridden = PipelineConfig::load(Some(&path));
    std::env::set_var("MIXCL_SEED", "not-a-number");
    let bad = PipelineConfig::load(Some(&path));
    std::env::remove_var("MIXCL_SEED");
    assert_eq!(overridden.unwrap().seed(), 77);
    assert_eq!(bad.unwrap_err().exit_code(), 2);
}
