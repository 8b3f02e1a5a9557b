//! End-to-end runs of the CLI commands: synth → preprocess → train →
//! evaluate → ablate, plus provenance and reproducibility contracts.

use std::path::{Path, PathBuf};

use fgnn::cli::{
    cmd_ablate, cmd_evaluate, cmd_preprocess, cmd_synth, cmd_train, AblateArgs, EvaluateArgs,
    PreprocessArgs, SynthArgs, TrainArgs,
};
use fgnn::error::FgnnError;

fn synth_args(out: PathBuf) -> SynthArgs {
    SynthArgs {
        items: 30,
        sessions: 250,
        min_len: 3,
        max_len: 8,
        concentration: 0.1,
        seed: 21,
        out,
    }
}

fn preprocess_args(input: PathBuf, out: PathBuf) -> PreprocessArgs {
    PreprocessArgs {
        input,
        format: "canonical".into(),
        test_fraction: 0.2,
        train_recency_fraction: 1.0,
        min_item_support: 5,
        min_session_len: 2,
        out,
    }
}

fn train_args(data: PathBuf, out: PathBuf) -> TrainArgs {
    TrainArgs {
        data,
        out,
        config: None,
        seed: Some(5),
        epochs: Some(2),
        lr: None,
        batch_size: Some(32),
        l2: None,
        embed_dim: Some(12),
        layers: Some(1),
        heads: Some(2),
        readout_steps: Some(2),
        readout: None,
        combine: None,
        schedule: Some("linear".into()),
        eval_each_epoch: false,
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn full_pipeline_produces_consistent_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let synth_dir = root.path().join("synth");
    let data_dir = root.path().join("data");
    let train_dir = root.path().join("run");
    let eval_dir = root.path().join("eval");

    cmd_synth(&synth_args(synth_dir.clone())).unwrap();
    let corpus = synth_dir.join("corpus.csv");
    assert!(read(&corpus).starts_with("session_id,timestamp_ms,item_id\n"));
    assert!(read(&synth_dir.join("config.echo")).contains("seed = 21"));

    cmd_preprocess(&preprocess_args(corpus.clone(), data_dir.clone())).unwrap();
    for file in [
        "manifest.json",
        "train.txt",
        "test.txt",
        "train_sessions.txt",
        "test_sessions.txt",
        "config.echo",
    ] {
        assert!(data_dir.join(file).exists(), "{file} missing");
    }
    // Example lines are `prefix items TAB label`.
    let first_line = read(&data_dir.join("train.txt"))
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert!(first_line.contains('\t'));

    // Rerun into a second directory: byte-identical outputs.
    let data_dir2 = root.path().join("data2");
    cmd_preprocess(&preprocess_args(corpus, data_dir2.clone())).unwrap();
    for file in ["manifest.json", "train.txt", "test.txt"] {
        assert_eq!(
            std::fs::read(data_dir.join(file)).unwrap(),
            std::fs::read(data_dir2.join(file)).unwrap(),
            "{file} differs between reruns"
        );
    }

    cmd_train(&train_args(data_dir.clone(), train_dir.clone())).unwrap();
    assert!(train_dir.join("checkpoint.fgnn").exists());
    let log = read(&train_dir.join("epochs.jsonl"));
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().all(|line| line.contains("\"loss_sum\"")));

    // Training twice with the same inputs gives identical logs.
    let train_dir2 = root.path().join("run2");
    cmd_train(&train_args(data_dir.clone(), train_dir2.clone())).unwrap();
    assert_eq!(
        read(&train_dir.join("epochs.jsonl")),
        read(&train_dir2.join("epochs.jsonl"))
    );

    cmd_evaluate(&EvaluateArgs {
        checkpoint: train_dir.join("checkpoint.fgnn"),
        data: data_dir.clone(),
        ks: "5,10,20".into(),
        knn_lambda: 20.0,
        exclude_seen: false,
        out: eval_dir.clone(),
    })
    .unwrap();
    let table = read(&eval_dir.join("report.txt"));
    for method in ["fgnn", "pop", "s-pop", "item-knn"] {
        assert!(table.contains(method), "missing {method} in:\n{table}");
    }
    for column in ["R@5", "MRR@5", "R@10", "MRR@10", "R@20", "MRR@20"] {
        assert!(table.contains(column), "missing {column}");
    }
    let jsonl = read(&eval_dir.join("report.jsonl"));
    assert_eq!(jsonl.lines().count(), 12, "4 methods x 3 Ks");

    // Ablation over two variants emits one table row per group.
    let ablate_dir = root.path().join("ablate");
    cmd_ablate(&AblateArgs {
        data: data_dir,
        variants: "set2set,mean".into(),
        config: None,
        seed: Some(5),
        epochs: Some(1),
        out: ablate_dir.clone(),
    })
    .unwrap();
    let ablation = read(&ablate_dir.join("ablation.txt"));
    assert!(ablation.contains("set2set"));
    assert!(ablation.contains("mean"));
    let jsonl = read(&ablate_dir.join("ablation.jsonl"));
    assert!(jsonl.contains("\"group\":\"overall\""));
    assert!(jsonl.contains("\"group\":\"short\""));
}

#[test]
fn default_config_echo_carries_the_reference_hyperparameters() {
    let root = tempfile::tempdir().unwrap();
    let synth_dir = root.path().join("synth");
    let data_dir = root.path().join("data");
    cmd_synth(&synth_args(synth_dir.clone())).unwrap();
    cmd_preprocess(&preprocess_args(
        synth_dir.join("corpus.csv"),
        data_dir.clone(),
    ))
    .unwrap();

    // epochs=0 writes an initialized checkpoint and a full echo of the
    // defaults without taking any steps.
    let out = root.path().join("run");
    let args = TrainArgs {
        data: data_dir,
        out: out.clone(),
        config: None,
        seed: None,
        epochs: Some(0),
        lr: None,
        batch_size: None,
        l2: None,
        embed_dim: None,
        layers: None,
        heads: None,
        readout_steps: None,
        readout: None,
        combine: None,
        schedule: None,
        eval_each_epoch: false,
    };
    cmd_train(&args).unwrap();
    assert!(out.join("checkpoint.fgnn").exists());
    assert_eq!(read(&out.join("epochs.jsonl")), "");

    let echo = read(&out.join("config.echo"));
    let value = |key: &str| -> String {
        echo.lines()
            .find_map(|line| line.strip_prefix(&format!("{key} = ")))
            .unwrap_or_else(|| panic!("{key} missing from echo:\n{echo}"))
            .to_string()
    };
    assert_eq!(value("lr").parse::<f64>().unwrap(), 1e-3);
    assert_eq!(value("batch_size").parse::<usize>().unwrap(), 100);
    assert_eq!(value("l2").parse::<f64>().unwrap(), 1e-5);
    assert_eq!(value("layers").parse::<usize>().unwrap(), 3);
    assert_eq!(value("heads").parse::<usize>().unwrap(), 8);
    assert_eq!(value("readout_steps").parse::<usize>().unwrap(), 3);
    assert_eq!(value("embed_dim").parse::<usize>().unwrap(), 100);
    assert_eq!(value("decay_factor").parse::<f64>().unwrap(), 0.1);
    assert_eq!(value("decay_every_epochs").parse::<usize>().unwrap(), 3);
    assert_eq!(value("schedule"), "step");
    assert_eq!(value("readout"), "set2set");
    assert_eq!(value("combine"), "mean");
}

#[test]
fn config_file_applies_and_flags_override() {
    let root = tempfile::tempdir().unwrap();
    let synth_dir = root.path().join("synth");
    let data_dir = root.path().join("data");
    cmd_synth(&synth_args(synth_dir.clone())).unwrap();
    cmd_preprocess(&preprocess_args(
        synth_dir.join("corpus.csv"),
        data_dir.clone(),
    ))
    .unwrap();

    let config_path = root.path().join("run.conf");
    std::fs::write(
        &config_path,
        "epochs = 1\nbatch_size = 16\nembed_dim = 10\nlayers = 1\nheads = 2\nreadout_steps = 2\nseed = 9\n",
    )
    .unwrap();
    let mut args = train_args(data_dir, root.path().join("run"));
    args.config = Some(config_path);
    args.epochs = None;
    args.seed = None;
    args.batch_size = Some(8); // flag overrides the file
    args.embed_dim = None;
    args.layers = None;
    args.heads = None;
    args.readout_steps = None;
    args.schedule = None;
    cmd_train(&args).unwrap();
    let echo = read(&root.path().join("run").join("config.echo"));
    assert!(echo.contains("batch_size = 8"));
    assert!(echo.contains("embed_dim = 10"));
    assert!(echo.contains("seed = 9"));
}

#[test]
fn usage_and_data_errors_map_to_exit_codes() {
    let root = tempfile::tempdir().unwrap();

    // Unknown format tag → usage error → exit code 2.
    let bad_format = PreprocessArgs {
        input: root.path().join("missing.csv"),
        format: "mystery".into(),
        test_fraction: 0.2,
        train_recency_fraction: 1.0,
        min_item_support: 5,
        min_session_len: 2,
        out: root.path().join("out"),
    };
    let error = cmd_preprocess(&bad_format).unwrap_err();
    assert!(matches!(error, FgnnError::Usage(_)));
    assert_eq!(error.exit_code(), 2);

    // Missing input file → data error → exit code 3.
    let missing = PreprocessArgs {
        format: "canonical".into(),
        ..bad_format
    };
    let error = cmd_preprocess(&missing).unwrap_err();
    assert_eq!(error.exit_code(), 3);

    // Missing checkpoint for evaluate → data error.
    let error = cmd_evaluate(&EvaluateArgs {
        checkpoint: root.path().join("none.ckpt"),
        data: root.path().join("none"),
        ks: "5".into(),
        knn_lambda: 20.0,
        exclude_seen: false,
        out: root.path().join("eval"),
    })
    .unwrap_err();
    assert_eq!(error.exit_code(), 3);
}
