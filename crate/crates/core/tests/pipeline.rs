use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use signet_core::config::{RunConfig, Stage};
use signet_core::dataset::{
    generate_synthetic, load_index, write_dataset, SplitTag, SyntheticSpec,
};
use signet_core::losses::Formulation;
use signet_core::nn::Network;
use signet_core::pipeline::{
    cnn_set, cnn_split, cnn_stage, lambda_sweep, mean_stdev, processed_lookup, processed_stage,
    run_pipeline, CnnPaths, RunOptions,
};
use signet_core::training::{init_parameters, train, write_training_checkpoint, OptimizerState};
use signet_core::Error;

fn dataset(root: &Path) -> std::path::PathBuf {
    let samples = generate_synthetic(8, 10, 4, &SyntheticSpec::default(), 3).unwrap();
    write_dataset(root, "syn", &samples).unwrap();
    root.join("syn")
}

fn small_config(data: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_text(
        "dataset.exploitation_users=3
         dataset.validation_users=2
         dataset.references=3
         preprocess.canvas=200x300
         network.conv=4,8,8,8,4
         network.fc=32,32
         training.batch_size=16
         training.epochs=3
         loss.formulation=multitask_L2
         loss.lambda=0.95
         eval.replications=2",
    )
    .unwrap();
    cfg.dataset.path = data.to_path_buf();
    cfg
}

fn quiet() -> RunOptions {
    RunOptions::default()
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&dataset(tmp.path()));
    let index = load_index(&cfg.dataset.path).unwrap();
    let records = processed_stage(&cfg, &index, &tmp.path().join("p.sgpi"), &quiet()).unwrap();
    let split = cnn_split(&cfg, &index).unwrap();
    let set = cnn_set(
        &split,
        &processed_lookup(&records),
        SplitTag::Lc,
        &cfg.training.loss,
    )
    .unwrap();

    let full = tmp.path().join("full");
    std::fs::create_dir_all(&full).unwrap();
    cnn_stage(&cfg, &set, &CnnPaths::in_dir(&full), &quiet()).unwrap();

    // A run that stopped after its first epoch, leaving a stale extra row.
    let resumed = tmp.path().join("resumed");
    std::fs::create_dir_all(&resumed).unwrap();
    let paths = CnnPaths::in_dir(&resumed);
    let mut one = cfg.training.clone();
    one.epochs = 1;
    let mut net = Network::new(cfg.architecture(set.num_users).unwrap()).unwrap();
    init_parameters(&mut net, cfg.training.seed, cfg.training.head_init_std).unwrap();
    let mut state = OptimizerState::new(&net);
    let mut rows = Vec::new();
    train(
        &mut net,
        &set,
        &one,
        &cfg.preprocess,
        &mut state,
        |m, _, _| {
            rows.push(m.csv_row());
            Ok(())
        },
    )
    .unwrap();
    let mut w = BufWriter::new(File::create(&paths.partial_checkpoint).unwrap());
    write_training_checkpoint(&mut w, &net, &state, cfg.hash(Stage::Cnn)).unwrap();
    w.flush().unwrap();
    drop(w);
    std::fs::write(
        &paths.metrics,
        format!(
            "epoch,loss,user_acc,forgery_acc,lr\n{}\n9,0,0,0,0\n",
            rows[0]
        ),
    )
    .unwrap();
    cnn_stage(&cfg, &set, &paths, &quiet()).unwrap();

    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&full, "cnn.sgnt"), read(&resumed, "cnn.sgnt"));
    assert_eq!(
        read(&full, "train_metrics.csv"),
        read(&resumed, "train_metrics.csv")
    );
    assert!(!paths.partial_checkpoint.exists());
    let metrics = String::from_utf8(read(&full, "train_metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
}

#[test]
fn pipeline_is_deterministic_cached_and_hash_checked() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(&dataset(tmp.path()));
    let a = tmp.path().join("a");
    let record = run_pipeline(&cfg, &a, &quiet()).unwrap();
    let first = std::fs::read(a.join("record.json")).unwrap();

    assert_eq!(record.replications.len(), 2);
    let exp = record.exploitation.as_ref().unwrap();
    let eers: Vec<f64> = record
        .replications
        .iter()
        .map(|r| r.exploitation.as_ref().unwrap().eer_user)
        .collect();
    let (mean, stdev) = mean_stdev(&eers);
    assert_eq!(exp.mean.eer_user, mean);
    assert_eq!(exp.stdev.eer_user, stdev);
    assert!(record.validation.is_some());
    for r in &record.replications {
        let v = r.validation.as_ref().unwrap();
        assert_eq!(v.threshold, v.eer_global_threshold);
        assert_eq!(r.threshold, v.eer_global_threshold);
    }

    // Cached rerun and a fresh directory give the same bytes.
    run_pipeline(&cfg, &a, &quiet()).unwrap();
    assert_eq!(std::fs::read(a.join("record.json")).unwrap(), first);
    let b = tmp.path().join("b");
    run_pipeline(&cfg, &b, &quiet()).unwrap();
    assert_eq!(std::fs::read(b.join("record.json")).unwrap(), first);

    // Artifacts of another config are refused unless forced.
    let mut other = cfg.clone();
    other.wd.c_minus = 2.0;
    match run_pipeline(&other, &a, &quiet()) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "train-wd");
            assert!(matches!(*source, Error::ConfigMismatch { .. }), "{source}");
        }
        r => panic!("expected a config mismatch, got {:?}", r.map(|_| ())),
    }
    let forced = RunOptions {
        force: true,
        ..quiet()
    };
    run_pipeline(&other, &a, &forced).unwrap();
}

#[test]
fn l1_at_lambda_zero_equals_genuine_only() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dataset(tmp.path()));
    cfg.eval.replications = 1;
    cfg.training.loss.formulation = Formulation::MultitaskL1;
    cfg.training.loss.lambda = 0.0;
    let l1 = run_pipeline(&cfg, &tmp.path().join("l1"), &quiet()).unwrap();
    cfg.training.loss.formulation = Formulation::GenuineOnly;
    let genuine = run_pipeline(&cfg, &tmp.path().join("g"), &quiet()).unwrap();
    assert_eq!(l1.replications, genuine.replications);
    assert_eq!(l1.exploitation, genuine.exploitation);
}

#[test]
fn lambda_sweep_rows_follow_the_list() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(&dataset(tmp.path()));
    cfg.eval.replications = 1;
    cfg.training.epochs = 1;
    let lambdas = [0.5, 0.0];
    let rows = lambda_sweep(
        &cfg,
        Formulation::MultitaskL1,
        &lambdas,
        &tmp.path().join("sweep"),
        &quiet(),
    )
    .unwrap();
    assert_eq!(rows.iter().map(|r| r.lambda).collect::<Vec<_>>(), lambdas);
    assert!(tmp.path().join("sweep/processed.sgpi").exists());

    cfg.dataset.validation_users = 0;
    assert!(matches!(
        lambda_sweep(
            &cfg,
            Formulation::MultitaskL1,
            &lambdas,
            &tmp.path().join("s2"),
            &quiet()
        ),
        Err(Error::Config(_))
    ));
}
