use std::path::Path;
use std::process::{Command, Output};

fn signet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signet"))
        .current_dir(dir)
        .env_remove("SIGNET_JOBS")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = signet(dir, args);
    assert!(
        out.status.success(),
        "signet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = "dataset.path=data/synthetic
dataset.exploitation_users=3
dataset.validation_users=2
dataset.references=3
preprocess.canvas=200x300
network.conv=4,8,8,8,4
network.fc=32,32
training.batch_size=16
training.epochs=2
loss.formulation=multitask_L2
loss.lambda=0.95
eval.replications=2
";

fn workspace() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        tmp.path(),
        &[
            "gen-synthetic",
            "--users",
            "8",
            "--genuine",
            "10",
            "--forgeries",
            "4",
            "--seed",
            "7",
            "--out",
            "data",
        ],
    );
    std::fs::write(tmp.path().join("cfg.txt"), CONFIG).unwrap();
    tmp
}

#[test]
fn pipeline_and_report_are_reproducible() {
    let tmp = workspace();
    let d = tmp.path();
    let table = ok(
        d,
        &["-q", "pipeline", "--config", "cfg.txt", "--work", "w1"],
    );
    assert!(
        table.contains("exploitation") && table.contains("validation"),
        "{table}"
    );
    assert!(table.contains("(+- "));
    let again = ok(
        d,
        &[
            "-q", "--jobs", "2", "pipeline", "--config", "cfg.txt", "--work", "w2",
        ],
    );
    assert_eq!(table, again);
    assert_eq!(
        std::fs::read(d.join("w1/record.json")).unwrap(),
        std::fs::read(d.join("w2/record.json")).unwrap()
    );

    let rendered = ok(
        d,
        &[
            "report",
            "--record",
            "w1/record.json",
            "--json",
            "copy.json",
        ],
    );
    assert_eq!(rendered, table);
    assert_eq!(
        std::fs::read(d.join("copy.json")).unwrap(),
        std::fs::read(d.join("w1/record.json")).unwrap()
    );
    ok(
        d,
        &[
            "report",
            "--record",
            "w1/record.json",
            "--scores",
            "w1/rep_00/scores_exploitation.csv",
            "--roc",
            "roc.csv",
        ],
    );
    let roc = std::fs::read_to_string(d.join("roc.csv")).unwrap();
    assert!(roc.starts_with("threshold,frr,far_skilled\n") && roc.lines().count() > 2);

    // Same work directory, different SVM settings: refused without --force.
    let out = signet(
        d,
        &[
            "-q",
            "pipeline",
            "--config",
            "cfg.txt",
            "--set",
            "wd.c_minus=4",
            "--work",
            "w1",
        ],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("stage `train-wd` failed") && err.contains("expected"),
        "{err}"
    );
    ok(
        d,
        &[
            "-q",
            "--force",
            "pipeline",
            "--config",
            "cfg.txt",
            "--set",
            "wd.c_minus=4",
            "--work",
            "w1",
        ],
    );
}

#[test]
fn stage_commands_chain() {
    let tmp = workspace();
    let d = tmp.path();
    ok(
        d,
        &[
            "-q",
            "preprocess",
            "--config",
            "cfg.txt",
            "--out",
            "pre",
            "--resize",
            "170x242",
            "--crop",
            "150x220",
        ],
    );
    assert!(d.join("pre/u0003/u0003_g_02.png").exists());
    assert!(d.join("pre/u0003/u0003_f_01.sgtn").exists());
    assert!(d.join("pre/processed.sgpi").exists());

    ok(
        d,
        &[
            "-q",
            "train-cnn",
            "--config",
            "cfg.txt",
            "--out",
            "ck/cnn.sgnt",
            "--seed",
            "5",
        ],
    );
    let metrics = std::fs::read_to_string(d.join("ck/cnn.metrics.csv")).unwrap();
    assert_eq!(
        metrics.lines().next(),
        Some("epoch,loss,user_acc,forgery_acc,lr")
    );
    assert_eq!(metrics.lines().count(), 3);

    ok(
        d,
        &[
            "-q",
            "extract",
            "--config",
            "cfg.txt",
            "--checkpoint",
            "ck/cnn.sgnt",
            "--out",
            "feat.sgfv",
        ],
    );
    for u in 0..8 {
        let out = format!("models/u{u:04}.sgwd");
        ok(
            d,
            &[
                "-q",
                "train-wd",
                "--features",
                "feat.sgfv",
                "--user",
                &u.to_string(),
                "--refs",
                "3",
                "--out",
                &out,
            ],
        );
    }
    let out = signet(
        d,
        &[
            "score",
            "--features",
            "feat.sgfv",
            "--models",
            "missing",
            "--refs",
            "3",
            "--out",
            "s.csv",
        ],
    );
    assert!(!out.status.success());
    ok(
        d,
        &[
            "-q",
            "score",
            "--features",
            "feat.sgfv",
            "--models",
            "models",
            "--refs",
            "3",
            "--out",
            "s.csv",
        ],
    );
    let scores = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(scores.starts_with("# config_hash="));
    // 8 users: 7 test genuine + 4 skilled + 7 random each.
    assert_eq!(scores.lines().count(), 2 + 8 * 18);

    let summary = ok(d, &["evaluate", "--scores", "s.csv", "--report", "r.json"]);
    assert!(summary.contains("EER_user"));
    let report = std::fs::read_to_string(d.join("r.json")).unwrap();
    assert!(report.contains("\"percent\"") && report.contains("\"raw\""));
}

#[test]
fn lambda_sweep_emits_one_row_per_lambda() {
    let tmp = workspace();
    let d = tmp.path();
    let csv = ok(
        d,
        &[
            "-q",
            "lambda-sweep",
            "--config",
            "cfg.txt",
            "--set",
            "training.epochs=1",
            "--set",
            "eval.replications=1",
            "--work",
            "sweep",
            "--loss",
            "L1",
            "--lambdas",
            "0.9,0.1",
            "--out",
            "sweep.csv",
        ],
    );
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "lambda,eer_global,eer_user,mean_auc");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0.9,") && lines[2].starts_with("0.1,"));
    assert_eq!(std::fs::read_to_string(d.join("sweep.csv")).unwrap(), csv);
}

#[test]
fn bad_input_fails_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = signet(d, &["pipeline", "--set", "training.bogus=1", "--work", "w"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key `training.bogus`"));

    std::fs::write(
        d.join("empty.json"),
        r#"{"config_hash":"00","config":{},"replications":[],"validation":null,"exploitation":null}"#,
    )
    .unwrap();
    let out = signet(d, &["report", "--record", "empty.json"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());

    let out = signet(
        d,
        &["lambda-sweep", "--work", "w", "--loss", "genuine_only"],
    );
    assert!(!out.status.success());
}
