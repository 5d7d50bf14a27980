use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use simts::data::{load_csv, CsvSchema};
use simts::TimeSeries;

fn simts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simts"))
        .args(args)
        .env_remove("SIMTS_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small synthetic data set plus a config that trains on it in well under a second.
fn fixture(dir: &Path) -> std::path::PathBuf {
    let out = simts(&[
        "synth",
        "--out",
        p(dir),
        "--n-features",
        "2",
        "--length",
        "300",
        "--periods",
        "8,12;10",
        "--noise-std",
        "0.1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let cfg = dir.join("run.cfg");
    fs::write(
        &cfg,
        "# tiny model\ndataset = synth.csv\nhistory_len = 8\nwindow_len = 16\nprojection_dim = 4\nlatent_dim = 8\nepochs = 5\nstride = 2\nhorizons = 4,8\n",
    )
    .unwrap();
    cfg
}

#[test]
fn synth_writes_loadable_deterministic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = simts(&["synth", "--out", p(d), "--n-features", "2", "--length", "100", "--seed", "4", "--noise-std", "0.5"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let bytes = fs::read(a.join("synth.csv")).unwrap();
    assert_eq!(bytes, fs::read(b.join("synth.csv")).unwrap());
    let text = String::from_utf8(bytes).unwrap();
    assert_eq!(text.lines().count(), 101);
    assert_eq!(text.lines().next().unwrap().split(',').count(), 2);

    let ts: TimeSeries = load_csv(a.join("synth.csv"), &CsvSchema::default()).unwrap();
    let again = dir.path().join("again.csv");
    simts::data::write_csv(&ts, &again).unwrap();
    assert_eq!(fs::read(&again).unwrap(), fs::read(a.join("synth.csv")).unwrap());
}

#[test]
fn train_is_deterministic_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let dataset_before = fs::read(dir.path().join("synth.csv")).unwrap();
    let mut artifacts = Vec::new();
    for run in ["r1", "r2"] {
        let out_dir = dir.path().join(run);
        let out = simts(&["train", "--config", p(&cfg), "--out", p(&out_dir), "--plot"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let loss = fs::read_to_string(out_dir.join("loss_history.csv")).unwrap();
        assert_eq!(loss.lines().count(), 6);
        assert_eq!(loss.lines().next(), Some("epoch,mean_loss"));
        assert!(out_dir.join("loss.svg").is_file());
        artifacts.push((loss, fs::read(out_dir.join("checkpoint.stsc")).unwrap()));
    }
    assert_eq!(artifacts[0], artifacts[1]);
    assert_eq!(fs::read(dir.path().join("synth.csv")).unwrap(), dataset_before);

    let out = simts(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("r3")), "--epochs", "2"]);
    assert_eq!(code(&out), 0);
    let loss = fs::read_to_string(dir.path().join("r3/loss_history.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let env_out = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_simts"))
        .args(["train", "--config", p(&cfg), "--epochs", "1"])
        .env("SIMTS_OUT_DIR", &env_out)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(env_out.join("checkpoint.stsc").is_file());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());

    let out = simts(&["train", "--config", p(&cfg), "--learnig-rate", "0.1"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--learnig-rate"));

    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "dataset = synth.csv\nlearnig_rate = 0.1\n").unwrap();
    let out = simts(&["train", "--config", p(&bad)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("learnig_rate"));

    let out = simts(&["ablate", "--config", p(&cfg), "--variants", "simts"]);
    assert_eq!(code(&out), 2);

    let out = simts(&["train", "--config", p(&cfg), "--variant", "contrastive"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn data_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());

    let out = simts(&["train", "--config", p(&cfg), "--dataset", p(&dir.path().join("missing.csv"))]);
    assert_eq!(code(&out), 3);

    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "a,b\n1,2\n3,oops\n").unwrap();
    let out = simts(&["train", "--config", p(&cfg), "--dataset", p(&broken)]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("oops"));

    let out = simts(&["eval", "--config", p(&cfg), "--checkpoint", p(&dir.path().join("nope.stsc"))]);
    assert_eq!(code(&out), 3);

    let corrupt = dir.path().join("corrupt.stsc");
    fs::write(&corrupt, b"STSC\x01\x00").unwrap();
    let out = simts(&["eval", "--config", p(&cfg), "--checkpoint", p(&corrupt)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_writes_one_row_per_horizon_and_checks_channels() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let train_dir = dir.path().join("train");
    assert_eq!(code(&simts(&["train", "--config", p(&cfg), "--out", p(&train_dir)])), 0);
    let ckpt = train_dir.join("checkpoint.stsc");

    let eval_dir = dir.path().join("eval");
    let out = simts(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&eval_dir), "--plot"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(eval_dir.join("results.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("synth,multivariate,simts,4,"));
    assert!(rows[1].starts_with("synth,multivariate,simts,8,"));
    assert!(eval_dir.join("mse.svg").is_file());

    let out = simts(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--out", p(&eval_dir), "--baseline"]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(eval_dir.join("results.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.contains(",raw_window_mean,")).count(), 2);

    let out = simts(&["eval", "--config", p(&cfg), "--checkpoint", p(&ckpt), "--mode", "univariate", "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 4);
}

#[test]
fn univariate_mode_trains_on_the_target_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let train_dir = dir.path().join("uni");
    let out = simts(&["train", "--config", p(&cfg), "--mode", "univariate", "--out", p(&train_dir)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = simts::checkpoint::load_checkpoint::<f64>(train_dir.join("checkpoint.stsc")).unwrap();
    assert_eq!(ckpt.encoder.in_channels, 1);
    let out = simts(&[
        "eval", "--config", p(&cfg), "--mode", "univariate", "--checkpoint",
        p(&train_dir.join("checkpoint.stsc")), "--out", p(&train_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(train_dir.join("results.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.starts_with("synth,univariate,")));
}

#[test]
fn ablate_combines_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fixture(dir.path());
    let out_dir = dir.path().join("abl");
    let out = simts(&[
        "ablate", "--config", p(&cfg), "--variants", "simts,infonce", "--seeds", "0,1", "--epochs", "2",
        "--out", p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("variant=simts mean_mse="));
    assert!(stdout.contains("variant=infonce mean_mse="));
}

#[test]
fn gradcheck_reports_each_op_once() {
    let out = simts(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let names: Vec<&str> = stdout.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    let mut unique = names.clone();
    unique.sort();
    unique.dedup();
    assert_eq!(unique.len(), names.len());
    for op in ["conv1d", "conv1d_last", "linear", "relu", "l2_normalize_columns", "simts_loss", "infonce_loss"] {
        assert!(names.contains(&op), "{op} missing");
    }

    let out = simts(&["gradcheck", "--inject-fault"]);
    assert_eq!(code(&out), 1);
}
