use std::path::Path;
use std::process::{Command, Output};

fn depthlane(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_depthlane"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&depthlane(&["bogus"], dir.path())), 1);
    assert_eq!(code(&depthlane(&["train"], dir.path())), 1);
    assert_eq!(code(&depthlane(&["--help"], dir.path())), 0);
}

#[test]
fn config_problems_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "version = 1\nlearning_rate = 0.1\n").unwrap();
    let out = depthlane(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    std::fs::write(dir.path().join("m3.toml"), "version = 1\n").unwrap();
    let out = depthlane(&["pretrain", "--config", "m3.toml"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pretraining not applicable"));
}

#[test]
fn runtime_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&depthlane(&["train", "--config", "missing.toml"], dir.path())), 2);
    std::fs::write(dir.path().join("c.toml"), "version = 1\ndataset = \"nowhere\"\n").unwrap();
    assert_eq!(code(&depthlane(&["train", "--config", "c.toml"], dir.path())), 2);
}

#[test]
fn generate_train_infer_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |out: Output| {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(depthlane(
        &[
            "gen-data",
            "--out",
            "data",
            "--train",
            "2",
            "--val",
            "1",
            "--downscale",
            "4",
        ],
        d,
    ));
    std::fs::write(
        d.join("c.toml"),
        "version = 1\ndataset = \"data/train\"\nval_dataset = \"data/val\"\nout_dir = \"run\"\nchannels = 8\nembed_dim = 3\nsteps = 3\n",
    )
    .unwrap();
    let text = ok(depthlane(&["train", "--config", "c.toml"], d));
    assert!(text.contains("final loss"));
    ok(depthlane(
        &[
            "eval",
            "--config",
            "c.toml",
            "--checkpoint",
            "run/model.ckpt",
            "--out",
            "report.toml",
        ],
        d,
    ));
    let report = std::fs::read_to_string(d.join("report.toml")).unwrap();
    assert!(report.contains("f1"));
    ok(depthlane(
        &[
            "infer",
            "--config",
            "c.toml",
            "--checkpoint",
            "run/model.ckpt",
            "--split",
            "data/val",
            "--out",
            "pred.txt",
            "--gt-out",
            "gt.txt",
        ],
        d,
    ));
    ok(depthlane(
        &[
            "plot", "--pred", "pred.txt", "--gt", "gt.txt", "--out", "fig.svg", "--split", "data/val",
        ],
        d,
    ));
    assert!(std::fs::read_to_string(d.join("fig.svg")).unwrap().starts_with("<svg"));
}
