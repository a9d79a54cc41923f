use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "seed=5
data.rows=4
data.antennas=4
data.subcarriers=8
data.train=16
data.val=4
data.test=6
experiment.scenarios=cdlA-like,cdlE-like
experiment.crs=1/4
multitask.train=8
finetune.train=4
pretrain.batch=8
pretrain.epochs=2
finetune.batch=4
finetune.epochs=1
single.train=16
single.batch=8
single.epochs=1
";

fn csi(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csi-mtl"))
        .args(args)
        .current_dir(dir)
        .env_remove("CSI_MTL_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn generate(dir: &Path, name: &str, out: &str, size: &str) -> Output {
    csi(
        &[
            "generate-data", "--profile", name, "--train", "16", "--val", "4", "--test", "6", "--seed", "9",
            "--rows", size, "--antennas", size, "--subcarriers", "8", "--out", out,
        ],
        dir,
    )
}

#[test]
fn generate_data_is_deterministic_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert!(generate(d, "cdlB-like", "a.csid", "4").status.success());
    let o = generate(d, "cdlB-like", "b.csid", "4");
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("train 16 / val 4 / test 6"));
    assert_eq!(fs::read(d.join("a.csid")).unwrap(), fs::read(d.join("b.csid")).unwrap());

    let o = csi(&["generate-data", "--profile", "cdlA-like", "--train", "0", "--val", "1", "--test", "1", "--out", "z.csid"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.join("z.csid").exists());
    let o = generate(d, "cdlQ-like", "q.csid", "4");
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown profile"));
}

#[test]
fn phase_commands_and_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.txt"), TINY).unwrap();
    assert!(generate(d, "cdlA-like", "a.csid", "4").status.success());
    assert!(generate(d, "cdlE-like", "e.csid", "4").status.success());

    let o = csi(&["pretrain", "--config", "cfg.txt", "--data", "a.csid", "--data", "e.csid", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("run/pretrained.ckpt").is_file());
    let log = fs::read_to_string(d.join("run/pretrain.log")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let o = csi(&["finetune", "--config", "cfg.txt", "--checkpoint", "run/pretrained.ckpt", "--data", "e.csid", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.join("run/decoder-cdlE-like.ckpt").is_file());

    let o = csi(&["train-single", "--config", "cfg.txt", "--data", "a.csid", "--out", "run"], d);
    assert!(o.status.success(), "{}", stderr(&o));

    let eval = [
        "evaluate", "--encoder", "run/pretrained.ckpt", "--decoder", "run/decoder-cdlE-like.ckpt", "--data", "e.csid",
        "--report", "evals.txt",
    ];
    let a = csi(&eval, d);
    let b = csi(&eval, d);
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert!(stdout(&a).contains("nmse_db="));
    assert_eq!(fs::read_to_string(d.join("evals.txt")).unwrap().lines().count(), 2);

    let o = csi(&["evaluate", "--encoder", "run/pretrained.ckpt", "--oracle", "--data", "e.csid"], d);
    assert!(o.status.success());
    assert!(stdout(&o).contains("nmse_db=-inf"), "{}", stdout(&o));

    // A decoder-only checkpoint cannot serve as the encoder.
    let o = csi(&["evaluate", "--encoder", "run/decoder-cdlE-like.ckpt", "--data", "e.csid"], d);
    assert_eq!(o.status.code(), Some(4));

    assert!(generate(d, "cdlE-like", "big.csid", "8").status.success());
    let o = csi(&["evaluate", "--encoder", "run/pretrained.ckpt", "--data", "big.csid"], d);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("[2, 8, 8]") && stderr(&o).contains("[2, 4, 4]"), "{}", stderr(&o));
}

#[test]
fn finetune_rejects_epoch_order() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.txt"), TINY.replace("finetune.epochs=1", "finetune.epochs=2")).unwrap();
    let o = csi(&["finetune", "--config", "bad.txt", "--checkpoint", "x.ckpt", "--data", "x.csid", "--out", "o"], d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("must be smaller than pretrain.epochs"), "{}", stderr(&o));
}

#[test]
fn experiment_report_and_partial_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.txt"), TINY).unwrap();
    let o = csi(&["experiment", "--config", "cfg.txt", "--out", "exp", "--quiet"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("reduction"));
    let csv = fs::read_to_string(d.join("exp/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);

    let o = csi(&["report", "--experiment", "exp"], d);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(fs::read_to_string(d.join("exp/results.csv")).unwrap(), csv);

    fs::remove_file(d.join("exp/cells/multi-cr1_4.csv")).unwrap();
    let o = csi(&["report", "--experiment", "exp"], d);
    assert_eq!(o.status.code(), Some(5));
    assert!(stdout(&o).contains("MISSING"));

    fs::create_dir(d.join("empty")).unwrap();
    let o = csi(&["report", "--experiment", "empty"], d);
    assert_ne!(o.status.code(), Some(0));
    assert!(fs::read_dir(d.join("empty")).unwrap().next().is_none());
}

#[test]
fn thread_override_keeps_results() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("cfg.txt"), TINY).unwrap();
    let o = csi(&["experiment", "--config", "cfg.txt", "--out", "one", "--quiet", "--jobs", "1"], d);
    assert!(o.status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_csi-mtl"))
        .args(["experiment", "--config", "cfg.txt", "--out", "many", "--quiet", "--jobs", "1"])
        .env("CSI_MTL_THREADS", "3")
        .current_dir(d)
        .output()
        .unwrap();
    assert!(o.status.success());
    let strip = |p: &str| -> Vec<String> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .map(|l| {
                let mut f: Vec<&str> = l.split(',').collect();
                f.remove(7);
                f.join(",")
            })
            .collect()
    };
    assert_eq!(strip("one/results.csv"), strip("many/results.csv"));
    let o = Command::new(env!("CARGO_BIN_EXE_csi-mtl"))
        .args(["experiment", "--config", "cfg.txt", "--out", "bad", "--quiet"])
        .env("CSI_MTL_THREADS", "zero")
        .current_dir(d)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
