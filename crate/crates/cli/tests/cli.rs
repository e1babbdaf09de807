use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn safeil(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safeil"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn safeil")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = safeil(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const STRAIGHT: &str = "lead.speed = 30\nseed = 1\n";
const FAST_TRAIN: &str = "train.epochs = 30\n";

fn params(ckpt: &str) -> Vec<&str> {
    ckpt.lines().filter(|l| !l.starts_with("meta")).collect()
}

#[test]
fn gen_writes_five_hertz_log() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "s.cfg", STRAIGHT);
    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "600",
            "--out",
            "a.csv",
        ],
    );
    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "600",
            "--out",
            "b.csv",
        ],
    );
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a.lines().count(), 3001);
    assert!(a.starts_with("t,X,Y,vx,c0l,c1l,c2l,c3l,c0r,c1r,c2r,c3r,lead_x,lead_y,lead_valid\n"));
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    assert_eq!(
        fs::read_to_string(d.join("a.events.csv")).unwrap(),
        "kind,t\n"
    );

    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "60",
            "--seed",
            "2",
            "--out",
            "c.csv",
        ],
    );
    let c = fs::read_to_string(d.join("c.csv")).unwrap();
    assert_ne!(c, a[..c.len()]);
}

#[test]
fn bad_scenario_names_the_key() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "bad.cfg", "road.kind = arc\nroad.radius = 20\n");
    let out = safeil(d, &["gen", "--config", "bad.cfg", "--out", "a.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("road.radius"), "{}", stderr(&out));
    assert!(!d.join("a.csv").exists());
}

#[test]
fn process_clean_and_cut_in_logs() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "s.cfg", STRAIGHT);
    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "600",
            "--out",
            "clean.csv",
        ],
    );
    let out = ok(d, &["process", "clean.csv", "--out", "t.csv"]);
    let report = stdout(&out);
    assert!(report.contains("lane_change_removed = 0"));
    assert!(report.contains("cutin_removed = 0"));
    let tuples = fs::read_to_string(d.join("t.csv")).unwrap();
    assert!(tuples.starts_with("# horizon_s = 2\n"));
    assert!(tuples.lines().count() - 2 >= 2800);
    assert_eq!(fs::read_to_string(d.join("t.report.txt")).unwrap(), report);

    write(d, "cut.cfg", &format!("{STRAIGHT}inject.cutins = 3\n"));
    ok(
        d,
        &[
            "gen",
            "--config",
            "cut.cfg",
            "--duration",
            "300",
            "--out",
            "cut.csv",
        ],
    );
    let report = stdout(&ok(d, &["process", "cut.csv", "--out", "t2.csv"]));
    assert!(report.contains("cutin_intervals = 3\n"), "{report}");
}

#[test]
fn process_rejects_empty_log_without_output() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "empty.csv",
        "t,X,Y,vx,c0l,c1l,c2l,c3l,c0r,c1r,c2r,c3r,lead_x,lead_y,lead_valid\n",
    );
    let out = safeil(d, &["process", "empty.csv", "--out", "t.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.join("t.csv").exists() && !d.join("t.csv.tmp").exists());
}

#[test]
fn hold_out_removes_one_maneuver() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(d, "s.cfg", STRAIGHT);
    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "40",
            "--out",
            "a.csv",
        ],
    );
    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "40",
            "--seed",
            "5",
            "--out",
            "b.csv",
        ],
    );
    ok(d, &["process", "a.csv", "b.csv", "--out", "all.csv"]);
    let report = stdout(&ok(
        d,
        &[
            "process",
            "a.csv",
            "b.csv",
            "--hold-out",
            "1",
            "--out",
            "loo.csv",
        ],
    ));
    assert!(
        report.contains("maneuver 1 = 40.0 s from t=0.0 held out"),
        "{report}"
    );
    let rows = |n: &str| fs::read_to_string(d.join(n)).unwrap().lines().count() - 2;
    assert_eq!(rows("loo.csv") * 2, rows("all.csv"));
    let out = safeil(
        d,
        &["process", "a.csv", "--hold-out", "9", "--out", "x.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
}

/// Two 40 s drives, tuples from the first, short training runs of both modes.
fn trained(d: &Path) {
    write(
        d,
        "s.cfg",
        "road.kind = arc\nroad.radius = 800\nlead.speed = 29\nseed = 1\n",
    );
    write(d, "e.cfg", FAST_TRAIN);
    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "40",
            "--out",
            "a.csv",
        ],
    );
    ok(
        d,
        &[
            "gen",
            "--config",
            "s.cfg",
            "--duration",
            "40",
            "--seed",
            "2",
            "--out",
            "b.csv",
        ],
    );
    ok(
        d,
        &[
            "process",
            "a.csv",
            "b.csv",
            "--hold-out",
            "1",
            "--out",
            "t.csv",
        ],
    );
    ok(
        d,
        &[
            "train", "--tuples", "t.csv", "--mode", "bc", "--config", "e.cfg", "--out", "bc.ckpt",
        ],
    );
    ok(
        d,
        &[
            "train",
            "--tuples",
            "t.csv",
            "--mode",
            "safe",
            "--config",
            "e.cfg",
            "--out",
            "safe.ckpt",
        ],
    );
}

#[test]
fn train_modes_and_zero_barrier() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d);
    let bc = fs::read_to_string(d.join("bc.ckpt")).unwrap();
    let safe = fs::read_to_string(d.join("safe.ckpt")).unwrap();
    assert!(bc.contains("meta mode bc") && !bc.contains("barrier"));
    assert!(safe.contains("meta mode safe") && safe.contains("meta barrier.k 1000"));
    let loss = fs::read_to_string(d.join("bc.loss.csv")).unwrap();
    assert!(loss.starts_with("epoch,loss,imitation,barrier\n"));
    assert_eq!(loss.lines().count(), 31);

    ok(
        d,
        &[
            "train", "--tuples", "t.csv", "--mode", "safe", "--k", "0", "--config", "e.cfg",
            "--out", "k0.ckpt",
        ],
    );
    assert_eq!(
        params(&fs::read_to_string(d.join("k0.ckpt")).unwrap()),
        params(&bc)
    );

    let out = safeil(
        d,
        &[
            "train",
            "--tuples",
            "missing.csv",
            "--mode",
            "bc",
            "--out",
            "m.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = safeil(
        d,
        &[
            "train", "--tuples", "t.csv", "--mode", "dagger", "--out", "m.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluations_write_csv_and_plots() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d);
    let args = [
        "eval-safety",
        "--bc",
        "bc.ckpt",
        "--safe",
        "safe.ckpt",
        "--scenarios",
        "3",
        "--seed",
        "4",
    ];
    ok(d, &[&args[..], &["--out", "s1"]].concat());
    ok(d, &[&args[..], &["--out", "s2"]].concat());
    let csv = fs::read_to_string(d.join("s1/safety.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("scenario,policy,completion,flag,flag_time")
    );
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(csv, fs::read_to_string(d.join("s2/safety.csv")).unwrap());
    assert!(fs::read_to_string(d.join("s1/safety.svg"))
        .unwrap()
        .starts_with("<svg"));

    ok(
        d,
        &[
            "eval-human",
            "a.csv",
            "b.csv",
            "--maneuver",
            "1",
            "--bc",
            "bc.ckpt",
            "--safe",
            "safe.ckpt",
            "--out",
            "h",
        ],
    );
    let paired = fs::read_to_string(d.join("h/human_safe.csv")).unwrap();
    let lines: Vec<&str> = paired.lines().collect();
    assert_eq!(
        lines[0],
        "t,expert_x,expert_v,expert_offset,policy_x,policy_v,policy_offset,policy_flag"
    );
    assert_eq!(lines.len(), 52);
    assert!(lines[51].starts_with("rmse,,"));
    for f in ["human_bc.csv", "human_speed.svg", "human_offset.svg"] {
        assert!(d.join("h").join(f).exists(), "{f}");
    }
}

#[test]
fn mismatched_checkpoint_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    trained(d);
    let broken = fs::read_to_string(d.join("bc.ckpt"))
        .unwrap()
        .replace("shape 9 64 6", "shape 9 32 6");
    write(d, "broken.ckpt", &broken);
    let out = safeil(
        d,
        &[
            "eval-safety",
            "--bc",
            "broken.ckpt",
            "--safe",
            "safe.ckpt",
            "--out",
            "s",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("shape"), "{}", stderr(&out));
    assert!(!d.join("s").exists());
}

#[test]
fn report_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    write(
        d,
        "e.cfg",
        "train.epochs = 20\ncorpus.drives = 3\nsafety.scenarios = 2\n",
    );
    ok(
        d,
        &["report", "--config", "e.cfg", "--seed", "2", "--out", "r1"],
    );
    ok(
        d,
        &["report", "--config", "e.cfg", "--seed", "2", "--out", "r2"],
    );
    for f in [
        "metrics.csv",
        "safety.csv",
        "human_safe.csv",
        "bc.ckpt",
        "safe_loss.csv",
        "pipeline.txt",
        "safety.svg",
    ] {
        let a = fs::read_to_string(d.join("r1").join(f)).unwrap();
        assert_eq!(a, fs::read_to_string(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(d.join("r1/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\n"));
    assert!(metrics.contains("\nsafe_mean_completion,"));
}
