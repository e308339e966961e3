use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use lrp_core::cli::load_model;
use lrp_core::io::{read_point_cloud, Manifest};
use lrp_core::network::Network;

const TINY: &str = "\
[network]
stage_channels = 4,4,6,8
[lrp]
dilations = 1,3
[train]
epochs = 1
batch_size = 2
lr0 = 0.01
[data]
train_scenes = 2
val_scenes = 1
extent = 1.2,1.2
points_per_m2 = 200
coupling_distance = 0.5
max_objects = 2
";

fn lrp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrp")).args(args).output().expect("spawn lrp")
}

fn ok(args: &[&str]) -> String {
    let o = lrp(args);
    assert!(
        o.status.success(),
        "lrp {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("tiny.txt");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_is_deterministic_and_parses_back() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", &cfg, "--seed", "3", "--out", s(&a)]);
    ok(&["synth", "--config", &cfg, "--seed", "3", "--out", s(&b)]);
    let m = Manifest::read(&a).unwrap();
    assert_eq!((m.train.len(), m.val.len()), (2, 1));
    for f in m.train.iter().chain(&m.val) {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
        assert!(!read_point_cloud(&a.join(f)).unwrap().is_empty());
    }
    assert!(fs::read_to_string(a.join("config.txt")).unwrap().contains("# seed = 3"));
}

#[test]
fn synth_with_zero_scenes_writes_only_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let out = tmp.path().join("z");
    let text = fs::read_to_string(&cfg).unwrap().replace("train_scenes = 2", "train_scenes = 0").replace("val_scenes = 1", "val_scenes = 0");
    fs::write(&cfg, text).unwrap();
    ok(&["synth", "--config", &cfg, "--out", s(&out)]);
    let mut names: Vec<String> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["config.txt", "manifest"]);
    assert_eq!(Manifest::read(&out).unwrap(), Manifest::default());
}

#[test]
fn train_then_eval_from_dataset_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let data = tmp.path().join("data");
    ok(&["synth", "--config", &cfg, "--out", s(&data)]);
    let cfg = tiny_config(tmp.path(), &format!("dir = {}\n", data.display()));
    let run = tmp.path().join("run");
    let printed = ok(&["train", "--config", &cfg, "--out", s(&run)]);
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,epoch,lr,loss,miou,oa,macc\n"));
    assert_eq!(csv.lines().count(), 2);
    let ev = tmp.path().join("ev");
    let shown = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.ckpt")),
        "--out",
        s(&ev),
        "--predictions",
    ]);
    // training scores the val split after its last step with the same weights
    assert_eq!(printed, shown);
    assert!(ev.join("predictions").join("scene_0000.txt").exists());
    assert!(fs::read_to_string(ev.join("config.txt")).unwrap().contains("# build = "));
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let text = fs::read_to_string(&cfg).unwrap().replace("lr0 = 0.01", "lr0 = 0");
    fs::write(&cfg, text).unwrap();
    let a = tmp.path().join("a");
    ok(&["train", "--config", &cfg, "--seed", "5", "--out", s(&a)]);
    let (net, c) = load_model(&a.join("model.ckpt")).unwrap();
    let fresh = Network::init(c.network_config(), &mut lrp_core::seed::stream(5, "init")).unwrap();
    assert_eq!(net.params().flat_trainable(), fresh.params().flat_trainable());
}

#[test]
fn params_reports_overhead() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["params", "--out", s(tmp.path())]);
    let pct: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("overhead "))
        .and_then(|l| l.split('(').nth(1))
        .and_then(|l| l.trim_end_matches("%)").parse().ok())
        .unwrap();
    assert!(pct > 0.0 && pct < 6.0, "{out}");
}

#[test]
fn oracle_check_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["oracle-check", "--out", s(tmp.path())]);
    assert!(out.contains("all checks passed"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn ablate_position_emits_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    ok(&["ablate", "--axis", "position", "--config", &cfg, "--out", s(tmp.path())]);
    let csv = fs::read_to_string(tmp.path().join("ablate_position.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["before", "middle", "parallel", "after"]);
}

#[test]
fn erf_writes_csv_with_header() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let out = ok(&["erf", "--config", &cfg, "--out", s(tmp.path())]);
    assert!(out.starts_with("focus "));
    let text = fs::read_to_string(tmp.path().join("erf.csv")).unwrap();
    assert!(text.starts_with("# focus 0 "));
    assert!(text.lines().any(|l| l == "x,y,z,magnitude"));
}

#[test]
fn erf_rejects_missing_focus() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), "");
    let o = lrp(&["erf", "--config", &cfg, "--focus", "999,999,999", "--out", s(tmp.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("not present"));
}

#[test]
fn bench_has_one_row_per_op_dilation_grid() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["bench", "--grids", "8,12", "--reps", "2", "--out", s(tmp.path())]);
    let csv = fs::read_to_string(tmp.path().join("bench.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "op,dilation,grid,voxels,median_ms");
    assert_eq!(csv.lines().count(), 1 + 4 * 3 * 2);
}

#[test]
fn bad_inputs_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.txt");
    fs::write(&bad, "[network]\nwidths = 3\n").unwrap();
    let o = lrp(&["params", "--config", s(&bad), "--out", s(tmp.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));
    let o = lrp(&["ablate", "--axis", "sideways", "--out", s(tmp.path())]);
    assert!(!o.status.success());
}
