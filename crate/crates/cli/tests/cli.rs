//! End-to-end subcommand tests against the built binary.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_boxdenoise3d"))
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(
        &path,
        r#"
seed = 7

[model]
hidden_dim = 16
geo_groups = 2
heads = 4
channels = 4
num_classes = 3

[synth]
seed = 3
n_objects = [1, 2]
channels = 4
feature_stride = 8.0
depth_range = [8.0, 30.0]

[train]
epochs = 1
batch_size = 2
n_scenes = 4
"#,
    )
    .unwrap();
    path
}

fn json_of(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_pipeline_on_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");

    // gen-synth
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-synth", "--count", "4"])
        .args(["--out-dir", data.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    for sub in ["label_2", "preds", "calib", "features"] {
        assert!(data.join(sub).join("000000.txt").exists() || sub == "features");
    }
    assert!(data.join("features/000000.tnsr").exists());

    // sample a single-anchor file with defaults -> 25 lines
    let one_anchor = tmp.path().join("one.txt");
    let first_line = std::fs::read_to_string(data.join("preds/000000.txt"))
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    std::fs::write(&one_anchor, first_line + "\n").unwrap();
    let prop_file = tmp.path().join("proposals.txt");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "sample"])
        .args(["--preds", one_anchor.to_str().unwrap()])
        .args(["--out", prop_file.to_str().unwrap()])
        .args(["--calib", data.join("calib/000000.txt").to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let lines = std::fs::read_to_string(&prop_file).unwrap().lines().count();
    assert_eq!(lines, 25);

    // stats
    let stats_path = tmp.path().join("stats.json");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "stats"])
        .args(["--preds", data.join("preds").to_str().unwrap()])
        .args(["--calib", data.join("calib").to_str().unwrap()])
        .args(["--out", stats_path.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let stats = json_of(&stats_path);
    let v = stats["mean_iou_avg_k"].as_f64().unwrap();
    assert!(v > 0.0 && v <= 1.0);

    // eval with predictions equal to the labels: AP is exactly 100
    let eval_path = tmp.path().join("eval.json");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "eval"])
        .args(["--labels", data.join("preds").to_str().unwrap()])
        .args(["--preds", data.join("preds").to_str().unwrap()])
        .args(["--out", eval_path.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let eval = json_of(&eval_path);
    assert_eq!(eval["ap_3d_r40"]["moderate"].as_f64().unwrap(), 100.0);
    assert_eq!(eval["ap_bev_r40"]["hard"].as_f64().unwrap(), 100.0);

    // upperbound
    let ub_path = tmp.path().join("ub.json");
    let csv_path = tmp.path().join("ub.csv");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "upperbound"])
        .args(["--labels", data.join("label_2").to_str().unwrap()])
        .args(["--preds", data.join("preds").to_str().unwrap()])
        .args(["--calib", data.join("calib").to_str().unwrap()])
        .args(["--stride", "0.25"])
        .args(["--out", ub_path.to_str().unwrap()])
        .args(["--csv", csv_path.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    let ub = json_of(&ub_path);
    assert_eq!(ub["proposals_per_anchor"].as_u64().unwrap(), 169);
    assert!(std::fs::read_to_string(&csv_path).unwrap().starts_with("range,stride"));
    let mean_best = ub["mean_best_iou"].as_f64().unwrap();
    assert!(mean_best > 0.3, "oracle should improve anchors: {mean_best}");

    // train on the generated directory
    let run_dir = tmp.path().join("run");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "train"])
        .args(["--data", data.to_str().unwrap()])
        .args(["--out-dir", run_dir.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(run_dir.join("final.ckpt").exists());
    assert!(run_dir.join("epoch_00.ckpt").exists());
    let report = json_of(&run_dir.join("train_report.json"));
    assert_eq!(report["epochs"].as_u64().unwrap(), 1);

    // infer with the trained checkpoint
    let refined = tmp.path().join("refined");
    let st = bin()
        .args(["--config", cfg.to_str().unwrap(), "infer"])
        .args(["--checkpoint", run_dir.join("final.ckpt").to_str().unwrap()])
        .args(["--preds", data.join("preds").to_str().unwrap()])
        .args(["--calib", data.join("calib").to_str().unwrap()])
        .args(["--features", data.join("features").to_str().unwrap()])
        .args(["--out-dir", refined.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(refined.join("000000.txt").exists());
    let report = json_of(&refined.join("infer_report.json"));
    assert!(report["detections"].as_u64().unwrap() > 0);
    // refined files parse back as predictions
    let text = std::fs::read_to_string(refined.join("000000.txt")).unwrap();
    assert!(text.lines().next().unwrap().split_whitespace().count() == 16);
}

#[test]
fn reports_are_deterministic_modulo_timestamp() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let data = tmp.path().join("data");
    bin()
        .args(["--config", cfg.to_str().unwrap(), "gen-synth", "--count", "3"])
        .args(["--out-dir", data.to_str().unwrap()])
        .status()
        .unwrap();
    let run = |out: &Path| {
        bin()
            .args(["--config", cfg.to_str().unwrap(), "stats"])
            .args(["--preds", data.join("preds").to_str().unwrap()])
            .args(["--calib", data.join("calib").to_str().unwrap()])
            .args(["--out", out.to_str().unwrap()])
            .status()
            .unwrap();
    };
    let (a_path, b_path) = (tmp.path().join("a.json"), tmp.path().join("b.json"));
    run(&a_path);
    run(&b_path);
    let mut a = json_of(&a_path);
    let mut b = json_of(&b_path);
    a.as_object_mut().unwrap().remove("timestamp_unix");
    b.as_object_mut().unwrap().remove("timestamp_unix");
    assert_eq!(a, b);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // missing config file -> 2
    let st = bin()
        .args(["--config", "/nonexistent/cfg.toml", "gen-synth", "--count", "1"])
        .args(["--out-dir", tmp.path().join("x").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));

    // config with an unknown key -> 2
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "definitely_not_a_key = 1\n").unwrap();
    let st = bin()
        .args(["--config", bad.to_str().unwrap(), "gen-synth", "--count", "1"])
        .args(["--out-dir", tmp.path().join("y").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(2));

    // missing data directory -> 3
    let st = bin()
        .args(["stats"])
        .args(["--preds", "/nonexistent/preds"])
        .args(["--calib", "/nonexistent/calib"])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3));

    // malformed prediction file -> 3
    let preds = tmp.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    std::fs::write(preds.join("000000.txt"), "Car 1 2 3\n").unwrap();
    let st = bin()
        .args(["stats"])
        .args(["--preds", preds.to_str().unwrap()])
        .args(["--calib", preds.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(st.status.code(), Some(3));

    // clap usage error -> 2
    let st = bin().args(["definitely-not-a-subcommand"]).output().unwrap();
    assert_eq!(st.status.code(), Some(2));
}
