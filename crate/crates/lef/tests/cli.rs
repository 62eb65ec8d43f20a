use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[synth]
sequences = 3
frames = 4
points_budget = 1200

[model]
range_m = 40.0
cell_m = 2.0
d = 8
heads = 2
window = 4
time_dims = 4
fg_threshold = 0.3

[train]
steps = 3
batch = 2
warmup = 1
held_out = 1
eval_every = 0

[eval]
score_thresh = 0.0
"#;

fn lef(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lef")).args(args).env("LEF_DETERMINISTIC", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lef(args);
    assert!(out.status.success(), "lef {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_subcommand_runs_on_a_tiny_config() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let data = root.join("data");
    let ckpt = root.join("m.ckpt");

    assert!(ok(&["synth-gen", "--config", s(&cfg), "--out", s(&data)]).contains("3 sequences, 12 frames"));
    assert!(data.join("manifest.json").exists());
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&ckpt)]);
    assert!(ckpt.exists() && root.join("m.ckpt.toml").exists());

    let eval = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--iou", "0.3", "--mode", "3d", "--frames", "2"]);
    assert!(eval.contains("AP ") && eval.contains("fg coverage"));

    let csv = root.join("p.csv");
    ok(&["infer", "--ckpt", s(&ckpt), "--data", s(&data), "--frames", "3", "--csv", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("frame_id,score,cx,cy,cz,l,w,h,heading"));
    assert!(text.lines().count() > 1);

    let bench = ok(&["bench", "--ckpt", s(&ckpt), "--data", s(&data), "--repeats", "1"]);
    assert!(bench.contains("recurrent") && bench.contains("stacked"));

    let img = root.join("f.ppm");
    ok(&["viz", "--data", s(&data), "--frame", "5", "--out", s(&img), "--ckpt", s(&ckpt)]);
    assert!(std::fs::read(&img).unwrap().starts_with(b"P6\n"));

    let table = root.join("ica.csv");
    ok(&["ablate", "--name", "ica", "--config", s(&cfg), "--data", s(&data), "--out", s(&table)]);
    let rows = std::fs::read_to_string(&table).unwrap();
    assert_eq!(rows.lines().count(), 3);
    assert!(rows.lines().skip(1).all(|l| l.contains(",ok,")));
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out = lef(&["eval", "--ckpt", s(&missing), "--data", s(&missing)]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[model]\nunknown_key = 1\n").unwrap();
    let out = lef(&["synth-gen", "--config", s(&cfg), "--out", s(&tmp.path().join("d"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    assert!(!lef(&["ablate", "--name", "table9", "--out", "x.csv"]).status.success());
}
