use std::path::Path;
use std::process::Command;

fn spnd(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_spnd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn spnd");
    assert!(
        out.status.success(),
        "spnd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "variant": "paired",
  "batch_size": 8,
  "total_epochs": 6,
  "seed": 3,
  "pace_schedule": {"fractions": [0.5, 1.0]},
  "backbone": {
    "in_channels": 1, "input_size": 16, "stage_channels": [4, 8],
    "architecture": {"kind": "plain"}, "feature_dim": 8,
    "norm_mode": "joint", "epsilon": 1e-5, "variant": "paired"
  }
}"#;

const GEN: &str = r#"{
  "n_subjects": 4, "n_classes": 2, "image_size": 16, "identity_amplitude": 0.3,
  "deviation_amplitude": 0.3, "noise_sigma": 0.02, "frames_per_subject_per_class": 2,
  "label_corruption_rate": 0.0, "seed": 1
}"#;

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let (data, run, cv, ab, ev) = (root.join("data"), root.join("run"), root.join("cv"), root.join("ab"), root.join("ev"));
    std::fs::write(root.join("train.json"), TINY).unwrap();
    std::fs::write(root.join("gen.json"), GEN).unwrap();
    let cfg = root.join("train.json");

    spnd(&["synth", "--out", path(&data), "--config", path(&root.join("gen.json"))]);
    assert!(data.join("manifest.csv").exists());

    let out = spnd(&["prepare", "--data", path(&data), "--out", path(&root.join("prep")), "--folds", "2"]);
    assert!(out.contains("16 pairs"), "{out}");
    let plan = root.join("prep").join("folds.json");
    assert!(plan.exists());

    let out = spnd(&[
        "train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run),
        "--plan", path(&plan), "--fold", "0", "--norm-mode", "literal",
    ]);
    assert!(out.contains("test accuracy"), "{out}");
    for f in ["history.csv", "selection_pace0.csv", "selection_pace1.csv", "final.ckpt", "run_meta.json", "metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let out = spnd(&["eval", "--checkpoint", path(&run.join("final.ckpt")), "--data", path(&data), "--out", path(&ev)]);
    assert!(out.contains("on 16 pairs"), "{out}");
    assert!(ev.join("confusion.csv").exists());

    let emb = root.join("embeddings.csv");
    spnd(&[
        "export-embeddings", "--checkpoint", path(&run.join("final.ckpt")), "--data", path(&data),
        "--out", path(&emb), "--selection", path(&run.join("selection_pace1.csv")),
    ]);
    assert_eq!(std::fs::read_to_string(&emb).unwrap().lines().count(), 17);

    let out = spnd(&["crossval", "--config", path(&cfg), "--data", path(&data), "--out", path(&cv), "--folds", "2", "--variant", "dual"]);
    assert!(out.contains("mean accuracy"), "{out}");

    let out = spnd(&["ablate", "--config", path(&cfg), "--data", path(&data), "--out", path(&ab), "--folds", "2", "--no-spl", "--seed", "5"]);
    assert_eq!(out.lines().count(), 4, "{out}");
    assert!(ab.join("ablation.csv").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, TINY.replace("\"seed\": 3,", "\"seed\": 3, \"momentum\": 0.9,")).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_spnd"))
        .args(["train", "--config", path(&cfg), "--data", path(tmp.path()), "--out", path(tmp.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentum"));
}
