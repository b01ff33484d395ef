use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY_CONFIG: &str = r#"
seed = 5

[encoder]
depth = 2
heads = 2
semantic_width = 16
structural_width = 8

[adapter]
width = 16
depth = 1
heads = 2
queries = 4
qformer_blocks = 1
context_dim = 8

[dit]
width = 16
depth = 1
heads = 2

[pretrain]
semantic_samples = 32
semantic_epochs = 1
semantic_batch = 16
base_characters = 8
base_steps_low = 2
base_steps_high = 1
base_batch = 2

[sampling]
steps = 2

[[stages]]
stage = 1
resolution = 32
paired_weight = 0.0
unpaired_weight = 1.0
steps = 3
batch_size = 2
learning_rate = 1e-3

[[stages]]
stage = 2
resolution = 32
paired_weight = 1.0
unpaired_weight = 0.0
steps = 3
batch_size = 2
learning_rate = 1e-3

[[stages]]
stage = 3
resolution = 64
paired_weight = 0.5
unpaired_weight = 0.5
steps = 2
batch_size = 2
learning_rate = 1e-3
"#;

fn ichar(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ichar")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.cfg");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let data = root.join("data");
    let o = ichar(&[
        "--config", s(&config), "--out", s(&data), "dataset-gen", "--characters", "8", "--views", "2",
        "--unpaired-fraction", "0.5", "--heldout", "3",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    Fixture { _dir: dir, root, config, data }
}

fn train_all(f: &Fixture, out: &Path) {
    let manifest = f.data.join("manifest.jsonl");
    let o = ichar(&["--config", s(&f.config), "--out", s(out), "train", "--manifest", s(&manifest), "--stage", "all"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn help_succeeds_and_bad_usage_exits_with_one() {
    assert_eq!(code(&ichar(&["--help"])), 0);
    assert_eq!(code(&ichar(&["frobnicate"])), 1);
    assert_eq!(code(&ichar(&["inspect-ckpt", "--bogus"])), 1);
    assert_eq!(code(&ichar(&["train", "--stage", "4", "--manifest", "m"])), 1);
    assert_eq!(code(&ichar(&["grad-check", "--component", "encoder"])), 1);
}

#[test]
fn dataset_generation_writes_manifest_images_and_stamp() {
    let f = fixture();
    let manifest = std::fs::read_to_string(f.data.join("manifest.jsonl")).unwrap();
    assert!(manifest.lines().count() >= 8);
    assert!(f.data.join("images").is_dir());
    let stamp: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.data.join("stamp.json")).unwrap()).unwrap();
    assert_eq!(stamp["seed"], 5);
    assert!(stamp["config_hash"].as_str().unwrap().len() == 64);
    assert_eq!(stamp["version"], env!("CARGO_PKG_VERSION"));

    let again = f.root.join("again");
    let o = ichar(&[
        "--config", s(&f.config), "--out", s(&again), "dataset-gen", "--characters", "8", "--views", "2",
        "--unpaired-fraction", "0.5", "--heldout", "3",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(manifest, std::fs::read_to_string(again.join("manifest.jsonl")).unwrap());

    let bad = ichar(&["--out", s(&f.root.join("bad")), "dataset-gen", "--characters", "1"]);
    assert_eq!(code(&bad), 1, "{}", stderr(&bad));
}

#[test]
fn training_inference_evaluation_and_inspection() {
    let f = fixture();
    let run = f.root.join("run");
    train_all(&f, &run);
    for name in ["prepared.icpt", "stage1.icpt", "stage2.icpt", "stage3.icpt", "final.icpt", "metrics.jsonl", "stamp.json"] {
        assert!(run.join(name).exists(), "{name}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 8);
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["step", "stage", "loss", "lr", "paired_flag"] {
        assert!(first.get(key).is_some(), "{key}");
    }

    let ckpt = run.join("final.icpt");
    let o = ichar(&["inspect-ckpt", "--ckpt", s(&ckpt)]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("partition base_frozen:") && text.contains("partition adapter_trainable:"));
    assert!(text.contains("adapter/qformer/") && text.contains("dit/base/"));
    let base = |t: &str| -> Vec<String> { t.lines().filter(|l| l.contains("\tbase_frozen\t")).map(String::from).collect() };
    let before = String::from_utf8(ichar(&["inspect-ckpt", "--ckpt", s(&run.join("prepared.icpt"))]).stdout).unwrap();
    assert_eq!(base(&text), base(&before));

    let truncated = f.root.join("truncated.icpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(code(&ichar(&["inspect-ckpt", "--ckpt", s(&truncated)])), 2);

    let reference = f.data.join("images/c0000").read_dir().unwrap().next().unwrap().unwrap().path();
    let caption = "a large dotted star character upright blue background flat style";
    let infer = |out: &Path, scale: &str| {
        ichar(&[
            "--out", s(out), "infer", "--ckpt", s(&ckpt), "--reference", s(&reference), "--caption", caption, "--scale", scale,
        ])
    };
    let a = f.root.join("a.png");
    let b = f.root.join("b.png");
    assert_eq!(code(&infer(&a, "1.0")), 0);
    assert_eq!(code(&infer(&b, "1.0")), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.root.join("a.json")).unwrap()).unwrap();
    assert!(meta["identity_similarity"].as_f64().unwrap().abs() <= 1.0);
    assert!(f.root.join("a.stamp.json").exists());

    let o = ichar(&[
        "--out", s(&f.root.join("c.png")), "infer", "--ckpt", s(&ckpt), "--reference", s(&reference), "--caption",
        "a purple unicorn",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("vocabulary"));
    let o = ichar(&[
        "--out", s(&f.root.join("c.png")), "infer", "--ckpt", s(&ckpt), "--reference", s(&f.root.join("missing.png")),
        "--caption", caption,
    ]);
    assert_eq!(code(&o), 2);

    let report = f.root.join("eval/report.json");
    let o = ichar(&[
        "--out", s(&report), "eval", "--ckpt", s(&ckpt), "--manifest", s(&f.data.join("manifest.jsonl")), "--generations", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["rows"].as_array().unwrap().len(), 6);
    let acc = r["identity_ranking_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(f.root.join("eval/report_grid.png").exists());
    assert!(f.root.join("eval/report.stamp.json").exists());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let f = fixture();
    let straight = f.root.join("straight");
    train_all(&f, &straight);
    let manifest = f.data.join("manifest.jsonl");
    let split = f.root.join("split");
    let o = ichar(&[
        "--config", s(&f.config), "--out", s(&split), "train", "--manifest", s(&manifest), "--stage", "1", "--init",
        s(&straight.join("prepared.icpt")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = ichar(&[
        "--out", s(&split), "train", "--manifest", s(&manifest), "--stage", "all", "--resume", s(&split.join("stage1.icpt")),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(straight.join("final.icpt")).unwrap(), std::fs::read(split.join("final.icpt")).unwrap());

    let other = f.root.join("other.cfg");
    std::fs::write(&other, TINY_CONFIG.replace("seed = 5", "seed = 6")).unwrap();
    let o = ichar(&[
        "--config", s(&other), "--out", s(&split), "train", "--manifest", s(&manifest), "--resume", s(&split.join("stage1.icpt")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradient_checks_report_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.cfg");
    std::fs::write(&config, TINY_CONFIG).unwrap();
    let out = dir.path().join("grad.json");
    for component in ["adapter", "dit_xattn", "linear_probe"] {
        let o = ichar(&["--config", s(&config), "--out", s(&out), "grad-check", "--component", component, "--tol", "1e-4"]);
        assert_eq!(code(&o), 0, "{component}: {}", stderr(&o));
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        assert!(r["max_relative_error"].as_f64().unwrap() < 1e-4);
    }
    let o = ichar(&["--config", s(&config), "grad-check", "--component", "adapter", "--tol", "0"]);
    assert_eq!(code(&o), 3);
    let o = ichar(&["grad-check", "--component", "encoder_semantic"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("component has no trainable parameters"));
}
