use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cigan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cigan")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cigan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stderr),
        String::from_utf8_lossy(&out.stdout)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` with its bytes, sorted by relative path.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TOY: &str = r#"
seed = 0

[data]
patches = "patches/manifest.jsonl"
synthetic = "synthetic/manifest.jsonl"
generator = "gan/checkpoints/generator.cign"

[generator]
base_resolution = 4
final_resolution = 16
block_kernel_counts = [4, 4, 2]

[discriminator]
input_resolution = 16
first_kernels = 4
n_conv_layers = 3

[extractor]
channels = [4, 4, 4]

[gan_training]
learning_rate = 0.001
batch_size = 4
pretrain_iters = 4
joint_iters = 4
checkpoint_every = 4

[classifier]
channels = [4, 8]
input_size = 16
learning_rate = 0.001
batch_size = 8
iterations = 6
val_every = 3

[curriculum]
step_every = 2
"#;

fn toy_dataset(root: &Path) {
    ok(&["phantom", "--n", "20", "--size", "64x64", "--lesion-rate", "0.5", "--seed", "2", "--out", s(&root.join("raw"))]);
    ok(&[
        "patches",
        "--manifest",
        s(&root.join("raw/manifest.jsonl")),
        "--count-per-class",
        "2",
        "--patch-size",
        "16",
        "--no-resize",
        "--seed",
        "1",
        "--out",
        s(&root.join("patches")),
    ]);
    fs::write(root.join("c.toml"), TOY).unwrap();
}

#[test]
fn full_pipeline_runs_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    toy_dataset(root);
    let log = fs::read_to_string(root.join("patches/extraction.log")).unwrap();
    assert!(log.contains("acceptance_rate"));

    let cfg = root.join("c.toml");
    ok(&["train-gan", "--config", s(&cfg), "--seed", "0", "--out", s(&root.join("gan"))]);
    ok(&["train-gan", "--config", s(&cfg), "--seed", "0", "--out", s(&root.join("gan2"))]);
    for f in ["metrics.csv", "checkpoints/generator.cign", "checkpoints/trainer_00000008.cign", "config.snapshot"] {
        assert_eq!(fs::read(root.join("gan").join(f)).unwrap(), fs::read(root.join("gan2").join(f)).unwrap(), "{f}");
    }
    assert!(root.join("gan/figures/samples.png").is_file());

    // Resume from the end of pretraining reproduces the uninterrupted run.
    ok(&[
        "train-gan",
        "--config",
        s(&cfg),
        "--seed",
        "0",
        "--resume",
        s(&root.join("gan2/checkpoints/trainer_00000004.cign")),
        "--out",
        s(&root.join("gan2")),
    ]);
    assert_eq!(tree(&root.join("gan")), tree(&root.join("gan2")));

    ok(&["synthesize", "--config", s(&cfg), "--out", s(&root.join("synthetic"))]);
    let runs: Vec<PathBuf> = ["none", "traditional", "cigan"].iter().map(|n| root.join(format!("cls_{n}"))).collect();
    for (scheme, run) in ["none", "traditional", "cigan"].iter().zip(&runs) {
        ok(&["train-classifier", "--config", s(&cfg), "--scheme", scheme, "--out", s(run)]);
        assert!(run.join("scores.csv").is_file());
        assert!(run.join("checkpoints/best.cign").is_file());
        let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 7);
    }
    let again = root.join("cls_none_again");
    ok(&["train-classifier", "--config", s(&cfg), "--scheme", "none", "--out", s(&again)]);
    assert_eq!(tree(&runs[0]), tree(&again));

    let report = root.join("report");
    let out = ok(&[
        "evaluate",
        "--runs",
        s(&runs[2]),
        s(&runs[0]),
        s(&runs[1]),
        "--config",
        s(&cfg),
        "--out",
        s(&report),
    ]);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).take_while(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert!(rows[0].starts_with("Baseline (no augmentation)"));
    assert!(rows[1].starts_with("Traditional augmentation"));
    assert!(rows[2].starts_with("ciGAN + Traditional aug"));
    let csv = fs::read_to_string(report.join("pairwise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(report.join("figures/samples.png").is_file());
    assert!(report.join("figures/roc_cigan.png").is_file());

    // Identical score files compare with p = 1.
    let report2 = root.join("report2");
    ok(&["evaluate", "--runs", s(&runs[0]), s(&runs[1]), "--out", s(&report2)]);
    let _ = fs::copy(runs[0].join("scores.csv"), runs[1].join("scores.csv")).unwrap();
    ok(&["evaluate", "--runs", s(&runs[0]), s(&runs[1]), "--out", s(&report2), "--force"]);
    let pair = fs::read_to_string(report2.join("pairwise.csv")).unwrap();
    assert!(pair.lines().nth(1).unwrap().ends_with(",1"), "{pair}");
}

#[test]
fn phantom_is_byte_identical_with_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["phantom", "--n", "4", "--size", "64x48", "--seed", "1", "--out", s(&out)]);
    let first = tree(&out);
    let refused = cigan(&["phantom", "--n", "4", "--size", "64x48", "--seed", "1", "--out", s(&out)]);
    assert_eq!(refused.status.code(), Some(2));
    ok(&["phantom", "--n", "4", "--size", "64x48", "--seed", "1", "--out", s(&out), "--force"]);
    assert_eq!(first, tree(&out));
}

#[test]
fn zero_lesion_rate_gives_only_non_malignant() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(&["phantom", "--n", "5", "--size", "32x32", "--lesion-rate", "0", "--out", s(&out)]);
    let manifest = fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    let records = manifest.lines().filter(|l| l.contains("\"label\"")).count();
    assert_eq!(records, 5);
    assert!(!manifest.contains("\"malignant\""));
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cigan(&["phantom", "--n", "0", "--out", s(dir.path())]).status.code(), Some(2));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[gan_training]\nlearning_rate = \"fast\"\n").unwrap();
    let out = cigan(&["train-gan", "--config", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gan_training.learning_rate"));
    fs::write(&cfg, "[data]\npatches = \"missing/manifest.jsonl\"\n[classifier]\ninput_size = 256\n").unwrap();
    let out = cigan(&["train-classifier", "--config", s(&cfg), "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(2), "missing scheme is a config error");
    let out = cigan(&["train-classifier", "--config", s(&cfg), "--scheme", "none", "--out", s(&dir.path().join("c"))]);
    assert_eq!(out.status.code(), Some(3), "missing archive is a data error");
}

#[test]
fn resume_with_changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    toy_dataset(root);
    let cfg = root.join("c.toml");
    ok(&["train-gan", "--config", s(&cfg), "--out", s(&root.join("gan"))]);
    let resume = root.join("gan/checkpoints/trainer_00000004.cign");
    let out = cigan(&["train-gan", "--config", s(&cfg), "--seed", "5", "--resume", s(&resume), "--out", s(&root.join("gan"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let changed = root.join("c2.toml");
    fs::write(&changed, TOY.replace("learning_rate = 0.001\nbatch_size = 4", "learning_rate = 0.002\nbatch_size = 4")).unwrap();
    let out = cigan(&["train-gan", "--config", s(&changed), "--resume", s(&resume), "--out", s(&root.join("gan"))]);
    assert_eq!(out.status.code(), Some(2));
}
