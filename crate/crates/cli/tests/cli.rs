use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
n_train = 4
n_test = 3
crop = 16

[data.phantom]
size = 20

[train]
epochs_phase1 = 1
epochs_phase2 = 0
checkpoint_every = 0

[train.generator]
resnet_blocks = 1
base_width = 4

[train.discriminator]
layers = 3
base_width = 4

[train.augment]
flip_vertical = 0.0
flip_horizontal = 0.0
rotation_deg = 0.0
shear = 0.0
translation = 0.0
"#;

fn dicycle(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dicycle"))
        .args(args)
        .env_remove("DICYCLE_DETERMINISTIC")
        .output()
        .expect("spawn dicycle")
}

fn ok(args: &[&str]) -> String {
    let out = dicycle(args);
    assert!(
        out.status.success(),
        "dicycle {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = dicycle(args);
    assert!(!out.status.success(), "dicycle {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn env() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.toml");
    fs::write(&config, SMALL).unwrap();
    Env {
        _dir: dir,
        root,
        config,
    }
}

fn gen(e: &Env, name: &str, extra: &[&str]) -> PathBuf {
    let out = e.root.join(name);
    let mut args = vec!["gen-data", "--config", s(&e.config), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_defaults_summary_and_refusal() {
    let e = env();
    let out = e.root.join("full");
    let stdout = ok(&["gen-data", "--out", s(&out)]);
    assert!(stdout.contains("n_A = 200, n_B = 200, n_test = 50"), "{stdout}");
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["n_a"], 200);
    assert_eq!(m["n_test"], 50);

    let err = fails(&["gen-data", "--out", s(&out)]);
    assert!(err.contains("not empty"), "{err}");
    ok(&["gen-data", "--config", s(&e.config), "--out", s(&out), "--force"]);
    assert_eq!(json(&out.join("manifest.json"))["n_a"], 4);
    assert_eq!(fs::read_dir(out.join("domain_a").join("train")).unwrap().count(), 4);
}

#[test]
fn gen_data_is_reproducible_and_records_amplitude() {
    let e = env();
    let a = gen(&e, "a", &["--seed", "9"]);
    let b = gen(&e, "b", &["--seed", "9"]);
    assert_eq!(tree(&a), tree(&b));
    let c = gen(&e, "c", &["--seed", "9", "--amplitude", "0"]);
    assert_eq!(json(&c.join("manifest.json"))["deformation"]["amplitude"], 0.0);
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn train_cycle_smoke_run() {
    let e = env();
    let data = gen(&e, "data", &[]);
    let run = e.root.join("run");
    let stdout = ok(&[
        "train",
        "--config",
        s(&e.config),
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--model",
        "cycle",
        "--epochs",
        "1",
    ]);
    assert!(stdout.contains("epoch   0"), "{stdout}");
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 4, "1 epoch x 4 iterations plus header");

    let resolved = fs::read_to_string(run.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("baseline_mode = true"));
    assert!(resolved.contains("lambda_align = 0.0"));
    assert!(resolved.contains("lambda_dicyc = 0.0"));
    let m = json(&run.join("ckpt_last").join("manifest.json"));
    for net in m["networks"].as_array().unwrap() {
        assert_eq!(net["theta_t_count"], 0);
    }
    assert_eq!(m["config"]["weights"]["lambda_dicyc"], 0.0);
}

#[test]
fn train_requires_dataset_manifest() {
    let e = env();
    let missing = e.root.join("nowhere");
    let err = fails(&["train", "--data", s(&missing), "--out", s(&e.root.join("run"))]);
    assert!(err.contains("nowhere"), "{err}");
}

#[test]
fn resolved_config_reproduces_the_run() {
    let e = env();
    let data = gen(&e, "data", &[]);
    let run1 = e.root.join("run1");
    ok(&[
        "train",
        "--config",
        s(&e.config),
        "--data",
        s(&data),
        "--out",
        s(&run1),
        "--seed",
        "4",
    ]);
    let resolved = run1.join("config.resolved.toml");
    let run2 = e.root.join("run2");
    ok(&["train", "--config", s(&resolved), "--data", s(&data), "--out", s(&run2)]);
    assert_eq!(
        fs::read(run1.join("train_log.csv")).unwrap(),
        fs::read(run2.join("train_log.csv")).unwrap()
    );
    assert_eq!(
        fs::read(&resolved).unwrap(),
        fs::read(run2.join("config.resolved.toml")).unwrap()
    );
}

#[test]
fn eval_synth_and_errors() {
    let e = env();
    let data = gen(&e, "data", &[]);
    let run = e.root.join("run");
    ok(&["train", "--config", s(&e.config), "--data", s(&data), "--out", s(&run)]);

    let stdout = ok(&["eval", "--run", s(&run), "--data", s(&data), "--self-test"]);
    assert!(stdout.contains("gt_b_aligned"), "{stdout}");
    let out = run.join("eval").join("a2b_undeformed");
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["metrics"]["mse"]["mean"], 0.0);
    assert!((m["metrics"]["ssim"]["mean"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.lines().last().unwrap().starts_with("mean (std),0.000 (0.000),"));
    assert!(out.join("montage.png").exists());
    assert!(out.join("config.resolved.toml").exists());

    ok(&[
        "eval",
        "--run",
        s(&run),
        "--data",
        s(&data),
        "--direction",
        "b2a",
        "--mode",
        "deformed",
    ]);
    let m = json(&run.join("eval").join("b2a_deformed").join("metrics.json"));
    assert_eq!(m["ground_truth"], "domain_a/test");
    assert!(m["metrics"]["mse"]["mean"].as_f64().unwrap() > 0.0);

    let synth = e.root.join("synth");
    let input = data.join("domain_a").join("test");
    let stdout = ok(&["synth", "--run", s(&run), "--input", s(&input), "--out", s(&synth)]);
    assert!(stdout.contains("translated 3 image(s)"), "{stdout}");
    let pngs = fs::read_dir(&synth)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 3);

    fs::remove_dir_all(data.join("gt_b_aligned")).unwrap();
    let err = fails(&["eval", "--run", s(&run), "--data", s(&data)]);
    assert!(err.contains("gt_b_aligned"), "{err}");
}

#[test]
fn compare_single_seed_on_undeformed_data() {
    let e = env();
    let data = gen(&e, "data", &["--amplitude", "0"]);
    let out = e.root.join("cmp");
    let stdout = ok(&[
        "compare",
        "--config",
        s(&e.config),
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--seeds",
        "1",
    ]);
    assert!(stdout.contains("cycle,") && stdout.contains("dicycle,"), "{stdout}");
    let r = json(&out.join("comparison.json"));
    let models = r["models"].as_array().unwrap();
    assert_eq!(models.len(), 2);
    for m in models {
        assert_eq!(m["per_seed"].as_array().unwrap().len(), 1);
        assert!(m["per_seed"][0]["mse"].as_f64().unwrap() > 0.0);
    }
    for w in r["dicycle_vs_cycle"].as_array().unwrap() {
        assert_eq!(w["wins"].as_u64().unwrap() + w["losses"].as_u64().unwrap(), 1);
    }
    assert!(out.join("config.resolved.toml").exists());
}

#[test]
fn bad_deterministic_env_is_rejected() {
    let e = env();
    let data = gen(&e, "data", &[]);
    let out = Command::new(env!("CARGO_BIN_EXE_dicycle"))
        .args([
            "train",
            "--config",
            s(&e.config),
            "--data",
            s(&data),
            "--out",
            s(&e.root.join("r")),
        ])
        .env("DICYCLE_DETERMINISTIC", "maybe")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("DICYCLE_DETERMINISTIC"));
}
