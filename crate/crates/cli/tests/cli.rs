use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use timgan_core::checkpoint;
use timgan_core::editor::{Model, ModelConfig};
use timgan_core::image_io::{read_png, write_png};
use timgan_core::scenegen::{render_scene, SceneDescription};

const SUBCOMMANDS: [&str; 8] = ["gen-data", "pretrain", "train", "eval", "ablate", "edit", "export-routes", "serve"];

fn timgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timgan"))
        .args(args)
        .env_remove("TIMGAN_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn succeed(args: &[&str]) -> String {
    let out = timgan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(format!("{name}.txt"))
}

#[test]
fn help_snapshots() {
    let update = std::env::var_os("UPDATE_SNAPSHOTS").is_some();
    let mut names = vec![("timgan".to_string(), vec!["--help".to_string()])];
    names.extend(SUBCOMMANDS.iter().map(|c| (c.to_string(), vec![c.to_string(), "--help".into()])));
    for (name, args) in names {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let help = succeed(&args);
        let path = snapshot_path(&name);
        if update {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, &help).unwrap();
            continue;
        }
        let expected = std::fs::read_to_string(&path)
            .unwrap_or_else(|_| panic!("missing snapshot {}; rerun with UPDATE_SNAPSHOTS=1", path.display()));
        assert_eq!(help, expected, "help for {name} changed; rerun with UPDATE_SNAPSHOTS=1 if intended");
    }
}

#[test]
fn help_lists_the_shared_flags() {
    let flags: [(&str, &[&str]); 8] = [
        ("gen-data", &["--config", "--seed", "--data"]),
        ("pretrain", &["--config", "--seed", "--data", "--out"]),
        ("train", &["--config", "--seed", "--data", "--ckpt", "--out", "--variant", "--tau"]),
        ("eval", &["--config", "--seed", "--ckpt", "--data", "--split", "--pool-size", "--out"]),
        ("ablate", &["--config", "--seed", "--data", "--ckpt", "--out", "--variant", "--pool-size", "--tau"]),
        ("edit", &["--ckpt", "--image", "--text", "--out", "--seed", "--tau"]),
        ("export-routes", &["--ckpt", "--data", "--split", "--out"]),
        ("serve", &["--ckpt", "--host", "--port"]),
    ];
    for (cmd, wanted) in flags {
        let help = succeed(&[cmd, "--help"]);
        for flag in wanted {
            assert!(help.contains(flag), "{cmd} --help lacks {flag}");
        }
    }
}

#[test]
fn exit_codes() {
    assert_eq!(timgan(&["--version"]).status.code(), Some(0));
    assert_eq!(timgan(&[]).status.code(), Some(1));
    assert_eq!(timgan(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(timgan(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(timgan(&["eval", "--ckpt", "c", "--split", "validation"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    // No seed anywhere is a usage error.
    let out = timgan(&["gen-data", "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    // A missing checkpoint is a runtime failure.
    let out = timgan(&["edit", "--ckpt", s(&dir.path().join("none")), "--image", "x.png", "--text", "add", "--out", "y.png"]);
    assert_eq!(out.status.code(), Some(2));
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path);
        }
    }
    out
}

#[test]
fn gen_data_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("data.json");
    std::fs::write(&cfg, json!({"train": 6, "test": 3, "seed": 5}).to_string()).unwrap();
    let data = dir.path().join("data");
    succeed(&["gen-data", "--config", s(&cfg), "--data", s(&data)]);
    let first = read_dir_bytes(&data);
    assert!(first.iter().any(|(name, _)| name == "run_manifest.json"));
    succeed(&["gen-data", "--config", s(&cfg), "--data", s(&data)]);
    assert_eq!(read_dir_bytes(&data), first);

    // The flag seed wins over the file and lands in the manifest.
    let other = dir.path().join("other");
    succeed(&["gen-data", "--config", s(&cfg), "--seed", "6", "--data", s(&other)]);
    let manifest: Value = serde_json::from_slice(&std::fs::read(other.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 6);
    assert_eq!(manifest["config"]["train"], 6);
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
    assert_ne!(read_dir_bytes(&other), first);
}

#[test]
fn edit_writes_image_and_mask() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt");
    let model = Model::<f32>::new(ModelConfig::default(), 1).unwrap();
    checkpoint::save(&model, &ckpt, json!({"seed": 1})).unwrap();

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let scene = SceneDescription::random(&mut rng, 64, 1, 3).unwrap();
    let x = dir.path().join("x.png");
    write_png(&x, &render_scene(&scene)).unwrap();

    let out_dir = dir.path().join("out");
    let y = out_dir.join("y.png");
    let args = ["edit", "--ckpt", s(&ckpt), "--image", s(&x), "--text", "remove the object at the top left", "--out", s(&y)];
    succeed(&args);
    assert_eq!(read_png(&y).unwrap().dim(), (3, 64, 64));
    let mask = image::open(out_dir.join("y.mask.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (64, 64));
    assert_eq!(mask.color(), image::ColorType::L8);
    assert!(out_dir.join("run_manifest.json").exists());

    // Deterministic routing without a seed.
    let first = std::fs::read(&y).unwrap();
    succeed(&args);
    assert_eq!(std::fs::read(&y).unwrap(), first);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data_cfg = root.join("data.json");
    std::fs::write(&data_cfg, json!({"train": 8, "test": 4, "seed": 2, "canvas": 16}).to_string()).unwrap();
    let train_cfg = root.join("train.json");
    let mut train = serde_json::to_value(ModelConfig::tiny()).unwrap();
    for (k, v) in [
        ("batch_size", json!(4)),
        ("pretrain_batch_size", json!(4)),
        ("max_steps", json!(2)),
        ("pretrain_max_steps", json!(2)),
    ] {
        train[k] = v;
    }
    std::fs::write(&train_cfg, train.to_string()).unwrap();
    let data = root.join("data");
    let (pre, trained) = (root.join("pre"), root.join("trained"));

    succeed(&["gen-data", "--config", s(&data_cfg), "--data", s(&data)]);
    succeed(&["pretrain", "--config", s(&train_cfg), "--seed", "1", "--data", s(&data), "--out", s(&pre)]);
    assert!(pre.join("pretrain_loss.csv").exists());
    succeed(&[
        "train", "--config", s(&train_cfg), "--seed", "1", "--data", s(&data), "--ckpt", s(&pre), "--out", s(&trained),
    ]);
    assert!(trained.join("metrics.csv").exists());
    let manifest: Value = serde_json::from_slice(&std::fs::read(trained.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["max_steps"], 2);

    // No seed flag: the checkpoint's training seed is used.
    let stdout = succeed(&["eval", "--ckpt", s(&trained), "--data", s(&data), "--split", "test", "--pool-size", "5"]);
    assert!(stdout.contains("frechet"), "{stdout}");
    assert!(stdout.contains("RS@1") && stdout.contains("RS@5"), "{stdout}");
    let report: Value = serde_json::from_slice(&std::fs::read(trained.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 1);
    assert_eq!(report["n_queries"], 4);

    let routes = root.join("routes.csv");
    succeed(&["export-routes", "--ckpt", s(&trained), "--data", s(&data), "--out", s(&routes)]);
    let csv = std::fs::read_to_string(&routes).unwrap();
    // Header plus one row per sample, layer and block.
    assert_eq!(csv.lines().count(), 1 + 4 * 2 * 2);
}
