use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use leafnet::cli::artifact_paths;
use leafnet::model::{InputSpec, ModelGraph, Preset};
use leafnet::train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

fn leafnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_leafnet"))
        .args(args)
        .env("LEAFNET_THREADS", "1")
        .output()
        .expect("spawn leafnet")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, classes: usize, seed: u64) -> PathBuf {
    let root = dir.join(name);
    let (c, s) = (classes.to_string(), seed.to_string());
    let o = leafnet(&["synth", "--classes", &c, "--per-class", "8", "--size", "16", "--out", p(&root), "--seed", &s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    root
}

const QUICK: [&str; 6] = ["--set", "image_size=16", "--set", "max_epochs=2", "--set", "batch_size=8"];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", p(data), "--out", p(out), "--seed", "5"];
    args.extend(QUICK);
    args.extend(extra);
    leafnet(&args)
}

#[test]
fn synth_scan_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "leaves", 3, 1);
    let o = leafnet(&["scan", "--data", p(&data)]);
    assert_eq!(code(&o), 0);
    let listing = String::from_utf8_lossy(&o.stdout);
    assert!(listing.starts_with("3 classes"), "{listing}");
    assert!(listing.contains("train: 24 images"), "{listing}");

    let ckpt = dir.path().join("model.ckpt");
    let o = train(&data, &ckpt, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (manifest, history) = artifact_paths(&ckpt);
    assert!(ckpt.exists() && manifest.exists() && history.exists());
    let cfg = std::fs::read_to_string(&manifest).unwrap();
    assert!(cfg.contains("seed = 5") && cfg.contains("max_epochs = 2"), "{cfg}");

    let report = dir.path().join("report.json");
    let o = leafnet(&["evaluate", "--ckpt", p(&ckpt), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = leafnet::metrics::EvalReport::from_json(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.model, "model");
    assert_eq!(r.per_class.len(), 3);
    assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 12);
}

#[test]
fn same_seed_gives_the_same_history_and_manifest_replays() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "leaves", 2, 3);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    assert_eq!(code(&train(&data, &a, &[])), 0);
    let (manifest, hist_a) = artifact_paths(&a);
    let o = leafnet(&["train", "--config", p(&manifest), "--out", p(&b)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist_b = artifact_paths(&b).1;
    let (ha, hb) = (std::fs::read_to_string(hist_a).unwrap(), std::fs::read_to_string(hist_b).unwrap());
    assert!(ha.starts_with("epoch,train_loss,train_acc,val_loss,val_acc,lr\n"));
    assert_eq!(ha, hb);
}

#[test]
fn finetune_with_zero_unfrozen_keeps_the_backbone() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", 3, 1);
    let b = synth(dir.path(), "b", 2, 9);
    let base = dir.path().join("base.ckpt");
    assert_eq!(code(&train(&a, &base, &[])), 0);
    let tuned = dir.path().join("tuned.ckpt");
    let mut args = vec!["finetune", "--base", p(&base), "--data", p(&b), "--unfreeze-last", "0", "--out", p(&tuned)];
    args.extend(&QUICK[2..]);
    let o = leafnet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let before = load_checkpoint::<f32>(&base).unwrap().model;
    let after = load_checkpoint::<f32>(&tuned).unwrap().model;
    assert_eq!(after.classes(), Some(2));
    let after_named = after.named_tensors();
    let mut compared = 0;
    for (name, t) in before.named_tensors() {
        if name.starts_with("head") {
            continue;
        }
        let (_, u) = after_named.iter().find(|(n, _)| *n == name).unwrap();
        assert!(t.bit_eq(u), "{name} changed");
        compared += 1;
    }
    assert!(compared > 40);

    let too_many = leafnet(&["finetune", "--base", p(&base), "--data", p(&b), "--unfreeze-last", "999", "--out", p(&tuned)]);
    assert_eq!(code(&too_many), 2);
}

#[test]
fn usage_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = leafnet(&["train", "--out", "x.ckpt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("Usage: leafnet train"), "{}", stderr(&o));
    assert_eq!(code(&leafnet(&["bogus"])), 2);
    assert_eq!(code(&leafnet(&["train", "--data", ".", "--out", "x", "--set", "learning_rate=1"])), 2);

    let missing = dir.path().join("nowhere");
    assert_eq!(code(&leafnet(&["scan", "--data", p(&missing)])), 3);

    // files that are not checkpoints
    let data = synth(dir.path(), "leaves", 2, 4);
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = dir.path().join("out.ckpt");
    let o = leafnet(&["finetune", "--base", p(&junk), "--data", p(&data), "--unfreeze-last", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let report = dir.path().join("r.json");
    let o = leafnet(&["evaluate", "--ckpt", p(&junk), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 3);

    // headless checkpoints cannot be evaluated
    let headless = dir.path().join("headless.ckpt");
    let m = ModelGraph::<f32>::build_backbone(Preset::Mini, InputSpec::new(3, 16, 16), 1).unwrap();
    save_checkpoint(&Checkpoint::new(m, vec![]), &headless).unwrap();
    let o = leafnet(&["evaluate", "--ckpt", p(&headless), "--data", p(&data), "--report", p(&report)]);
    assert_ne!(code(&o), 0);
}

#[test]
fn compare_renders_the_fixture_table() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let paths: Vec<PathBuf> = ["reference/alexnet.json", "resnet50_finetuned.json"].iter().map(|f| fixtures.join(f)).collect();
    let mut args = vec!["compare", "--reports"];
    args.extend(paths.iter().map(|x| p(x)));
    args.extend(["--csv", p(&csv)]);
    let o = leafnet(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("AlexNet"), "{table}");
    assert!(table.contains("0.98"), "{table}");
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn schedule_starts_at_lr0_and_ends_at_min() {
    let o = leafnet(&["schedule", "--lr0", "0.001", "--steps", "10", "--min-lr", "0.0001"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "step,lr");
    assert_eq!(rows[1], "0,0.001");
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[11], "10,0.0001");
    assert_eq!(code(&leafnet(&["schedule", "--lr0", "0.001", "--steps", "0"])), 2);
}
