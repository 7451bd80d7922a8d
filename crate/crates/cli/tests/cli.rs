use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsn_core::data;
use fsn_core::denoiser::checkpoint::{self, CheckpointMeta};
use fsn_core::denoiser::{Denoiser, DenoiserConfig};
use fsn_core::layout::{save_label_map, LabelMap};
use fsn_core::netpbm::{self, Kind};
use fsn_core::pipeline::Conditioner;
use sha2::{Digest, Sha256};

fn fsn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsn")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn digest(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_model() -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        channel_mults: vec![1, 2],
        attention_resolutions: vec![32, 16],
        res_blocks: 1,
        norm_groups: 2,
        text_dim: 8,
        ..DenoiserConfig::default()
    }
}

/// Writes a dataset and a run config into `dir`.
fn workspace(dir: &Path, pretrain_steps: usize, finetune_steps: usize, lr: f64) -> PathBuf {
    let out = fsn(&["gen-data", "--out", s(&dir.join("data")), "--n", "60", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = serde_json::json!({
        "model": small_model(),
        "data": "data/manifest.jsonl",
        "out_dir": "runs",
        "pretrain_steps": pretrain_steps,
        "finetune_steps": finetune_steps,
        "batch_size": 2,
        "lr": lr,
        "checkpoint_every": 0,
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn two_region_labels(dir: &Path) -> PathBuf {
    // left half red square (class 1), right half background
    let ids = (0..32 * 32).map(|p| if p % 32 < 16 { 1 } else { 0 }).collect();
    let path = dir.join("labels.pgm");
    save_label_map(&LabelMap::new(32, 32, ids).unwrap(), &path).unwrap();
    path
}

#[test]
fn gen_data_empty_repeatable_and_holdout() {
    let dir = tempfile::tempdir().unwrap();
    let empty = fsn(&["gen-data", "--out", s(&dir.path().join("e")), "--n", "0"]);
    assert_eq!(code(&empty), 0);
    assert_eq!(std::fs::read_to_string(dir.path().join("e/manifest.jsonl")).unwrap(), "");

    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&fsn(&["gen-data", "--out", s(d), "--n", "40", "--seed", "3"])), 0);
    }
    for f in ["manifest.jsonl", "dataset.json", "images/00010.ppm", "labels/00039.pgm"] {
        assert_eq!(digest(&a.join(f)), digest(&b.join(f)), "{f}");
    }

    let held = fsn(&["gen-data", "--out", s(&dir.path().join("h")), "--n", "400", "--holdout", "blue triangle"]);
    assert_eq!(code(&held), 0);
    let text = stdout(&held);
    let row = text.lines().find(|l| l.starts_with("blue triangle")).unwrap();
    let cols: Vec<usize> = row.split_whitespace().skip(2).map(|c| c.parse().unwrap()).collect();
    assert!(cols[0] > 0);
    assert_eq!(cols[1], 0);

    assert_eq!(code(&fsn(&["gen-data", "--out", s(&dir.path().join("x")), "--holdout", "plaid square"])), 1);
    assert_eq!(code(&fsn(&["gen-data", "--out", "/proc/forbidden/data", "--n", "2"])), 2);
    assert_eq!(code(&fsn(&["gen-data", "--bogus"])), 1);
}

#[test]
fn zero_steps_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 0, 0, 1e-4);
    let out = fsn(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = PathBuf::from(stdout(&out).trim());
    let init = Denoiser::new(small_model()).unwrap();
    let meta = CheckpointMeta { text_seed: 0x5EED, vocab_size: 15, step: 0, stage: "pretrain".into() };
    assert_eq!(std::fs::read(&ckpt).unwrap(), checkpoint::encode(&init, &meta).unwrap());
    let log = std::fs::read_to_string(dir.path().join("runs/pretrain_loss.csv")).unwrap();
    assert_eq!(log, "step,loss\n");
}

#[test]
fn training_lowers_the_loss_and_keeps_the_text_encoder_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 2000, 20, 1e-3);
    let out = fsn(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("runs/pretrain_loss.csv")).unwrap();
    let losses: Vec<f64> = log.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 2000);
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let (first, last) = (median(&losses[..100]), median(&losses[1900..]));
    assert!(last < first, "median loss {first} -> {last}");

    let pre = dir.path().join("runs/pretrain.fsn");
    let fine = fsn(&["finetune", "--config", s(&cfg), "--init", s(&pre)]);
    assert_eq!(code(&fine), 0, "{}", String::from_utf8_lossy(&fine.stderr));
    let (m0, meta0) = checkpoint::load(&pre).unwrap();
    let (m1, meta1) = checkpoint::load(&dir.path().join("runs/finetune.fsn")).unwrap();
    assert_eq!((meta1.step, meta1.stage.as_str()), (2020, "finetune"));
    let c0 = Conditioner::for_checkpoint(data::vocabulary(), &m0, &meta0).unwrap();
    let c1 = Conditioner::for_checkpoint(data::vocabulary(), &m1, &meta1).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(c0.encoder.word_table()), bits(c1.encoder.word_table()));
    assert_eq!(bits(c0.encoder.position_table()), bits(c1.encoder.position_table()));
    assert_ne!(checkpoint::encode(&m0, &meta1).unwrap(), checkpoint::encode(&m1, &meta1).unwrap());

    // fine-tuning must start from a pretrain checkpoint
    let again = fsn(&["finetune", "--config", s(&cfg), "--init", s(&dir.path().join("runs/finetune.fsn"))]);
    assert_eq!(code(&again), 1);
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 50, 0, 1e300);
    let out = fsn(&["pretrain", "--config", s(&cfg)]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace(dir.path(), 0, 0, 1e-4);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["surprise"] = serde_json::json!(1);
    let unknown = dir.path().join("unknown.json");
    std::fs::write(&unknown, v.to_string()).unwrap();
    assert_eq!(code(&fsn(&["pretrain", "--config", s(&unknown)])), 1);

    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["data"] = serde_json::json!("nowhere/manifest.jsonl");
    let missing = dir.path().join("missing.json");
    std::fs::write(&missing, v.to_string()).unwrap();
    assert_eq!(code(&fsn(&["pretrain", "--config", s(&missing)])), 2);
    assert_eq!(code(&fsn(&["pretrain", "--config", s(&dir.path().join("absent.json"))])), 2);
}

/// An untrained checkpoint is enough to exercise sampling plumbing.
fn init_checkpoint(dir: &Path) -> PathBuf {
    let path = dir.join("init.fsn");
    let meta = CheckpointMeta { text_seed: 7, vocab_size: 15, step: 0, stage: "pretrain".into() };
    checkpoint::save(&path, &Denoiser::new(small_model()).unwrap(), &meta).unwrap();
    path
}

#[test]
fn sample_writes_a_reproducible_image_and_reports_bindings() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path());
    let labels = two_region_labels(dir.path());
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["sample", "--checkpoint", s(&ckpt), "--labels", s(&labels), "--steps", "5", "--out", s(out)];
        args.extend_from_slice(extra);
        fsn(&args)
    };
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    let first = run(&a, &["--seed", "4"]);
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    assert_eq!(code(&run(&b, &["--seed", "4"])), 0);
    assert_eq!(digest(&a), digest(&b));
    let img = netpbm::read(&a, Kind::Rgb).unwrap();
    assert_eq!((img.width, img.height), (32, 32));
    let text = stdout(&first);
    assert!(text.contains("prompt: <bos> background red square <eos>"), "{text}");
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["2", "red", "class", "1"]), "{text}");

    let bound = run(&dir.path().join("c.ppm"), &["--text", "blue", "--bind", "blue=1", "--override", "swap:1,2"]);
    assert_eq!(code(&bound), 0, "{}", String::from_utf8_lossy(&bound.stderr));
    assert!(stdout(&bound).lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["4", "blue", "class", "1"]));

    let text_only = fsn(&["sample", "--checkpoint", s(&ckpt), "--text", "red square", "--steps", "4", "--out", s(&dir.path().join("t.ppm"))]);
    assert_eq!(code(&text_only), 0, "{}", String::from_utf8_lossy(&text_only.stderr));

    for bad in [
        vec!["--text", "warp"],
        vec!["--text", "blue", "--bind", "blue=99"],
        vec!["--text", "blue", "--bind", "blue=9"],
        vec!["--text", "blue", "--bind", "green=1"],
        vec!["--override", "swap:1"],
        vec!["--override", "swap:1,40"],
    ] {
        assert_eq!(code(&run(&dir.path().join("bad.ppm"), &bad)), 1, "{bad:?}");
    }
    let missing = fsn(&["sample", "--checkpoint", "/nonexistent.fsn", "--out", s(&dir.path().join("m.ppm"))]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn eval_on_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&fsn(&["gen-data", "--out", s(&dir.path().join("d")), "--n", "50", "--seed", "2"])), 0);
    let report = dir.path().join("report.json");
    let manifest = dir.path().join("d/manifest.jsonl");
    let out = fsn(&["eval", "--manifest", s(&manifest), "--ground-truth", "--out", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let obj = v.as_object().unwrap();
    let mut keys: Vec<&str> = obj.keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["miou", "n_images", "per_class", "pixel_acc"]);
    assert_eq!(obj["miou"], 1.0);
    assert_eq!(obj["pixel_acc"], 1.0);
    assert_eq!(obj["n_images"], 5);
    assert!(obj["per_class"].as_object().unwrap().values().all(|x| x == 1.0));

    let ckpt = init_checkpoint(dir.path());
    let sampled = fsn(&[
        "eval", "--checkpoint", s(&ckpt), "--manifest", s(&manifest), "--out", s(&report), "--steps", "4", "--limit", "2",
    ]);
    assert_eq!(code(&sampled), 0, "{}", String::from_utf8_lossy(&sampled.stderr));
    assert_eq!(code(&fsn(&["eval", "--checkpoint", "/nope.fsn", "--manifest", s(&manifest), "--out", s(&report)])), 2);
}

#[test]
fn inspect_attn_renders_masked_channels_dark_outside_their_region() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(dir.path());
    let labels = two_region_labels(dir.path());
    let maps = dir.path().join("maps");
    let out = fsn(&[
        "inspect-attn", "--checkpoint", s(&ckpt), "--labels", s(&labels), "--layer", "0", "--step", "2", "--steps", "5",
        "--out", s(&maps),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // layer 0 runs at 32x32; channel 2 is "red", bound to the left half
    let red = netpbm::read(&maps.join("channel_02_red.pgm"), Kind::Gray).unwrap();
    assert_eq!((red.width, red.height), (32, 32));
    for (p, &v) in red.bytes.iter().enumerate() {
        if p % 32 >= 16 {
            assert_eq!(v, 0, "pixel {p}");
        }
    }
    assert!(red.bytes.iter().enumerate().any(|(p, &v)| p % 32 < 16 && v > 0));
    let bos = netpbm::read(&maps.join("channel_00_bos.pgm"), Kind::Gray).unwrap();
    assert!(bos.bytes.iter().filter(|&&v| v > 0).count() > 32 * 16);
    let files = std::fs::read_dir(&maps).unwrap().count();
    assert_eq!(files, 16);

    let bad = fsn(&["inspect-attn", "--checkpoint", s(&ckpt), "--labels", s(&labels), "--layer", "99", "--out", s(&maps)]);
    assert_eq!(code(&bad), 1);
}
