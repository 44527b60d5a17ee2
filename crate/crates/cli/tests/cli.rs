use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const SMALL: &str = r#"{
  "corpus": {"num_videos": 24, "num_images": 4},
  "train": {"optim": {"total_epochs": 2, "batch_size": 8, "warmup_epochs": 0.5}, "steps_per_epoch": 3},
  "probe": {"epochs": 12, "warmup_epochs": 1},
  "finetune": {"epochs": 2, "warmup_epochs": 1, "batch_size": 8}
}"#;

fn vicmae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vicmae"))
        .args(args)
        .env_remove("VICMAE_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vicmae(args);
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

struct Setup {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn setup() -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("c.json");
    fs::write(&config, SMALL).unwrap();
    let data = root.join("data");
    ok(&["gen", "--config", s(&config), "--seed", "7", "--out", s(&data)]);
    Setup {
        data: data.join("manifest.json"),
        _dir: dir,
        root,
        config,
    }
}

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

fn rows(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_is_deterministic_and_prints_manifest() {
    let t = setup();
    let again = t.root.join("again");
    let stdout = ok(&["gen", "--config", s(&t.config), "--seed", "7", "--out", s(&again)]);
    assert_eq!(stdout.trim(), s(&again.join("manifest.json")));
    assert_eq!(tree(t.data.parent().unwrap()), tree(&again));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(vicmae(&["gen"]).status.code(), Some(2));
    assert_eq!(vicmae(&["eval", "nonsense"]).status.code(), Some(2));
    assert_eq!(vicmae(&["frobnicate"]).status.code(), Some(2));
    let out = vicmae(&["ablate", "--axis", "pooling", "--values", ""]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn validation_lists_every_violation() {
    let out = vicmae(&[
        "pretrain",
        "--dry-run",
        "--set",
        "train.mask_ratio=1.5",
        "--set",
        "train.lambda.switch_fraction=2",
        "--set",
        "model.patch_side=7",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["mask_ratio", "switch_fraction", "7"] {
        assert!(err.contains(needle), "{needle} missing from {err}");
    }
}

#[test]
fn dry_run_prints_config_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("never");
    let out = Command::new(env!("CARGO_BIN_EXE_vicmae"))
        .args(["pretrain", "--dry-run", "--out", s(&out_dir), "--set", "train.mask_ratio=0.6"])
        .env("VICMAE_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["seed"], 42);
    assert_eq!(cfg["train"]["seed"], 42);
    assert_eq!(cfg["train"]["mask_ratio"], 0.6);
    assert!(!out_dir.exists());
}

#[test]
fn pretrain_logs_lambda_and_reruns_identically() {
    let t = setup();
    let run = |name: &str, extra: &[&str]| {
        let out = t.root.join(name);
        let mut args = vec!["pretrain", "--config", s(&t.config), "--data", s(&t.data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    };
    let a = run("a", &[]);
    let b = run("b", &[]);
    let log_a = fs::read(a.join("metrics.ndjson")).unwrap();
    assert_eq!(log_a, fs::read(b.join("metrics.ndjson")).unwrap());
    assert_eq!(fs::read(a.join("final.ckpt")).unwrap(), fs::read(b.join("final.ckpt")).unwrap());
    let r = rows(&a.join("metrics.ndjson"));
    assert_eq!(r.len(), 6);
    assert!(r.iter().all(|row| row.get("lambda").is_some()));

    let c = run("c", &["--stop-at", "4"]);
    assert_eq!(rows(&c.join("metrics.ndjson")).len(), 4);
    let ckpt = t.root.join("mid.ckpt");
    fs::copy(c.join("final.ckpt"), &ckpt).unwrap();
    run("c", &["--resume", s(&ckpt)]);
    assert_eq!(fs::read(c.join("metrics.ndjson")).unwrap(), log_a);

    let m = run("m", &["--objective", "mae_only"]);
    assert!(rows(&m.join("metrics.ndjson")).iter().all(|row| row["contrastive"] == 0.0));
}

#[test]
fn eval_commands_write_results() {
    let t = setup();
    let pre = t.root.join("pre");
    ok(&["pretrain", "--config", s(&t.config), "--data", s(&t.data), "--out", s(&pre)]);
    let ckpt = pre.join("final.ckpt");
    let ev = t.root.join("eval");
    let common = |cmd: &str, ck: &Path| -> Vec<String> {
        ["eval", cmd, "--config", s(&t.config), "--ckpt", s(ck), "--data", s(&t.data), "--out", s(&ev)]
            .iter()
            .map(|a| a.to_string())
            .collect()
    };
    let call = |args: Vec<String>, extra: &[&str]| {
        let mut a: Vec<&str> = args.iter().map(String::as_str).collect();
        a.extend_from_slice(extra);
        ok(&a)
    };

    call(common("probe", &ckpt), &[]);
    let probe: Value = serde_json::from_str(&fs::read_to_string(ev.join("probe.json")).unwrap()).unwrap();
    for key in ["condition", "top1", "top5", "n", "seed", "checkpoint_hash"] {
        assert!(probe.get(key).is_some(), "{key}");
    }
    assert!(probe["n"].as_u64().unwrap() > 0);

    call(common("finetune", &ckpt), &["--inflate", "2"]);
    let video = ev.join("finetuned.ckpt");
    call(common("temporal", &video), &["--mode", "shuffled", "--perms", "16"]);
    let tr: Value = serde_json::from_str(&fs::read_to_string(ev.join("temporal-shuffled.json")).unwrap()).unwrap();
    assert_eq!(tr["condition"], "shuffled");
    call(common("multiview", &video), &["--clips", "2", "--spatial", "3"]);
    let mv: Value = serde_json::from_str(&fs::read_to_string(ev.join("multiview.json")).unwrap()).unwrap();
    assert_eq!(mv["condition"], "views=2x3");

    call(common("semi", &ckpt), &["--fractions", "0.5,1"]);
    let semi: Value = serde_json::from_str(&fs::read_to_string(ev.join("semi.json")).unwrap()).unwrap();
    assert_eq!(semi.as_array().unwrap().len(), 2);

    // image checkpoints have no temporal axis to permute
    let bad = vicmae(&common("temporal", &ckpt).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn ablate_pooling_emits_three_rows() {
    let t = setup();
    let out = t.root.join("abl");
    ok(&["ablate", "--config", s(&t.config), "--data", s(&t.data), "--out", s(&out), "--axis", "pooling"]);
    let table: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation-pooling.json")).unwrap()).unwrap();
    let values: Vec<&str> = table.as_array().unwrap().iter().map(|r| r["value"].as_str().unwrap()).collect();
    assert_eq!(values, ["gem", "max", "mean"]);
}

#[test]
fn ablate_keeps_going_past_a_bad_cell() {
    let t = setup();
    let out = t.root.join("abl");
    let res = vicmae(&[
        "ablate", "--config", s(&t.config), "--data", s(&t.data), "--out", s(&out), "--axis", "frame_sep", "--values",
        "0,bogus,D",
    ]);
    assert_eq!(res.status.code(), Some(1));
    let table: Value = serde_json::from_str(&fs::read_to_string(out.join("ablation-frame_sep.json")).unwrap()).unwrap();
    let status: Vec<&str> = table.as_array().unwrap().iter().map(|r| r["status"].as_str().unwrap()).collect();
    assert_eq!(status, ["ok", "failed", "ok"]);
}

#[test]
fn pack_writes_a_loadable_manifest() {
    let t = setup();
    // rebuild a class/clip/frame tree from the generated corpus
    let src = t.root.join("tree");
    let m: Value = serde_json::from_str(&fs::read_to_string(&t.data).unwrap()).unwrap();
    for rec in m["records"].as_array().unwrap().iter().filter(|r| r["kind"] == "video").take(4) {
        let class = format!("c{}", rec["label"]);
        let clip = src.join(&class).join(rec["id"].as_str().unwrap().replace('/', "_"));
        fs::create_dir_all(&clip).unwrap();
        for (i, f) in rec["frame_paths"].as_array().unwrap().iter().enumerate() {
            fs::copy(t.data.parent().unwrap().join(f.as_str().unwrap()), clip.join(format!("{i:03}.png"))).unwrap();
        }
    }
    let packed = t.root.join("packed");
    let stdout = ok(&["pack", "--src", s(&src), "--out", s(&packed)]);
    assert_eq!(stdout.trim(), s(&packed.join("manifest.json")));
    let pre = t.root.join("pre");
    ok(&[
        "pretrain", "--config", s(&t.config), "--data", stdout.trim(), "--out", s(&pre), "--set", "train.image_ratio=0",
        "--stop-at", "1",
    ]);
}
