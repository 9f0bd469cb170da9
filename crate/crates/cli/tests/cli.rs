use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use san::backbone::{BackboneConfig, Tap};
use san::config::RunConfig;
use san::side_adapter::SanConfig;

fn san(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_san")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small float32 run: 32px backbone, 64px side network and data.
fn tiny_config(data: &Path) -> RunConfig {
    let mut c = RunConfig::desk();
    c.backbone = BackboneConfig {
        depth: 4,
        width: 32,
        heads: 4,
        patch: 16,
        native_resolution: 32,
        embed_dim: 16,
        tap_layers: vec![Tap::Stem, Tap::Layer(2)],
        split_layer: 2,
    };
    c.san = SanConfig {
        depth: 2,
        width: 16,
        heads: 2,
        patch: 16,
        n_queries: 4,
        fusion_map: vec![(Tap::Stem, Tap::Stem), (Tap::Layer(2), Tap::Layer(1))],
        share_query_proj: false,
        bias_per_head: true,
        proj_dim: 16,
    };
    c.train.clip_input_side = 32;
    c.train.san_input_side = 64;
    c.train.batch_size = 2;
    c.train.total_iters = 4;
    c.train.checkpoint_every = 2;
    c.data.dir = data.to_path_buf();
    c.data.side = 64;
    c.data.n_train = 6;
    c.data.n_val = 3;
    c.data.prototype_samples = 2;
    c.profile.latency_runs = 0;
    c
}

fn write_config(dir: &Path, c: &RunConfig) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(c).unwrap()).unwrap();
    p
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Losses of the per-step lines of a metrics log, keyed by iteration.
fn logged_losses(path: &Path) -> BTreeMap<u64, f64> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v.get("loss").is_some())
        .map(|v| (v["iter"].as_u64().unwrap(), v["loss"].as_f64().unwrap()))
        .collect()
}

#[test]
fn usage_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&san(&[])), 1);
    assert_eq!(code(&san(&["frobnicate"])), 1);
    assert_eq!(code(&san(&["--help"])), 0);
    let o = san(&["profile", "--set", "bogus.x=1"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
    let o = san(&["profile", "--preset", "nonexistent"]);
    assert_eq!(code(&o), 1);
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"train": {"lerning_rate": 1}}"#).unwrap();
    let o = san(&["profile", "-c", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("train.lerning_rate"), "{}", stderr(&o));
}

#[test]
fn profile_prints_counts() {
    let o = san(&["profile", "--set", "profile.latency_runs=0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["trainable_params"].as_u64().unwrap() > 0);
    assert!(v["gflops"].as_f64().unwrap() > 0.0);
}

#[test]
fn synth_is_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let data = tmp.path().join(run);
        let cfg = write_config(tmp.path(), &tiny_config(&data));
        let o = san(&["synth", "-c", cfg.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        trees.push(files(&data));
    }
    assert!(trees[0].len() >= 2 + 2 * 9);
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn unwritable_data_dir_is_an_io_error_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("not_a_dir");
    std::fs::write(&blocker, b"").unwrap();
    let data = blocker.join("data");
    let cfg = write_config(tmp.path(), &tiny_config(&data));
    let o = san(&["synth", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(data.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn train_resume_and_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut config = tiny_config(&data);
    config.train.mode = san::model::Mode::TwoStage;
    let cfg = write_config(tmp.path(), &config);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&san(&["synth", "-c", cfg])), 0);

    let full = tmp.path().join("full");
    let o = san(&["train", "-c", cfg, "--out", full.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(full.join("step_000002.sant").exists());
    assert!(full.join("final.sant").exists());
    let log = std::fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["mode"], "two_stage");
    assert_eq!(header["routing"]["san"], 1.0);
    assert!(header["routing"].get("backbone").is_none());
    let losses = logged_losses(&full.join("metrics.jsonl"));
    assert_eq!(losses.len(), 4);

    let resumed = tmp.path().join("resumed");
    let ckpt = full.join("step_000002.sant");
    let o = san(&[
        "train",
        "-c",
        cfg,
        "--out",
        resumed.to_str().unwrap(),
        "--resume",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = logged_losses(&resumed.join("metrics.jsonl"));
    assert_eq!(again.keys().copied().collect::<Vec<_>>(), vec![2, 3]);
    for (it, l) in &again {
        assert!((l - losses[it]).abs() <= 1e-5, "iter {it}: {l} vs {}", losses[it]);
    }

    let eval_dir = tmp.path().join("eval");
    let o = san(&[
        "eval",
        "-c",
        cfg,
        "--set",
        "eval.write_maps=true",
        "--checkpoint",
        full.join("final.sant").to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(eval_dir.join("eval_val.json").exists());
    assert_eq!(std::fs::read_dir(eval_dir.join("maps")).unwrap().count(), 3);

    let o = san(&[
        "eval",
        "-c",
        cfg,
        "--checkpoint",
        tmp.path().join("missing.sant").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing.sant"));

    // An emptied manifest is a usage error.
    let manifest = data.join("val.json");
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    m["items"] = serde_json::json!([]);
    std::fs::write(&manifest, m.to_string()).unwrap();
    let o = san(&[
        "eval",
        "-c",
        cfg,
        "--checkpoint",
        full.join("final.sant").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("no images"));
}

#[test]
fn diverging_training_exits_with_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = tiny_config(&tmp.path().join("data"));
    config.train.lr = 1e300;
    config.train.weight_decay = 0.0;
    let cfg = write_config(tmp.path(), &config);
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&san(&["synth", "-c", cfg])), 0);
    let o = san(&["train", "-c", cfg, "--out", tmp.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("numeric"), "{}", stderr(&o));
}
