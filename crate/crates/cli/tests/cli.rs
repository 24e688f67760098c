use std::path::Path;
use std::process::{Command, Output};

use emoter_core::datagen::{load_feature_container, MELD_CLASSES};
use emoter_core::trainer::hyperparam_table;

fn emoter(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emoter"))
        .args(args)
        .current_dir(dir)
        .env_remove("EMOTER_SEED")
        .output()
        .expect("run emoter")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = r#"{
  "seed": 7,
  "seeds": [7, 8],
  "data": {"synthetic": {"n": 240, "dims": {"text": 6, "audio": 6, "visual": 6}}},
  "hyper": {
    "epochs": 2, "fusion_dim": 8, "hidden_dim": 8, "sync_dim": 8, "proj_dim": 4,
    "gat_heads": 2, "encoder_heads": 2, "encoder_layers": 1, "pool_queries": 2, "experts": 2,
    "lr_text": 3e-3, "lr_audio": 3e-3, "lr_visual": 3e-3, "lr_fusion": 3e-3, "lr_sync": 3e-3
  }
}"#;

#[test]
fn bogus_profile_is_a_config_error_naming_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = emoter(&["gen", "--profile", "bogus", "--out", "x.emof"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--profile"), "{}", stderr(&o));
    assert!(!dir.path().join("x.emof").exists());
}

#[test]
fn gen_writes_a_loadable_container_with_meld_proportions() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "gen",
        "--n",
        "10000",
        "--seed",
        "1",
        "--text-dim",
        "4",
        "--audio-dim",
        "4",
        "--visual-dim",
        "4",
        "--out",
        "d.emof",
    ];
    let o = emoter(&args, dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let fs = load_feature_container(&dir.path().join("d.emof")).unwrap();
    assert_eq!(fs.samples.len(), 10_000);
    assert_eq!(fs.class_count, MELD_CLASSES.len());
    let share = |name: &str| {
        let c = MELD_CLASSES.iter().position(|&n| n == name).unwrap();
        100.0 * fs.samples.iter().filter(|s| s.label == c).count() as f64 / 10_000.0
    };
    for (name, pct) in [("neutral", 47.1), ("disgust", 2.7), ("fear", 2.7)] {
        assert!((share(name) - pct).abs() <= 0.5, "{name}: {}", share(name));
    }
}

#[test]
fn seed_env_overrides_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["gen", "--n", "200", "--text-dim", "3", "--audio-dim", "3", "--visual-dim", "3"];
    let run = |seed_flag: &str, env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_emoter"));
        c.args(base).args(["--seed", seed_flag, "--out", out]).current_dir(dir.path());
        match env {
            Some(v) => c.env("EMOTER_SEED", v),
            None => c.env_remove("EMOTER_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        std::fs::read(dir.path().join(out)).unwrap()
    };
    let a = run("1", None, "a.emof");
    let b = run("9", Some("1"), "b.emof");
    let c = run("1", Some("2"), "c.emof");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn identical_score_files_give_a_degenerate_test() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.json"), "[0.61, 0.63, 0.60, 0.62, 0.64]").unwrap();
    let o = emoter(&["ttest", "a.json", "a.json"], dir.path());
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["result"]["p"], 1.0);
    assert_eq!(v["result"]["degenerate"], true);
}

#[test]
fn help_lists_every_hyperparameter_with_its_default() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "ablate"] {
        let o = emoter(&[cmd, "--help"], dir.path());
        let text = String::from_utf8(o.stdout).unwrap();
        for (name, default, _) in hyperparam_table() {
            let line = text
                .lines()
                .find(|l| l.split_whitespace().next() == Some(name))
                .unwrap_or_else(|| panic!("{cmd} --help lacks {name}"));
            assert!(line.split_whitespace().nth(1) == Some(default.as_str()), "{line}");
        }
    }
    let o = emoter(&["gen", "--help"], dir.path());
    let text = String::from_utf8(o.stdout).unwrap();
    for needle in ["--profile", "[default: meld]", "[default: 10000]", "--seed", "--noise", "--out"] {
        assert!(text.contains(needle), "gen --help lacks {needle}");
    }
    let o = emoter(&["gradcheck", "--help"], dir.path());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("[default: 100]") && text.contains("[default: 0.0001]"), "{text}");
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.json"), r#"{"hyper": {"epochs": 2, "epoch": 3}}"#).unwrap();
    assert_eq!(emoter(&["train", "--config", "bad.json"], p).status.code(), Some(2));
    assert_eq!(emoter(&["train", "--config", "missing.json"], p).status.code(), Some(3));
    assert_eq!(emoter(&["train", "--set", "dropout=2"], p).status.code(), Some(2));
    std::fs::write(p.join("junk.emoc"), b"not a checkpoint").unwrap();
    assert_eq!(emoter(&["eval", "--checkpoint", "junk.emoc"], p).status.code(), Some(3));
    let o = emoter(&["gradcheck", "--rounds", "1", "--rel-tol", "1e-30"], p);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn train_then_eval_reproduces_the_test_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.json"), TINY).unwrap();
    let o = emoter(&["train", "--config", "tiny.json", "--output-dir", "run"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["checkpoint.emoc", "metrics.json", "metrics.csv"] {
        assert!(p.join("run").join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["stages"], serde_json::json!(["sync", "teacher", "distill", "fusion"]));
    let o = emoter(&["eval", "--checkpoint", "run/checkpoint.emoc", "--config", "tiny.json"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(eval, metrics["test"]);

    // pinned so that unintended numeric changes show up
    let wf1 = metrics["test"]["fusion"]["weighted_f1"].as_f64().unwrap();
    assert!((wf1 - GOLDEN_TINY_WF1).abs() < 1e-12, "fusion WF1 {wf1:.17}");
}

const GOLDEN_TINY_WF1: f64 = 0.757_575_757_575_757_6;

#[test]
fn ablate_reports_the_five_arms() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("tiny.json"), TINY).unwrap();
    let o = emoter(&["ablate", "--config", "tiny.json", "--output-dir", "abl", "--set", "epochs=1"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(p.join("abl/ablation.json")).unwrap()).unwrap();
    let arms: Vec<&str> = v["arms"].as_array().unwrap().iter().map(|a| a["arm"].as_str().unwrap()).collect();
    assert_eq!(arms, ["full", "no_speaker_id", "no_fusion_loss", "no_kd", "no_contrastive"]);
    assert_eq!(v["arms"][0]["delta_wf1"], 0.0);
    assert!(v["arms"][0]["t_test"].is_null());
    assert_eq!(v["arms"][1]["weighted_f1"].as_array().unwrap().len(), 2);
}
