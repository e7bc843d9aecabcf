//! Drives the `asyppo` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use asyppo::xio::{read_metrics, RunManifest};

const SMALL: &str = r#"
algorithm = "asyppo"
env = "micro_mdp"
num_prompts = 4
rollout_batch_size = 4
num_return_sequences = 4
max_steps = 3
actor_hidden = [8]
critic_hidden = [4]
minibatch_size = 16
eval_episodes = 20
"#;

fn asyppo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asyppo"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("c.toml");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn check_svg(path: &Path) {
    let text = std::fs::read_to_string(path).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let raw = doc.descendants().filter(|n| n.attribute("class") == Some("raw")).count();
    let smoothed = doc.descendants().filter(|n| n.attribute("class") == Some("smoothed")).count();
    assert!(raw >= 1 && raw == smoothed, "{}", path.display());
}

#[test]
fn train_writes_a_complete_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let run = tmp.path().join("run");
    let out = asyppo(&[
        "train",
        "--config",
        &cfg,
        "--set",
        "k=0.25",
        "--deterministic",
        "--seed",
        "5",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let manifests: Vec<_> = std::fs::read_dir(&run)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("manifest"))
        .collect();
    assert_eq!(manifests.len(), 1);
    let manifest = RunManifest::read(&run).unwrap();
    assert_eq!(manifest.status, "completed");
    assert_eq!(manifest.seed, 5);
    assert!(manifest.deterministic);
    assert_eq!(manifest.step_wall_time_ms.len(), 3);
    for name in [
        "config.toml",
        "metrics.jsonl",
        "metrics.csv",
        "policy.json",
        "critics.json",
        "return.svg",
        "entropy.svg",
        "sigma.svg",
        "critic_loss.svg",
    ] {
        assert!(manifest.artifacts.iter().any(|a| a == name), "{name} missing from manifest");
        assert!(run.join(name).exists(), "{name} missing on disk");
    }
    for a in &manifest.artifacts {
        assert!(run.join(a).exists(), "{a} listed but missing");
    }
    let cfg_back = asyppo::xio::config::load_config(&run.join("config.toml")).unwrap();
    assert_eq!(cfg_back.adv_mask_fraction, 0.25);
    assert_eq!(cfg_back.seed, 5);

    let reports = read_metrics(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(reports.len(), 3);
    assert_eq!(read_metrics(&run.join("metrics.csv")).unwrap(), reports);
    assert!(reports.iter().all(|r| r.wall_time_ms == 0));
    for svg in ["return.svg", "entropy.svg", "sigma.svg", "critic_loss.svg"] {
        check_svg(&run.join(svg));
    }

    // Evaluate the saved policy with the config found next to it.
    let eval_dir = tmp.path().join("eval");
    let out = asyppo(&[
        "eval",
        "--policy",
        run.join("policy.json").to_str().unwrap(),
        "--episodes",
        "50",
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["episodes"], 50);
    let mean = summary["mean_return"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert!(eval_dir.join("eval.json").exists());
}

#[test]
fn plot_command_renders_from_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}algorithm = \"grpo\"\n").replace("algorithm = \"asyppo\"\n", ""));
    let run = tmp.path().join("run");
    let out = asyppo(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.join("critics.json").exists());
    assert!(!run.join("critic_loss.svg").exists());

    let plots = tmp.path().join("plots");
    let out = asyppo(&[
        "plot",
        "--metrics",
        run.join("metrics.csv").to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for svg in ["return.svg", "entropy.svg", "sigma.svg"] {
        check_svg(&plots.join(svg));
    }
}

#[test]
fn ablate_writes_cells_and_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let root = tmp.path().join("abl");
    let out = asyppo(&[
        "ablate",
        "--config",
        &cfg,
        "--deterministic",
        "--out",
        root.to_str().unwrap(),
        "--arm",
        "mini:algorithm=asyppo;num_critics=2",
        "--arm",
        "single:algorithm=ppo",
        "--grid",
        "k=0,0.2",
        "h=0,0.2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(root.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);
    let cells: Vec<_> = std::fs::read_dir(&root)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(cells.len(), 8);
    for c in cells {
        assert!(RunManifest::read(&c.path()).is_ok());
    }
    assert!(RunManifest::read(&root).unwrap().artifacts.contains(&"ablation.md".to_string()));
}

#[test]
fn bad_config_reports_key_and_line() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "gamma = 0.9\nnum_critics = 2\nentropy_filter_mask_percentage = 1.0\n");
    let out = asyppo(&["train", "--config", &cfg, "--out", tmp.path().join("r").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("entropy_filter_mask_percentage") && err.contains("line 3"), "{err}");
    assert!(!tmp.path().join("r").exists(), "nothing should be written for an invalid config");

    let out = asyppo(&["train", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn unwritable_output_fails_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = asyppo(&["train", "--config", &cfg, "--out", blocker.join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors() {
    assert_eq!(asyppo(&[]).status.code(), Some(2));
    assert_eq!(asyppo(&["train", "--bogus"]).status.code(), Some(2));
    assert!(asyppo(&["--help"]).status.success());
}
