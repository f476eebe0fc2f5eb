//! End-to-end tests of the `augself` binary: exit codes, output formats,
//! and artifact layout.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_augself"))
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_tiny_config(dir: &Path, out_dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    let text = format!(
        "# tiny smoke configuration\n\
         dataset.n=24\n\
         dataset.size=8\n\
         model.latent_dim=8\n\
         model.feat_dim=16\n\
         train.steps=2\n\
         train.batch=4\n\
         train.eval_interval=2\n\
         eval.fd_samples=8\n\
         eval.probe_steps=20\n\
         out.dir={}\n",
        out_dir.display()
    );
    fs::write(&path, text).unwrap();
    path
}

const CSV_HEADER: &str = "step,d_loss,g_loss,ss_d_color,ss_d_trans,ss_d_cutout,ss_g_color,ss_g_trans,ss_g_cutout,fd,mode_coverage,probe_shape,probe_color,probe_pos";

#[test]
fn divergence_identical_distributions_print_zero() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("p.csv");
    fs::write(&p, "0.3, 0.2, 0.5").unwrap();
    for kind in ["kl", "rkl", "js", "lc", "ahm"] {
        let out = bin().args(["divergence"]).arg(&p).arg(&p).args(["--kind", kind]).output().unwrap();
        assert!(out.status.success(), "kind {}: {}", kind, stderr(&out));
        assert_eq!(stdout(&out).trim(), "0.000000e0", "kind {}", kind);
    }
}

#[test]
fn divergence_matches_the_kl_oracle() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("p.csv");
    let q = dir.path().join("q.csv");
    fs::write(&p, "0.5,0.5").unwrap();
    fs::write(&q, "0.25,0.75").unwrap();
    let out = bin().arg("divergence").arg(&p).arg(&q).args(["--kind", "kl"]).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    // 0.5 * ln(4/3)
    assert_eq!(stdout(&out).trim(), "1.438410e-1");
}

#[test]
fn missing_divergence_file_exits_with_io_code() {
    let out = bin()
        .args(["divergence", "/no/such/file.csv", "/no/such/other.csv", "--kind", "kl"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("/no/such/file.csv"));
}

#[test]
fn unknown_config_key_exits_with_usage_code() {
    let out = bin()
        .args(["train", "--set", "bogus.key=1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bogus.key"), "{}", stderr(&out));
}

#[test]
fn invalid_task_value_names_the_key() {
    let out = bin()
        .args(["train", "--set", "loss.ss_task=BOGUS"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("loss.ss_task"), "{}", stderr(&out));
}

#[test]
fn train_writes_metrics_with_the_documented_header() {
    let dir = tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = write_tiny_config(dir.path(), &run_dir);
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert!(run_dir.join("checkpoint.bin").exists());
    assert!(run_dir.join("summary.json").exists());
}

#[test]
fn override_wins_over_config_file_value() {
    let dir = tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = write_tiny_config(dir.path(), &run_dir);
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .args(["--set", "train.steps=1", "--set", "train.eval_interval=1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["train.steps"], "1");
}

#[test]
fn train_runs_are_reproducible() {
    let dir = tempdir().unwrap();
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    let cfg = write_tiny_config(dir.path(), &run_a);
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let out = bin()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--set")
        .arg(format!("out.dir={}", run_b.display()))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let a = fs::read(run_a.join("metrics.csv")).unwrap();
    let b = fs::read(run_b.join("metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn augment_preview_echoes_omega_and_writes_triplet() {
    let dir = tempdir().unwrap();
    let out_dir = dir.path().join("preview");
    let out = bin()
        .args(["augment-preview", "--omega", "0.2,0.3,0.5,0.1,0.8,0.4,0.6"])
        .arg("--out")
        .arg(&out_dir)
        .args(["--set", "dataset.n=4"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(
        text.contains("omega = 0.2,0.3,0.5,0.1,0.8,0.4,0.6"),
        "{}",
        text
    );
    for stem in ["original", "augmented", "difference"] {
        assert!(out_dir.join(format!("{}.ppm", stem)).exists(), "{}", stem);
    }
}

#[test]
fn probe_reports_accuracies_for_a_trained_checkpoint() {
    let dir = tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let cfg = write_tiny_config(dir.path(), &run_dir);
    let out = bin().arg("train").arg("--config").arg(&cfg).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let out = bin()
        .arg("probe")
        .arg("--checkpoint")
        .arg(run_dir.join("checkpoint.bin"))
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    for head in ["shape", "color", "position"] {
        let acc = parsed[head]["accuracy"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&acc), "{} accuracy {}", head, acc);
        assert!(parsed[head]["baseline"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn verify_theory_small_run_passes() {
    let out = bin()
        .args(["verify-theory", "--instances", "2"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let parsed: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(parsed["pass"], true);
    assert_eq!(parsed["instances"], 2);
}

#[test]
fn gradcheck_with_few_trials_passes() {
    let out = bin().args(["gradcheck", "--trials", "2"]).output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).contains("worst max_rel_err"));
}

#[test]
fn sweep_emits_one_row_per_lambda() {
    let dir = tempdir().unwrap();
    let run_dir = dir.path().join("sweep");
    let cfg = write_tiny_config(dir.path(), &run_dir);
    let out = bin()
        .arg("sweep")
        .arg("--config")
        .arg(&cfg)
        .args(["--set", "train.steps=1", "--set", "train.eval_interval=1"])
        .args(["--lambdas", "0,1", "--seeds", "0"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let sweep_csv = fs::read_to_string(run_dir.join("sweep.csv")).unwrap();
    // Header plus one row per lambda.
    assert_eq!(sweep_csv.lines().count(), 3);
    let parsed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run_dir.join("sweep_summary.json")).unwrap())
            .unwrap();
    assert_eq!(parsed["vs_baseline"][0]["lambda"], 1.0);
    assert!(run_dir.join("lam_0/seed_0/metrics.csv").exists());
    assert!(run_dir.join("lam_1/seed_0/metrics.csv").exists());
}
