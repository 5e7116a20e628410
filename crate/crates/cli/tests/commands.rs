//! End-to-end runs of the `mgt` binary on tiny cohorts.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mgt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const SMALL: &str = r#"{
  "cohort": {"n_subjects": 20, "n_snps": 8, "fnc_nodes": 6, "volume_extents": [8, 8, 8],
             "causal_snps": [1, 2, 5], "causal_connections": [3, 7],
             "blob_center": [2.5, 2.5, 2.5], "blob_radius": 2.0, "distractor_blobs": 1},
  "model": {"snp_dim": 24, "fnc_dim": 15, "embed_dim": 8, "genomic_hidden": [12, 10],
            "connectome_hidden": 10, "head_hidden": [8, 4], "tokens": 2,
            "volume_extents": [8, 8, 8], "volume_channels": [2, 3, 4]},
  "train": {"epochs": 2, "folds": 2, "batch_size": 5}
}"#;

fn small_config(dir: &Path) -> String {
    let p = dir.join("small.json");
    fs::write(&p, SMALL).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn generate_is_deterministic_and_echoes_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&mgt(&["generate", "--config", &cfg, "--seed", "4", "--out", d.to_str().unwrap()]));
    }
    assert_eq!(tree(&a), tree(&b));
    let echoed: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["cohort"]["seed"], 4);
    assert_eq!(echoed["cohort"]["n_subjects"], 20);
}

#[test]
fn default_generate_is_a_balanced_64_subject_cohort() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = mgt(&["generate", "--out", out.to_str().unwrap()]);
    ok(&o);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("64 subjects (32 SZ, 32 HC)"), "{stdout}");
}

#[test]
fn zero_subjects_fails_naming_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    let o = mgt(&["generate", "--subjects", "0", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_subjects"));
}

#[test]
fn train_then_interpret() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cohort = tmp.path().join("cohort");
    ok(&mgt(&["generate", "--config", &cfg, "--out", cohort.to_str().unwrap()]));
    let run = tmp.path().join("run");
    ok(&mgt(&[
        "train",
        "--config",
        &cfg,
        "--cohort",
        cohort.to_str().unwrap(),
        "--modalities",
        "G,C,S",
        "--fusion",
        "trans",
        "--out",
        run.to_str().unwrap(),
    ]));
    for f in ["config.json", "report.json", "report.txt", "checkpoints/fold_1/params.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let text = fs::read_to_string(run.join("report.txt")).unwrap();
    assert!(text.contains("GCS-trans"));

    let interp = tmp.path().join("interp");
    let o = mgt(&[
        "interpret",
        "--config",
        &cfg,
        "--checkpoint",
        run.join("checkpoints/fold_0").to_str().unwrap(),
        "--cohort",
        cohort.to_str().unwrap(),
        "--top-snps",
        "3",
        "--volume-maps",
        "--out",
        interp.to_str().unwrap(),
    ]);
    ok(&o);
    let summary: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(interp.join("saliency/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["snps"]["top"].as_array().unwrap().len(), 3);
    assert_eq!(summary["subject_ids"].as_array().unwrap().len(), 10);
    assert!(interp.join("saliency/volume_map.mgt").exists());
    assert_eq!(fs::read_dir(interp.join("saliency/volume_slices")).unwrap().count(), 8);
}

#[test]
fn zero_checkpoint_warns_and_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cohort = tmp.path().join("cohort");
    ok(&mgt(&["generate", "--config", &cfg, "--out", cohort.to_str().unwrap()]));
    let run = tmp.path().join("run");
    ok(&mgt(&[
        "train", "--config", &cfg, "--cohort", cohort.to_str().unwrap(), "--modalities", "GC",
        "--fusion", "concat", "--out", run.to_str().unwrap(),
    ]));
    let ck = run.join("checkpoints/fold_0");
    let mut params = mgt_core::ModelParams::load_dir(&ck).unwrap();
    params.zero_prefix("");
    params.save_dir(&ck).unwrap();
    let o = mgt(&[
        "interpret", "--config", &cfg, "--checkpoint", ck.to_str().unwrap(), "--cohort",
        cohort.to_str().unwrap(), "--out", tmp.path().join("i").to_str().unwrap(),
    ]);
    ok(&o);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: all saliency scores are zero"));
    let snps = fs::read_to_string(tmp.path().join("i/saliency/snps.csv")).unwrap();
    assert!(snps
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap() == 0.0));
}

#[test]
fn dimension_mismatch_is_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cohort = tmp.path().join("cohort");
    ok(&mgt(&["generate", "--config", &cfg, "--out", cohort.to_str().unwrap()]));
    let run = tmp.path().join("run");
    let o = mgt(&[
        "train", "--cohort", cohort.to_str().unwrap(), "--modalities", "G", "--fusion", "none",
        "--out", run.to_str().unwrap(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("snp_dim"));
    assert!(!run.exists());
}
