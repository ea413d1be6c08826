use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn churnforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_churnforge"))
        .args(args)
        .env_remove("CHURNFORGE_WORKERS")
        .output()
        .expect("spawn churnforge")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn manifest(dir: &Path, stage: &str) -> serde_json::Value {
    let bytes = std::fs::read(dir.join(format!("manifest_{stage}.json"))).expect("manifest");
    serde_json::from_slice(&bytes).expect("manifest json")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn default_pipeline_is_complete_and_fully_declared() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let run = churnforge(&["pipeline", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    for f in ["matrix.cfm", "features.txt", "labels.csv", "rankings_tree.csv", "rankings_r2.csv", "report.json"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let families = ["linreg", "logreg", "linear_svm", "knn", "random_forest", "adaboost"];
    for f in families {
        for file in [format!("cv_{f}.json"), format!("scores_{f}.csv"), format!("roc_{f}.csv")] {
            assert!(out.join(&file).is_file(), "{file}");
        }
    }

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r["model"].as_str().unwrap()).collect();
    let mut want: Vec<&str> = families.to_vec();
    want.extend(["baseline", "majority_class"]);
    assert_eq!(names, want);
    for r in rows {
        for field in ["accuracy", "precision", "recall", "f_score", "auc"] {
            let v = r[field].as_f64().unwrap_or_else(|| panic!("{} lacks {field}", r["model"]));
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(report["subscribers"], 500);

    // Every file except the manifests is declared as some stage's output,
    // with the hash of what is on disk.
    let mut declared = BTreeMap::new();
    for stage in ["generate", "featurize", "select", "train", "score", "evaluate"] {
        let m = manifest(&out, stage);
        assert_eq!(m["seed"], 42);
        for (name, hash) in m["outputs"].as_object().unwrap() {
            assert!(declared.insert(name.clone(), hash.as_str().unwrap().to_string()).is_none(), "{name}");
        }
        for (name, hash) in m["inputs"].as_object().unwrap() {
            assert_eq!(declared.get(name), Some(&hash.as_str().unwrap().to_string()), "{stage} reads {name}");
        }
    }
    for entry in std::fs::read_dir(&out).unwrap() {
        let name = entry.unwrap().file_name().into_string().unwrap();
        if name.starts_with("manifest_") {
            continue;
        }
        let hash = hex::encode(Sha256::digest(std::fs::read(out.join(&name)).unwrap()));
        assert_eq!(declared.remove(&name), Some(hash), "{name}");
    }
    assert!(declared.is_empty(), "declared but missing: {declared:?}");
}

#[test]
fn stages_run_separately_without_raw_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "sim.n_subscribers = 150\nfeatures.denominators = none\nfeatures.format = csv\nselection.n_trees = 20\n\
         selection.k = 30\nmodels.roster = logreg, knn\nmodels.continuous = random_forest\noutput.dir = out\n",
    );
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    for stage in ["generate", "featurize"] {
        assert_eq!(code(&churnforge(&[stage, "--config", &cfg, "--out", out_s])), 0, "{stage}");
    }
    std::fs::remove_file(out.join("cdr.csv")).unwrap();
    for stage in ["select", "train", "score", "evaluate"] {
        let run = churnforge(&[stage, "--config", &cfg, "--out", out_s]);
        assert_eq!(code(&run), 0, "{stage}: {}", String::from_utf8_lossy(&run.stderr));
    }
    assert!(out.join("matrix.csv").is_file());
    assert!(out.join("error_hist_random_forest.csv").is_file());
    let ranking = std::fs::read_to_string(out.join("rankings_tree.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 31);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    assert!(report["continuous"][0]["mae"].as_f64().is_some());
}

#[test]
fn external_dataset_is_hashed_as_an_input() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen");
    let cfg = write_config(dir.path(), "sim.n_subscribers = 60\nfeatures.denominators = none\n");
    assert_eq!(code(&churnforge(&["generate", "--config", &cfg, "--out", gen.to_str().unwrap()])), 0);

    let cfg = write_config(
        dir.path(),
        "data.cdr = gen/cdr.csv\ndata.sidecar = gen/cdr.header\nfeatures.denominators = none\n",
    );
    let out = dir.path().join("feat");
    let run = churnforge(&["featurize", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let produced = manifest(&gen, "generate");
    let consumed = manifest(&out, "featurize");
    assert_eq!(consumed["inputs"]["data.cdr"], produced["outputs"]["cdr.csv"]);
    assert_eq!(consumed["inputs"]["data.sidecar"], produced["outputs"]["cdr.header"]);
    let labels = std::fs::read_to_string(out.join("labels.csv")).unwrap();
    assert_eq!(labels.lines().count(), 61);
}

#[test]
fn exit_codes_follow_error_families() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    assert_eq!(code(&churnforge(&["--help"])), 0);
    assert_eq!(code(&churnforge(&["frobnicate"])), 1);
    assert_eq!(code(&churnforge(&["generate", "--workers", "many"])), 1);

    let bad = write_config(dir.path(), "sim.n_subscriber = 10\n");
    let run = churnforge(&["generate", "--config", &bad, "--out", out_s]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stderr).contains("sim.n_subscriber"));

    // Inputs of a later stage are missing.
    assert_eq!(code(&churnforge(&["train", "--out", out_s])), 2);

    // A CDR file with the wrong header.
    let cdr = dir.path().join("broken.csv");
    std::fs::write(&cdr, "who,what\nA,B\n").unwrap();
    let cfg = write_config(dir.path(), &format!("data.cdr = {}\n", cdr.display()));
    assert_eq!(code(&churnforge(&["featurize", "--config", &cfg, "--out", out_s])), 2);
}

#[test]
fn seed_flag_changes_the_config_hash_and_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.n_subscribers = 40\n");
    let mut hashes = Vec::new();
    for (sub, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        let out = dir.path().join(sub);
        assert_eq!(code(&churnforge(&["generate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed])), 0);
        let m = manifest(&out, "generate");
        hashes.push((m["config_hash"].clone(), m["outputs"]["cdr.csv"].clone()));
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_ne!(hashes[0].0, hashes[2].0);
    assert_ne!(hashes[0].1, hashes[2].1);
}
