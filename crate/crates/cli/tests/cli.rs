use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MINIMAL: &str = r#"
seed = 3

[dataset]
kind = "blobs"
classes = 3
dim = 4
per_class = 20
spread = 0.5
test_fraction = 0.25

[partition]
clients = 3
beta = 0.5

[train]
rounds = 2
batch_size = 8
hidden = [6]
backward = "flfa"
"#;

fn fedalign(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedalign"))
        .args(args)
        .current_dir(cwd)
        .env_remove("FEDALIGN_SEED")
        .env_remove("FEDALIGN_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_four_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", MINIMAL);
    let o = fedalign(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("out");
    let mut names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        ["manifest.json", "metrics.csv", "model.json", "rounds.jsonl"]
    );
    let jsonl = std::fs::read_to_string(out.join("rounds.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);
    for line in jsonl.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["drift"].as_f64().unwrap() >= 0.0);
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["artifacts"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["run_id"].as_str().unwrap().len(), 12);
    let model = std::fs::read_to_string(out.join("model.json")).unwrap();
    assert!(fedalign_core::Mlp::from_json(&model).is_ok());
}

#[test]
fn train_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", MINIMAL);
    let c = cfg.to_str().unwrap();
    assert!(
        fedalign(&["train", "--config", c, "--output-dir", "a"], tmp.path())
            .status
            .success()
    );
    assert!(fedalign(
        &[
            "train",
            "--config",
            c,
            "--output-dir",
            "b",
            "--workers",
            "1"
        ],
        tmp.path()
    )
    .status
    .success());
    for f in ["metrics.csv", "rounds.jsonl", "model.json"] {
        let a = std::fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn invalid_config_names_field_and_leaves_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "bad.toml",
        &format!("{MINIMAL}client_fraction = 0.0\n"),
    );
    let o = fedalign(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
        ],
        tmp.path(),
    );
    assert!(!o.status.success());
    assert!(stderr(&o).contains("client_fraction"), "{}", stderr(&o));
    assert!(!tmp.path().join("out").exists());

    let cfg = write_config(
        tmp.path(),
        "unknown.toml",
        &format!("{MINIMAL}epochs = 3\n"),
    );
    let o = fedalign(&["train", "--config", cfg.to_str().unwrap()], tmp.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epochs"), "{}", stderr(&o));
}

#[test]
fn missing_csv_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace(
        "kind = \"blobs\"\nclasses = 3\ndim = 4\nper_class = 20\nspread = 0.5\ntest_fraction = 0.25",
        "kind = \"csv\"\npath = \"nowhere.csv\"",
    );
    let cfg = write_config(tmp.path(), "csv.toml", &text);
    let o = fedalign(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
        ],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.csv"));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn csv_dataset_trains() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rows = String::new();
    for i in 0..40 {
        let y = i % 2;
        rows.push_str(&format!(
            "{y},{},{}\n",
            y as f64 + 0.01 * i as f64,
            1.0 - y as f64
        ));
    }
    std::fs::write(tmp.path().join("d.csv"), rows).unwrap();
    let text = MINIMAL.replace(
        "kind = \"blobs\"\nclasses = 3\ndim = 4\nper_class = 20\nspread = 0.5\ntest_fraction = 0.25",
        "kind = \"csv\"\npath = \"d.csv\"",
    );
    let cfg = write_config(tmp.path(), "csv.toml", &text);
    let o = fedalign(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn env_overrides_seed_and_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", MINIMAL);
    let o = Command::new(env!("CARGO_BIN_EXE_fedalign"))
        .args(["train", "--config", cfg.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("FEDALIGN_SEED", "9")
        .env("FEDALIGN_OUTPUT_DIR", "from_env")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("from_env/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn metric_toggles_add_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let text = format!("{MINIMAL}\n[metrics]\nrepresentation = true\nassumptions = true\n");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    let o = fedalign(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("out/final_metrics.json")).unwrap(),
    )
    .unwrap();
    assert!(v["representation"]["separability"].as_f64().unwrap() > 0.0);
    assert!(v["assumptions"]["gamma_hat"].as_f64().unwrap() >= 0.0);
    // feedback copied from the model it is measured at
    assert_eq!(v["assumptions"]["g_hat"].as_f64().unwrap(), 0.0);
}

#[test]
fn compare_rows_and_ablation_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let text = MINIMAL.replace("rounds = 2", "rounds = 3");
    let cfg = write_config(tmp.path(), "c.toml", &text);
    let o = fedalign(
        &[
            "compare",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "plain",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("drift reduced in"));
    let csv = std::fs::read_to_string(tmp.path().join("plain/compare.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert!(header.contains(&"drift_reduction"));
    assert!(!header.contains(&"drift_flfa_random"));
    assert_eq!(csv.lines().count(), 1 + 3);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("plain/summary.json")).unwrap(),
    )
    .unwrap();
    let seed = &summary["seeds"][0];
    let red = seed["mean_drift_reduction"].as_f64().unwrap();
    assert_eq!(
        seed["drift_reduction_positive"].as_bool().unwrap(),
        red > 0.0
    );

    let text = format!("{text}\n[compare]\nablations = true\nseeds = [1, 2]\n");
    let cfg = write_config(tmp.path(), "a.toml", &text);
    let o = fedalign(
        &[
            "compare",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "abl",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("abl/compare.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    for col in [
        "drift_flfa_random",
        "accuracy_flfa_random",
        "drift_flfa_no_rescale",
        "accuracy_flfa_no_rescale",
    ] {
        assert!(header.contains(col), "{header}");
    }
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

#[test]
fn gradcheck_passes_fails_on_corruption_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fedalign(
        &["gradcheck", "--seed", "4", "--output", "a.json"],
        tmp.path(),
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("PASS"));
    let o = fedalign(
        &["gradcheck", "--seed", "4", "--output", "b.json"],
        tmp.path(),
    );
    assert!(o.status.success());
    assert_eq!(
        std::fs::read(tmp.path().join("a.json")).unwrap(),
        std::fs::read(tmp.path().join("b.json")).unwrap()
    );
    let o = fedalign(
        &["gradcheck", "--cases", "5", "--corrupt-backward"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn boundcheck_report_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let text = r#"
[dataset]
kind = "blobs"
classes = 3
dim = 3
per_class = 20
spread = 0.5

[partition]
clients = 2

[train]
rounds = 4
local_steps = 2
batch_size = 6
hidden = [5]
initial_fa_layers = [1]
layer_strategy = { fixed = 1 }
"#;
    let cfg = write_config(tmp.path(), "b.toml", text);
    let o = fedalign(
        &[
            "boundcheck",
            "--config",
            cfg.to_str().unwrap(),
            "--output-dir",
            "out",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let mut rdr = csv::Reader::from_path(tmp.path().join("out/bound_report.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (run, wdiv, slack) = (col("run"), col("weight_divergence_term"), col("slack"));
    let mut per_run = std::collections::BTreeMap::<String, usize>::new();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        *per_run.entry(rec[run].to_string()).or_default() += 1;
        assert!(rec[slack].parse::<f64>().unwrap() >= 0.0);
        if &rec[run] != "bp" {
            assert_eq!(rec[wdiv].parse::<f64>().unwrap(), 0.0);
        }
    }
    // rounds x steps for each of the three runs
    assert!(per_run.values().all(|&n| n == 4 * 2), "{per_run:?}");
    assert_eq!(per_run.len(), 3);

    let three = write_config(
        tmp.path(),
        "three.toml",
        &text.replace("clients = 2", "clients = 3"),
    );
    let o = fedalign(
        &["boundcheck", "--config", three.to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("partition.clients"));
}

#[test]
fn partition_dumps_every_index_once() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", MINIMAL);
    let o = fedalign(
        &["partition", "--config", cfg.to_str().unwrap()],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let mut all: Vec<u64> = v
        .as_object()
        .unwrap()
        .values()
        .flat_map(|ix| ix.as_array().unwrap().iter().map(|i| i.as_u64().unwrap()))
        .collect();
    all.sort_unstable();
    // 60 samples, a quarter held out
    assert_eq!(all, (0..45).collect::<Vec<u64>>());
}

#[test]
fn config_flag_is_required() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["train", "compare", "boundcheck"] {
        let o = fedalign(&[cmd], tmp.path());
        assert!(!o.status.success());
        assert!(stderr(&o).contains("--config"));
    }
}
