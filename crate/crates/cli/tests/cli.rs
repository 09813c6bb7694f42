use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seed = 3
output_dir = "out"
model = "sgnet-synth-2x2"

[dataset]
kind = "synthetic"
eval_samples_per_finer = 8

[dataset.synth]
n_super = 2
finer_per_super = 2
samples_per_finer = 16
super_separation = 40.0
finer_separation = 16.0
noise = 20.0
image_size = 16
seed = 1

[schedule]
base_lr = 0.05
milestones = []
gamma = 0.1
warmup_epochs = 0
momentum = 0.9
weight_decay = 5e-4
batch_size = 16
total_epochs = 2
"#;

fn sgnet(args: &[&str], output_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sgnet"));
    cmd.args(args).env_remove("SGNET_OUTPUT_DIR");
    if let Some(d) = output_dir {
        cmd.env("SGNET_OUTPUT_DIR", d);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, format!("{extra}{TINY}")).unwrap();
    path.to_string_lossy().into_owned()
}

/// Cells of every markdown table row after the first header of `headers`.
fn rows_under<'a>(text: &'a str, headers: &[&str]) -> Vec<Vec<&'a str>> {
    let mut lines = text.lines().skip_while(|l| {
        let cells: Vec<&str> = l.trim_matches('|').split('|').map(str::trim).collect();
        cells != headers
    });
    assert!(lines.next().is_some(), "no table with headers {headers:?} in:\n{text}");
    lines
        .skip(1)
        .take_while(|l| l.starts_with('|'))
        .map(|l| l.trim_matches('|').split('|').map(str::trim).collect())
        .collect()
}

#[test]
fn dry_run_prints_digest_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out_dir = dir.path().join("artifacts");
    let o = sgnet(&["train", "--config", &cfg, "--dry-run"], Some(&out_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let digest = text.lines().find_map(|l| l.strip_prefix("config_digest: ")).unwrap();
    assert_eq!(digest.len(), 64);
    assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
    assert!(text.contains("parameters"), "{text}");
    assert!(!out_dir.exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn missing_taxonomy_exits_2_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "taxonomy = \"missing/tax.json\"\n");
    let o = sgnet(&["train", "--config", &cfg, "--dry-run"], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing/tax.json"), "{}", stderr(&o));
}

#[test]
fn taxonomy_export_and_validate() {
    let o = sgnet(&["taxonomy", "export", "cifar100"], None);
    assert!(o.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["supers"].as_array().unwrap().len(), 20);

    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    std::fs::write(&good, stdout(&o)).unwrap();
    let o = sgnet(&["taxonomy", "validate", good.to_str().unwrap()], None);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("20 super-classes, 100 finer classes"));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"name": "x", "supers": [{"name": "a", "finers": ["p", "p"]}]}"#).unwrap();
    let o = sgnet(&["taxonomy", "validate", bad.to_str().unwrap()], None);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn gradcheck_passes() {
    let o = sgnet(&["gradcheck", "--cases-per-op", "2"], None);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out_dir = dir.path().join("artifacts");
    let o = sgnet(&["train", "--config", &cfg], Some(&out_dir));
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("epochs: 2"));
    for f in ["runlog.csv", "runlog.json", "summary.json", "checkpoints/best.bin", "checkpoints/latest.bin"] {
        assert!(out_dir.join(f).is_file(), "{f} missing");
    }

    let ckpt = out_dir.join("checkpoints/best");
    let data = format!("config:{cfg}");
    let reports = dir.path().join("reports");
    let o = sgnet(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", &data, "--output", reports.to_str().unwrap()],
        None,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let acc = rows_under(&text, &["Model", "Accuracy (%)", "Epoch", "Inference Time", "# Params"]);
    assert_eq!(acc.len(), 2);
    let hier = rows_under(
        &text,
        &["Model", "Super Accuracy (%)", "Serious Errors (%)", "Containment Violations", "Samples"],
    );
    let tsi = hier.iter().find(|r| r[0].contains("TSI")).expect("TSI row");
    assert_eq!(tsi[3], "0");
    assert_eq!(tsi[4], "32");
    assert!(reports.join("eval.txt").is_file() && reports.join("eval.json").is_file());

    let o = sgnet(&["analyze", "--checkpoint", ckpt.to_str().unwrap(), "--dataset", &data], None);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows = rows_under(&text, &["Mismatch", "Correct SC", "Correct FC", "Correct Combined"]);
    assert_eq!(rows.len(), 1);
}
