use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use fvib_core::calibration::CalibrationReport;
use fvib_core::data::{save_csv, synth_blobs};
use fvib_core::sweep::{SweepResult, CSV_VERSION_LINE};

const SMALL: &str = "[data.source]
kind = \"synth\"
classes = 3
per_class = 40
dim = 3
spread = 0.5
seed = 2

[model]
hidden = [12]

[train]
epochs = 8
batch_size = 24
learning_rate = 0.01

[eval]
samples = 8
";

fn fvib(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fvib"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fvib(dir, args);
    assert!(
        out.status.success(),
        "fvib {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn trained_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    ok(dir.path(), &["train", "--config", "run.toml", "--out", "model.json"]);
    dir
}

#[test]
fn train_writes_checkpoint_log_and_manifest() {
    let dir = trained_dir();
    let log = fs::read_to_string(dir.path().join("model.log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,loss,j_fvib"));
    assert_eq!(lines.count(), 8);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("model.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["d"], 3);
    assert_eq!(manifest["N"], 120);
}

#[test]
fn missing_beta_for_baseline_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), format!("{SMALL}\n[model.extra]\n")).unwrap();
    let out = fvib(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));

    let cfg = SMALL.replace("[model]\n", "[model]\nmethod = \"vib\"\n").replace("epochs = 8", "epochs = 0");
    fs::write(dir.path().join("vib.toml"), cfg).unwrap();
    let out = fvib(dir.path(), &["train", "--config", "vib.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("model.beta"), "{err}");
    assert!(err.contains("train.epochs"), "{err}");
}

#[test]
fn unreadable_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.toml"),
        "[data.source]\nkind = \"csv\"\npath = \"missing.csv\"\nlabel_column = \"label\"\n",
    )
    .unwrap();
    let out = fvib(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn data_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("cfg")).unwrap();
    fs::create_dir_all(dir.path().join("data")).unwrap();
    save_csv(&synth_blobs(3, 30, 2, 0.4, 0).unwrap(), dir.path().join("data/blobs.csv"), "label").unwrap();
    let cfg = SMALL.replace(
        "kind = \"synth\"\nclasses = 3\nper_class = 40\ndim = 3\nspread = 0.5\nseed = 2\n",
        "kind = \"csv\"\npath = \"../data/blobs.csv\"\nlabel_column = \"label\"\n",
    );
    fs::write(dir.path().join("cfg/run.toml"), cfg).unwrap();
    ok(dir.path(), &["train", "--config", "cfg/run.toml", "--out", "m.json"]);
    // the checkpoint records the resolved path, so evaluation works from elsewhere
    let elsewhere = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.json");
    ok(elsewhere.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--beta-grid", "0"]);
}

#[test]
fn sweep_csv_has_version_line_and_default_grid() {
    let dir = trained_dir();
    let text = ok(dir.path(), &["sweep", "--checkpoint", "model.json"]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(CSV_VERSION_LINE));
    assert!(lines.next().unwrap().contains("ct=on c=0.997"));
    let rows = SweepResult::from_csv(&text).unwrap();
    assert_eq!(rows.len(), 15);
    assert!(rows.windows(2).all(|w| w[0].beta < w[1].beta));
}

#[test]
fn sweep_at_one_is_uninformative() {
    let dir = trained_dir();
    let text = ok(
        dir.path(),
        &["sweep", "--checkpoint", "model.json", "--beta-grid", "1, 0.5", "--ct", "off"],
    );
    assert!(text.lines().nth(1).unwrap().contains("ct=off"));
    let rows = SweepResult::from_csv(&text).unwrap();
    let last = rows.last().unwrap();
    assert_eq!(last.beta, 1.0);
    assert_eq!(last.compression_bound_train, 0.0);
    assert!((last.accuracy_test - 1.0 / 3.0).abs() < 0.1, "{}", last.accuracy_test);
}

#[test]
fn out_of_range_grid_is_a_config_error() {
    let dir = trained_dir();
    let out = fvib(dir.path(), &["sweep", "--checkpoint", "model.json", "--beta-grid", "0,1.5"]);
    assert_eq!(out.status.code(), Some(2));
    let out = fvib(dir.path(), &["sweep", "--checkpoint", "model.json", "--beta-grid", "0,x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_writes_table_and_reports() {
    let dir = trained_dir();
    ok(dir.path(), &["calibrate", "--checkpoint", "model.json", "--out", "cal.csv"]);
    let table = fs::read_to_string(dir.path().join("cal.csv")).unwrap();
    assert!(table.starts_with("method,beta,temperature,ece,nll,accuracy"));
    assert_eq!(table.lines().count(), 4);
    let reports: Vec<CalibrationReport> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("cal.json")).unwrap()).unwrap();
    let continuous = reports.iter().find(|r| r.method == "fvib_continuous").unwrap();
    assert!(continuous.beta.is_some());
    assert!((0.0..=1.0).contains(&continuous.ece));
    assert!(continuous.nll.is_finite());
    assert!((0.0..=1.0).contains(&continuous.accuracy));
}

#[test]
fn calibrate_with_no_methods_is_a_config_error() {
    let dir = trained_dir();
    fs::write(dir.path().join("none.toml"), format!("{SMALL}methods = []\n")).unwrap();
    let out = fvib(dir.path(), &["calibrate", "--checkpoint", "model.json", "--config", "none.toml"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn eval_covers_fvib_grid_and_baselines() {
    let dir = trained_dir();
    let text = ok(dir.path(), &["eval", "--checkpoint", "model.json", "--beta-grid", "0,0.3"]);
    assert_eq!(text.lines().count(), 3);
    assert!(text.starts_with("beta,accuracy,nll,ece"));

    let cfg = SMALL.replace("[model]\n", "[model]\nmethod = \"taylor\"\nbeta = 0.2\n");
    fs::write(dir.path().join("taylor.toml"), cfg).unwrap();
    ok(dir.path(), &["train", "--config", "taylor.toml", "--out", "taylor.json"]);
    let text = ok(dir.path(), &["eval", "--checkpoint", "taylor.json"]);
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("0.2,"));
    let out = fvib(dir.path(), &["sweep", "--checkpoint", "taylor.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn verify_passes_and_reports_the_slope() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["verify", "--out", "report.json"]);
    assert!(text.contains("(1-β)/2"));
    assert!(text.contains("0 failed"));
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn corrupted_target_matrix_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let out = fvib(dir.path(), &["verify", "--corrupt-target-matrix"]);
    assert_eq!(out.status.code(), Some(4));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().any(|l| l.starts_with("[FAIL] simplex")), "{text}");
}

#[test]
fn shipped_configs_match_the_presets() {
    use fvib_core::config::Config;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk: Config = toml::from_str(&fs::read_to_string(root.join("desk.toml")).unwrap()).unwrap();
    assert_eq!(desk, Config::default());
    let mnist: Config = toml::from_str(&fs::read_to_string(root.join("mnist.toml")).unwrap()).unwrap();
    mnist.validate().unwrap();
    assert_eq!(mnist.model, Config::mnist().model);
    assert_eq!(mnist.train, Config::mnist().train);
}
