use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use performer_cli::config::RunConfig;
use performer_cli::report::EvalReport;

const CONFIG: &str = r#"
[model]
d_model = 8
heads = 2
stem_channels = 2

[train]
lr = 1e-3
epochs = 2
batch_size = 4
max_steps = 4

[data.synth]
subjects = 4
duration_s = 8.0
n_classes = 2

[data.split]
train = 0.5
val = 0.0
test = 0.5

[task]
labels = "binary"
variant = "ppg-recon-ecg"

[task.classifier]
d_model = 8
heads = 2
depth = 2
stem_channels = 2
"#;

fn performer(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_performer"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = performer(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), CONFIG).unwrap();
    dir
}

fn report(dir: &Path) -> EvalReport {
    EvalReport::read(&dir.join("report.toml")).unwrap()
}

#[test]
fn full_pipeline_writes_expected_artifacts() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["synth", "--config", "c.toml", "--out", "s"]);
    assert!(d.join("s/data/manifest.csv").exists());

    ok(d, &["train-recon", "--config", "c.toml", "--out", "r", "--data", "s/data"]);
    let train = report(&d.join("r"));
    assert_eq!(train.epoch_losses.len(), 2);
    assert!(train.rmse.values().all(|s| s.mean >= 0.0 && s.std >= 0.0));
    assert_eq!(fs::read_to_string(d.join("r/loss.csv")).unwrap().lines().count(), 3);

    ok(d, &["reconstruct", "--config", "c.toml", "--model", "r/model", "--input", "s/data/subject000.csv", "--out", "rc"]);
    let rows = fs::read_to_string(d.join("rc/ecg_hat.csv")).unwrap().lines().count() - 1;
    // 8 s at 128 Hz gives 3 windows.
    assert_eq!(rows, 512 * 3);

    ok(d, &["train-clf", "--config", "c.toml", "--out", "k", "--recon", "r/model", "--data", "s/data"]);
    let cm = report(&d.join("k")).confusion.unwrap();
    for row in &cm.matrix {
        assert_eq!(row.iter().sum::<f64>(), 1.0);
    }

    ok(d, &["classify", "--config", "c.toml", "--model", "k/model", "--recon", "r/model", "--input", "s/data/subject001.csv", "--out", "kc"]);
    let preds = fs::read_to_string(d.join("kc/predictions.csv")).unwrap();
    assert_eq!(preds.lines().next().unwrap(), "window,predicted,p_Normal,p_Diabetes");
    assert_eq!(preds.lines().count(), 4);

    ok(d, &["attnmap", "--config", "c.toml", "--model", "r/model", "--input", "s/data/subject000.csv", "--out", "a"]);
    let attn = fs::read_to_string(d.join("a/attention.csv")).unwrap();
    assert_eq!(attn.lines().next().unwrap(), "part,stage,block,head,query,key,weight");
}

#[test]
fn evaluate_reproduces_training_metrics_from_checkpoint() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["train-recon", "--config", "c.toml", "--out", "r"]);
    ok(d, &["evaluate", "--config", "c.toml", "--model", "r/model", "--out", "e"]);
    assert_eq!(report(&d.join("r")).rmse, report(&d.join("e")).rmse);
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = setup();
    let d = tmp.path();
    for out in ["r1", "r2"] {
        ok(d, &["train-recon", "--config", "c.toml", "--out", out]);
        ok(d, &["synth", "--config", "c.toml", "--out", &format!("{out}/s")]);
        ok(d, &["reconstruct", "--config", "c.toml", "--model", &format!("{out}/model"), "--input", &format!("{out}/s/data/subject002.csv"), "--out", &format!("{out}/rc")]);
    }
    for f in ["model/params.bin", "model/manifest.txt", "loss.csv", "rc/ecg_hat.csv", "s/data/subject002.csv", "s/data/manifest.csv"] {
        assert_eq!(fs::read(d.join("r1").join(f)).unwrap(), fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let (mut a, mut b) = (report(&d.join("r1")), report(&d.join("r2")));
    a.wall_clock_s = 0.0;
    b.wall_clock_s = 0.0;
    assert_eq!(a, b);
}

#[test]
fn resolved_config_hash_is_auditable() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["synth", "--config", "c.toml", "--out", "s"]);
    let resolved = RunConfig::load(&d.join("s/config.resolved.toml")).unwrap();
    let hash = resolved.hash();
    assert_eq!(report(&d.join("s")).config_hash, hash);
    assert_eq!(fs::read_to_string(d.join("s/config.hash")).unwrap().trim(), hash);
    assert_eq!(RunConfig::parse(CONFIG).unwrap().hash(), hash);
}

#[test]
fn fixed_patch_trains_single_stage_model() {
    let tmp = setup();
    let d = tmp.path();
    ok(d, &["train-recon", "--config", "c.toml", "--out", "f", "--fixed-patch", "128"]);
    let manifest = fs::read_to_string(d.join("f/model/manifest.txt")).unwrap();
    assert!(manifest.contains("enc.s0.b17."));
    assert!(!manifest.contains("enc.s1."));
    // The SPA geometry does not match a fixed-patch checkpoint.
    let out = performer(d, &["evaluate", "--config", "c.toml", "--model", "f/model", "--out", "e"]);
    assert_eq!(out.status.code(), Some(2));
    ok(d, &["evaluate", "--config", "c.toml", "--model", "f/model", "--out", "e", "--fixed-patch", "128"]);
}

#[test]
fn gradcheck_passes_and_prints_worst_error() {
    let tmp = setup();
    let out = ok(tmp.path(), &["gradcheck", "--config", "c.toml"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("worst relative error"), "{text}");
    assert!(text.contains("gradcheck_max_rel_error"));
}

fn error_line(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    stderr.lines().last().unwrap_or("").to_string()
}

#[test]
fn usage_errors_exit_2_with_one_line() {
    let tmp = setup();
    let d = tmp.path();
    let out = performer(d, &["train-recon", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));

    let out = performer(d, &["synth", "--config", "missing.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=config message="), "{}", error_line(&out));

    let out = performer(d, &["train-recon", "--config", "c.toml", "--out", "x", "--fixed-patch", "48"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=parameter"));

    fs::write(d.join("bad.toml"), format!("{CONFIG}\n[extra]\nkey = 1\n")).unwrap();
    let out = performer(d, &["synth", "--config", "bad.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("unknown field"));

    let out = performer(d, &["reconstruct", "--config", "c.toml", "--model", "nope", "--input", "nope.csv", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);

    let out = performer(d, &["train-clf", "--config", "c.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("--recon"));
}

#[test]
fn numerical_abort_exits_3() {
    let tmp = setup();
    let d = tmp.path();
    fs::write(d.join("hot.toml"), CONFIG.replace("lr = 1e-3", "lr = 1e300")).unwrap();
    let out = performer(d, &["train-recon", "--config", "hot.toml", "--out", "x"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(error_line(&out).starts_with("error kind=numeric"));
}
