use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.train_samples=800",
    "--set",
    "data.test_samples=200",
    "--set",
    "train.epochs=6",
    "--set",
    "anneal.iterations=1500",
    "--set",
    "timeline.steps=3",
];

fn selfrepair(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_selfrepair"))
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(args)
        .output()
        .expect("spawn selfrepair")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = selfrepair(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn pipeline(out: &Path, seed: &str) {
    for cmd in ["train", "quantize", "program", "run", "report"] {
        ok(out, &["--seed", seed, cmd]);
    }
}

#[test]
fn formats_lists_packed_layout() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["formats"]);
    assert!(text.contains("PQW1"));
    assert!(text.contains("timeline.csv"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = selfrepair(dir.path(), &["--set", "train.epochz=3", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("epochz"));

    let o = selfrepair(dir.path(), &["--set", "repair.deviation_fraction=0.9", "run"]);
    assert_eq!(o.status.code(), Some(2));

    let missing = dir.path().join("nope.toml");
    let o = selfrepair(dir.path(), &["--config", missing.to_str().unwrap(), "train"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["gradcheck"]);
    assert!(text.contains("max relative error"));
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.deserialize().map(|row| row.unwrap()).collect()
}

#[test]
fn full_pipeline_is_reproducible_and_reports_match_logs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path(), "7");
    pipeline(b.path(), "7");
    let csv_a = fs::read(a.path().join("timeline.csv")).unwrap();
    let csv_b = fs::read(b.path().join("timeline.csv")).unwrap();
    assert_eq!(csv_a, csv_b);

    // Impossible write noise: every level would exceed the largest weight.
    let o = selfrepair(
        a.path(),
        &["--seed", "7", "--set", "quantize.delta_write=10", "quantize"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let rows = read_csv(&a.path().join("timeline.csv"));
    assert_eq!(rows.len(), 4 * 4);
    let summary = read_csv(&a.path().join("summary.csv"));
    assert_eq!(summary.len(), 4);
    for s in &summary {
        let v = &s["variant"];
        let acc: Vec<f64> = rows
            .iter()
            .filter(|r| &r["variant"] == v)
            .map(|r| r["accuracy"].parse().unwrap())
            .collect();
        let post: Vec<f64> = rows
            .iter()
            .filter(|r| &r["variant"] == v)
            .map(|r| r["post_accuracy"].parse().unwrap())
            .collect();
        let later = &acc[1..];
        let mean = later.iter().sum::<f64>() / later.len() as f64;
        let var = later.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / later.len() as f64;
        let f = |k: &str| s[k].parse::<f64>().unwrap();
        assert_eq!(f("initial_accuracy"), acc[0]);
        assert_eq!(f("final_accuracy"), *post.last().unwrap());
        assert!((f("mean_accuracy") - mean).abs() < 1e-12);
        assert!((f("accuracy_variance") - var).abs() < 1e-12);
    }

    let json: serde_json::Value = serde_json::from_slice(&fs::read(a.path().join("timeline.json")).unwrap()).unwrap();
    let n_events = json["log"]["events"].as_array().unwrap().len();
    assert_eq!(read_csv(&a.path().join("events.csv")).len(), n_events);
    let repaired = rows.iter().filter(|r| r["repaired"] == "true").count();
    assert_eq!(repaired, n_events);

    for l in 0..3 {
        for pol in ["pos", "neg"] {
            let bytes = fs::read(a.path().join(format!("packed/layer{l}_{pol}.pqw"))).unwrap();
            assert_eq!(&bytes[..4], b"PQW1");
        }
    }
}

#[test]
fn zero_steps_logs_only_t0() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["train", "quantize"] {
        ok(dir.path(), &[cmd]);
    }
    ok(dir.path(), &["--set", "timeline.steps=0", "run"]);
    let text = fs::read_to_string(dir.path().join("timeline.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("step,t,variant,"));
    assert_eq!(lines.len(), 1 + 4);
    assert!(lines[1..].iter().all(|l| l.starts_with("0,0.0,")));
}

fn small_fraction(dir: &Path) -> f64 {
    let r: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("train_report.json")).unwrap()).unwrap();
    r["small_weight_fraction"].as_f64().unwrap()
}

#[test]
fn constraint_loss_depletes_small_weights() {
    let c = tempfile::tempdir().unwrap();
    let u = tempfile::tempdir().unwrap();
    let only = ["--set", "variants=[\"quantized\"]", "train"];
    ok(c.path(), &only);
    let mut args = vec!["--set", "train.lambda_small=0", "--set", "train.lambda_large=0"];
    args.extend_from_slice(&only);
    ok(u.path(), &args);
    let (fc, fu) = (small_fraction(c.path()), small_fraction(u.path()));
    assert!(fc < fu, "constrained {fc} vs unconstrained {fu}");
    assert!(c.path().join("weight_histogram.csv").exists());
}
