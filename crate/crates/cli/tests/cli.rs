use std::path::Path;
use std::process::{Command, Output};

fn flatmin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flatmin"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn flatmin")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn field(text: &str, key: &str) -> f64 {
    text.lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` in {text}"))
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for name in ["a.csv", "b.csv"] {
        ok(&flatmin(d, &["gen", "--kind", "noisy-sine", "--count", "40", "--c", "0.3", "--seed", "9", "--out", name]));
    }
    ok(&flatmin(d, &["gen", "--kind", "noisy-sine", "--count", "40", "--c", "0.3", "--seed", "10", "--out", "c.csv"]));
    let a = std::fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(d.join("b.csv")).unwrap());
    assert_ne!(a, std::fs::read_to_string(d.join("c.csv")).unwrap());
    assert!(a.starts_with("t,value\n"));
    assert_eq!(a.lines().count(), 41);
}

#[test]
fn entropy_at_zero_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&flatmin(
        dir.path(),
        &["entropy", "--lambda", "4", "--layers", "2", "--rho", "0.5", "--sigma", "1", "--loss-level", "0"],
    ));
    // log-potential of the semicircle at 0 is -(1+ln 2)/2, weighted by -(lambda-1)
    let expected = 3.0 * (1.0 + 2f64.ln()) / 2.0;
    assert!((field(&out, "potential_term") - expected).abs() < 1e-6, "{out}");
    assert_eq!(field(&out, "t_star"), 0.0);

    let neg = ok(&flatmin(
        dir.path(),
        &["entropy", "--lambda", "10", "--layers", "3", "--rho", "0.5", "--loss-level", "-0.4"],
    ));
    let pos = ok(&flatmin(
        dir.path(),
        &["entropy", "--lambda", "10", "--layers", "3", "--rho", "0.5", "--loss-level", "0.4"],
    ));
    assert!((field(&neg, "total") - field(&pos, "total")).abs() < 1e-10);
}

#[test]
fn entropy_from_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&flatmin(dir.path(), &["entropy", "--arch", "5,100", "--rho", "0.5", "--loss-level", "0.1"]));
    assert_eq!(field(&out, "layers"), 2.0);
    assert!((field(&out, "lambda") - 500f64.sqrt()).abs() < 1e-9);
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = flatmin(dir.path(), &["sweep", "--config", "does-not-exist.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("does-not-exist.json"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);
}

#[test]
fn bad_arguments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = flatmin(dir.path(), &["gen", "--kind", "noisy-sine", "--count", "5", "--out", "x.csv", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let out = flatmin(dir.path(), &["entropy", "--rho", "0.5", "--loss-level", "0"]);
    assert_eq!(out.status.code(), Some(2));

    let out = flatmin(dir.path(), &["entropy", "--lambda", "10", "--layers", "3", "--rho", "0", "--loss-level", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn train_probe_spectrum_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&flatmin(d, &["gen", "--kind", "noisy-sine", "--count", "40", "--seed", "1", "--out", "s.csv"]));
    let stdout = ok(&flatmin(
        d,
        &[
            "train", "--data", "s.csv", "--window", "3", "--hidden", "6", "--lr", "0.05", "--iterations", "200",
            "--snapshot-every", "50", "--seed", "2", "--out", "run",
        ],
    ));
    assert!(!stdout.is_empty());
    let trace = std::fs::read_to_string(d.join("run/trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("iteration,train_loss,tr_hx,jac_fro,tr_hw_total"));
    assert_eq!(lines.count(), 201);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("run/metrics.json")).unwrap()).unwrap();
    assert!(metrics.to_string().contains("test_loss"));

    let probe = ok(&flatmin(
        d,
        &["probe", "--network", "run/network.json", "--data", "s.csv", "--window", "3", "--alpha", "0.01", "--relative", "--draws", "2000"],
    ));
    let probe: serde_json::Value = serde_json::from_str(&probe).unwrap();
    assert!(probe["relative_gap"].as_f64().unwrap().is_finite());

    let spec = ok(&flatmin(d, &["spectrum", "--network", "run/network.json", "--data", "s.csv", "--window", "3"]));
    let spec: serde_json::Value = serde_json::from_str(&spec).unwrap();
    // 3·6 + 6·1 weights
    assert_eq!(spec["parameters"], 24);
    let eig: Vec<f64> = spec["eigenvalues"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(eig.len(), 24);
    assert!(eig.windows(2).all(|w| w[0] <= w[1]));

    // wrong window width for the saved network
    let out = flatmin(d, &["spectrum", "--network", "run/network.json", "--data", "s.csv", "--window", "4"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"dataset":{"kind":"gaussian-noise","count":30,"seed":4,"window":3},
            "architecture":{"hidden":[4]},
            "grid":{"learning_rate":[0.05],"batch_size":["full",5],"iterations":[20]},
            "seeds":[0,1,2],
            "output_dir":"results"}"#,
    )
    .unwrap();
    let stdout = ok(&flatmin(d, &["sweep", "--config", "cfg.json", "--parallel", "2"]));
    assert!(stdout.contains("6 runs, 0 failed"), "{stdout}");
    for f in ["report.csv", "report.json", "aggregate.csv", "summary.json", "tr_hx_vs_test_loss.svg"] {
        assert!(d.join("results").join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(d.join("results/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);

    // --seed collapses the seed list; --out redirects
    let stdout = ok(&flatmin(d, &["sweep", "--config", "cfg.json", "--parallel", "1", "--seed", "5", "--out", "one"]));
    assert!(stdout.contains("2 runs"), "{stdout}");
    assert!(d.join("one/report.csv").is_file());
}
