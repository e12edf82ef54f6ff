use std::path::Path;
use std::process::{Command, Output};

fn longmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_longmix")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = longmix(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn simulate(dir: &Path) {
    ok(&[
        "simulate",
        "--setting",
        "k2-normal",
        "--sizes",
        "12,8",
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
}

fn fit(sim: &Path, out: &Path, seed: &str) {
    ok(&[
        "fit",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--model",
        sim.join("model.json").to_str().unwrap(),
        "--K",
        "2",
        "--keep",
        "40",
        "--thin",
        "2",
        "--burnin",
        "10",
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ]);
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    for f in ["data.csv", "model.json", "truth.csv", "manifest.json"] {
        assert!(sim.join(f).exists(), "{f}");
    }
    let fit_dir = tmp.path().join("fit");
    fit(&sim, &fit_dir, "4");
    for f in ["params.csv", "allocprob.bin", "manifest.json"] {
        assert!(fit_dir.join(f).exists(), "{f}");
    }

    let fit_s = fit_dir.to_str().unwrap();
    ok(&["classify", "--fit", fit_s, "--defer"]);
    let table = std::fs::read_to_string(fit_dir.join("classification.csv")).unwrap();
    assert!(table.starts_with("subject,"));
    assert_eq!(table.lines().count(), 21);

    ok(&["summary", "--fit", fit_s, "--grid", "5"]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fit_dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary.is_object());
    assert!(fit_dir.join("curves.csv").exists());

    let ped_dir = tmp.path().join("ped");
    ok(&[
        "ped",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--model",
        sim.join("model.json").to_str().unwrap(),
        "--K-range",
        "1..2",
        "--keep",
        "30",
        "--thin",
        "2",
        "--burnin",
        "10",
        "--out",
        ped_dir.to_str().unwrap(),
    ]);
    let ped = std::fs::read_to_string(ped_dir.join("ped.csv")).unwrap();
    assert_eq!(ped.lines().count(), 3);
    let selected = ped.lines().skip(1).filter(|l| l.split(',').nth(7) == Some("1")).count();
    assert_eq!(selected, 1, "{ped}");
}

#[test]
fn same_seed_gives_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    simulate(&sim);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    fit(&sim, &a, "7");
    fit(&sim, &b, "7");
    fit(&sim, &c, "8");
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    for f in ["params.csv", "allocprob.bin"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "params.csv"), read(&c, "params.csv"));
}

#[test]
fn errors_are_reported_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = longmix(&["classify", "--fit", tmp.path().join("nope").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("\"error\":"));
    let err: serde_json::Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert!(err["message"].is_string());

    let sim = tmp.path().join("sim");
    simulate(&sim);
    let bad_k = longmix(&[
        "fit",
        "--data",
        sim.join("data.csv").to_str().unwrap(),
        "--model",
        sim.join("model.json").to_str().unwrap(),
        "--K",
        "0",
        "--out",
        tmp.path().join("f").to_str().unwrap(),
    ]);
    assert_eq!(bad_k.status.code(), Some(2));

    let bad_setting = longmix(&[
        "simulate",
        "--setting",
        "k9",
        "--sizes",
        "1,1",
        "--out",
        tmp.path().join("s").to_str().unwrap(),
    ]);
    assert_eq!(bad_setting.status.code(), Some(2));

    let unknown_flag = longmix(&["fit", "--bogus"]);
    assert_eq!(unknown_flag.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&unknown_flag.stderr).unwrap();
    assert_eq!(err["error"], "usage");
}
