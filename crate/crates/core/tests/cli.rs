use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_conformal-deferral"))
}

fn run(args: &[&str]) -> Output {
    bin()
        .args(args)
        .env_remove("CONF_DEFERRAL_JOBS")
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn synth(dir: &Path, n: usize) -> (String, String) {
    let scenario = dir.join("scenario_in.json");
    let mut cfg: serde_json::Value =
        serde_json::to_value(conformal_deferral::synth::canonical_specialists(5)).unwrap();
    cfg["n"] = n.into();
    fs::write(&scenario, cfg.to_string()).unwrap();
    let data = dir.join("data");
    let out = run(&[
        "synth",
        "--config",
        scenario.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["probs.csv", "annotations.csv", "costs.csv", "scenario.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    (
        data.join("probs.csv").to_string_lossy().into_owned(),
        data.join("annotations.csv").to_string_lossy().into_owned(),
    )
}

#[test]
fn help_and_bad_arguments() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["grid", "--splits", "many"])), 1);
    let out = run(&[
        "grid",
        "--probs",
        "/nonexistent/p.csv",
        "--annotations",
        "/nonexistent/a.csv",
    ]);
    assert_eq!(code(&out), 1);
    assert!(!out.stderr.is_empty());
}

#[test]
fn invalid_values_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (p, a) = synth(dir.path(), 600);
    let out_dir = dir.path().join("o");
    let o = out_dir.to_str().unwrap();
    for extra in [
        &["--score", "bogus"][..],
        &["--alpha", "1.5"][..],
        &["--knowledge", "shots:0"][..],
        &["--cal-size", "600"][..],
    ] {
        let mut args = vec![
            "run",
            "--probs",
            &p,
            "--annotations",
            &a,
            "--out",
            o,
            "--splits",
            "1",
        ];
        args.extend_from_slice(extra);
        assert_eq!(code(&run(&args)), 1, "{extra:?}");
    }
    let grid_alpha = run(&[
        "grid",
        "--probs",
        &p,
        "--annotations",
        &a,
        "--out",
        o,
        "--alpha",
        "0.1",
    ]);
    assert_eq!(code(&grid_alpha), 1);
}

#[test]
fn synth_grid_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (p, a) = synth(dir.path(), 1000);
    let out_dir = dir.path().join("grid");
    let o = out_dir.to_str().unwrap();
    let args = [
        "grid",
        "--probs",
        &p,
        "--annotations",
        &a,
        "--out",
        o,
        "--splits",
        "2",
        "--cal-size",
        "400",
        "--score",
        "aps",
    ];
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    assert!(results.starts_with("split,score,strategy,alpha,accuracy,n_queries,max_qpe,avg_qpe"));
    assert!(results.lines().count() > 1 + 6 * 2);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 6);
    assert!(out_dir.join("config.json").exists());

    // rerun into a second directory and compare bytes
    let again = dir.path().join("again");
    let mut args2 = args.to_vec();
    args2[6] = again.to_str().unwrap();
    assert_eq!(code(&run(&args2)), 0);
    assert_eq!(
        fs::read(again.join("results.csv")).unwrap(),
        results.as_bytes()
    );

    let rep = dir.path().join("report");
    let out = run(&[
        "report",
        out_dir.join("results.csv").to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| segregativity"));
    assert!(rep.join("summary.md").exists());
    assert!(rep.join("accuracy_aps.svg").exists());
}

#[test]
fn single_alpha_run_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let (p, a) = synth(dir.path(), 800);
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        serde_json::json!({
            "probs": p, "annotations": a, "score": "lac", "splits": 2, "cal_size": 300,
            "strategies": ["segregativity", "model_only"], "seed": 3
        })
        .to_string(),
    )
    .unwrap();
    let out_dir = dir.path().join("run");
    let out = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        "0.1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let results = fs::read_to_string(out_dir.join("results.csv")).unwrap();
    let rows: Vec<&str> = results.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows
        .iter()
        .all(|r| r.contains(",lac,") && r.contains(",0.1,")));

    fs::write(
        dir.path().join("bad.json"),
        r#"{"splits": 2, "colour": "red"}"#,
    )
    .unwrap();
    let bad = run(&[
        "run",
        "--config",
        dir.path().join("bad.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn ablation_commands_write_their_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (p, a) = synth(dir.path(), 800);
    let common = [
        "--probs",
        &p,
        "--annotations",
        &a,
        "--splits",
        "1",
        "--cal-size",
        "300",
        "--score",
        "lac",
    ];

    let ex = dir.path().join("ex");
    let mut args = vec![
        "ablate-experts",
        "--fractions",
        "1,0.5",
        "--out",
        ex.to_str().unwrap(),
    ];
    args.extend_from_slice(&common);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let names: Vec<String> = fs::read_dir(&ex)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(
        names
            .iter()
            .filter(|n| ex.join(n).join("results.csv").exists())
            .count(),
        2,
        "{names:?}"
    );
    assert!(names.iter().any(|n| n.ends_with("_summary.json")));
    assert!(names.iter().any(|n| n.ends_with(".svg")));

    let sh = dir.path().join("sh");
    let mut args = vec![
        "ablate-shots",
        "--shots",
        "1,5",
        "--out",
        sh.to_str().unwrap(),
    ];
    args.extend_from_slice(&common);
    let out = run(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let dirs = fs::read_dir(&sh)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().join("results.csv").exists())
        .count();
    assert_eq!(dirs, 2);
}
