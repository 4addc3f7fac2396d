//! End-to-end tests of the command-line interface: bundle layout, tidy CSV
//! outputs, exit codes, and byte-identical reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mvlfm::data::{write_covariates, write_dataset};
use mvlfm::sim::{default_params, generate_dataset, ScenarioConfig};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_mvlfm")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn mvlfm")
}

fn write_toy_data(dir: &Path) -> (PathBuf, PathBuf) {
    let params = default_params();
    let scenario = ScenarioConfig {
        n_subjects: 6,
        n_per_side: 6,
        missing_prop: 0.0,
        strength: 1.0,
        models: vec![],
        pve: 0.9,
        replicates: 1,
        seed: 42,
        test_per_side: 0,
        fit_opts: Default::default(),
    };
    let gen = generate_dataset(&params, &scenario, 42).unwrap();
    let curves = dir.join("curves.csv");
    let covs = dir.join("covariates.csv");
    write_dataset(&gen.train, &curves).unwrap();
    write_covariates(&gen.train.covariates, &covs).unwrap();
    (curves, covs)
}

fn fit_config(curves: &Path, covs: &Path, model: &str) -> String {
    format!(
        r#"{{"curves": "{}", "covariates": "{}", "model": "{model}", "pve": 0.9}}"#,
        curves.display(),
        covs.display()
    )
}

fn run_fit(dir: &Path, out: &Path, model: &str) -> Output {
    let (curves, covs) = (dir.join("curves.csv"), dir.join("covariates.csv"));
    let cfg = dir.join(format!("fit_{model}.json"));
    fs::write(&cfg, fit_config(&curves, &covs, model)).unwrap();
    run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn fit_bundle_smoke_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    write_toy_data(tmp.path());
    let out1 = tmp.path().join("out1");
    let output = run_fit(tmp.path(), &out1, "naive");
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let summary: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("summary JSON on stdout");
    let k = summary["k"].as_u64().unwrap();
    assert!(k >= 1);
    assert!(out1.join("fpca.json").is_file());
    assert!(out1.join("meta.json").is_file());
    assert!(out1.join("fixed_effects.csv").is_file());
    assert!(out1.join("diagnostics.csv").is_file());
    assert!(out1.join("singular.csv").is_file());
    for kk in 0..k {
        assert!(out1.join("fits").join(format!("k_{kk:03}.json")).is_file());
    }
    // Rerun into a fresh directory: byte-identical bundle.
    let out2 = tmp.path().join("out2");
    let output2 = run_fit(tmp.path(), &out2, "naive");
    assert!(output2.status.success());
    assert_eq!(output.stdout, output2.stdout);
    assert_eq!(dir_snapshot(&out1), dir_snapshot(&out2));
}

#[test]
fn fit_variants_share_fpca_but_differ_in_fits() {
    let tmp = tempfile::tempdir().unwrap();
    write_toy_data(tmp.path());
    let out_naive = tmp.path().join("naive");
    let out_spline = tmp.path().join("spline");
    assert!(run_fit(tmp.path(), &out_naive, "naive").status.success());
    assert!(run_fit(tmp.path(), &out_spline, "spline").status.success());
    let fpca_a = fs::read(out_naive.join("fpca.json")).unwrap();
    let fpca_b = fs::read(out_spline.join("fpca.json")).unwrap();
    assert_eq!(fpca_a, fpca_b, "FPCA stage must not depend on the model");
    let fit_a = fs::read(out_naive.join("fits/k_000.json")).unwrap();
    let fit_b = fs::read(out_spline.join("fits/k_000.json")).unwrap();
    assert_ne!(fit_a, fit_b, "score models must differ between variants");
}

#[test]
fn predict_flags_unseen_subjects_and_handles_empty_queries() {
    let tmp = tempfile::tempdir().unwrap();
    write_toy_data(tmp.path());
    let bundle = tmp.path().join("bundle");
    assert!(run_fit(tmp.path(), &bundle, "spline").status.success());

    let query = tmp.path().join("query.csv");
    fs::write(
        &query,
        "subject_id,side,T,speed,score_z\ns0000,left,0.5,1.0,0.2\nghost,right,0.0,0.0,0.0\n",
    )
    .unwrap();
    let cfg = tmp.path().join("predict.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"bundle": "{}", "query": "{}"}}"#,
            bundle.display(),
            query.display()
        ),
    )
    .unwrap();
    let out = tmp.path().join("pred");
    let output = run(&[
        "predict",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let text = fs::read_to_string(out.join("predictions.csv")).unwrap();
    let mut seen_flags = std::collections::BTreeSet::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        seen_flags.insert((fields[0].to_string(), fields[6].to_string()));
    }
    assert!(seen_flags.contains(&("s0000".to_string(), "false".to_string())));
    assert!(seen_flags.contains(&("ghost".to_string(), "true".to_string())));

    // Empty query: header-only output, exit 0.
    fs::write(&query, "subject_id,side,T,speed,score_z\n").unwrap();
    let out2 = tmp.path().join("pred_empty");
    let output = run(&[
        "predict",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(output.status.success());
    let text = fs::read_to_string(out2.join("predictions.csv")).unwrap();
    assert_eq!(
        text.trim(),
        "subject_id,side,T,dim,t,value,population"
    );
}

#[test]
fn predict_reports_malformed_rows_with_line_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    write_toy_data(tmp.path());
    let bundle = tmp.path().join("bundle");
    assert!(run_fit(tmp.path(), &bundle, "naive").status.success());
    let query = tmp.path().join("bad_query.csv");
    fs::write(
        &query,
        "subject_id,side,T,speed,score_z\ns0000,left,0.5,1.0,0.2\ns0001,middle,0.5,1.0,0.2\n",
    )
    .unwrap();
    let cfg = tmp.path().join("predict.json");
    fs::write(
        &cfg,
        format!(
            r#"{{"bundle": "{}", "query": "{}"}}"#,
            bundle.display(),
            query.display()
        ),
    )
    .unwrap();
    let out = tmp.path().join("pred_bad");
    let output = run(&[
        "predict",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(3));
    let err: serde_json::Value = serde_json::from_slice(&output.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("line 3"));
    assert_eq!(err["kind"], "data");
}

#[test]
fn simulate_metrics_rows_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.json");
    fs::write(
        &cfg,
        r#"{
            "name": "desk",
            "scenario": {
                "n_subjects": 6, "n_per_side": 6, "missing_prop": 0.25,
                "strength": 1.0, "models": ["naive", "polynomial"],
                "pve": 0.9, "replicates": 2, "seed": 5, "test_per_side": 2
            }
        }"#,
    )
    .unwrap();
    let out1 = tmp.path().join("sim1");
    let output = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out1.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let text = fs::read_to_string(out1.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "scenario,replicate,model,ise_beta0,ise_beta1,ise_beta2,mean_ispe,fpca_s,fit_s,singular_count,K"
    );
    assert_eq!(lines.len(), 1 + 2 * 2, "replicates x models rows");
    let out2 = tmp.path().join("sim2");
    let output2 = run(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert!(output2.status.success());
    assert_eq!(
        fs::read(out1.join("metrics.csv")).unwrap(),
        fs::read(out2.join("metrics.csv")).unwrap()
    );
}

#[test]
fn evaluate_and_diagnose_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let (curves, covs) = write_toy_data(tmp.path());
    let bundle = tmp.path().join("bundle");
    assert!(run_fit(tmp.path(), &bundle, "naive").status.success());

    let eval_cfg = tmp.path().join("eval.json");
    fs::write(
        &eval_cfg,
        format!(
            r#"{{"bundle": "{}", "curves": "{}", "covariates": "{}"}}"#,
            bundle.display(),
            curves.display(),
            covs.display()
        ),
    )
    .unwrap();
    let out = tmp.path().join("eval");
    let output = run(&[
        "evaluate",
        "--config",
        eval_cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let summary: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert!(summary["mean_ispe"].as_f64().unwrap() > 0.0);
    let text = fs::read_to_string(out.join("ispe.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 6 * 2 * 6);

    let diag_cfg = tmp.path().join("diag.json");
    fs::write(
        &diag_cfg,
        format!(
            r#"{{"bundle": "{}", "curves": "{}", "covariates": "{}"}}"#,
            bundle.display(),
            curves.display(),
            covs.display()
        ),
    )
    .unwrap();
    let out = tmp.path().join("diag");
    let output = run(&[
        "diagnose",
        "--config",
        diag_cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let text = fs::read_to_string(out.join("diagnostics.csv")).unwrap();
    assert!(text.lines().any(|l| l.contains(",acf,")));
    let text = fs::read_to_string(out.join("score_fits.csv")).unwrap();
    assert!(text.lines().count() > 1);
}

#[test]
fn config_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"curves": "x.csv", "unknown_key": 1}"#).unwrap();
    let output = run(&[
        "fit",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&output.stderr).unwrap();
    assert_eq!(err["kind"], "config");
}
