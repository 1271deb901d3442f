//! End-to-end pipeline runs of the installed binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_factorhedge"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_gen_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "days": 140,
        "seed": 5,
        "nodes": 384,
        "lattice": {
            "tenor_days": [91.0, 182.0, 365.0],
            "ms": [-0.15, -0.10, -0.05, 0.0, 0.05, 0.10, 0.15]
        }
    });
    let path = dir.join("gen.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn full_pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let gen_cfg = write_gen_config(root);
    let s = |p: PathBuf| p.to_str().unwrap().to_string();

    let data_dir = s(root.join("data"));
    run_ok(&["gen", "--config", gen_cfg.to_str().unwrap(), "--out", &data_dir]);
    let surfaces = format!("{data_dir}/surfaces.csv");
    assert!(Path::new(&surfaces).is_file());
    assert!(Path::new(&data_dir).join("truth.csv").is_file());
    assert!(Path::new(&data_dir).join("manifest.json").is_file());

    let fac_dir = s(root.join("factors"));
    let out = run_ok(&["decode", "--data", &surfaces, "--d", "2", "--out", &fac_dir]);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("explained variance"), "{text}");
    let factors = format!("{fac_dir}/factor_model.json");
    let fpath = format!("{fac_dir}/factor_path.csv");
    assert!(Path::new(&factors).is_file() && Path::new(&fpath).is_file());

    let con_dir = s(root.join("constraints"));
    run_ok(&[
        "constraints", "--data", &surfaces, "--factors", &factors, "--out", &con_dir,
    ]);
    let fcs = format!("{con_dir}/constraints_factor.json");
    assert!(Path::new(&fcs).is_file());
    assert!(Path::new(&con_dir).join("constraints_price.json").is_file());

    let sde_dir = s(root.join("sde"));
    run_ok(&[
        "fit-sde", "--data", &surfaces, "--path", &fpath, "--constraints", &fcs,
        "--epochs", "50", "--seed", "3", "--out", &sde_dir,
    ]);
    let sde = format!("{sde_dir}/sde_model.json");
    assert!(Path::new(&sde).is_file());
    assert!(Path::new(&sde_dir).join("loss_history.csv").is_file());

    let sim_dir = s(root.join("sim"));
    run_ok(&[
        "simulate", "--sde", &sde, "--constraints", &fcs, "--data", &surfaces,
        "--path", &fpath, "--steps", "100", "--n-paths", "2", "--mode", "bootstrap",
        "--seed", "11", "--out", &sim_dir,
    ]);
    assert!(Path::new(&sim_dir).join("sim_paths.csv").is_file());

    let cal_dir = s(root.join("cal"));
    // Calibrating every one of the 140 days is slow; reuse the generated
    // market's first days by truncating the CSV to 3 dates.
    let truncated = root.join("short.csv");
    let text = std::fs::read_to_string(&surfaces).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let keep = 1 + 3 * 21; // header + 3 days x 21 lattice points
    std::fs::write(&truncated, lines[..keep].join("\n")).unwrap();
    run_ok(&[
        "calibrate-heston", "--data", truncated.to_str().unwrap(),
        "--max-evals", "1500", "--out", &cal_dir,
    ]);
    let cal_csv = std::fs::read_to_string(Path::new(&cal_dir).join("calibration.csv")).unwrap();
    assert!(cal_csv.starts_with("date,S0,v0,theta,k,sigma,rho,mape"));
    assert_eq!(cal_csv.lines().count(), 4);

    let bt_dir = s(root.join("bt"));
    let out = run_ok(&[
        "backtest", "--data", &surfaces, "--factors", &factors, "--sde", &sde,
        "--constraints", &fcs, "--methods", "none,delta_bs,delta_nsde_mv,dxi_sens",
        "--dt", "1", "--portfolios", "naive", "--emit-plans", "--out", &bt_dir,
    ]);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("overall"), "{text}");
    let summary = std::fs::read_to_string(Path::new(&bt_dir).join("summary.csv")).unwrap();
    assert!(summary.starts_with("portfolio,method,dt,overall_pct"));
    assert_eq!(summary.lines().count(), 5, "{summary}");
    assert!(Path::new(&bt_dir).join("ewma.csv").is_file());
    assert!(Path::new(&bt_dir).join("plot_data.json").is_file());
    let plans = std::fs::read_to_string(Path::new(&bt_dir).join("plans.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(plans.lines().next().unwrap()).unwrap();
    assert!(first["x_s"].is_number());

    let rep_dir = s(root.join("report"));
    run_ok(&[
        "report", "--backtest", &bt_dir, "--data", &surfaces, "--factors", &factors,
        "--path", &fpath, "--constraints", &fcs, "--sde", &sde, "--out", &rep_dir,
    ]);
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(Path::new(&rep_dir).join("report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["factor_scatter"]["constraints"].as_array().unwrap().len() > 2);
    assert!(!report["delta_comparison"]["points"].as_array().unwrap().is_empty());
}

#[test]
fn unknown_flag_exits_2_with_usage() {
    let out = bin().args(["gen", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(err.to_lowercase().contains("usage"), "{err}");
}

#[test]
fn missing_input_exits_2_and_bad_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args([
            "decode",
            "--data",
            "/nonexistent/surfaces.csv",
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{out:?}");

    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "date,spot,tau,m,c_tilde\n2020-01-01,100,bogus,0.0,0.1\n").unwrap();
    let out = bin()
        .args([
            "decode",
            "--data",
            bad.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{out:?}");
}

#[test]
fn rerun_with_same_config_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = serde_json::json!({
        "days": 6,
        "seed": 9,
        "nodes": 384,
        "lattice": {
            "tenor_days": [91.0, 365.0],
            "ms": [-0.1, 0.0, 0.1]
        }
    });
    let cfg_path = root.join("gen.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let a = root.join("a");
    let b = root.join("b");
    for dir in [&a, &b] {
        run_ok(&[
            "gen",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
        ]);
    }
    let fa = std::fs::read(a.join("surfaces.csv")).unwrap();
    let fb = std::fs::read(b.join("surfaces.csv")).unwrap();
    assert_eq!(fa, fb);
    let ma: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let mb: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["seed"], mb["seed"]);
    assert_eq!(ma["command"], "gen");
}
