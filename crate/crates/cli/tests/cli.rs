use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn geoformer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoformer"))
        .args(args)
        .env_remove("GEOFORMER_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A 3×3 lattice, short series and tiny models so each command runs in
/// well under a second.
fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = json!({
        "sim": { "grid_side": 3, "t_steps": 140, "n_replicates": 3 },
        "geo": { "variant": "geo", "d_model": 8, "n_heads": 2, "n_layers": 1, "n_mc": 5 },
        "vanilla": { "variant": "vanilla", "d_model": 8, "n_heads": 2, "n_layers": 1, "n_mc": 5 },
        "train": { "max_epochs": 2, "batch_size": 8 },
        "t_train_sizes": [40, 100],
        "primary_t_train": 100,
        "t_test": 30,
        "output_dir": dir.join("out"),
    });
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn desk_scale_simulation_is_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let o = geoformer(&["simulate", "--desk-scale", "--seed", "9", "--output-dir", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for r in 0..5 {
        let rep = a.join("data").join(format!("rep{r:02}"));
        for f in ["observations.csv", "meta.json", "locations.csv"] {
            assert!(rep.join(f).is_file(), "{}", rep.join(f).display());
        }
    }
    let (fa, fb) = (files_under(&a), files_under(&b));
    assert!(!fa.is_empty());
    assert_eq!(fa, fb);
}

#[test]
fn invalid_persistence_is_an_input_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = geoformer(&["simulate", "--set", "sim.phi_t=1.2", "--output-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("phi_t"), "{}", stderr(&o));
}

#[test]
fn malformed_arguments_exit_with_input_error() {
    assert_eq!(geoformer(&["simulate", "--jobs", "many"]).status.code(), Some(1));
    assert_eq!(geoformer(&["simulate", "--set", "no_equals_sign"]).status.code(), Some(1));
    assert_eq!(geoformer(&["simulate", "--set", "sim.unknown=1"]).status.code(), Some(1));
    assert_eq!(geoformer(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_writes_checkpoint_and_variant_specific_log() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    for (model, has_rho) in [("geo", true), ("vanilla", false)] {
        let o = geoformer(&["train", "--config", cfg, "--model", model]);
        assert!(o.status.success(), "{}", stderr(&o));
        let ckpt = PathBuf::from(stdout(&o).trim());
        assert!(ckpt.is_file(), "{}", ckpt.display());
        let log = fs::read_to_string(ckpt.with_file_name("trainlog.csv")).unwrap();
        let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
        assert_eq!(header.contains(&"rho"), has_rho, "{model}: {header:?}");
    }
}

#[test]
fn evaluate_baselines_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let cfg = cfg.to_str().unwrap();

    let o = geoformer(&["evaluate", "--config", cfg, "--baseline", "historical-average"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let forecast = PathBuf::from(stdout(&o).trim());
    let metrics: Value = serde_json::from_str(&fs::read_to_string(forecast.with_file_name("metrics.json")).unwrap()).unwrap();
    for key in ["rmse", "mae", "crps", "morans_i"] {
        assert!(metrics[key].is_number(), "{key}: {metrics}");
    }

    let o = geoformer(&["train", "--config", cfg, "--model", "geo"]);
    let ckpt = stdout(&o).trim().to_owned();
    let o = geoformer(&["evaluate", "--config", cfg, "--checkpoint", &ckpt, "--horizon", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = geoformer_core::io::load_forecast(Path::new(stdout(&o).trim())).unwrap();
    assert_eq!(r.horizon, 4);

    let o = geoformer(&["evaluate", "--config", cfg, "--checkpoint", &ckpt]);
    let model_forecast = stdout(&o).trim().to_owned();
    let o = geoformer(&["validate", &model_forecast, forecast.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v["diebold_mariano"]["p_one_sided"].is_number());

    let o = geoformer(&["evaluate", "--config", cfg]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn experiment_writes_summary_and_figures() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let o = geoformer(&["experiment", "variography", "--config", cfg.to_str().unwrap(), "--emit-svg"]);
    // a two-epoch run may or may not meet the criterion
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
    assert!(stdout(&o).contains("criterion 1 (deep variography)"));
    let out = tmp.path().join("out");
    let summary: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["criteria"].as_array().unwrap().len(), 8);
    let svg = fs::read_to_string(out.join("figures").join("rho_trajectory.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("polyline"));
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_geoformer"))
        .args(["simulate", "--set", "sim.grid_side=2", "--set", "sim.n_replicates=1"])
        .env("GEOFORMER_OUTPUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("data").join("rep00").join("meta.json").is_file());
}
