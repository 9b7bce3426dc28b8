//! End-to-end checks of the `rmap` binary: the staged pipeline on a small
//! synthetic city, reproducibility of the report, and exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn rmap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmap"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path) {
    std::fs::write(
        dir.join("exp.toml"),
        r#"
seed = 21

[paths]
workdir = "work"

[grid]
origin_lat = 45.19
origin_lon = 5.71
origin_east = 0.0
origin_north = 0.0
cell_m = 10.0
width = 96
height = 96

[tiles]
tile = 48
stride = 24
min_label_fraction = 0.03

[train]
scenario = 1
lr = 1e-3
batch = 8
epochs = 2
patience = 10

[model]
widths = [4, 8, 8, 16]
"#,
    )
    .unwrap();
}

#[test]
fn unknown_subcommand_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = rmap(dir.path(), &["definitely-not-a-command"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_error_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "channels = [\"dist\"]\n").unwrap();
    let out = rmap(dir.path(), &["ingest", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error"), "stderr: {err}");
}

#[test]
fn missing_measurements_exits_1_with_message() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path());
    let out = rmap(dir.path(), &["ingest", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("measurements"));
}

#[test]
fn pipeline_runs_and_reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);

    let run = |args: &[&str]| {
        let out = rmap(d, args);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    run(&["synth", "--config", "exp.toml", "--n", "2.2", "--sigma", "3"]);
    run(&["ingest", "--config", "exp.toml"]);
    let out = run(&["fit-pathloss", "--config", "exp.toml"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.starts_with("bs_id,n,sigma_db,p0_dbm,sample_count"));
    assert!(table.lines().count() >= 5);

    run(&["channels", "--config", "exp.toml"]);
    run(&["interpolate", "--config", "exp.toml", "--method", "rbf"]);
    run(&["interpolate", "--config", "exp.toml", "--method", "knn", "--k", "5"]);
    run(&["interpolate", "--config", "exp.toml", "--method", "tv", "--max-iters", "400"]);
    run(&["tiles", "--config", "exp.toml"]);
    run(&["train", "--config", "exp.toml", "--scenario", "1"]);
    run(&["eval", "--config", "exp.toml"]);
    run(&["plot", "--config", "exp.toml"]);

    let report1 = std::fs::read(d.join("work/report.json")).unwrap();
    let table1 = std::fs::read(d.join("work/zone_table.csv")).unwrap();
    assert!(d.join("work/plots/mae_vs_distance.png").exists());
    assert!(d.join("work/plots/error_cdf.svg").exists());
    assert!(d.join("work/plots/error_heatmap.png").exists());
    assert!(d.join("work/manifest-eval.json").exists());

    // A second identical run reproduces the report byte for byte.
    run(&["eval", "--config", "exp.toml"]);
    let report2 = std::fs::read(d.join("work/report.json")).unwrap();
    assert_eq!(report1, report2);

    // The whole pipeline rerun from scratch in a sibling workdir agrees too.
    run(&["synth", "--config", "exp.toml", "--workdir", "work2", "--n", "2.2", "--sigma", "3"]);
    run(&["ingest", "--config", "exp.toml", "--workdir", "work2"]);
    run(&["channels", "--config", "exp.toml", "--workdir", "work2"]);
    run(&["interpolate", "--config", "exp.toml", "--workdir", "work2", "--method", "rbf"]);
    run(&["interpolate", "--config", "exp.toml", "--workdir", "work2", "--method", "knn", "--k", "5"]);
    run(&[
        "interpolate",
        "--config",
        "exp.toml",
        "--workdir",
        "work2",
        "--method",
        "tv",
        "--max-iters",
        "400",
    ]);
    run(&["tiles", "--config", "exp.toml", "--workdir", "work2"]);
    run(&["train", "--config", "exp.toml", "--workdir", "work2", "--scenario", "1"]);
    run(&["eval", "--config", "exp.toml", "--workdir", "work2"]);
    let report3 = std::fs::read(d.join("work2/report.json")).unwrap();
    assert_eq!(report1, report3);
    let table3 = std::fs::read(d.join("work2/zone_table.csv")).unwrap();
    assert_eq!(table1, table3);

    // The eval table covers every emitted prediction method.
    let text = String::from_utf8_lossy(&table1).to_string();
    for method in ["rbf", "knn", "tv", "model_s1"] {
        assert!(text.contains(method), "missing {method} in {text}");
    }
}

#[test]
fn eval_on_perfect_predictions_reports_zeros() {
    // Hand-build a workdir where the prediction equals the truth points.
    use radiomap::grid::{save_radiomap, GridSpec, RadioMap};

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d);
    let work = d.join("work");
    std::fs::create_dir_all(work.join("maps")).unwrap();
    std::fs::create_dir_all(work.join("pred")).unwrap();

    let spec = GridSpec::new(0.0, 0.0, 10.0, 96, 96).unwrap();
    let mut dense = RadioMap::empty(spec);
    for i in 0..96 * 96 {
        dense.values.data[i] = -80.0 - (i % 37) as f64;
        dense.mask.data[i] = 1;
    }
    // Scene manifest with one base station; the last BS is the test one.
    std::fs::write(
        work.join("scene.json"),
        serde_json::json!({
            "seed": 21,
            "spec": spec,
            "params": {
                "building_density": 0.0,
                "road_pitch": 8,
                "bs_count": 1,
                "origin_lat": 45.19,
                "origin_lon": 5.71
            },
            "bs_cells": [[48, 48]],
            "building_count": 0
        })
        .to_string(),
    )
    .unwrap();
    // Train map: empty-ish; val map: a scatter of truth points.
    let mut train = dense.clone();
    let mut val = dense.clone();
    for i in 0..96 * 96 {
        let keep_val = i % 97 == 0;
        train.mask.data[i] = u8::from(!keep_val && i % 13 == 0);
        val.mask.data[i] = u8::from(keep_val);
    }
    save_radiomap(&work.join("maps/BS1"), &dense).unwrap();
    save_radiomap(&work.join("maps/BS1.train"), &train).unwrap();
    save_radiomap(&work.join("maps/BS1.val"), &val).unwrap();
    save_radiomap(&work.join("pred/perfect_bs0"), &dense).unwrap();
    let mut off = dense.clone();
    for v in off.values.data.iter_mut() {
        *v += 3.0;
    }
    save_radiomap(&work.join("pred/offset_bs0"), &off).unwrap();

    let out = rmap(d, &["eval", "--config", "exp.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8_lossy(&out.stdout).to_string();
    for line in table.lines().skip(1).filter(|l| l.starts_with("perfect")) {
        let mae: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(mae, 0.0, "line {line}");
    }
    for line in table.lines().skip(1).filter(|l| l.starts_with("offset")) {
        if line.split(',').nth(3).unwrap().parse::<usize>().unwrap() > 0 {
            let mae: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
            assert!((mae - 3.0).abs() < 1e-9, "line {line}");
        }
    }
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(work.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["best_method"], "perfect");
}
