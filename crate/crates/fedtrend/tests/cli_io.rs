//! End-to-end checks of the command-line surface: exit codes, file
//! round-trips, the pinned metrics schema, and the synthetic-dataset dump.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fedtrend::cli::{read_model_bin, synth_from_csv, FileConfig, METRICS_HEADER};
use fedtrend::data::{load_csv, CsvLayout};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_fedtrend")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fedtrend_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn cli")
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(
        &path,
        "method = \"fedtrend\"\nrounds = 10\nseed = 3\n\
         [train]\nlr = 5e-3\n\
         [fedtrend]\nl_ct = 5\nl_gt = 5\n\
         [condense_ct]\niterations = 30\nsize = 6\nadam_lr = 1e-2\n\
         [condense_gt]\niterations = 30\nsize = 4\nseg_len = 2\nadam_lr = 1e-2\n\
         [data.fleet]\nnum_clients = 4\nseries_len = 600\nheterogeneity = 0.8\n",
    )
    .unwrap();
    path
}

#[test]
fn missing_config_file_exits_2() {
    let out = run(&["run", "--config", "/definitely/not/here.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));
}

#[test]
fn invalid_config_field_exits_2_with_field_message() {
    let dir = tmp_dir("badcfg");
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "rounds = 0\n").unwrap();
    let out = run(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rounds"));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn unknown_subcommand_exits_2() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_emits_reparseable_files_and_snapshot_reruns_identically() {
    let dir = tmp_dir("roundtrip");
    let cfg = small_config(&dir);
    let out_a = dir.join("a");
    let out = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // every emitted file parses with the tool's own readers
    let metrics = std::fs::read_to_string(out_a.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next().unwrap(), METRICS_HEADER, "golden schema");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 10, "one row per round");
    for row in &rows {
        assert_eq!(row.split(',').count(), METRICS_HEADER.split(',').count());
        for (i, cell) in row.split(',').enumerate() {
            if i != 1 {
                cell.parse::<f64>()
                    .unwrap_or_else(|_| panic!("numeric cell expected, got {cell:?}"));
            }
        }
    }
    let result: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("result.json")).unwrap()).unwrap();
    assert!(result["final_mse"].as_f64().unwrap().is_finite());
    let model = read_model_bin(&std::fs::read(out_a.join("model.bin")).unwrap()).unwrap();
    assert!(!model.is_empty());
    let snapshot_text = std::fs::read_to_string(out_a.join("config_snapshot.toml")).unwrap();
    let snapshot = FileConfig::parse_toml(&snapshot_text).unwrap();
    assert_eq!(snapshot.rounds, 10);
    for entry in std::fs::read_dir(out_a.join("synth")).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let text = std::fs::read_to_string(&path).unwrap();
        if !name.ends_with(".trace.csv") {
            synth_from_csv(&text).unwrap();
        }
    }
    // the embedded snapshot matches the standalone file
    assert_eq!(result["config_snapshot"].as_str().unwrap(), snapshot_text);

    // re-running from the snapshot reproduces metrics.csv byte for byte
    let out_b = dir.join("b");
    let out = run(&[
        "run",
        "--config",
        out_a.join("config_snapshot.toml").to_str().unwrap(),
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let metrics_b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(std::fs::read(out_a.join("metrics.csv")).unwrap(), metrics_b);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn comparison_mode_emits_one_row_pair_per_round() {
    let dir = tmp_dir("compare");
    let cfg = small_config(&dir);
    let out_dir = dir.join("out");
    let out = run(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--method",
        "fedavg",
        "--method-b",
        "fedtrend",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().skip(1).collect();
    assert_eq!(rows.len(), 20, "10 rounds x 2 methods");
    for pair in rows.chunks(2) {
        let a: Vec<&str> = pair[0].split(',').collect();
        let b: Vec<&str> = pair[1].split(',').collect();
        assert_eq!(a[0], b[0], "rows of one round stay adjacent");
        assert_eq!(a[1], "fedavg");
        assert_eq!(b[1], "fedtrend");
    }
    assert!(out_dir.join("model_b.bin").exists());
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn gen_data_is_deterministic_and_loads_back() {
    let dir = tmp_dir("gendata");
    let a = dir.join("fleet_a.csv");
    let b = dir.join("fleet_b.csv");
    for path in [&a, &b] {
        let out = run(&[
            "gen-data",
            "--out",
            path.to_str().unwrap(),
            "--clients",
            "8",
            "--series-len",
            "120",
            "--seed",
            "11",
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "same seed must produce identical bytes"
    );
    let store = load_csv(&a, CsvLayout::ColumnsAsClients).unwrap();
    assert_eq!(store.len(), 8);
    assert!(store.clients.iter().all(|c| c.values.len() == 120));
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn run_accepts_generated_csv() {
    let dir = tmp_dir("csvrun");
    let fleet = dir.join("fleet.csv");
    let out = run(&[
        "gen-data",
        "--out",
        fleet.to_str().unwrap(),
        "--clients",
        "3",
        "--series-len",
        "400",
        "--seed",
        "4",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let out_dir = dir.join("out");
    let out = run(&[
        "run",
        "--method",
        "fedavg",
        "--rounds",
        "3",
        "--data-csv",
        fleet.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn inspect_synth_dumps_pairs_and_full_trace() {
    let dir = tmp_dir("inspect");
    // default condensation settings: 20 pairs, 300 iterations
    let cfg_path = dir.join("config.toml");
    std::fs::write(
        &cfg_path,
        "method = \"fedtrend\"\nrounds = 5\nseed = 2\n\
         [train]\nlr = 5e-3\n\
         [fedtrend]\nl_ct = 5\nl_gt = 10\n\
         [condense_ct]\nadam_lr = 1e-2\n\
         [data.fleet]\nnum_clients = 3\nseries_len = 600\nheterogeneity = 0.8\n",
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = run(&[
        "run",
        "--config",
        cfg_path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let out = run(&["inspect-synth", "--run-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("provenance=ct"));
    assert!(text.contains("pairs=20"), "default capacity is 20 pairs");
    assert!(
        text.contains("(300 iterations)"),
        "default trace length is 300"
    );
    // the dumped dataset has 20 numeric rows of input+output width
    let ds_file = out_dir.join("synth").join("ct_round_00005.csv");
    let ds = synth_from_csv(&std::fs::read_to_string(ds_file).unwrap()).unwrap();
    assert_eq!(ds.size, 20);
    assert_eq!(ds.input_len + ds.output_len, 48);
    let trace_file = out_dir.join("synth").join("ct_round_00005.trace.csv");
    let trace_lines = std::fs::read_to_string(trace_file).unwrap().lines().count();
    assert_eq!(trace_lines, 301, "header plus one line per iteration");
    let _ = std::fs::remove_dir_all(&dir);
}

#[test]
fn inspect_synth_on_missing_dir_exits_2() {
    let dir = tmp_dir("inspect_empty");
    let out = run(&[
        "inspect-synth",
        "--run-dir",
        dir.join("nope").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // a run dir without synthetic artifacts (e.g. a fedavg run) also
    // reports a usage error
    let empty = dir.join("empty_run");
    std::fs::create_dir_all(empty.join("synth")).unwrap();
    let out = run(&["inspect-synth", "--run-dir", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let _ = std::fs::remove_dir_all(&dir);
}
