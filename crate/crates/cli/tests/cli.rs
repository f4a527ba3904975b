//! Command-level tests: argument handling, exit codes, output shapes.

use std::path::Path;
use std::process::{Command, Output};

fn zigzag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zigzag"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, overrides: &[(&str, &str)]) -> std::path::PathBuf {
    let mut text = String::from(
        "layers = 2\nheads = 2\nd_model = 8\nvocab = 32\nseed = 5\n\
         sparsity = 0.5\nsink_tokens = 2\nwindow_tokens = 4\n\
         lambda = 0.05\nlr = 0.05\nsteps = 3\nomega_grid = 0.1,0.5\n\
         data_samples = 2\ndata_context_len = 24\ndata_passkey_len = 3\n\
         data_response_len = 3\ndata_depths = 0.25,0.75\ndata_seed = 11\n\
         eval_samples = 2\neval_seed = 12\n\
         bench_prefill_lens = 16\nbench_decode_lens = 8\n",
    );
    for (key, value) in overrides {
        let prefix = format!("{key} = ");
        text = text
            .lines()
            .map(|l| {
                if l.starts_with(&prefix) {
                    format!("{prefix}{value}")
                } else {
                    l.to_string()
                }
            })
            .collect::<Vec<_>>()
            .join("\n");
    }
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).unwrap();
    path
}

fn code(output: &Output) -> i32 {
    output.status.code().expect("no signal")
}

#[test]
fn help_exits_zero() {
    assert_eq!(code(&zigzag(&["--help"])), 0);
}

#[test]
fn unknown_subcommand_is_an_input_error() {
    assert_eq!(code(&zigzag(&["frobnicate"])), 1);
}

#[test]
fn missing_config_file_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "train-alpha",
        "--config",
        "/nonexistent/demo.cfg",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 1);
}

#[test]
fn malformed_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "layers = nope\n").unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "train-alpha",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 1);
}

#[test]
fn missing_dataset_path_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let out = dir.path().join("out");
    let output = zigzag(&[
        "train-alpha",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--dataset",
        "/nonexistent/dataset.txt",
    ]);
    assert_eq!(code(&output), 1);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("input error"), "stderr: {stderr}");
}

#[test]
fn zero_steps_writes_all_ones_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[("steps", "0")]);
    let out = dir.path().join("out");
    let output = zigzag(&[
        "train-alpha",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let alpha = std::fs::read_to_string(out.join("alpha.txt")).unwrap();
    assert_eq!(alpha, "2 2 head\n1 1\n1 1\n");
    let loss = std::fs::read_to_string(out.join("train_loss.csv")).unwrap();
    assert_eq!(loss, "step,dist,reg,total\n");
}

#[test]
fn optimize_rejects_mismatched_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let alpha = dir.path().join("alpha.txt");
    std::fs::write(&alpha, "3 2 head\n1 1\n1 1\n1 1\n").unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "optimize",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        alpha.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 1);
}

#[test]
fn optimize_writes_one_solution_per_omega() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let alpha = dir.path().join("alpha.txt");
    std::fs::write(&alpha, "2 2 head\n0.9 0.8\n0.1 0.2\n").unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "optimize",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        alpha.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    assert!(out.join("solution_omega0.1.txt").exists());
    assert!(out.join("solution_omega0.5.txt").exists());
    // aligned gates: layer 1 is streaming at every omega, p = 1
    let sol = std::fs::read_to_string(out.join("solution.txt")).unwrap();
    let mut lines = sol.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(header[0], "2");
    assert_eq!(header[1], "1");
    assert_eq!(lines.next().unwrap().trim(), "1");
    let ablation = std::fs::read_to_string(out.join("omega_ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 3);
}

#[test]
fn bench_refuses_solution_with_wrong_layer_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let alpha = dir.path().join("alpha.txt");
    std::fs::write(&alpha, "2 2 head\n0.9 0.8\n0.1 0.2\n").unwrap();
    let solution = dir.path().join("solution.txt");
    std::fs::write(&solution, "3 1 0.1 0\n2\n").unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        alpha.to_str().unwrap(),
        "--solution",
        solution.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 1);
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("solution"), "stderr: {stderr}");
}

#[test]
fn finetune_initializes_from_solution_when_steps_zero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[("steps", "0")]);
    let solution = dir.path().join("solution.txt");
    std::fs::write(&solution, "2 1 0.1 0\n1\n").unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "finetune",
        "--config",
        cfg.to_str().unwrap(),
        "--solution",
        solution.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let alpha = std::fs::read_to_string(out.join("alpha_layer.txt")).unwrap();
    assert_eq!(alpha, "2 2 layer\n1 1\n0 0\n");
}

#[test]
fn seed_flag_overrides_config_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    let out_c = dir.path().join("c");
    for (out, seed) in [(&out_a, None), (&out_b, Some("99")), (&out_c, Some("99"))] {
        let mut args = vec![
            "train-alpha".to_string(),
            "--config".into(),
            cfg.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
        ];
        if let Some(s) = seed {
            args.push("--seed".into());
            args.push(s.into());
        }
        let args: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
        assert_eq!(code(&zigzag(&args)), 0);
    }
    let a = std::fs::read_to_string(out_a.join("alpha.txt")).unwrap();
    let b = std::fs::read_to_string(out_b.join("alpha.txt")).unwrap();
    let c = std::fs::read_to_string(out_c.join("alpha.txt")).unwrap();
    assert_ne!(a, b, "different seeds must change the trained gates");
    assert_eq!(b, c, "equal seeds must reproduce the trained gates");
}

#[test]
fn eval_passkey_reports_one_row_per_depth_and_policy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[("eval_samples", "4")]);
    let alpha = dir.path().join("alpha.txt");
    std::fs::write(&alpha, "2 2 head\n0.9 0.8\n0.1 0.2\n").unwrap();
    let solution = dir.path().join("solution.txt");
    std::fs::write(&solution, "2 1 0.1 0\n1\n").unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "eval-passkey",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        alpha.to_str().unwrap(),
        "--solution",
        solution.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let csv = std::fs::read_to_string(out.join("passkey_accuracy.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    // 2 depths x 3 policies
    assert_eq!(rows.len(), 6);
    for row in rows {
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 5);
        let accuracy: f64 = fields[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&accuracy));
    }
}

#[test]
fn covering_window_makes_all_policies_agree_on_passkeys() {
    // sink + window covers the whole sequence, so every policy keeps the
    // same cache contents and the accuracy columns must coincide
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        &[("sink_tokens", "16"), ("window_tokens", "16"), ("eval_samples", "4")],
    );
    let alpha = dir.path().join("alpha.txt");
    std::fs::write(&alpha, "2 2 head\n0.9 0.8\n0.1 0.2\n").unwrap();
    let solution = dir.path().join("solution.txt");
    std::fs::write(&solution, "2 1 0.1 0\n1\n").unwrap();
    let out = dir.path().join("out");
    let output = zigzag(&[
        "eval-passkey",
        "--config",
        cfg.to_str().unwrap(),
        "--alpha",
        alpha.to_str().unwrap(),
        "--solution",
        solution.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&output), 0);
    let csv = std::fs::read_to_string(out.join("passkey_accuracy.csv")).unwrap();
    let mut by_depth: std::collections::HashMap<&str, Vec<&str>> =
        std::collections::HashMap::new();
    for row in csv.lines().skip(1) {
        let fields: Vec<&str> = row.split(',').collect();
        by_depth.entry(fields[0]).or_default().push(fields[4]);
    }
    for (depth, accuracies) in by_depth {
        assert!(
            accuracies.windows(2).all(|w| w[0] == w[1]),
            "policies disagree at depth {depth}: {accuracies:?}"
        );
    }
}

#[test]
fn dataset_file_round_trips_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), &[]);
    let out_a = dir.path().join("a");
    assert_eq!(
        code(&zigzag(&[
            "train-alpha",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_a.to_str().unwrap(),
        ])),
        0
    );
    // feeding the emitted dataset back reproduces the same gates
    let out_b = dir.path().join("b");
    assert_eq!(
        code(&zigzag(&[
            "train-alpha",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_b.to_str().unwrap(),
            "--dataset",
            out_a.join("dataset.txt").to_str().unwrap(),
        ])),
        0
    );
    let a = std::fs::read_to_string(out_a.join("alpha.txt")).unwrap();
    let b = std::fs::read_to_string(out_b.join("alpha.txt")).unwrap();
    assert_eq!(a, b);
}
