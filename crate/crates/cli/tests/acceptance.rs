//! Acceptance criterion 9: the full pipeline on the demo config completes
//! with exit 0, produces byte-identical outputs across two runs with the
//! same seed (measured wall-time columns excluded, as the only
//! nondeterministic values), and finishes inside the runtime budget.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

fn demo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.cfg")
}

fn run_ok(args: &[&str]) {
    let output = Command::new(env!("CARGO_BIN_EXE_zigzag"))
        .args(args)
        .output()
        .expect("binary runs");
    assert_eq!(
        output.status.code(),
        Some(0),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&output.stderr)
    );
}

fn run_pipeline(config: &Path, out: &Path) {
    let cfg = config.to_str().unwrap();
    let out_dir = out.to_str().unwrap();
    let alpha = out.join("alpha.txt");
    let solution = out.join("solution.txt");
    run_ok(&["train-alpha", "--config", cfg, "--out", out_dir]);
    run_ok(&["optimize", "--config", cfg, "--alpha", alpha.to_str().unwrap(), "--out", out_dir]);
    run_ok(&[
        "finetune",
        "--config",
        cfg,
        "--solution",
        solution.to_str().unwrap(),
        "--out",
        out_dir,
    ]);
    run_ok(&[
        "bench",
        "--config",
        cfg,
        "--alpha",
        alpha.to_str().unwrap(),
        "--solution",
        solution.to_str().unwrap(),
        "--out",
        out_dir,
    ]);
    run_ok(&[
        "eval-passkey",
        "--config",
        cfg,
        "--alpha",
        alpha.to_str().unwrap(),
        "--solution",
        solution.to_str().unwrap(),
        "--out",
        out_dir,
    ]);
}

/// (kernels, gathers) per row of a per-token metrics CSV.
fn metric_columns(path: &Path) -> Vec<(usize, usize)> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .skip(1)
        .map(|l| {
            let fields: Vec<&str> = l.split(',').collect();
            (fields[1].parse().unwrap(), fields[2].parse().unwrap())
        })
        .collect()
}

/// First and last values of one numeric CSV column.
fn loss_column(path: &Path, column: usize) -> (f64, f64) {
    let text = std::fs::read_to_string(path).unwrap();
    let rows: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(column).unwrap().parse().unwrap())
        .collect();
    (*rows.first().unwrap(), *rows.last().unwrap())
}

/// Strip measured wall-time columns from a CSV; all other columns must be
/// byte-identical across runs.
fn strip_time_columns(text: &str) -> String {
    let mut lines = text.lines();
    let header = match lines.next() {
        Some(h) => h,
        None => return String::new(),
    };
    let names: Vec<&str> = header.split(',').collect();
    let timed: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| **n == "ns" || **n == "mean_attn_ns")
        .map(|(i, _)| i)
        .collect();
    if timed.is_empty() {
        return text.to_string();
    }
    let mut out = String::new();
    for line in std::iter::once(header).chain(lines) {
        let kept: Vec<&str> = line
            .split(',')
            .enumerate()
            .filter(|(i, _)| !timed.contains(i))
            .map(|(_, v)| v)
            .collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

#[test]
fn criterion_9_pipeline_smoke_test() {
    let started = Instant::now();
    let config = demo_config();
    assert!(config.exists(), "demo config missing at {}", config.display());

    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    run_pipeline(&config, &first);
    run_pipeline(&config, &second);

    // training directions on the demo run: gate training lowers the
    // combined objective, and layer fine-tuning (starting from the hard
    // 0/1 assignment) recovers distillation loss
    let (train_first, train_last) = loss_column(&first.join("train_loss.csv"), 3);
    assert!(
        train_last < train_first,
        "gate training did not reduce the total loss: {train_first} -> {train_last}"
    );
    let (ft_first, ft_last) = loss_column(&first.join("finetune_loss.csv"), 1);
    assert!(
        ft_last <= ft_first,
        "fine-tuning did not reduce the distillation loss: {ft_first} -> {ft_last}"
    );

    // structural counts surfaced in the benchmark output (demo model has
    // 4 layers): layer-exclusive decode runs exactly L kernels per token
    // and never gathers; the head-partitioned policy runs L + m kernels
    // with 4 gathers per mixed layer
    let layers = 4;
    let zig = metric_columns(&first.join("bench_tokens_zigzag_p1024_d1024.csv"));
    assert!(zig.iter().all(|&(k, g)| k == layers && g == 0));
    let duo = metric_columns(&first.join("bench_tokens_duo_p1024_d1024.csv"));
    let (duo_kernels, duo_gathers) = duo[0];
    assert!(duo.iter().all(|&(k, g)| k == duo_kernels && g == duo_gathers));
    assert!(duo_kernels > layers && duo_kernels <= 2 * layers);
    assert_eq!(duo_gathers, 4 * (duo_kernels - layers));

    let mut names: Vec<String> = std::fs::read_dir(&first)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(
        names.len() > 30,
        "expected the full output set, found {} files",
        names.len()
    );

    for name in &names {
        let a = std::fs::read_to_string(first.join(name)).unwrap();
        let b_path = second.join(name);
        assert!(b_path.exists(), "{name} missing from the second run");
        let b = std::fs::read_to_string(&b_path).unwrap();
        if name.ends_with(".csv") {
            assert_eq!(
                strip_time_columns(&a),
                strip_time_columns(&b),
                "{name} differs between identically-seeded runs"
            );
        } else {
            assert_eq!(a, b, "{name} differs between identically-seeded runs");
        }
    }

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs() < 600,
        "pipeline smoke test took {elapsed:?}, budget 10 min"
    );
    println!(
        "acceptance criterion 9 PASS: two pipeline runs, exit 0 throughout, {} outputs \
         byte-identical modulo wall-time columns, {elapsed:?}",
        names.len()
    );
}
