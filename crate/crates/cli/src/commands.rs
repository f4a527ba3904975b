//! The five pipeline commands. Every command is deterministic given
//! (config, seed) except for measured wall-time columns, which are the
//! only nondeterministic values in any output file.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use zigzag_core::{
    alpha, classify_heads, collapsed_groups, data, grid_search_omega, run_generation,
    train_alphas, train_alphas_from, transport, AlphaMatrix, CachePolicy, Error, Granularity,
    LossBreakdown, Model, Result, SolutionFile, TrainSample,
};

use crate::config::RunConfig;

/// Create the output directory and record the effective configuration
/// (after any --seed override) for reproducibility.
fn prepare_out_dir(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("run_config.txt"), cfg.to_text())?;
    Ok(())
}

fn build_model(cfg: &RunConfig) -> Result<Model> {
    Model::new(cfg.model_config())
}

/// Load the dataset from `path` when given, otherwise synthesize it from
/// the config and leave a copy in the output directory.
fn load_or_make_dataset(
    cfg: &RunConfig,
    dataset: Option<&Path>,
    out: &Path,
) -> Result<Vec<(f64, TrainSample)>> {
    match dataset {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Input(format!(
                    "dataset path {} does not exist",
                    path.display()
                )));
            }
            data::read_dataset_file(path)
        }
        None => {
            let samples = data::make_dataset_with_depths(
                cfg.data_samples,
                cfg.data_context_len,
                cfg.data_passkey_len,
                cfg.data_response_len,
                &cfg.data_depths,
                cfg.vocab,
                cfg.data_seed,
            )?;
            data::write_dataset_file(&out.join("dataset.txt"), &samples)?;
            Ok(samples)
        }
    }
}

fn write_loss_csv(path: &Path, log: &[LossBreakdown]) -> Result<()> {
    let mut text = String::from("step,dist,reg,total\n");
    for (step, b) in log.iter().enumerate() {
        let _ = writeln!(text, "{step},{},{},{}", b.dist, b.reg, b.total);
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_checked_alpha(cfg: &RunConfig, path: &Path) -> Result<AlphaMatrix> {
    let a = alpha::read_alpha_file(path)?;
    if a.layers() != cfg.layers || a.heads() != cfg.heads {
        return Err(Error::Input(format!(
            "alpha file is {}x{} but the config says {} layers x {} heads",
            a.layers(),
            a.heads(),
            cfg.layers,
            cfg.heads
        )));
    }
    Ok(a)
}

fn read_checked_solution(cfg: &RunConfig, path: &Path) -> Result<SolutionFile> {
    let s = transport::read_solution_file(path)?;
    if s.layers_total != cfg.layers {
        return Err(Error::Input(format!(
            "solution file covers {} layers but the config says {}",
            s.layers_total, cfg.layers
        )));
    }
    Ok(s)
}

pub fn train_alpha(cfg: &RunConfig, out: &Path, dataset: Option<&Path>) -> Result<()> {
    prepare_out_dir(cfg, out)?;
    let model = build_model(cfg)?;
    let samples: Vec<TrainSample> = load_or_make_dataset(cfg, dataset, out)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let report = train_alphas(
        &model,
        &samples,
        &cfg.streaming_config(),
        cfg.lambda,
        cfg.lr,
        cfg.steps,
        Granularity::Head,
    )?;
    alpha::write_alpha_file(&out.join("alpha.txt"), &report.alpha)?;
    write_loss_csv(&out.join("train_loss.csv"), &report.log)?;
    if let (Some(first), Some(last)) = (report.log.first(), report.log.last()) {
        eprintln!(
            "trained {}x{} gates over {} samples, {} steps: total {} -> {}",
            cfg.layers,
            cfg.heads,
            samples.len(),
            cfg.steps,
            first.total,
            last.total
        );
    }
    Ok(())
}

pub fn optimize(cfg: &RunConfig, alpha_path: &Path, out: &Path) -> Result<()> {
    prepare_out_dir(cfg, out)?;
    let gates = read_checked_alpha(cfg, alpha_path)?;
    let started = Instant::now();
    let solutions = grid_search_omega(&gates, cfg.sparsity, &cfg.omega_grid)?;
    let elapsed = started.elapsed();
    let groups = collapsed_groups(&solutions);

    let mut text = String::from("omega,p,cost,streaming_layers,same_set_as\n");
    for ((omega, sol), &group) in solutions.iter().zip(groups.iter()) {
        let layers: Vec<String> = sol.streaming_layers.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(
            text,
            "{omega},{},{},{},{}",
            sol.streaming_layers.len(),
            sol.cost,
            layers.join(" "),
            solutions[group].0
        );
    }
    std::fs::write(out.join("omega_ablation.csv"), text)?;

    for (omega, sol) in &solutions {
        transport::write_solution_file(
            &out.join(format!("solution_omega{omega}.txt")),
            cfg.layers,
            sol,
        )?;
    }
    // the canonical solution is the first grid entry's
    transport::write_solution_file(&out.join("solution.txt"), cfg.layers, &solutions[0].1)?;
    eprintln!(
        "transport grid of {} omegas solved in {:.3} ms",
        solutions.len(),
        elapsed.as_secs_f64() * 1e3
    );
    Ok(())
}

pub fn finetune(
    cfg: &RunConfig,
    solution_path: &Path,
    out: &Path,
    dataset: Option<&Path>,
) -> Result<()> {
    prepare_out_dir(cfg, out)?;
    let solution = read_checked_solution(cfg, solution_path)?;
    let model = build_model(cfg)?;
    let samples: Vec<TrainSample> = load_or_make_dataset(cfg, dataset, out)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();

    // streaming layers start fully streaming (0), retrieval layers fully
    // full (1); training then adjusts one gate per layer
    let mut values = ndarray::Array2::from_elem((cfg.layers, cfg.heads), 1.0);
    for &l in &solution.streaming_layers {
        values.row_mut(l).fill(0.0);
    }
    let init = AlphaMatrix::from_values(values, Granularity::Layer)?;

    let report = train_alphas_from(
        &model,
        &samples,
        &cfg.streaming_config(),
        cfg.lambda,
        cfg.lr,
        cfg.steps,
        init,
    )?;
    alpha::write_alpha_file(&out.join("alpha_layer.txt"), &report.alpha)?;
    write_loss_csv(&out.join("finetune_loss.csv"), &report.log)?;
    Ok(())
}

struct PolicySet {
    named: Vec<(&'static str, CachePolicy)>,
}

fn build_policies(
    cfg: &RunConfig,
    gates: &AlphaMatrix,
    solution: &SolutionFile,
) -> Result<PolicySet> {
    let scfg = cfg.streaming_config();
    let labels = classify_heads(gates, cfg.sparsity)?;
    let named = vec![
        ("full", CachePolicy::full(cfg.layers)),
        ("duo", CachePolicy::duo(&labels, scfg)),
        (
            "zigzag",
            CachePolicy::zigzag(cfg.layers, &solution.streaming_layers, scfg)?,
        ),
    ];
    Ok(PolicySet { named })
}

/// Deterministic benchmark prompt drawn from the filler sub-vocabulary.
fn bench_prompt(cfg: &RunConfig, len: usize) -> Vec<usize> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng =
        rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(len as u64));
    let filler = (cfg.vocab / 2).max(1);
    (0..len).map(|_| rng.random_range(0..filler)).collect()
}

pub fn bench(
    cfg: &RunConfig,
    alpha_path: &Path,
    solution_path: &Path,
    out: &Path,
) -> Result<()> {
    prepare_out_dir(cfg, out)?;
    let gates = read_checked_alpha(cfg, alpha_path)?;
    let solution = read_checked_solution(cfg, solution_path)?;
    let model = build_model(cfg)?;
    let policies = build_policies(cfg, &gates, &solution)?;

    let mut summary = String::from(
        "policy,prefill,decode,kernels_per_token,gathers_per_token,mean_attn_ns,\
         peak_entries,steady_entries\n",
    );
    let mut plot_latency = String::from("prefill,decode,policy,mean_attn_ns\n");
    let mut plot_cache = String::from("prefill,decode,policy,steady_entries\n");

    for &prefill_len in &cfg.bench_prefill_lens {
        let prompt = bench_prompt(cfg, prefill_len);
        for &decode_len in &cfg.bench_decode_lens {
            for (name, policy) in &policies.named {
                let gen = run_generation(&model, &prompt, decode_len, policy).map_err(
                    |e| {
                        Error::Input(format!(
                            "bench {name} prefill={prefill_len} decode={decode_len}: {e}"
                        ))
                    },
                )?;

                let mut tokens_csv =
                    String::from("token_index,kernels,gathers,cached_entries,ns\n");
                for (i, m) in gen.step_metrics.iter().enumerate() {
                    let _ = writeln!(
                        tokens_csv,
                        "{i},{},{},{},{}",
                        m.kernel_invocations, m.gather_ops, m.cached_entries, m.attn_ns
                    );
                }
                std::fs::write(
                    out.join(format!(
                        "bench_tokens_{name}_p{prefill_len}_d{decode_len}.csv"
                    )),
                    tokens_csv,
                )?;

                let n = gen.step_metrics.len() as f64;
                let kernels = gen.step_metrics[0].kernel_invocations;
                debug_assert!(gen
                    .step_metrics
                    .iter()
                    .all(|m| m.kernel_invocations == kernels));
                let gathers = gen.step_metrics[0].gather_ops;
                let mean_ns = (gen.step_metrics.iter().map(|m| m.attn_ns).sum::<u64>()
                    as f64
                    / n)
                    .round() as u64;
                let _ = writeln!(
                    summary,
                    "{name},{prefill_len},{decode_len},{kernels},{gathers},{mean_ns},{},{}",
                    gen.memory.peak_entries, gen.memory.steady_entries
                );
                let _ = writeln!(
                    plot_latency,
                    "{prefill_len},{decode_len},{name},{mean_ns}"
                );
                let _ = writeln!(
                    plot_cache,
                    "{prefill_len},{decode_len},{name},{}",
                    gen.memory.steady_entries
                );
            }
        }
    }
    std::fs::write(out.join("bench_summary.csv"), summary)?;
    std::fs::write(out.join("plot_latency.csv"), plot_latency)?;
    std::fs::write(out.join("plot_cache.csv"), plot_cache)?;
    Ok(())
}

pub fn eval_passkey(
    cfg: &RunConfig,
    alpha_path: &Path,
    solution_path: &Path,
    out: &Path,
) -> Result<()> {
    prepare_out_dir(cfg, out)?;
    let gates = read_checked_alpha(cfg, alpha_path)?;
    let solution = read_checked_solution(cfg, solution_path)?;
    let model = build_model(cfg)?;
    let policies = build_policies(cfg, &gates, &solution)?;

    let held_out = data::make_dataset_with_depths(
        cfg.eval_samples,
        cfg.data_context_len,
        cfg.data_passkey_len,
        cfg.data_response_len,
        &cfg.data_depths,
        cfg.vocab,
        cfg.eval_seed,
    )?;

    // depth -> policy -> (samples, exact matches), depths in config order
    let mut stats: Vec<(f64, Vec<(usize, usize)>)> = Vec::new();
    for (depth, sample) in &held_out {
        let entry = match stats.iter_mut().find(|(d, _)| d == depth) {
            Some(e) => e,
            None => {
                stats.push((*depth, vec![(0, 0); policies.named.len()]));
                stats.last_mut().expect("just pushed")
            }
        };
        let t = sample.tokens().len();
        let r = sample.response_len();
        let prompt = &sample.tokens()[..t - r];
        let target = &sample.tokens()[t - r..];
        for (slot, (_, policy)) in policies.named.iter().enumerate() {
            let gen = run_generation(&model, prompt, r, policy)?;
            entry.1[slot].0 += 1;
            if gen.tokens == target {
                entry.1[slot].1 += 1;
            }
        }
    }

    let mut text = String::from("depth,policy,samples,exact_matches,accuracy\n");
    for (depth, per_policy) in &stats {
        for (slot, (name, _)) in policies.named.iter().enumerate() {
            let (n, hits) = per_policy[slot];
            let accuracy = hits as f64 / n as f64;
            let _ = writeln!(text, "{depth},{name},{n},{hits},{accuracy}");
        }
    }
    std::fs::write(out.join("passkey_accuracy.csv"), text)?;
    Ok(())
}
