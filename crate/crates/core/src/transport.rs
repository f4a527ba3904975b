//! Layer-exclusive assignment: turn head-level gates into a choice of p
//! streaming layers (the remaining q = L - p stay retrieval) by minimizing
//! the conversion cost over layer subsets.
//!
//! Converting a retrieval head to streaming costs its gate value; converting
//! a streaming head to retrieval is credited omega times its gate value;
//! unchanged heads cost nothing. Costs are separable per layer, so a greedy
//! selection of the p cheapest layers is exact; the brute-force enumerator
//! is kept as the reference the greedy solver must agree with.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::alpha::{classify_heads, AlphaMatrix, HeadKind};
use crate::error::{Error, Result};

/// Guard for the brute-force enumerator.
const ENUMERATION_MAX_LAYERS: usize = 24;

/// Conversion applied to one head when layers become exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpLabel {
    /// Head keeps its baseline type.
    Keep,
    /// Baseline retrieval head sits in a streaming layer.
    RetrToStream,
    /// Baseline streaming head sits in a retrieval layer.
    StreamToRetr,
}

/// A chosen streaming-layer set with its cost and per-head operations.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportSolution {
    /// Sorted indices of the p streaming layers.
    pub streaming_layers: Vec<usize>,
    pub cost: f64,
    pub omega: f64,
    pub op_grid: Array2<OpLabel>,
}

impl TransportSolution {
    /// Recompute the cost from the stored operation grid. Equals `cost`
    /// exactly; used as a self-check in tests.
    pub fn cost_from_ops(&self, alpha: &AlphaMatrix) -> f64 {
        let mut sum = 0.0;
        for i in 0..alpha.layers() {
            for j in 0..alpha.heads() {
                sum += match self.op_grid[(i, j)] {
                    OpLabel::Keep => 0.0,
                    OpLabel::RetrToStream => alpha.get(i, j),
                    OpLabel::StreamToRetr => -self.omega * alpha.get(i, j),
                };
            }
        }
        sum
    }
}

/// Split L layers into p streaming and q retrieval from the sparsity s,
/// rounding s*L half-up.
pub fn layer_budget(layers: usize, sparsity: f64) -> Result<(usize, usize)> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Domain(format!("sparsity must be in [0, 1], got {sparsity}")));
    }
    let p = ((sparsity * layers as f64) + 0.5).floor() as usize;
    let p = p.min(layers);
    Ok((p, layers - p))
}

fn validate_omega(omega: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&omega) {
        return Err(Error::Domain(format!("omega must be in [0, 1], got {omega}")));
    }
    Ok(())
}

/// Direct evaluation of the conversion cost for a candidate streaming set:
/// sum over heads of 0 / +alpha / -omega*alpha by case.
pub fn assignment_cost(
    alpha: &AlphaMatrix,
    baseline: &Array2<HeadKind>,
    streaming_layers: &[usize],
    omega: f64,
) -> Result<f64> {
    validate_omega(omega)?;
    if baseline.dim() != alpha.values().dim() {
        return Err(Error::Input("baseline labels do not match alpha shape".into()));
    }
    let l = alpha.layers();
    let mut in_set = vec![false; l];
    for &layer in streaming_layers {
        if layer >= l {
            return Err(Error::Input(format!("layer index {layer} out of range 0..{l}")));
        }
        if in_set[layer] {
            return Err(Error::Input(format!("duplicate layer index {layer}")));
        }
        in_set[layer] = true;
    }

    let mut cost = 0.0;
    for i in 0..l {
        for j in 0..alpha.heads() {
            cost += match (baseline[(i, j)], in_set[i]) {
                (HeadKind::Retrieval, true) => alpha.get(i, j),
                (HeadKind::Streaming, false) => -omega * alpha.get(i, j),
                _ => 0.0,
            };
        }
    }
    Ok(cost)
}

fn op_grid(baseline: &Array2<HeadKind>, streaming_layers: &[usize]) -> Array2<OpLabel> {
    let (l, h) = baseline.dim();
    let mut in_set = vec![false; l];
    for &layer in streaming_layers {
        in_set[layer] = true;
    }
    Array2::from_shape_fn((l, h), |(i, j)| match (baseline[(i, j)], in_set[i]) {
        (HeadKind::Retrieval, true) => OpLabel::RetrToStream,
        (HeadKind::Streaming, false) => OpLabel::StreamToRetr,
        _ => OpLabel::Keep,
    })
}

/// Visit all k-subsets of 0..n in lexicographic order.
fn for_each_combination(n: usize, k: usize, mut visit: impl FnMut(&[usize])) {
    if k > n {
        return;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        visit(&idx);
        // advance to the next combination
        let mut i = k;
        loop {
            if i == 0 {
                return;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
            if i == 0 {
                return;
            }
        }
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Brute force over all C(L, p) streaming sets. Ties resolve to the
/// lexicographically smallest sorted index tuple, which is the first one
/// enumerated. Guarded to L <= 24; larger instances belong to
/// [`solve_greedy`], which is exact here.
pub fn solve_enumerative(
    alpha: &AlphaMatrix,
    sparsity: f64,
    omega: f64,
) -> Result<TransportSolution> {
    validate_omega(omega)?;
    let l = alpha.layers();
    if l > ENUMERATION_MAX_LAYERS {
        return Err(Error::Capacity(format!(
            "{l} layers exceeds the enumeration guard of {ENUMERATION_MAX_LAYERS}; use solve_greedy"
        )));
    }
    let (p, _q) = layer_budget(l, sparsity)?;
    let baseline = classify_heads(alpha, sparsity)?;

    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut result: Result<()> = Ok(());
    for_each_combination(l, p, |subset| {
        if result.is_err() {
            return;
        }
        match assignment_cost(alpha, &baseline, subset, omega) {
            Ok(cost) => {
                let better = match &best {
                    None => true,
                    Some((_, best_cost)) => cost < *best_cost,
                };
                if better {
                    best = Some((subset.to_vec(), cost));
                }
            }
            Err(e) => result = Err(e),
        }
    });
    result?;

    let (streaming_layers, cost) = best.expect("C(L, p) >= 1 subsets");
    let grid = op_grid(&baseline, &streaming_layers);
    Ok(TransportSolution { streaming_layers, cost, omega, op_grid: grid })
}

/// Exact greedy solver: the cost is separable per layer, so pick the p
/// layers with the smallest marginal cost
/// `delta(i) = sum_retr alpha[i][j] + omega * sum_stream alpha[i][j]`.
/// Ties break by layer index ascending, matching the enumerator's
/// lexicographic tie-break.
pub fn solve_greedy(alpha: &AlphaMatrix, sparsity: f64, omega: f64) -> Result<TransportSolution> {
    validate_omega(omega)?;
    let l = alpha.layers();
    let (p, _q) = layer_budget(l, sparsity)?;
    let baseline = classify_heads(alpha, sparsity)?;

    let mut deltas: Vec<(f64, usize)> = (0..l)
        .map(|i| {
            let mut delta = 0.0;
            for j in 0..alpha.heads() {
                match baseline[(i, j)] {
                    HeadKind::Retrieval => delta += alpha.get(i, j),
                    HeadKind::Streaming => delta += omega * alpha.get(i, j),
                }
            }
            (delta, i)
        })
        .collect();
    deltas.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut streaming_layers: Vec<usize> = deltas.iter().take(p).map(|&(_, i)| i).collect();
    streaming_layers.sort_unstable();

    let cost = assignment_cost(alpha, &baseline, &streaming_layers, omega)?;
    let grid = op_grid(&baseline, &streaming_layers);
    Ok(TransportSolution { streaming_layers, cost, omega, op_grid: grid })
}

/// Solve once per omega in `grid`. Returns the solutions in grid order;
/// [`collapsed_groups`] reports which omega values land on identical
/// layer sets.
pub fn grid_search_omega(
    alpha: &AlphaMatrix,
    sparsity: f64,
    grid: &[f64],
) -> Result<Vec<(f64, TransportSolution)>> {
    if grid.is_empty() {
        return Err(Error::Input("omega grid is empty".into()));
    }
    grid.iter()
        .map(|&omega| solve_greedy(alpha, sparsity, omega).map(|s| (omega, s)))
        .collect()
}

/// For each grid entry, the index of the first entry with the same
/// streaming-layer set (its own index if it is the first).
pub fn collapsed_groups(solutions: &[(f64, TransportSolution)]) -> Vec<usize> {
    let mut groups = Vec::with_capacity(solutions.len());
    for (i, (_, sol)) in solutions.iter().enumerate() {
        let first = solutions[..i]
            .iter()
            .position(|(_, s)| s.streaming_layers == sol.streaming_layers)
            .unwrap_or(i);
        groups.push(first);
    }
    groups
}

/// Default omega grid: 0.1 through 0.9 in steps of 0.1.
pub fn default_omega_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

// ---------------------------------------------------------------------------
// Solution file format
// ---------------------------------------------------------------------------

/// The on-disk form of a solution: enough to rebuild a layer policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionFile {
    pub layers_total: usize,
    pub streaming_layers: Vec<usize>,
    pub omega: f64,
    pub cost: f64,
}

/// Line 1: `L p omega cost`. Line 2: sorted streaming layer indices.
pub fn format_solution(layers_total: usize, solution: &TransportSolution) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {} {}",
        layers_total,
        solution.streaming_layers.len(),
        solution.omega,
        solution.cost
    );
    let indices: Vec<String> =
        solution.streaming_layers.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(out, "{}", indices.join(" "));
    out
}

pub fn write_solution_file(
    path: &Path,
    layers_total: usize,
    solution: &TransportSolution,
) -> Result<()> {
    std::fs::write(path, format_solution(layers_total, solution))?;
    Ok(())
}

pub fn parse_solution(text: &str) -> Result<SolutionFile> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("solution file is empty".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 {
        return Err(Error::Parse(format!(
            "solution header must be `L p omega cost`, got `{header}`"
        )));
    }
    let layers_total: usize = parts[0]
        .parse()
        .map_err(|_| Error::Parse(format!("bad layer count `{}`", parts[0])))?;
    let p: usize = parts[1]
        .parse()
        .map_err(|_| Error::Parse(format!("bad streaming count `{}`", parts[1])))?;
    let omega: f64 = parts[2]
        .parse()
        .map_err(|_| Error::Parse(format!("bad omega `{}`", parts[2])))?;
    let cost: f64 = parts[3]
        .parse()
        .map_err(|_| Error::Parse(format!("bad cost `{}`", parts[3])))?;

    let index_line = lines.next().unwrap_or("");
    let streaming_layers: Vec<usize> = index_line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::Parse(format!("bad layer index `{tok}`")))
        })
        .collect::<Result<_>>()?;

    if streaming_layers.len() != p {
        return Err(Error::Parse(format!(
            "solution lists {} layers but header says p = {p}",
            streaming_layers.len()
        )));
    }
    if streaming_layers.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parse("streaming layers must be sorted and unique".into()));
    }
    if streaming_layers.iter().any(|&i| i >= layers_total) {
        return Err(Error::Parse("streaming layer index out of range".into()));
    }
    Ok(SolutionFile { layers_total, streaming_layers, omega, cost })
}

pub fn read_solution_file(path: &Path) -> Result<SolutionFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_solution(&text)
}
