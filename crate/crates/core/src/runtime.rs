//! Incremental execution against per-layer KV-cache policies, with exact
//! memory and kernel-invocation accounting.
//!
//! Prefill is one dense full-attention pass for every policy; the policy
//! only decides what the caches keep afterwards. During decode a full or
//! streaming layer runs one attention kernel over all of its heads and
//! writes head outputs straight into the layer buffer. A mixed layer runs
//! one kernel per head group and moves data through explicit index
//! gathers and scatters; that extra indexing is the overhead the metrics
//! make visible.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1};

use crate::alpha::{AlphaMatrix, HeadKind};
use crate::attn::StreamingConfig;
use crate::cache::HeadStore;
use crate::error::{Error, Result};
use crate::model::{apply_rope_row, forward_full_with_kv, logits, rms_norm_row, silu, Model};

/// Cache behavior of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerPolicy {
    FullLayer,
    StreamingLayer(StreamingConfig),
    MixedLayer { labels: Vec<HeadKind>, cfg: StreamingConfig },
}

/// Per-layer cache policy for a whole model.
#[derive(Debug, Clone, PartialEq)]
pub struct CachePolicy {
    layers: Vec<LayerPolicy>,
}

impl CachePolicy {
    /// Every layer keeps its full history.
    pub fn full(layers: usize) -> Self {
        Self { layers: vec![LayerPolicy::FullLayer; layers] }
    }

    /// Layer-exclusive policy from a solved streaming-layer set.
    pub fn zigzag(
        layers: usize,
        streaming_layers: &[usize],
        cfg: StreamingConfig,
    ) -> Result<Self> {
        let mut spec = vec![LayerPolicy::FullLayer; layers];
        for &l in streaming_layers {
            if l >= layers {
                return Err(Error::Input(format!("streaming layer {l} out of range 0..{layers}")));
            }
            spec[l] = LayerPolicy::StreamingLayer(cfg);
        }
        Ok(Self { layers: spec })
    }

    /// Head-partitioned policy from per-head labels. Uniform layers
    /// normalize to plain full or streaming layers.
    pub fn duo(labels: &Array2<HeadKind>, cfg: StreamingConfig) -> Self {
        let layers = labels
            .rows()
            .into_iter()
            .map(|row| {
                if row.iter().all(|&k| k == HeadKind::Retrieval) {
                    LayerPolicy::FullLayer
                } else if row.iter().all(|&k| k == HeadKind::Streaming) {
                    LayerPolicy::StreamingLayer(cfg)
                } else {
                    LayerPolicy::MixedLayer { labels: row.to_vec(), cfg }
                }
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[LayerPolicy] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn mixed_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, LayerPolicy::MixedLayer { .. })).count()
    }

    pub fn is_layer_exclusive(&self) -> bool {
        self.mixed_layer_count() == 0
    }

    pub fn validate(&self, heads: usize) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerPolicy::MixedLayer { labels, .. } = layer {
                if labels.len() != heads {
                    return Err(Error::Input(format!(
                        "layer {i}: {} labels for {heads} heads",
                        labels.len()
                    )));
                }
                let retr = labels.iter().filter(|&&k| k == HeadKind::Retrieval).count();
                if retr == 0 || retr == heads {
                    return Err(Error::Input(format!(
                        "layer {i}: mixed layer must hold both head kinds; normalize it"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-layer per-head KV stores plus counters.
#[derive(Debug, Clone)]
pub struct KvCacheState {
    stores: Vec<Vec<HeadStore>>,
    tokens_seen: usize,
    peak_entries: usize,
}

impl KvCacheState {
    fn new(policy: &CachePolicy, heads: usize, dim: usize) -> Self {
        let stores = policy
            .layers()
            .iter()
            .map(|layer| {
                (0..heads)
                    .map(|j| match layer {
                        LayerPolicy::FullLayer => HeadStore::full(dim),
                        LayerPolicy::StreamingLayer(cfg) => HeadStore::streaming(dim, *cfg),
                        LayerPolicy::MixedLayer { labels, cfg } => match labels[j] {
                            HeadKind::Retrieval => HeadStore::full(dim),
                            HeadKind::Streaming => HeadStore::streaming(dim, *cfg),
                        },
                    })
                    .collect()
            })
            .collect();
        Self { stores, tokens_seen: 0, peak_entries: 0 }
    }

    pub fn tokens_seen(&self) -> usize {
        self.tokens_seen
    }

    pub fn peak_entries(&self) -> usize {
        self.peak_entries
    }

    /// Total cached (key, value) entries across all layers and heads.
    pub fn total_entries(&self) -> usize {
        self.stores.iter().flatten().map(|s| s.len()).sum()
    }

    /// Cached absolute positions for one head, in storage order.
    pub fn positions(&self, layer: usize, head: usize) -> Vec<usize> {
        self.stores[layer][head].positions()
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.stores {
            for store in row {
                store.validate(self.tokens_seen)?;
            }
        }
        Ok(())
    }

    /// The state must have been produced by prefill (or prior decode
    /// steps) under the same policy: every store's kind has to match.
    fn check_policy(&self, policy: &CachePolicy) -> Result<()> {
        for (l, (layer, row)) in policy.layers().iter().zip(&self.stores).enumerate() {
            for (j, store) in row.iter().enumerate() {
                let want_streaming = match layer {
                    LayerPolicy::FullLayer => false,
                    LayerPolicy::StreamingLayer(_) => true,
                    LayerPolicy::MixedLayer { labels, .. } => {
                        labels[j] == HeadKind::Streaming
                    }
                };
                if store.is_streaming() != want_streaming {
                    return Err(Error::State(format!(
                        "store ({l},{j}) does not match the policy; \
                         was this state prefilled under a different policy?"
                    )));
                }
            }
        }
        Ok(())
    }

    fn refresh_peak(&mut self) {
        self.peak_entries = self.peak_entries.max(self.total_entries());
    }

    #[cfg(test)]
    pub(crate) fn corrupt_for_test(&mut self, layer: usize, head: usize) {
        let dim = self.stores[layer][head].dim();
        self.stores[layer][head].push(usize::MAX, &vec![0.0; dim], &vec![0.0; dim]);
    }
}

/// Instrumentation for one decoded token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepMetrics {
    /// Attention kernel launches: 1 per full/streaming layer, 2 per mixed.
    pub kernel_invocations: usize,
    /// Index gathers/scatters moving mixed-layer head groups in and out of
    /// their packed kernel buffers.
    pub gather_ops: usize,
    /// Total cached entries after this token.
    pub cached_entries: usize,
    /// Monotonic-clock nanoseconds spent in the attention region only.
    pub attn_ns: u64,
}

/// Optional per-head gating during decode. Heads backed by a full store
/// mix full attention with attention restricted to `cfg`'s sink + window
/// span; heads on truncated stores are unaffected (their store already is
/// the restriction).
#[derive(Debug, Clone, Copy)]
pub struct AlphaOverride<'a> {
    pub alpha: &'a AlphaMatrix,
    pub cfg: StreamingConfig,
}

/// Peak and end-of-run cache sizes for one generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryReport {
    pub peak_entries: usize,
    pub steady_entries: usize,
}

/// One greedy generation: its tokens, per-token metrics, memory report.
#[derive(Debug, Clone)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub step_metrics: Vec<StepMetrics>,
    pub memory: MemoryReport,
}

/// Dense full-attention pass over the prompt; caches are then initialized
/// according to the policy (streaming stores keep sink + window only).
/// Returns per-position logits and the ready-to-decode state.
pub fn prefill(
    model: &Model,
    tokens: &[usize],
    policy: &CachePolicy,
) -> Result<(Array2<f64>, KvCacheState)> {
    let mcfg = model.config();
    if policy.layer_count() != mcfg.layers {
        return Err(Error::Input(format!(
            "policy covers {} layers but the model has {}",
            policy.layer_count(),
            mcfg.layers
        )));
    }
    policy.validate(mcfg.heads)?;

    let (hidden, kv) = forward_full_with_kv(model, tokens)?;
    let all_logits = logits(model, &hidden);

    let mut state = KvCacheState::new(policy, mcfg.heads, mcfg.d_head());
    for (l, layer_kv) in kv.into_iter().enumerate() {
        for (j, (keys, values)) in layer_kv.into_iter().enumerate() {
            let store = &mut state.stores[l][j];
            for pos in 0..tokens.len() {
                let key = keys.row(pos);
                let value = values.row(pos);
                store.push(
                    pos,
                    key.as_slice().expect("row-major keys"),
                    value.as_slice().expect("row-major values"),
                );
            }
        }
    }
    state.tokens_seen = tokens.len();
    state.refresh_peak();
    state.validate()?;
    Ok((all_logits, state))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// One attention kernel invocation over a group of heads. Queries and
/// outputs are packed `group_len x dh` buffers; each head scans its own
/// store. `restrict` limits visibility to the sink + window span ending
/// at the current position (used by gated decode on full stores).
fn attend_group(
    packed_q: &[f64],
    stores: &[&HeadStore],
    dh: usize,
    restrict: Option<(StreamingConfig, usize)>,
    out: &mut [f64],
) {
    debug_assert_eq!(packed_q.len(), stores.len() * dh);
    debug_assert_eq!(out.len(), stores.len() * dh);
    let scale = 1.0 / (dh as f64).sqrt();
    let keep = |p: usize| match restrict {
        None => true,
        Some((cfg, pos)) => p < cfg.sink || p + cfg.window > pos,
    };
    let max_rows = stores.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut scores: Vec<f64> = Vec::with_capacity(max_rows);

    for (slot, store) in stores.iter().enumerate() {
        let q = &packed_q[slot * dh..(slot + 1) * dh];
        scores.clear();
        let mut max = f64::NEG_INFINITY;
        for seg in store.segments() {
            for (i, &p) in seg.positions.iter().enumerate() {
                if keep(p) {
                    let s = dot(q, &seg.keys[i * dh..(i + 1) * dh]) * scale;
                    if s > max {
                        max = s;
                    }
                    scores.push(s);
                }
            }
        }

        let o = &mut out[slot * dh..(slot + 1) * dh];
        o.fill(0.0);
        let mut z = 0.0;
        let mut next = 0;
        for seg in store.segments() {
            for (i, &p) in seg.positions.iter().enumerate() {
                if keep(p) {
                    let e = (scores[next] - max).exp();
                    next += 1;
                    z += e;
                    let v = &seg.values[i * dh..(i + 1) * dh];
                    for (acc, &val) in o.iter_mut().zip(v.iter()) {
                        *acc += e * val;
                    }
                }
            }
        }
        for acc in o.iter_mut() {
            *acc /= z;
        }
    }
}

fn mix_into(dest: &mut [f64], full: &[f64], windowed: &[f64], alpha: f64) {
    for ((d, &f), &w) in dest.iter_mut().zip(full.iter()).zip(windowed.iter()) {
        *d = alpha * f + (1.0 - alpha) * w;
    }
}

/// Append one token and run one decode step under the policy.
///
/// The clock only covers the attention region (scores, softmax, value
/// accumulation, and head-output movement); projections and the MLP are
/// identical across policies and excluded.
pub fn decode_step(
    model: &Model,
    state: &mut KvCacheState,
    token: usize,
    policy: &CachePolicy,
    overrides: Option<&AlphaOverride<'_>>,
) -> Result<(Array1<f64>, StepMetrics)> {
    let mcfg = model.config();
    if token >= mcfg.vocab {
        return Err(Error::Input(format!("token {token} out of vocab range 0..{}", mcfg.vocab)));
    }
    if policy.layer_count() != mcfg.layers || state.stores.len() != mcfg.layers {
        return Err(Error::Input("policy/state/model layer counts disagree".into()));
    }
    policy.validate(mcfg.heads)?;
    state.check_policy(policy)?;
    state.validate()?;
    if let Some(ov) = overrides {
        if ov.alpha.layers() != mcfg.layers || ov.alpha.heads() != mcfg.heads {
            return Err(Error::Input("override alpha shape does not match the model".into()));
        }
    }

    let dh = mcfg.d_head();
    let d_model = mcfg.d_model;
    let pos = state.tokens_seen;
    let mut x: Array1<f64> = model.embedding().row(token).to_owned();
    let mut kernels = 0usize;
    let mut gathers = 0usize;
    let mut attn_ns = 0u64;

    for l in 0..mcfg.layers {
        let w = model.layer_weights(l);
        let xn = rms_norm_row(&x);

        // project q/k/v for the new position and append to the caches
        let mut packed_q = vec![0.0; d_model];
        for j in 0..mcfg.heads {
            let mut q = xn.dot(&w.wq[j]);
            let mut k = xn.dot(&w.wk[j]);
            let v = xn.dot(&w.wv[j]);
            apply_rope_row(&mut q.view_mut(), pos);
            apply_rope_row(&mut k.view_mut(), pos);
            packed_q[j * dh..(j + 1) * dh]
                .copy_from_slice(q.as_slice().expect("contiguous"));
            state.stores[l][j].push(
                pos,
                k.as_slice().expect("contiguous"),
                v.as_slice().expect("contiguous"),
            );
        }

        let mut concat = vec![0.0; d_model];
        let started = Instant::now();
        match &policy.layers()[l] {
            LayerPolicy::FullLayer => {
                let stores: Vec<&HeadStore> = state.stores[l].iter().collect();
                kernels += 1;
                match overrides {
                    None => attend_group(&packed_q, &stores, dh, None, &mut concat),
                    Some(ov) => {
                        // gated decode: a second, windowed pass over the
                        // same stores, mixed per head
                        let mut full_out = vec![0.0; d_model];
                        let mut win_out = vec![0.0; d_model];
                        attend_group(&packed_q, &stores, dh, None, &mut full_out);
                        kernels += 1;
                        attend_group(
                            &packed_q,
                            &stores,
                            dh,
                            Some((ov.cfg, pos)),
                            &mut win_out,
                        );
                        for j in 0..mcfg.heads {
                            let span = j * dh..(j + 1) * dh;
                            mix_into(
                                &mut concat[span.clone()],
                                &full_out[span.clone()],
                                &win_out[span],
                                ov.alpha.get(l, j),
                            );
                        }
                    }
                }
            }
            LayerPolicy::StreamingLayer(_) => {
                // the store already is the sink + window restriction, so a
                // gate override has nothing to mix
                let stores: Vec<&HeadStore> = state.stores[l].iter().collect();
                kernels += 1;
                attend_group(&packed_q, &stores, dh, None, &mut concat);
            }
            LayerPolicy::MixedLayer { labels, .. } => {
                for kind in [HeadKind::Retrieval, HeadKind::Streaming] {
                    let group: Vec<usize> =
                        (0..mcfg.heads).filter(|&j| labels[j] == kind).collect();
                    let span = group.len() * dh;

                    // gather-in: pack the group's queries
                    let mut gq = vec![0.0; span];
                    for (slot, &j) in group.iter().enumerate() {
                        gq[slot * dh..(slot + 1) * dh]
                            .copy_from_slice(&packed_q[j * dh..(j + 1) * dh]);
                    }
                    gathers += 1;

                    let stores: Vec<&HeadStore> =
                        group.iter().map(|&j| &state.stores[l][j]).collect();
                    let mut gout = vec![0.0; span];
                    kernels += 1;
                    match overrides {
                        Some(ov) if kind == HeadKind::Retrieval => {
                            let mut full_out = vec![0.0; span];
                            let mut win_out = vec![0.0; span];
                            attend_group(&gq, &stores, dh, None, &mut full_out);
                            kernels += 1;
                            attend_group(
                                &gq,
                                &stores,
                                dh,
                                Some((ov.cfg, pos)),
                                &mut win_out,
                            );
                            for (slot, &j) in group.iter().enumerate() {
                                let s = slot * dh..(slot + 1) * dh;
                                mix_into(
                                    &mut gout[s.clone()],
                                    &full_out[s.clone()],
                                    &win_out[s],
                                    ov.alpha.get(l, j),
                                );
                            }
                        }
                        _ => attend_group(&gq, &stores, dh, None, &mut gout),
                    }

                    // scatter-out: place group outputs back in head order
                    for (slot, &j) in group.iter().enumerate() {
                        concat[j * dh..(j + 1) * dh]
                            .copy_from_slice(&gout[slot * dh..(slot + 1) * dh]);
                    }
                    gathers += 1;
                }
            }
        }
        attn_ns += started.elapsed().as_nanos() as u64;

        x = x + ArrayView1::from(&concat).dot(&w.wo);
        let yn = rms_norm_row(&x);
        let pre = yn.dot(&w.w1);
        let act = pre.mapv(silu);
        x = x + act.dot(&w.w2);
    }

    state.tokens_seen += 1;
    state.refresh_peak();

    let token_logits = x.dot(model.unembedding());
    let metrics = StepMetrics {
        kernel_invocations: kernels,
        gather_ops: gathers,
        cached_entries: state.total_entries(),
        attn_ns,
    };
    Ok((token_logits, metrics))
}

/// Deterministic argmax: first index of the maximum logit.
pub fn greedy_pick(logits: &Array1<f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Greedy generation: prefill the prompt, then decode `n_tokens` tokens.
/// The first generated token comes from the prefill logits; each decode
/// step appends the latest token and predicts the next.
pub fn run_generation(
    model: &Model,
    prompt: &[usize],
    n_tokens: usize,
    policy: &CachePolicy,
) -> Result<Generation> {
    if n_tokens == 0 {
        return Err(Error::Input("n_tokens must be >= 1".into()));
    }
    let (prefill_logits, mut state) = prefill(model, prompt, policy)?;
    let mut next = greedy_pick(&prefill_logits.row(prompt.len() - 1).to_owned());

    let mut tokens = Vec::with_capacity(n_tokens);
    let mut step_metrics = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        tokens.push(next);
        let (step_logits, metrics) = decode_step(model, &mut state, next, policy, None)?;
        step_metrics.push(metrics);
        next = greedy_pick(&step_logits);
    }

    let memory = MemoryReport {
        peak_entries: state.peak_entries(),
        steady_entries: state.total_entries(),
    };
    Ok(Generation { tokens, step_metrics, memory })
}
