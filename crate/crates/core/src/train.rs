//! Gate training: distillation + L1 objective and projected gradient
//! descent on the per-head (or per-layer) gates.
//!
//! The gradient is reverse-mode, hand-written against the fixed toy
//! architecture. A forward pass records per-layer activations and both
//! attention weight matrices per head; the backward pass walks the blocks
//! in reverse and accumulates d(loss)/d(alpha) at every gated mixture.
//! Model weights never receive gradients.

use ndarray::{s, Array2};

use crate::alpha::{AlphaMatrix, Granularity};
use crate::attn::{attention_probs, AttnInput, AttnMask, StreamingConfig};
use crate::error::{Error, Result};
use crate::model::{
    apply_rope, apply_rope_transposed, forward_full, rms_norm, silu, silu_derivative,
    HiddenStates, Model, RMS_EPS,
};

/// One training sequence with a scored suffix of length `response_len`.
#[derive(Debug, Clone)]
pub struct TrainSample {
    tokens: Vec<usize>,
    response_len: usize,
}

impl TrainSample {
    pub fn new(tokens: Vec<usize>, response_len: usize) -> Result<Self> {
        if response_len == 0 || response_len > tokens.len() {
            return Err(Error::Input(format!(
                "response_len {response_len} must satisfy 1 <= R <= {}",
                tokens.len()
            )));
        }
        Ok(Self { tokens, response_len })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn response_len(&self) -> usize {
        self.response_len
    }
}

/// Loss terms for one training step. `total` is `dist + lambda * reg`
/// by construction.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub dist: f64,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    fn new(dist: f64, reg: f64, lambda: f64) -> Self {
        Self { dist, reg, total: dist + lambda * reg, lambda }
    }
}

/// Distillation loss: mean over hidden dimensions of the squared
/// teacher/student difference, summed over the last `response_len`
/// positions.
pub fn distill_loss(
    h_full: &HiddenStates,
    h_mix: &HiddenStates,
    response_len: usize,
) -> Result<f64> {
    if h_full.dim() != h_mix.dim() {
        return Err(Error::Input(format!(
            "hidden state shapes disagree: {:?} vs {:?}",
            h_full.dim(),
            h_mix.dim()
        )));
    }
    let (t, k) = h_full.dim();
    if response_len == 0 || response_len > t {
        return Err(Error::Input(format!(
            "response_len {response_len} must satisfy 1 <= R <= {t}"
        )));
    }
    let mut sum = 0.0;
    for row in (t - response_len)..t {
        for col in 0..k {
            let d = h_full[(row, col)] - h_mix[(row, col)];
            sum += d * d;
        }
    }
    Ok(sum / k as f64)
}

/// L1 term: sum of |alpha| over all gates (gates are non-negative, so this
/// is the plain sum).
pub fn reg_loss(alpha: &AlphaMatrix) -> f64 {
    alpha.values().iter().map(|v| v.abs()).sum()
}

// ---------------------------------------------------------------------------
// Cached forward + reverse pass
// ---------------------------------------------------------------------------

struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs_full: Array2<f64>,
    probs_stream: Array2<f64>,
    out_full: Array2<f64>,
    out_stream: Array2<f64>,
}

struct LayerCache {
    attn_input: Array2<f64>,
    heads: Vec<HeadCache>,
    mlp_input: Array2<f64>,
    mlp_pre: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    hidden: HiddenStates,
}

fn forward_mixed_cached(
    model: &Model,
    tokens: &[usize],
    alpha: &AlphaMatrix,
    cfg: &StreamingConfig,
) -> Result<ForwardCache> {
    model.validate_tokens(tokens)?;
    let mcfg = model.config();
    let dh = mcfg.d_head();
    let t = tokens.len();
    let causal = AttnMask::causal(t);
    let streaming = AttnMask::streaming(t, cfg);

    let mut x = model.embed_tokens(tokens);
    let mut layers = Vec::with_capacity(mcfg.layers);

    for l in 0..mcfg.layers {
        let w = model.layer_weights(l);
        let attn_input = x.clone();
        let xn = rms_norm(&x);
        let mut concat = Array2::zeros((t, mcfg.d_model));
        let mut heads = Vec::with_capacity(mcfg.heads);
        for j in 0..mcfg.heads {
            let mut q = xn.dot(&w.wq[j]);
            let mut k = xn.dot(&w.wk[j]);
            let v = xn.dot(&w.wv[j]);
            apply_rope(&mut q, 0);
            apply_rope(&mut k, 0);
            let input = AttnInput::new(q.clone(), k.clone(), v.clone())
                .map_err(|e| Error::Numerical(format!("layer {l} head {j}: {e}")))?;
            let probs_full = attention_probs(&input, &causal);
            let probs_stream = attention_probs(&input, &streaming);
            let out_full = probs_full.dot(&v);
            let out_stream = probs_stream.dot(&v);
            let a = alpha.get(l, j);
            let mixed = a * &out_full + (1.0 - a) * &out_stream;
            concat.slice_mut(s![.., j * dh..(j + 1) * dh]).assign(&mixed);
            heads.push(HeadCache { q, k, v, probs_full, probs_stream, out_full, out_stream });
        }
        x = x + concat.dot(&w.wo);

        let mlp_input = x.clone();
        let yn = rms_norm(&x);
        let pre = yn.dot(&w.w1);
        let act = pre.mapv(silu);
        x = x + act.dot(&w.w2);

        layers.push(LayerCache { attn_input, heads, mlp_input, mlp_pre: pre });
    }

    Ok(ForwardCache { layers, hidden: x })
}

/// Backward through one softmax-attention kernel.
/// Returns (dq, dk, dv) given cached probs and the output gradient.
fn kernel_backward(
    probs: &Array2<f64>,
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = probs.t().dot(d_out);
    let dp = d_out.dot(&v.t());
    // softmax backward: dS = P ⊙ (dP - rowsum(dP ⊙ P))
    let mut ds = Array2::zeros(probs.raw_dim());
    for row in 0..probs.nrows() {
        let dot: f64 = (0..probs.ncols()).map(|c| dp[(row, c)] * probs[(row, c)]).sum();
        for col in 0..probs.ncols() {
            ds[(row, col)] = probs[(row, col)] * (dp[(row, col)] - dot);
        }
    }
    let dq = ds.dot(k) * scale;
    let dk = ds.t().dot(q) * scale;
    (dq, dk, dv)
}

/// Backward through row-wise RMS normalization.
fn rms_norm_backward(x: &Array2<f64>, d_y: &Array2<f64>) -> Array2<f64> {
    let n = x.ncols() as f64;
    let mut dx = Array2::zeros(x.raw_dim());
    for row in 0..x.nrows() {
        let ms = x.row(row).iter().map(|v| v * v).sum::<f64>() / n;
        let r = (ms + RMS_EPS).sqrt();
        let mut dy_dot_y = 0.0;
        for col in 0..x.ncols() {
            dy_dot_y += d_y[(row, col)] * x[(row, col)] / r;
        }
        for col in 0..x.ncols() {
            let y = x[(row, col)] / r;
            dx[(row, col)] = (d_y[(row, col)] - y * dy_dot_y / n) / r;
        }
    }
    dx
}

/// Walk the cached blocks in reverse, propagating `d_hidden` down to the
/// embedding and collecting d(loss)/d(alpha) at every gated mixture.
fn backward_alpha(
    model: &Model,
    cache: &ForwardCache,
    alpha: &AlphaMatrix,
    d_hidden: Array2<f64>,
) -> Array2<f64> {
    let mcfg = model.config();
    let dh = mcfg.d_head();
    let mut d_alpha = Array2::zeros((mcfg.layers, mcfg.heads));
    let mut dx = d_hidden;

    for l in (0..mcfg.layers).rev() {
        let w = model.layer_weights(l);
        let lc = &cache.layers[l];

        // MLP block: out = a + silu(rms(a) · w1) · w2
        let d_act = dx.dot(&w.w2.t());
        let mut d_pre = d_act;
        for (g, &u) in d_pre.iter_mut().zip(lc.mlp_pre.iter()) {
            *g *= silu_derivative(u);
        }
        let d_normed = d_pre.dot(&w.w1.t());
        dx = dx + rms_norm_backward(&lc.mlp_input, &d_normed);

        // attention block: a = b + concat(heads(rms(b))) · wo
        let d_concat = dx.dot(&w.wo.t());
        let mut d_bn: Array2<f64> = Array2::zeros(lc.attn_input.raw_dim());
        for j in 0..mcfg.heads {
            let hc = &lc.heads[j];
            let d_head = d_concat.slice(s![.., j * dh..(j + 1) * dh]).to_owned();

            let gate_grad: f64 = d_head
                .iter()
                .zip(hc.out_full.iter().zip(hc.out_stream.iter()))
                .map(|(g, (f, s))| g * (f - s))
                .sum();
            d_alpha[(l, j)] = gate_grad;

            let a = alpha.get(l, j);
            let d_full = a * &d_head;
            let d_stream = (1.0 - a) * &d_head;
            let (dq_f, dk_f, dv_f) = kernel_backward(&hc.probs_full, &hc.q, &hc.k, &hc.v, &d_full);
            let (dq_s, dk_s, dv_s) =
                kernel_backward(&hc.probs_stream, &hc.q, &hc.k, &hc.v, &d_stream);

            let mut dq = dq_f + dq_s;
            let mut dk = dk_f + dk_s;
            let dv = dv_f + dv_s;
            apply_rope_transposed(&mut dq, 0);
            apply_rope_transposed(&mut dk, 0);

            d_bn = d_bn + dq.dot(&w.wq[j].t()) + dk.dot(&w.wk[j].t()) + dv.dot(&w.wv[j].t());
        }
        dx = dx + rms_norm_backward(&lc.attn_input, &d_bn);
    }
    d_alpha
}

/// Distillation loss and its gradient w.r.t. the gates, given a
/// precomputed teacher. The regularization term is not included here.
fn dist_loss_and_gradient(
    model: &Model,
    teacher: &HiddenStates,
    sample: &TrainSample,
    alpha: &AlphaMatrix,
    cfg: &StreamingConfig,
) -> Result<(f64, Array2<f64>)> {
    let cache = forward_mixed_cached(model, sample.tokens(), alpha, cfg)?;
    let dist = distill_loss(teacher, &cache.hidden, sample.response_len())?;
    if !dist.is_finite() {
        return Err(Error::Numerical(format!("distillation loss is {dist}")));
    }

    let (t, k) = cache.hidden.dim();
    let mut d_hidden = Array2::zeros((t, k));
    for row in (t - sample.response_len())..t {
        for col in 0..k {
            d_hidden[(row, col)] =
                2.0 / k as f64 * (cache.hidden[(row, col)] - teacher[(row, col)]);
        }
    }
    let grad = backward_alpha(model, &cache, alpha, d_hidden);
    Ok((dist, grad))
}

/// Gradient of the combined objective `dist + lambda * reg` w.r.t. every
/// gate, with model weights frozen. The L1 subgradient is 1 on the
/// non-negative gate range.
pub fn alpha_gradient(
    model: &Model,
    sample: &TrainSample,
    alpha: &AlphaMatrix,
    cfg: &StreamingConfig,
    lambda: f64,
) -> Result<Array2<f64>> {
    let teacher = forward_full(model, sample.tokens())?;
    let (_, grad) = dist_loss_and_gradient(model, &teacher, sample, alpha, cfg)?;
    Ok(grad + lambda)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

/// Result of a training run: the final gates plus the per-step loss log.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub alpha: AlphaMatrix,
    pub log: Vec<LossBreakdown>,
}

/// Train gates from the all-ones initialization.
///
/// Each step evaluates the mean distillation loss over the dataset plus
/// `lambda` times the L1 term, then applies one projected gradient step
/// `alpha <- clamp(alpha - lr * grad, 0, 1)`. The log holds one
/// [`LossBreakdown`] per step, evaluated at the gates before that step's
/// update.
pub fn train_alphas(
    model: &Model,
    dataset: &[TrainSample],
    cfg: &StreamingConfig,
    lambda: f64,
    lr: f64,
    steps: usize,
    granularity: Granularity,
) -> Result<TrainReport> {
    let mcfg = model.config();
    let init = AlphaMatrix::from_values(
        Array2::from_elem((mcfg.layers, mcfg.heads), 1.0),
        granularity,
    )?;
    train_alphas_from(model, dataset, cfg, lambda, lr, steps, init)
}

/// Train gates from an explicit initialization (used by layer-granularity
/// fine-tuning, where streaming layers start at 0 and retrieval layers
/// at 1).
pub fn train_alphas_from(
    model: &Model,
    dataset: &[TrainSample],
    cfg: &StreamingConfig,
    lambda: f64,
    lr: f64,
    steps: usize,
    init: AlphaMatrix,
) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    let mcfg = model.config();
    if init.layers() != mcfg.layers || init.heads() != mcfg.heads {
        return Err(Error::Input("initial alpha shape does not match the model".into()));
    }
    let granularity = init.granularity();

    // Teacher states depend only on the frozen weights; compute them once.
    let teachers: Vec<HiddenStates> = dataset
        .iter()
        .map(|s| forward_full(model, s.tokens()))
        .collect::<Result<_>>()?;

    let mut alpha = init;
    let mut log = Vec::with_capacity(steps);

    for step in 0..steps {
        let mut dist_sum = 0.0;
        let mut grad_sum: Array2<f64> = Array2::zeros((mcfg.layers, mcfg.heads));
        for (sample, teacher) in dataset.iter().zip(&teachers) {
            let (dist, grad) = dist_loss_and_gradient(model, teacher, sample, &alpha, cfg)
                .map_err(|e| match e {
                    Error::Numerical(msg) => Error::Training { step, message: msg },
                    other => other,
                })?;
            dist_sum += dist;
            grad_sum = grad_sum + grad;
        }
        let n = dataset.len() as f64;
        let dist = dist_sum / n;
        let reg = reg_loss(&alpha);
        let breakdown = LossBreakdown::new(dist, reg, lambda);
        if !breakdown.total.is_finite() {
            return Err(Error::Training {
                step,
                message: format!("total loss is {}", breakdown.total),
            });
        }
        log.push(breakdown);

        // Combined gradient: mean distillation gradient + L1 subgradient.
        let mut grad = grad_sum / n + lambda;
        if granularity == Granularity::Layer {
            // One gate per layer: the row gradient is the sum over heads.
            for mut row in grad.rows_mut() {
                let total: f64 = row.sum();
                row.fill(total);
            }
        }

        let mut values = alpha.values().clone();
        match granularity {
            Granularity::Head => {
                for (v, g) in values.iter_mut().zip(grad.iter()) {
                    *v = (*v - lr * g).clamp(0.0, 1.0);
                }
            }
            Granularity::Layer => {
                for l in 0..mcfg.layers {
                    let updated = (values[(l, 0)] - lr * grad[(l, 0)]).clamp(0.0, 1.0);
                    values.row_mut(l).fill(updated);
                }
            }
        }
        alpha = AlphaMatrix::from_values(values, granularity)?;
    }

    Ok(TrainReport { alpha, log })
}
