//! Frozen-weight toy transformer.
//!
//! The backbone is deliberately minimal: embedding, pre-norm blocks of
//! multi-head attention (with rotary position encoding) plus a two-layer
//! MLP, both with residuals, and a linear unembedding for logits. All
//! weights are drawn once from a seeded RNG and never trained; the only
//! trainable quantities in this crate are the per-head gates.

use ndarray::{s, Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::alpha::AlphaMatrix;
use crate::attn::{full_attention, mixed_attention, AttnInput, StreamingConfig};
use crate::error::{Error, Result};

/// Final-layer activations, `T x d_model`.
pub type HiddenStates = Array2<f64>;

pub(crate) const RMS_EPS: f64 = 1e-6;
pub(crate) const ROPE_BASE: f64 = 10_000.0;

/// Static shape of the toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::Input("layers and heads must be >= 1".into()));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Input(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(self.d_model / self.heads).is_multiple_of(2) {
            return Err(Error::Input(
                "d_head must be even for rotary position pairs".into(),
            ));
        }
        if self.vocab == 0 {
            return Err(Error::Input("vocab must be >= 1".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    /// MLP hidden width, fixed at the usual 4x expansion.
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }
}

/// One transformer block's frozen weights.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    /// Per-head query/key/value projections, each `d_model x d_head`.
    pub wq: Vec<Array2<f64>>,
    pub wk: Vec<Array2<f64>>,
    pub wv: Vec<Array2<f64>>,
    /// Output projection, `d_model x d_model`.
    pub wo: Array2<f64>,
    /// MLP in/out projections, `d_model x d_ff` and `d_ff x d_model`.
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

/// The full frozen model: embedding, blocks, unembedding.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    embed: Array2<f64>,
    layers: Vec<LayerWeights>,
    unembed: Array2<f64>,
}

fn sample_matrix(rng: &mut ChaCha8Rng, dist: &Normal<f64>, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = dist.sample(rng);
        }
    }
    m
}

impl Model {
    /// Initialize all weights from `cfg.seed`. Two models built from the
    /// same config are identical.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("std is positive");

        let embed = sample_matrix(&mut rng, &dist, cfg.vocab, cfg.d_model);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut wq = Vec::with_capacity(cfg.heads);
            let mut wk = Vec::with_capacity(cfg.heads);
            let mut wv = Vec::with_capacity(cfg.heads);
            for _ in 0..cfg.heads {
                wq.push(sample_matrix(&mut rng, &dist, cfg.d_model, cfg.d_head()));
                wk.push(sample_matrix(&mut rng, &dist, cfg.d_model, cfg.d_head()));
                wv.push(sample_matrix(&mut rng, &dist, cfg.d_model, cfg.d_head()));
            }
            layers.push(LayerWeights {
                wq,
                wk,
                wv,
                wo: sample_matrix(&mut rng, &dist, cfg.d_model, cfg.d_model),
                w1: sample_matrix(&mut rng, &dist, cfg.d_model, cfg.d_ff()),
                w2: sample_matrix(&mut rng, &dist, cfg.d_ff(), cfg.d_model),
            });
        }
        let unembed = sample_matrix(&mut rng, &dist, cfg.d_model, cfg.vocab);

        Ok(Self { cfg, embed, layers, unembed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embed
    }

    pub fn layer_weights(&self, layer: usize) -> &LayerWeights {
        &self.layers[layer]
    }

    pub fn unembedding(&self) -> &Array2<f64> {
        &self.unembed
    }

    pub(crate) fn validate_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("token sequence is empty".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab) {
            return Err(Error::Input(format!(
                "token {bad} out of vocab range 0..{}",
                self.cfg.vocab
            )));
        }
        Ok(())
    }

    pub(crate) fn embed_tokens(&self, tokens: &[usize]) -> Array2<f64> {
        let mut x = Array2::zeros((tokens.len(), self.cfg.d_model));
        for (row, &tok) in tokens.iter().enumerate() {
            x.row_mut(row).assign(&self.embed.row(tok));
        }
        x
    }
}

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_derivative(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Row-wise RMS normalization (no learned gain).
pub(crate) fn rms_norm(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let r = (ms + RMS_EPS).sqrt();
        row.mapv_inplace(|v| v / r);
    }
    out
}

pub(crate) fn rms_norm_row(x: &Array1<f64>) -> Array1<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = (ms + RMS_EPS).sqrt();
    x.mapv(|v| v / r)
}

/// Rotate one head row by the rotary angles of absolute position `pos`.
/// Pairs are (0,1), (2,3), ...
pub(crate) fn apply_rope_row(row: &mut ndarray::ArrayViewMut1<'_, f64>, pos: usize) {
    let d = row.len();
    for pair in 0..d / 2 {
        let theta = ROPE_BASE.powf(-2.0 * pair as f64 / d as f64);
        let (sin, cos) = (pos as f64 * theta).sin_cos();
        let a = row[2 * pair];
        let b = row[2 * pair + 1];
        row[2 * pair] = a * cos - b * sin;
        row[2 * pair + 1] = a * sin + b * cos;
    }
}

/// Rotate row `r` of `m` at absolute position `start_pos + r`.
pub(crate) fn apply_rope(m: &mut Array2<f64>, start_pos: usize) {
    for r in 0..m.nrows() {
        apply_rope_row(&mut m.row_mut(r), start_pos + r);
    }
}

/// Transpose of the rotary rotation, used when backpropagating through it.
pub(crate) fn apply_rope_transposed(m: &mut Array2<f64>, start_pos: usize) {
    let d = m.ncols();
    for r in 0..m.nrows() {
        let pos = (start_pos + r) as f64;
        for pair in 0..d / 2 {
            let theta = ROPE_BASE.powf(-2.0 * pair as f64 / d as f64);
            let (sin, cos) = (pos * theta).sin_cos();
            let a = m[(r, 2 * pair)];
            let b = m[(r, 2 * pair + 1)];
            m[(r, 2 * pair)] = a * cos + b * sin;
            m[(r, 2 * pair + 1)] = -a * sin + b * cos;
        }
    }
}

enum AttnMode<'a> {
    Full,
    Mixed { alpha: &'a AlphaMatrix, cfg: &'a StreamingConfig },
}

/// Post-rope keys and values per layer per head, captured for cache
/// initialization during prefill.
pub(crate) type KvCapture = Vec<Vec<(Array2<f64>, Array2<f64>)>>;

fn forward_inner(
    model: &Model,
    tokens: &[usize],
    mode: AttnMode<'_>,
    capture: bool,
) -> Result<(HiddenStates, Option<KvCapture>)> {
    model.validate_tokens(tokens)?;
    let mcfg = model.config();
    let dh = mcfg.d_head();
    let t = tokens.len();
    let mut x = model.embed_tokens(tokens);
    let mut captured: KvCapture = Vec::new();

    for l in 0..mcfg.layers {
        let w = model.layer_weights(l);
        let xn = rms_norm(&x);
        let mut concat = Array2::zeros((t, mcfg.d_model));
        let mut layer_kv = Vec::new();
        for j in 0..mcfg.heads {
            let mut q = xn.dot(&w.wq[j]);
            let mut k = xn.dot(&w.wk[j]);
            let v = xn.dot(&w.wv[j]);
            apply_rope(&mut q, 0);
            apply_rope(&mut k, 0);
            if capture {
                layer_kv.push((k.clone(), v.clone()));
            }
            let input = AttnInput::new(q, k, v)
                .map_err(|e| Error::Numerical(format!("layer {l} head {j}: {e}")))?;
            let head_out = match &mode {
                AttnMode::Full => full_attention(&input)?,
                AttnMode::Mixed { alpha, cfg } => {
                    mixed_attention(&input, cfg, alpha.get(l, j))?
                }
            };
            concat.slice_mut(s![.., j * dh..(j + 1) * dh]).assign(&head_out);
        }
        if capture {
            captured.push(layer_kv);
        }
        x = x + concat.dot(&w.wo);

        let yn = rms_norm(&x);
        let pre = yn.dot(&w.w1);
        let act = pre.mapv(silu);
        x = x + act.dot(&w.w2);
    }
    Ok((x, capture.then_some(captured)))
}

/// Forward pass with every head in full-attention mode (the teacher).
pub fn forward_full(model: &Model, tokens: &[usize]) -> Result<HiddenStates> {
    forward_inner(model, tokens, AttnMode::Full, false).map(|(h, _)| h)
}

/// The same full forward pass, additionally returning every head's
/// post-rope keys and values. Prefill runs through here so its logits are
/// the full-attention logits by construction.
pub(crate) fn forward_full_with_kv(
    model: &Model,
    tokens: &[usize],
) -> Result<(HiddenStates, KvCapture)> {
    let (h, kv) = forward_inner(model, tokens, AttnMode::Full, true)?;
    Ok((h, kv.expect("capture requested")))
}

/// Forward pass where head `(i, j)` mixes full and streaming attention
/// with gate `alpha[i][j]`.
pub fn forward_mixed(
    model: &Model,
    tokens: &[usize],
    alpha: &AlphaMatrix,
    cfg: &StreamingConfig,
) -> Result<HiddenStates> {
    let mcfg = model.config();
    if alpha.layers() != mcfg.layers || alpha.heads() != mcfg.heads {
        return Err(Error::Input(format!(
            "alpha is {}x{} but the model has {} layers x {} heads",
            alpha.layers(),
            alpha.heads(),
            mcfg.layers,
            mcfg.heads
        )));
    }
    forward_inner(model, tokens, AttnMode::Mixed { alpha, cfg }, false).map(|(h, _)| h)
}

/// Unembedding: hidden states to per-position vocabulary logits.
pub fn logits(model: &Model, hidden: &HiddenStates) -> Array2<f64> {
    hidden.dot(model.unembedding())
}
