//! Dense causal attention kernels: full, streaming (sink + window), and the
//! alpha-gated mixture of the two.
//!
//! Everything here is double precision and deliberately unfused. Masked
//! positions are set to -inf in the score matrix before the stabilized
//! softmax, so every kernel row stays exactly row-stochastic.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Sink + window geometry for streaming attention.
///
/// Row `t` of a streaming mask sees the first `sink` positions plus the
/// trailing `window` positions up to and including `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamingConfig {
    pub sink: usize,
    pub window: usize,
}

impl StreamingConfig {
    pub fn new(sink: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Domain("streaming window must be >= 1".into()));
        }
        Ok(Self { sink, window })
    }

    /// Number of cached positions a streaming store holds once saturated.
    pub fn capacity(&self) -> usize {
        self.sink + self.window
    }

    /// True when the mask degenerates to plain causal for sequences of
    /// length `t`: every row sees its whole prefix.
    pub fn covers(&self, t: usize) -> bool {
        self.capacity() >= t
    }
}

/// Per-head query/key/value block, all `T x d_head`.
#[derive(Debug, Clone)]
pub struct AttnInput {
    queries: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
}

impl AttnInput {
    pub fn new(queries: Array2<f64>, keys: Array2<f64>, values: Array2<f64>) -> Result<Self> {
        let dim = queries.dim();
        if keys.dim() != dim || values.dim() != dim {
            return Err(Error::Input(format!(
                "q/k/v shapes disagree: {:?} vs {:?} vs {:?}",
                queries.dim(),
                keys.dim(),
                values.dim()
            )));
        }
        if dim.0 == 0 || dim.1 == 0 {
            return Err(Error::Input("attention input must be non-empty".into()));
        }
        for m in [&queries, &keys, &values] {
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input("attention input contains non-finite values".into()));
            }
        }
        Ok(Self { queries, keys, values })
    }

    pub fn queries(&self) -> &Array2<f64> {
        &self.queries
    }

    pub fn keys(&self) -> &Array2<f64> {
        &self.keys
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn seq_len(&self) -> usize {
        self.queries.nrows()
    }

    pub fn head_dim(&self) -> usize {
        self.queries.ncols()
    }
}

/// Boolean visibility matrix, `T x T`, true = position visible.
///
/// Only the two shapes the kernels need can be built, so every mask is a
/// lower-triangular subset by construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    visible: Array2<bool>,
}

impl AttnMask {
    /// Plain causal mask: row `t` sees positions `0..=t`.
    pub fn causal(t: usize) -> Self {
        let visible = Array2::from_shape_fn((t, t), |(row, col)| col <= row);
        Self { visible }
    }

    /// Sink + window mask: row `t` sees `{0..sink-1} ∪ {t-window+1..t}`,
    /// clipped to the causal triangle.
    pub fn streaming(t: usize, cfg: &StreamingConfig) -> Self {
        let visible = Array2::from_shape_fn((t, t), |(row, col)| {
            col <= row && (col < cfg.sink || col + cfg.window > row)
        });
        Self { visible }
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[(row, col)]
    }

    pub fn seq_len(&self) -> usize {
        self.visible.nrows()
    }
}

/// Scaled masked scores: `q·kᵀ/sqrt(d_head)` with -inf at hidden positions.
fn masked_scores(input: &AttnInput, mask: &AttnMask) -> Array2<f64> {
    let t = input.seq_len();
    let scale = 1.0 / (input.head_dim() as f64).sqrt();
    let mut scores = Array2::from_elem((t, t), f64::NEG_INFINITY);
    let q = input.queries();
    let k = input.keys();
    for row in 0..t {
        for col in 0..t {
            if mask.is_visible(row, col) {
                scores[(row, col)] = q.row(row).dot(&k.row(col)) * scale;
            }
        }
    }
    scores
}

/// Row-stochastic attention weights for `input` under `mask`.
///
/// Softmax is stabilized by row-max subtraction; -inf scores contribute
/// exact zeros. Every row has at least the diagonal visible, so no row
/// can be empty.
pub fn attention_probs(input: &AttnInput, mask: &AttnMask) -> Array2<f64> {
    let scores = masked_scores(input, mask);
    let t = scores.nrows();
    let mut probs = Array2::zeros((t, t));
    for row in 0..t {
        let m = scores.row(row).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for col in 0..t {
            let e = (scores[(row, col)] - m).exp();
            probs[(row, col)] = e;
            z += e;
        }
        for col in 0..t {
            probs[(row, col)] /= z;
        }
    }
    probs
}

fn masked_attention(input: &AttnInput, mask: &AttnMask) -> Array2<f64> {
    attention_probs(input, mask).dot(input.values())
}

/// Causal full attention: `softmax(q·kᵀ/sqrt(d) + causal)·v`.
pub fn full_attention(input: &AttnInput) -> Result<Array2<f64>> {
    let mask = AttnMask::causal(input.seq_len());
    Ok(masked_attention(input, &mask))
}

/// Streaming attention: full attention restricted to the sink + window mask.
pub fn streaming_attention(input: &AttnInput, cfg: &StreamingConfig) -> Result<Array2<f64>> {
    let mask = AttnMask::streaming(input.seq_len(), cfg);
    Ok(masked_attention(input, &mask))
}

/// Gated mixture `alpha · full + (1 - alpha) · streaming`.
///
/// Both kernels always run; the combination is elementwise, so alpha = 1
/// reproduces the full kernel bitwise (the streaming term is scaled by an
/// exact zero) and alpha = 0 reproduces the streaming kernel.
pub fn mixed_attention(
    input: &AttnInput,
    cfg: &StreamingConfig,
    alpha: f64,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("alpha must be in [0, 1], got {alpha}")));
    }
    let full = full_attention(input)?;
    let streaming = streaming_attention(input, cfg)?;
    Ok(alpha * &full + (1.0 - alpha) * &streaming)
}
