//! Per-head KV stores.
//!
//! Keys and values live in contiguous row blocks so decode kernels scan
//! flat `f64` slices. A full store grows with the sequence; a streaming
//! store keeps the first `sink` rows verbatim plus a fixed-capacity ring
//! of the most recent `window` rows. Eviction happens on push, so a
//! streaming store never holds more than `sink + window` rows.

use crate::attn::StreamingConfig;
use crate::error::{Error, Result};

/// Growable block of cached rows: positions plus flat key/value storage.
#[derive(Debug, Clone)]
pub struct RowBlock {
    dim: usize,
    positions: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl RowBlock {
    pub fn new(dim: usize) -> Self {
        Self { dim, positions: Vec::new(), keys: Vec::new(), values: Vec::new() }
    }

    pub fn push(&mut self, pos: usize, key: &[f64], value: &[f64]) {
        debug_assert_eq!(key.len(), self.dim);
        debug_assert_eq!(value.len(), self.dim);
        self.positions.push(pos);
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Fixed-capacity ring of rows: pushing at capacity overwrites the oldest
/// row in place.
#[derive(Debug, Clone)]
pub struct RingRows {
    dim: usize,
    cap: usize,
    start: usize,
    len: usize,
    positions: Vec<usize>,
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl RingRows {
    pub fn new(dim: usize, cap: usize) -> Self {
        assert!(cap >= 1, "ring capacity must be >= 1");
        Self {
            dim,
            cap,
            start: 0,
            len: 0,
            positions: vec![0; cap],
            keys: vec![0.0; cap * dim],
            values: vec![0.0; cap * dim],
        }
    }

    pub fn push(&mut self, pos: usize, key: &[f64], value: &[f64]) {
        debug_assert_eq!(key.len(), self.dim);
        let slot = if self.len < self.cap {
            let slot = self.len;
            self.len += 1;
            slot
        } else {
            let slot = self.start;
            self.start = (self.start + 1) % self.cap;
            slot
        };
        self.positions[slot] = pos;
        self.keys[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(key);
        self.values[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(value);
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    /// Position of the logical `i`-th row, oldest first.
    pub fn position(&self, i: usize) -> usize {
        self.positions[(self.start + i) % self.cap]
    }
}

/// A contiguous run of cached rows, oldest first.
#[derive(Debug, Clone, Copy)]
pub struct RowSegment<'a> {
    pub positions: &'a [usize],
    pub keys: &'a [f64],
    pub values: &'a [f64],
}

impl RowSegment<'_> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// KV storage for a single attention head.
#[derive(Debug, Clone)]
pub enum HeadStore {
    Full { rows: RowBlock },
    Streaming { cfg: StreamingConfig, sink: RowBlock, ring: RingRows },
}

impl HeadStore {
    pub fn full(dim: usize) -> Self {
        HeadStore::Full { rows: RowBlock::new(dim) }
    }

    pub fn streaming(dim: usize, cfg: StreamingConfig) -> Self {
        HeadStore::Streaming {
            cfg,
            sink: RowBlock::new(dim),
            ring: RingRows::new(dim, cfg.window),
        }
    }

    pub fn is_streaming(&self) -> bool {
        matches!(self, HeadStore::Streaming { .. })
    }

    /// Row width (the per-head dimension).
    pub fn dim(&self) -> usize {
        match self {
            HeadStore::Full { rows } => rows.dim,
            HeadStore::Streaming { sink, .. } => sink.dim,
        }
    }

    /// Append one row; streaming stores evict immediately when the ring
    /// is full.
    pub fn push(&mut self, pos: usize, key: &[f64], value: &[f64]) {
        match self {
            HeadStore::Full { rows } => rows.push(pos, key, value),
            HeadStore::Streaming { cfg, sink, ring } => {
                if sink.len() < cfg.sink {
                    sink.push(pos, key, value);
                } else {
                    ring.push(pos, key, value);
                }
            }
        }
    }

    /// Number of cached (key, value) entries.
    pub fn len(&self) -> usize {
        match self {
            HeadStore::Full { rows } => rows.len(),
            HeadStore::Streaming { sink, ring, .. } => sink.len() + ring.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The store's rows as up to three contiguous segments in position
    /// order: the full block, or sink + (possibly wrapped) ring.
    pub fn segments(&self) -> Vec<RowSegment<'_>> {
        match self {
            HeadStore::Full { rows } => vec![RowSegment {
                positions: rows.positions(),
                keys: rows.keys(),
                values: rows.values(),
            }],
            HeadStore::Streaming { sink, ring, .. } => {
                let mut segs = Vec::with_capacity(3);
                if !sink.is_empty() {
                    segs.push(RowSegment {
                        positions: sink.positions(),
                        keys: sink.keys(),
                        values: sink.values(),
                    });
                }
                let d = ring.dim;
                let tail = ring.len.min(ring.cap - ring.start);
                if tail > 0 {
                    let (a, b) = (ring.start, ring.start + tail);
                    segs.push(RowSegment {
                        positions: &ring.positions[a..b],
                        keys: &ring.keys[a * d..b * d],
                        values: &ring.values[a * d..b * d],
                    });
                }
                let wrapped = ring.len - tail;
                if wrapped > 0 {
                    segs.push(RowSegment {
                        positions: &ring.positions[..wrapped],
                        keys: &ring.keys[..wrapped * d],
                        values: &ring.values[..wrapped * d],
                    });
                }
                segs
            }
        }
    }

    /// Cached absolute positions, in storage order.
    pub fn positions(&self) -> Vec<usize> {
        self.segments().iter().flat_map(|s| s.positions.iter().copied()).collect()
    }

    /// Structural invariants given `tokens_seen` total pushed tokens.
    pub fn validate(&self, tokens_seen: usize) -> Result<()> {
        match self {
            HeadStore::Full { rows } => {
                if rows.len() != tokens_seen {
                    return Err(Error::State(format!(
                        "full store holds {} rows after {tokens_seen} tokens",
                        rows.len()
                    )));
                }
            }
            HeadStore::Streaming { cfg, sink, ring } => {
                let expected = tokens_seen.min(cfg.capacity());
                if sink.len() + ring.len() != expected {
                    return Err(Error::State(format!(
                        "streaming store holds {} rows, expected {expected}",
                        sink.len() + ring.len()
                    )));
                }
                if sink.len() > cfg.sink || ring.len() > cfg.window {
                    return Err(Error::State("streaming store exceeds sink/window bounds".into()));
                }
                if sink.positions().iter().enumerate().any(|(i, &p)| p != i) {
                    return Err(Error::State("sink block positions are not 0..sink".into()));
                }
                let window: Vec<usize> = (0..ring.len()).map(|i| ring.position(i)).collect();
                if window.windows(2).any(|w| w[1] != w[0] + 1) {
                    return Err(Error::State("window positions are not contiguous".into()));
                }
                if let Some(&last) = window.last() {
                    if last + 1 != tokens_seen {
                        return Err(Error::State(format!(
                            "window ends at {last}, expected {}",
                            tokens_seen - 1
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// The positions a streaming store must hold after `tokens_seen` tokens:
/// `{0..sink-1} ∪ {tokens_seen-window..tokens_seen-1}`.
pub fn analytic_streaming_positions(cfg: &StreamingConfig, tokens_seen: usize) -> Vec<usize> {
    let sink_end = cfg.sink.min(tokens_seen);
    let window_start = tokens_seen.saturating_sub(cfg.window).max(sink_end);
    (0..sink_end).chain(window_start..tokens_seen).collect()
}
