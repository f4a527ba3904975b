//! Synthetic passkey-retrieval sequences.
//!
//! A sample is filler noise with a short passkey inserted at a configurable
//! depth; the final `response_len` tokens repeat the passkey and are the
//! positions the distillation loss scores. Filler and passkey draw from
//! disjoint halves of the vocabulary so the passkey can never occur by
//! accident.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::train::TrainSample;

/// Shape of one synthetic sample.
#[derive(Debug, Clone, Copy)]
pub struct PasskeySpec {
    /// Total sequence length, response included.
    pub context_len: usize,
    pub passkey_len: usize,
    /// Insertion depth in [0, 1], measured against the insertable span
    /// `context_len - response_len - passkey_len` so depth 1 is valid.
    pub depth: f64,
    pub response_len: usize,
    /// Vocabulary size; ids [0, vocab/2) are filler, [vocab/2, vocab) passkey.
    pub vocab: usize,
    pub seed: u64,
}

impl PasskeySpec {
    pub fn validate(&self) -> Result<()> {
        if self.passkey_len == 0 || self.response_len == 0 {
            return Err(Error::Input("passkey_len and response_len must be >= 1".into()));
        }
        if self.passkey_len + self.response_len > self.context_len {
            return Err(Error::Input(format!(
                "passkey_len {} + response_len {} exceeds context_len {}",
                self.passkey_len, self.response_len, self.context_len
            )));
        }
        if !(0.0..=1.0).contains(&self.depth) {
            return Err(Error::Input(format!("depth must be in [0, 1], got {}", self.depth)));
        }
        if self.vocab < 2 {
            return Err(Error::Input("vocab must have filler and passkey halves".into()));
        }
        if self.passkey_len > self.vocab - self.vocab / 2 {
            return Err(Error::Input(format!(
                "passkey_len {} exceeds the passkey sub-vocabulary of {}",
                self.passkey_len,
                self.vocab - self.vocab / 2
            )));
        }
        Ok(())
    }

    /// First position of the inserted passkey.
    pub fn insertion_index(&self) -> usize {
        let span = (self.context_len - self.response_len - self.passkey_len) as f64;
        (self.depth * span).round() as usize
    }
}

/// Generate one sample. Deterministic per spec (including seed): the
/// passkey ids are drawn without replacement from the upper half of the
/// vocabulary, filler uniformly from the lower half, and the response
/// suffix repeats the passkey truncated to `response_len`.
pub fn make_sample(spec: &PasskeySpec) -> Result<TrainSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let filler_vocab = spec.vocab / 2;
    let passkey_vocab = spec.vocab - filler_vocab;

    let passkey: Vec<usize> = index_sample(&mut rng, passkey_vocab, spec.passkey_len)
        .iter()
        .map(|i| filler_vocab + i)
        .collect();

    let insert = spec.insertion_index();
    let t = spec.context_len;
    let r = spec.response_len;
    let mut tokens = Vec::with_capacity(t);
    for pos in 0..t - r {
        if pos >= insert && pos < insert + spec.passkey_len {
            tokens.push(passkey[pos - insert]);
        } else {
            tokens.push(rng.random_range(0..filler_vocab));
        }
    }
    for i in 0..r {
        tokens.push(passkey[i % spec.passkey_len]);
    }
    TrainSample::new(tokens, r)
}

/// Generate `n` samples cycling through `depths`, with per-sample seeds
/// derived from `(seed, index)` via a splitmix-style mix.
pub fn make_dataset(
    n: usize,
    context_len: usize,
    passkey_len: usize,
    response_len: usize,
    depths: &[f64],
    vocab: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    Ok(make_dataset_with_depths(n, context_len, passkey_len, response_len, depths, vocab, seed)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// Like [`make_dataset`] but keeps each sample's depth, for serialization
/// and per-depth evaluation.
pub fn make_dataset_with_depths(
    n: usize,
    context_len: usize,
    passkey_len: usize,
    response_len: usize,
    depths: &[f64],
    vocab: usize,
    seed: u64,
) -> Result<Vec<(f64, TrainSample)>> {
    if n == 0 {
        return Err(Error::Input("dataset size must be >= 1".into()));
    }
    if depths.is_empty() {
        return Err(Error::Input("depth list is empty".into()));
    }
    (0..n)
        .map(|i| {
            let depth = depths[i % depths.len()];
            let spec = PasskeySpec {
                context_len,
                passkey_len,
                depth,
                response_len,
                vocab,
                seed: derive_seed(seed, i as u64),
            };
            make_sample(&spec).map(|s| (depth, s))
        })
        .collect()
}

/// splitmix64 finalizer over a per-index offset stream.
pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One line per sample: `T R depth : space-separated token ids`.
pub fn format_dataset(samples: &[(f64, TrainSample)]) -> String {
    let mut out = String::new();
    for (depth, s) in samples {
        let ids: Vec<String> = s.tokens().iter().map(|t| t.to_string()).collect();
        let _ = writeln!(
            out,
            "{} {} {} : {}",
            s.tokens().len(),
            s.response_len(),
            depth,
            ids.join(" ")
        );
    }
    out
}

pub fn write_dataset_file(path: &Path, samples: &[(f64, TrainSample)]) -> Result<()> {
    std::fs::write(path, format_dataset(samples))?;
    Ok(())
}

pub fn parse_dataset(text: &str) -> Result<Vec<(f64, TrainSample)>> {
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (head, tail) = line
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("line {}: missing `:`", lineno + 1)))?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Parse(format!(
                "line {}: header must be `T R depth`",
                lineno + 1
            )));
        }
        let t: usize = fields[0]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad T", lineno + 1)))?;
        let r: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad R", lineno + 1)))?;
        let depth: f64 = fields[2]
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad depth", lineno + 1)))?;
        let tokens: Vec<usize> = tail
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>()
                    .map_err(|_| Error::Parse(format!("line {}: bad token `{tok}`", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        if tokens.len() != t {
            return Err(Error::Parse(format!(
                "line {}: {} tokens but header says {t}",
                lineno + 1,
                tokens.len()
            )));
        }
        samples.push((depth, TrainSample::new(tokens, r)?));
    }
    if samples.is_empty() {
        return Err(Error::Parse("dataset file has no samples".into()));
    }
    Ok(samples)
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<(f64, TrainSample)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_dataset(&text)
}
