//! Flat key = value run configuration.
//!
//! All quantities carry explicit token counts; lists are comma separated.
//! Parsing is strict: every key is required and unknown keys are errors,
//! so a config file pins a run completely.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use zigzag_core::{Error, ModelConfig, Result, StreamingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: usize,
    pub seed: u64,
    // gates and policy
    pub sparsity: f64,
    pub sink_tokens: usize,
    pub window_tokens: usize,
    pub lambda: f64,
    pub lr: f64,
    pub steps: usize,
    pub omega_grid: Vec<f64>,
    // synthetic data
    pub data_samples: usize,
    pub data_context_len: usize,
    pub data_passkey_len: usize,
    pub data_response_len: usize,
    pub data_depths: Vec<f64>,
    pub data_seed: u64,
    pub eval_samples: usize,
    pub eval_seed: u64,
    // benchmark grid
    pub bench_prefill_lens: Vec<usize>,
    pub bench_decode_lens: Vec<usize>,
}

const KEYS: &[&str] = &[
    "layers",
    "heads",
    "d_model",
    "vocab",
    "seed",
    "sparsity",
    "sink_tokens",
    "window_tokens",
    "lambda",
    "lr",
    "steps",
    "omega_grid",
    "data_samples",
    "data_context_len",
    "data_passkey_len",
    "data_response_len",
    "data_depths",
    "data_seed",
    "eval_samples",
    "eval_seed",
    "bench_prefill_lens",
    "bench_decode_lens",
];

fn parse_scalar<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Input(format!("config is missing key `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Parse(format!("config key `{key}`: bad value `{raw}`")))
}

fn parse_list<T: std::str::FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Vec<T>> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Input(format!("config is missing key `{key}`")))?;
    raw.split(',')
        .map(|tok| {
            let tok = tok.trim();
            tok.parse()
                .map_err(|_| Error::Parse(format!("config key `{key}`: bad element `{tok}`")))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("config line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::Input(format!(
                    "config line {}: unknown key `{key}`",
                    lineno + 1
                )));
            }
            if map.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Input(format!(
                    "config line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }

        let cfg = RunConfig {
            layers: parse_scalar(&map, "layers")?,
            heads: parse_scalar(&map, "heads")?,
            d_model: parse_scalar(&map, "d_model")?,
            vocab: parse_scalar(&map, "vocab")?,
            seed: parse_scalar(&map, "seed")?,
            sparsity: parse_scalar(&map, "sparsity")?,
            sink_tokens: parse_scalar(&map, "sink_tokens")?,
            window_tokens: parse_scalar(&map, "window_tokens")?,
            lambda: parse_scalar(&map, "lambda")?,
            lr: parse_scalar(&map, "lr")?,
            steps: parse_scalar(&map, "steps")?,
            omega_grid: parse_list(&map, "omega_grid")?,
            data_samples: parse_scalar(&map, "data_samples")?,
            data_context_len: parse_scalar(&map, "data_context_len")?,
            data_passkey_len: parse_scalar(&map, "data_passkey_len")?,
            data_response_len: parse_scalar(&map, "data_response_len")?,
            data_depths: parse_list(&map, "data_depths")?,
            data_seed: parse_scalar(&map, "data_seed")?,
            eval_samples: parse_scalar(&map, "eval_samples")?,
            eval_seed: parse_scalar(&map, "eval_seed")?,
            bench_prefill_lens: parse_list(&map, "bench_prefill_lens")?,
            bench_decode_lens: parse_list(&map, "bench_decode_lens")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical serialization; `parse(to_text(cfg)) == cfg`.
    pub fn to_text(&self) -> String {
        fn list<T: std::fmt::Display>(values: &[T]) -> String {
            values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }
        let mut out = String::new();
        let _ = writeln!(out, "layers = {}", self.layers);
        let _ = writeln!(out, "heads = {}", self.heads);
        let _ = writeln!(out, "d_model = {}", self.d_model);
        let _ = writeln!(out, "vocab = {}", self.vocab);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "sparsity = {}", self.sparsity);
        let _ = writeln!(out, "sink_tokens = {}", self.sink_tokens);
        let _ = writeln!(out, "window_tokens = {}", self.window_tokens);
        let _ = writeln!(out, "lambda = {}", self.lambda);
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "steps = {}", self.steps);
        let _ = writeln!(out, "omega_grid = {}", list(&self.omega_grid));
        let _ = writeln!(out, "data_samples = {}", self.data_samples);
        let _ = writeln!(out, "data_context_len = {}", self.data_context_len);
        let _ = writeln!(out, "data_passkey_len = {}", self.data_passkey_len);
        let _ = writeln!(out, "data_response_len = {}", self.data_response_len);
        let _ = writeln!(out, "data_depths = {}", list(&self.data_depths));
        let _ = writeln!(out, "data_seed = {}", self.data_seed);
        let _ = writeln!(out, "eval_samples = {}", self.eval_samples);
        let _ = writeln!(out, "eval_seed = {}", self.eval_seed);
        let _ = writeln!(out, "bench_prefill_lens = {}", list(&self.bench_prefill_lens));
        let _ = writeln!(out, "bench_decode_lens = {}", list(&self.bench_decode_lens));
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        StreamingConfig::new(self.sink_tokens, self.window_tokens)?;
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(Error::Input(format!("sparsity {} outside [0, 1]", self.sparsity)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Input(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Input(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if self.omega_grid.is_empty()
            || self.omega_grid.iter().any(|w| !(0.0..=1.0).contains(w))
        {
            return Err(Error::Input("omega_grid must be non-empty values in [0, 1]".into()));
        }
        if self.data_depths.is_empty()
            || self.data_depths.iter().any(|d| !(0.0..=1.0).contains(d))
        {
            return Err(Error::Input("data_depths must be non-empty values in [0, 1]".into()));
        }
        if self.data_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Input("data_samples and eval_samples must be >= 1".into()));
        }
        if self.bench_prefill_lens.is_empty() || self.bench_decode_lens.is_empty() {
            return Err(Error::Input("benchmark grids must be non-empty".into()));
        }
        if self.bench_prefill_lens.iter().chain(&self.bench_decode_lens).any(|&n| n == 0) {
            return Err(Error::Input("benchmark lengths must be >= 1".into()));
        }
        if self.data_passkey_len + self.data_response_len > self.data_context_len {
            return Err(Error::Input(
                "data_context_len must cover passkey plus response".into(),
            ));
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            heads: self.heads,
            d_model: self.d_model,
            vocab: self.vocab,
            seed: self.seed,
        }
    }

    pub fn streaming_config(&self) -> StreamingConfig {
        StreamingConfig::new(self.sink_tokens, self.window_tokens)
            .expect("validated at construction")
    }
}
