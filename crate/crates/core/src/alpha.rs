//! Trained gate values and their quantile-based classification into
//! retrieval and streaming heads.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Whether gates are independent per head or shared per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Head,
    Layer,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Head => "head",
            Granularity::Layer => "layer",
        }
    }
}

/// `L x H` gate values in [0, 1].
///
/// Layer-granularity matrices store one value per layer broadcast across
/// the row; the constant-row invariant is enforced on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaMatrix {
    values: Array2<f64>,
    granularity: Granularity,
}

impl AlphaMatrix {
    /// All gates at their initialization value 1.
    pub fn ones(layers: usize, heads: usize) -> Self {
        Self { values: Array2::from_elem((layers, heads), 1.0), granularity: Granularity::Head }
    }

    pub fn from_values(values: Array2<f64>, granularity: Granularity) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::Input("alpha matrix must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("alpha values must lie in [0, 1]".into()));
        }
        if granularity == Granularity::Layer {
            for row in values.rows() {
                let first = row[0];
                if row.iter().any(|&v| v != first) {
                    return Err(Error::Input(
                        "layer-granularity alpha rows must be constant".into(),
                    ));
                }
            }
        }
        Ok(Self { values, granularity })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn layers(&self) -> usize {
        self.values.nrows()
    }

    pub fn heads(&self) -> usize {
        self.values.ncols()
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.values[(layer, head)]
    }

    /// Mean gate value, used to observe the effect of regularization.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / (self.layers() * self.heads()) as f64
    }
}

/// Head classification produced from converged gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Retrieval,
    Streaming,
}

/// Label the `floor(s * L * H)` heads with the smallest gates as streaming,
/// the rest as retrieval. Ties break by (layer, head) ascending.
pub fn classify_heads(alpha: &AlphaMatrix, sparsity: f64) -> Result<Array2<HeadKind>> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::Domain(format!("sparsity must be in [0, 1], got {sparsity}")));
    }
    let (l, h) = (alpha.layers(), alpha.heads());
    let total = l * h;
    let n_streaming = ((sparsity * total as f64).floor() as usize).min(total);

    let mut order: Vec<(usize, usize)> = (0..l).flat_map(|i| (0..h).map(move |j| (i, j))).collect();
    order.sort_by(|a, b| {
        alpha
            .get(a.0, a.1)
            .total_cmp(&alpha.get(b.0, b.1))
            .then(a.0.cmp(&b.0))
            .then(a.1.cmp(&b.1))
    });

    let mut labels = Array2::from_elem((l, h), HeadKind::Retrieval);
    for &(i, j) in order.iter().take(n_streaming) {
        labels[(i, j)] = HeadKind::Streaming;
    }
    Ok(labels)
}

/// Render the alpha file format: header `L H granularity`, then L rows of
/// H decimal values at full round-trip precision.
pub fn format_alpha(alpha: &AlphaMatrix) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} {} {}",
        alpha.layers(),
        alpha.heads(),
        alpha.granularity().as_str()
    );
    for row in alpha.values().rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn write_alpha_file(path: &Path, alpha: &AlphaMatrix) -> Result<()> {
    std::fs::write(path, format_alpha(alpha))?;
    Ok(())
}

pub fn parse_alpha(text: &str) -> Result<AlphaMatrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("alpha file is empty".into()))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse(format!(
            "alpha header must be `L H granularity`, got `{header}`"
        )));
    }
    let layers: usize = parts[0]
        .parse()
        .map_err(|_| Error::Parse(format!("bad layer count `{}`", parts[0])))?;
    let heads: usize = parts[1]
        .parse()
        .map_err(|_| Error::Parse(format!("bad head count `{}`", parts[1])))?;
    let granularity = match parts[2] {
        "head" => Granularity::Head,
        "layer" => Granularity::Layer,
        other => return Err(Error::Parse(format!("unknown granularity `{other}`"))),
    };

    let mut values = Array2::zeros((layers, heads));
    for i in 0..layers {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("alpha file ends before row {i}")))?;
        let row: Vec<&str> = line.split_whitespace().collect();
        if row.len() != heads {
            return Err(Error::Parse(format!(
                "alpha row {i} has {} values, expected {heads}",
                row.len()
            )));
        }
        for (j, tok) in row.iter().enumerate() {
            values[(i, j)] = tok
                .parse()
                .map_err(|_| Error::Parse(format!("bad alpha value `{tok}` at ({i},{j})")))?;
        }
    }
    AlphaMatrix::from_values(values, granularity)
}

pub fn read_alpha_file(path: &Path) -> Result<AlphaMatrix> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("cannot read {}: {e}", path.display())))?;
    parse_alpha(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn classify_extremes() {
        let alpha = AlphaMatrix::from_values(array![[0.9, 0.1], [0.8, 0.2]], Granularity::Head)
            .unwrap();
        let all_retrieval = classify_heads(&alpha, 0.0).unwrap();
        assert!(all_retrieval.iter().all(|&k| k == HeadKind::Retrieval));
        let all_streaming = classify_heads(&alpha, 1.0).unwrap();
        assert!(all_streaming.iter().all(|&k| k == HeadKind::Streaming));
    }

    #[test]
    fn classify_half_picks_smallest_gates() {
        let alpha = AlphaMatrix::from_values(array![[0.9, 0.1], [0.8, 0.2]], Granularity::Head)
            .unwrap();
        let labels = classify_heads(&alpha, 0.5).unwrap();
        assert_eq!(labels[(0, 0)], HeadKind::Retrieval);
        assert_eq!(labels[(0, 1)], HeadKind::Streaming);
        assert_eq!(labels[(1, 0)], HeadKind::Retrieval);
        assert_eq!(labels[(1, 1)], HeadKind::Streaming);
    }

    #[test]
    fn classify_count_is_floor_of_quantile() {
        let alpha = AlphaMatrix::ones(3, 3);
        for s in [0.0, 0.1, 0.33, 0.5, 0.77, 1.0] {
            let labels = classify_heads(&alpha, s).unwrap();
            let streaming = labels.iter().filter(|&&k| k == HeadKind::Streaming).count();
            assert_eq!(streaming, (s * 9.0).floor() as usize, "s = {s}");
        }
    }

    #[test]
    fn ties_prefer_low_layer_then_head() {
        let alpha = AlphaMatrix::from_values(array![[0.5, 0.5], [0.5, 0.5]], Granularity::Head)
            .unwrap();
        let labels = classify_heads(&alpha, 0.5).unwrap();
        assert_eq!(labels[(0, 0)], HeadKind::Streaming);
        assert_eq!(labels[(0, 1)], HeadKind::Streaming);
        assert_eq!(labels[(1, 0)], HeadKind::Retrieval);
        assert_eq!(labels[(1, 1)], HeadKind::Retrieval);
    }

    #[test]
    fn alpha_file_round_trips_exactly() {
        let alpha = AlphaMatrix::from_values(
            array![[0.123_456_789_012_345_68, 1.0], [0.0, 1.0 / 3.0]],
            Granularity::Head,
        )
        .unwrap();
        let parsed = parse_alpha(&format_alpha(&alpha)).unwrap();
        assert_eq!(parsed, alpha);
    }

    #[test]
    fn layer_granularity_requires_constant_rows() {
        assert!(AlphaMatrix::from_values(array![[0.1, 0.2]], Granularity::Layer).is_err());
        assert!(AlphaMatrix::from_values(array![[0.3, 0.3]], Granularity::Layer).is_ok());
    }

    #[test]
    fn out_of_range_values_are_rejected() {
        assert!(AlphaMatrix::from_values(array![[1.2]], Granularity::Head).is_err());
        assert!(AlphaMatrix::from_values(array![[-0.1]], Granularity::Head).is_err());
        assert!(AlphaMatrix::from_values(array![[f64::NAN]], Granularity::Head).is_err());
    }

    #[test]
    fn malformed_files_fail_to_parse() {
        assert!(parse_alpha("").is_err());
        assert!(parse_alpha("2 2 head\n0.5 0.5\n").is_err());
        assert!(parse_alpha("1 2 diagonal\n0.5 0.5\n").is_err());
        assert!(parse_alpha("1 2 head\n0.5 oops\n").is_err());
    }
}
