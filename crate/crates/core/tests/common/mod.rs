//! Independent reference implementations used by the integration and
//! acceptance suites. Everything here is straight-line loop code over the
//! crate's public read accessors; none of it shares kernels, masking, or
//! matrix helpers with the library.

#![allow(dead_code)]

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use zigzag_core::{AlphaMatrix, Model, StreamingConfig};

pub fn seeded_matrix(seed: u64, rows: usize, cols: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
}

pub fn seeded_tokens(seed: u64, len: usize, vocab: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

/// Dense softmax attention, one row at a time, visibility as a closure.
pub fn oracle_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    visible: impl Fn(usize, usize) -> bool,
) -> Vec<Vec<f64>> {
    let t = q.nrows();
    let d = q.ncols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; d]; t];
    for row in 0..t {
        let mut entries: Vec<(usize, f64)> = Vec::new();
        for col in 0..t {
            if visible(row, col) {
                let mut s = 0.0;
                for i in 0..d {
                    s += q[(row, i)] * k[(col, i)];
                }
                entries.push((col, s * scale));
            }
        }
        let m = entries.iter().map(|e| e.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = entries.iter().map(|e| (e.1 - m).exp()).sum();
        for (col, s) in entries {
            let p = (s - m).exp() / z;
            for i in 0..d {
                out[row][i] += p * v[(col, i)];
            }
        }
    }
    out
}

pub fn streaming_visible(sink: usize, window: usize) -> impl Fn(usize, usize) -> bool {
    move |row, col| col <= row && (col < sink || col + window > row)
}

fn rms_rows(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
            let r = (ms + 1e-6).sqrt();
            row.iter().map(|v| v / r).collect()
        })
        .collect()
}

fn matmul_loops(x: &[Vec<f64>], w: &Array2<f64>) -> Vec<Vec<f64>> {
    let (rows, inner, cols) = (x.len(), w.nrows(), w.ncols());
    let mut out = vec![vec![0.0; cols]; rows];
    for r in 0..rows {
        assert_eq!(x[r].len(), inner);
        for c in 0..cols {
            let mut s = 0.0;
            for i in 0..inner {
                s += x[r][i] * w[(i, c)];
            }
            out[r][c] = s;
        }
    }
    out
}

fn rope_rows(m: &mut [Vec<f64>]) {
    for (pos, row) in m.iter_mut().enumerate() {
        let d = row.len();
        for pair in 0..d / 2 {
            let theta = 10_000.0_f64.powf(-2.0 * pair as f64 / d as f64);
            let angle = pos as f64 * theta;
            let (sin, cos) = angle.sin_cos();
            let a = row[2 * pair];
            let b = row[2 * pair + 1];
            row[2 * pair] = a * cos - b * sin;
            row[2 * pair + 1] = a * sin + b * cos;
        }
    }
}

/// Straight-line forward pass over the model's weights. With `gates` set,
/// each head mixes full and streaming attention by its gate; otherwise
/// every head runs full attention.
pub fn oracle_forward(
    model: &Model,
    tokens: &[usize],
    gates: Option<(&AlphaMatrix, &StreamingConfig)>,
) -> Vec<Vec<f64>> {
    let cfg = *model.config();
    let dh = cfg.d_head();
    let t = tokens.len();

    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&tok| (0..cfg.d_model).map(|d| model.embedding()[(tok, d)]).collect())
        .collect();

    for l in 0..cfg.layers {
        let w = model.layer_weights(l);
        let xn = rms_rows(&x);
        let mut concat = vec![vec![0.0; cfg.d_model]; t];
        for j in 0..cfg.heads {
            let mut q = matmul_loops(&xn, &w.wq[j]);
            let mut k = matmul_loops(&xn, &w.wk[j]);
            let v = matmul_loops(&xn, &w.wv[j]);
            rope_rows(&mut q);
            rope_rows(&mut k);

            let q_arr = Array2::from_shape_fn((t, dh), |(r, c)| q[r][c]);
            let k_arr = Array2::from_shape_fn((t, dh), |(r, c)| k[r][c]);
            let v_arr = Array2::from_shape_fn((t, dh), |(r, c)| v[r][c]);
            let full = oracle_attention(&q_arr, &k_arr, &v_arr, |row, col| col <= row);
            let head: Vec<Vec<f64>> = match gates {
                None => full,
                Some((alpha, scfg)) => {
                    let stream = oracle_attention(
                        &q_arr,
                        &k_arr,
                        &v_arr,
                        streaming_visible(scfg.sink, scfg.window),
                    );
                    let a = alpha.get(l, j);
                    full.iter()
                        .zip(stream.iter())
                        .map(|(f, s)| {
                            f.iter().zip(s.iter()).map(|(x, y)| a * x + (1.0 - a) * y).collect()
                        })
                        .collect()
                }
            };
            for row in 0..t {
                for c in 0..dh {
                    concat[row][j * dh + c] = head[row][c];
                }
            }
        }
        let att = matmul_loops(&concat, &w.wo);
        for row in 0..t {
            for c in 0..cfg.d_model {
                x[row][c] += att[row][c];
            }
        }

        let yn = rms_rows(&x);
        let mut u = matmul_loops(&yn, &w.w1);
        for row in u.iter_mut() {
            for v in row.iter_mut() {
                *v = *v / (1.0 + (-*v).exp());
            }
        }
        let mlp = matmul_loops(&u, &w.w2);
        for row in 0..t {
            for c in 0..cfg.d_model {
                x[row][c] += mlp[row][c];
            }
        }
    }
    x
}

pub fn max_abs_diff(a: &Array2<f64>, b: &[Vec<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for (r, row) in b.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            worst = worst.max((a[(r, c)] - v).abs());
        }
    }
    worst
}
