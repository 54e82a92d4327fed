//! Differentiable numeric primitives in their plain (non-recorded) form.
//!
//! The kernels here are the single source of truth for the forward math;
//! the autodiff tape in [`super::tape`] calls the same functions.

use crate::error::{Error, Result};

use super::array::{Array, Scalar};

/// Row-wise softmax with max subtraction for stability.
pub fn softmax_rows<T: Scalar>(x: &Array<T>) -> Array<T> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Array::zeros(vec![r, c]);
    for i in 0..r {
        let row = x.row(i);
        let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for j in 0..c {
            let e = (row[j] - m).exp();
            out.set2(i, j, e);
            denom = denom + e;
        }
        for j in 0..c {
            out.set2(i, j, out.at2(i, j) / denom);
        }
    }
    out
}

/// Scaled dot-product attention: `out[i] = Σ_j softmax_j(q[i]·k[j] / sqrt(d)) v[j]`.
pub fn attention<T: Scalar>(q: &Array<T>, k: &Array<T>, v: &Array<T>) -> Result<Array<T>> {
    let d = q.cols();
    if d == 0 || k.cols() != d || v.rows() != k.rows() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let scale = T::of_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul(&k.transpose()?)?.scale(scale);
    let weights = softmax_rows(&scores);
    weights.matmul(v)
}

/// Per-row standardization: zero mean, unit variance (with `eps`), no affine.
/// Returns `(normalized, inv_std per row)`.
pub fn normalize_rows<T: Scalar>(x: &Array<T>, eps: T) -> (Array<T>, Vec<T>) {
    let (r, c) = (x.rows(), x.cols());
    let n = T::of_f64(c as f64);
    let mut out = Array::zeros(vec![r, c]);
    let mut inv_stds = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().fold(T::zero(), |a, &b| a + b) / n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &b| a + (b - mean) * (b - mean))
            / n;
        let inv_std = T::one() / (var + eps).sqrt();
        inv_stds.push(inv_std);
        for j in 0..c {
            out.set2(i, j, (row[j] - mean) * inv_std);
        }
    }
    (out, inv_stds)
}

/// Layer normalization over the last dimension with affine gain/bias.
pub fn layer_norm<T: Scalar>(
    x: &Array<T>,
    gain: &Array<T>,
    bias: &Array<T>,
    eps: T,
) -> Result<Array<T>> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    let (normed, _) = normalize_rows(x, eps);
    let mut out = normed;
    let (r, c) = (out.rows(), out.cols());
    for i in 0..r {
        for j in 0..c {
            out.set2(i, j, out.at2(i, j) * gain.data()[j] + bias.data()[j]);
        }
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximation GELU, the activation used project-wide.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(GELU_A);
    let half = T::of_f64(0.5);
    let inner = c * (x + a * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::of_f64(GELU_C);
    let a = T::of_f64(GELU_A);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

pub fn gelu<T: Scalar>(x: &Array<T>) -> Array<T> {
    x.map(gelu_scalar)
}

/// Cosine similarity between two equal-length vectors.
pub fn cosine<T: Scalar>(a: &Array<T>, b: &Array<T>) -> Result<T> {
    let dot = a.dot(b)?;
    let na = a.norm();
    let nb = b.norm();
    let denom = na * nb;
    if denom == T::zero() {
        return Ok(T::zero());
    }
    Ok(dot / denom)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attention_reference<T: Scalar>(q: &Array<T>, k: &Array<T>, v: &Array<T>) -> Array<T> {
        // Scalar-loop oracle, kept deliberately naive.
        let (n, d) = (q.rows(), q.cols());
        let m = k.rows();
        let mut out = Array::zeros(vec![n, v.cols()]);
        for i in 0..n {
            let mut logits = vec![T::zero(); m];
            for j in 0..m {
                let mut dot = T::zero();
                for t in 0..d {
                    dot = dot + q.at2(i, t) * k.at2(j, t);
                }
                logits[j] = dot / T::of_f64((d as f64).sqrt());
            }
            let max = logits.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut weights: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
            let z = weights.iter().fold(T::zero(), |a, &b| a + b);
            for w in &mut weights {
                *w = *w / z;
            }
            for c in 0..v.cols() {
                let mut acc = T::zero();
                for j in 0..m {
                    acc = acc + weights[j] * v.at2(j, c);
                }
                out.set2(i, c, acc);
            }
        }
        out
    }

    #[test]
    fn attention_uniform_scores_average_values() {
        // q·k identical across keys -> each output row is the mean of v's rows.
        let q = Array::<f64>::zeros(vec![2, 3]);
        let k = Array::from_fn(4, 3, |i, j| ((i + j) % 3) as f64);
        let v = Array::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let mean = (0..4).map(|r| v.at2(r, j)).sum::<f64>() / 4.0;
                assert!((out.at2(i, j) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_key_returns_value() {
        let q = Array::from_fn(3, 2, |i, j| (i + j) as f32);
        let k = Array::from_fn(1, 2, |_, j| j as f32 + 0.5);
        let v = Array::from_vec(vec![1, 2], vec![3.0_f32, -1.0]).unwrap();
        let out = attention(&q, &k, &v).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v.row(0));
        }
    }

    #[test]
    fn attention_matches_scalar_loop_oracle() {
        let mut rng = crate::numerics::RngStream::named(11, "attn-test");
        let q: Array<f64> = rng.normal_array(vec![2, 4], 1.0);
        let k: Array<f64> = rng.normal_array(vec![3, 4], 1.0);
        let v: Array<f64> = rng.normal_array(vec![3, 4], 1.0);
        let got = attention(&q, &k, &v).unwrap();
        let want = attention_reference(&q, &k, &v);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_mismatch() {
        let q = Array::<f32>::zeros(vec![2, 3]);
        let k = Array::<f32>::zeros(vec![2, 4]);
        let v = Array::<f32>::zeros(vec![2, 4]);
        assert!(attention(&q, &k, &v).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = crate::numerics::RngStream::named(5, "softmax-test");
        let x: Array<f64> = rng.normal_array(vec![4, 6], 3.0);
        let s = softmax_rows(&x);
        for i in 0..4 {
            let total: f64 = s.row(i).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = Array::filled(vec![1, 3], 1.0_f64);
        let g = Array::filled(vec![3], 1.0);
        let b = Array::zeros(vec![3]);
        let out = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in out.data() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_already_normalized_row() {
        let x = Array::from_vec(vec![1, 2], vec![-1.0_f64, 1.0]).unwrap();
        let g = Array::filled(vec![2], 1.0);
        let b = Array::zeros(vec![2]);
        let out = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-5);
        assert!((out.data()[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_affine_hand_case() {
        // row [0, 2], gain 2, bias 1: normalized is [-1, 1], affine gives [-1, 3].
        let x = Array::from_vec(vec![1, 2], vec![0.0_f64, 2.0]).unwrap();
        let g = Array::filled(vec![2], 2.0);
        let b = Array::filled(vec![2], 1.0);
        let out = layer_norm(&x, &g, &b, 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-5);
        assert!((out.data()[1] - 3.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.5_f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let num = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((gelu_grad_scalar(x) - num).abs() < 1e-8, "x = {x}");
        }
    }
}
