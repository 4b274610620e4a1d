//! Linear maps, RMSNorm, activations and the SwiGLU feed-forward unit.

use super::config::NORM_EPS;
use super::tensor::{matmul_nn, matmul_nt, matmul_tn, Mat, Tensor};

/// `y = x · Wᵀ (+ b)`, `W` is `[out, in]`.
pub fn linear_forward(x: &Mat, w: &Tensor, b: Option<&Tensor>) -> Mat {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    debug_assert_eq!(x.cols, in_dim);
    let mut y = Mat::zeros(x.rows, out_dim);
    matmul_nt(&x.data, &w.data, x.rows, in_dim, out_dim, &mut y.data, false);
    if let Some(b) = b {
        for r in 0..x.rows {
            for (v, bb) in y.row_mut(r).iter_mut().zip(&b.data) {
                *v += bb;
            }
        }
    }
    y
}

/// Accumulates `dW`, `db` and returns `dx` when asked.
pub fn linear_backward(
    dy: &Mat,
    x: &Mat,
    w: &Tensor,
    dw: &mut Tensor,
    db: Option<&mut Tensor>,
    need_dx: bool,
) -> Option<Mat> {
    let (out_dim, in_dim) = (w.shape[0], w.shape[1]);
    matmul_tn(&dy.data, &x.data, out_dim, x.rows, in_dim, &mut dw.data, true);
    if let Some(db) = db {
        for r in 0..dy.rows {
            for (g, d) in db.data.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
    }
    need_dx.then(|| {
        let mut dx = Mat::zeros(x.rows, in_dim);
        matmul_nn(&dy.data, &w.data, x.rows, out_dim, in_dim, &mut dx.data, false);
        dx
    })
}

/// `x_i · g_i / sqrt(mean(x²) + ε)` for one vector.
pub fn rmsnorm(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let inv = inv_rms(x);
    x.iter().zip(gain).map(|(v, g)| v * g * inv).collect()
}

fn inv_rms(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + NORM_EPS).sqrt()
}

/// Row-wise RMSNorm; returns the output and each row's `1/rms`.
pub fn rmsnorm_forward(x: &Mat, gain: &Tensor) -> (Mat, Vec<f64>) {
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut invs = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let inv = inv_rms(xr);
        invs.push(inv);
        for ((o, v), g) in y.row_mut(r).iter_mut().zip(xr).zip(&gain.data) {
            *o = v * g * inv;
        }
    }
    (y, invs)
}

pub fn rmsnorm_backward(dy: &Mat, x: &Mat, gain: &Tensor, invs: &[f64], dgain: &mut Tensor) -> Mat {
    let d = x.cols as f64;
    let mut dx = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let (xr, dyr, inv) = (x.row(r), dy.row(r), invs[r]);
        let mut dot = 0.0;
        for i in 0..x.cols {
            dgain.data[i] += dyr[i] * xr[i] * inv;
            dot += gain.data[i] * dyr[i] * xr[i];
        }
        let k = inv * inv * inv * dot / d;
        for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * gain.data[i] * dyr[i] - k * xr[i];
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub struct SwiGluCache {
    a: Mat,
    b: Mat,
    m: Mat,
}

/// `W2 · (silu(W1 x) ⊙ W3 x)`, no biases.
pub fn swiglu_forward(x: &Mat, w1: &Tensor, w2: &Tensor, w3: &Tensor) -> (Mat, SwiGluCache) {
    let a = linear_forward(x, w1, None);
    let b = linear_forward(x, w3, None);
    let mut m = Mat::zeros(a.rows, a.cols);
    for ((o, &av), &bv) in m.data.iter_mut().zip(&a.data).zip(&b.data) {
        *o = silu(av) * bv;
    }
    let y = linear_forward(&m, w2, None);
    (y, SwiGluCache { a, b, m })
}

#[allow(clippy::too_many_arguments)]
pub fn swiglu_backward(
    dy: &Mat,
    x: &Mat,
    cache: &SwiGluCache,
    w1: &Tensor,
    w2: &Tensor,
    w3: &Tensor,
    dw1: &mut Tensor,
    dw2: &mut Tensor,
    dw3: &mut Tensor,
) -> Mat {
    let dm = linear_backward(dy, &cache.m, w2, dw2, None, true).unwrap();
    let mut da = Mat::zeros(dm.rows, dm.cols);
    let mut db = Mat::zeros(dm.rows, dm.cols);
    for i in 0..dm.data.len() {
        let (a, b, g) = (cache.a.data[i], cache.b.data[i], dm.data[i]);
        da.data[i] = g * b * silu_grad(a);
        db.data[i] = g * silu(a);
    }
    let mut dx = linear_backward(&da, x, w1, dw1, None, true).unwrap();
    dx.add_assign(&linear_backward(&db, x, w3, dw3, None, true).unwrap());
    dx
}
