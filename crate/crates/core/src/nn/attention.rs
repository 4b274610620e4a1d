//! Multi-head self-attention with rotary positions on queries and keys.

use super::tensor::{gemm, Mat, Tensor, View};
use super::layers::linear_backward;
use crate::cyrope::CyRopeTable;

/// Grid position of a token as `(time patch, channel)`; `None` for tokens that
/// carry no physical position and skip rotation.
pub type Pos = Option<(i64, i64)>;

pub struct AttnCache {
    /// Projected `[n × 3d]` rows with rotation already applied to q and k.
    qkv: Vec<f64>,
    /// Softmax probabilities, `heads × n × n`.
    pub probs: Vec<f64>,
    /// Concatenated head outputs before the output projection.
    o: Mat,
}

fn rotate_qk(qkv: &mut [f64], n: usize, d: usize, heads: usize, pos: &[Pos], rope: &CyRopeTable, inverse: bool) {
    let dh = d / heads;
    for i in 0..n {
        let Some((t, c)) = pos[i] else { continue };
        for part in 0..2 {
            for h in 0..heads {
                let start = i * 3 * d + part * d + h * dh;
                let v = &mut qkv[start..start + dh];
                if inverse {
                    rope.apply_inverse_in_place(v, t, c);
                } else {
                    rope.apply_in_place(v, t, c);
                }
            }
        }
    }
}

/// Attention over the rows of `x` (already normalised). `rope = None` leaves
/// queries and keys unrotated.
pub fn mha_forward(
    x: &Mat,
    qkv_w: &Tensor,
    out_w: &Tensor,
    heads: usize,
    pos: &[Pos],
    rope: Option<&CyRopeTable>,
) -> (Mat, AttnCache) {
    let (n, d) = (x.rows, x.cols);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut qkv = vec![0.0; n * 3 * d];
    super::tensor::matmul_nt(&x.data, &qkv_w.data, n, d, 3 * d, &mut qkv, false);
    if let Some(rope) = rope {
        rotate_qk(&mut qkv, n, d, heads, pos, rope, false);
    }
    let mut probs = vec![0.0; heads * n * n];
    let mut o = Mat::zeros(n, d);
    for h in 0..heads {
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        let q = View { data: &qkv, offset: h * dh, rs: 3 * d, cs: 1 };
        let kt = View { data: &qkv, offset: d + h * dh, rs: 1, cs: 3 * d };
        gemm(n, dh, n, scale, q, kt, 0.0, p, 0, n, 1);
        for row in p.chunks_exact_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let v = View { data: &qkv, offset: 2 * d + h * dh, rs: 3 * d, cs: 1 };
        gemm(n, n, dh, 1.0, View::rm(p, n), v, 0.0, &mut o.data, h * dh, d, 1);
    }
    let mut y = Mat::zeros(n, d);
    super::tensor::matmul_nt(&o.data, &out_w.data, n, d, d, &mut y.data, false);
    (y, AttnCache { qkv, probs, o })
}

#[allow(clippy::too_many_arguments)]
pub fn mha_backward(
    dy: &Mat,
    x: &Mat,
    cache: &AttnCache,
    qkv_w: &Tensor,
    out_w: &Tensor,
    heads: usize,
    pos: &[Pos],
    rope: Option<&CyRopeTable>,
    dqkv_w: &mut Tensor,
    dout_w: &mut Tensor,
) -> Mat {
    let (n, d) = (x.rows, x.cols);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let d_o = linear_backward(dy, &cache.o, out_w, dout_w, None, true).unwrap();
    let qkv = &cache.qkv;
    let mut dqkv = vec![0.0; n * 3 * d];
    let mut dp = vec![0.0; n * n];
    for h in 0..heads {
        let p = &cache.probs[h * n * n..(h + 1) * n * n];
        let d_oh = View { data: &d_o.data, offset: h * dh, rs: d, cs: 1 };
        // dP = dO_h · v_hᵀ
        let vt = View { data: qkv, offset: 2 * d + h * dh, rs: 1, cs: 3 * d };
        gemm(n, dh, n, 1.0, d_oh, vt, 0.0, &mut dp, 0, n, 1);
        // dv_h = Pᵀ · dO_h
        gemm(n, n, dh, 1.0, View::tr(p, n), d_oh, 0.0, &mut dqkv, 2 * d + h * dh, 3 * d, 1);
        // softmax backward, folded with the score scale
        for i in 0..n {
            let pr = &p[i * n..(i + 1) * n];
            let dr = &mut dp[i * n..(i + 1) * n];
            let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
            for (g, &pv) in dr.iter_mut().zip(pr) {
                *g = pv * (*g - dot) * scale;
            }
        }
        // dq_h = dS · k_h ; dk_h = dSᵀ · q_h
        let k = View { data: qkv, offset: d + h * dh, rs: 3 * d, cs: 1 };
        gemm(n, n, dh, 1.0, View::rm(&dp, n), k, 0.0, &mut dqkv, h * dh, 3 * d, 1);
        let q = View { data: qkv, offset: h * dh, rs: 3 * d, cs: 1 };
        gemm(n, n, dh, 1.0, View::tr(&dp, n), q, 0.0, &mut dqkv, d + h * dh, 3 * d, 1);
    }
    if let Some(rope) = rope {
        rotate_qk(&mut dqkv, n, d, heads, pos, rope, true);
    }
    let dqkv = Mat::from_vec(n, 3 * d, dqkv);
    linear_backward(&dqkv, x, qkv_w, dqkv_w, None, true).unwrap()
}
