//! Slice-level compute kernels shared by the eager [`Tensor`](super::Tensor)
//! methods and the recorded graph ops, so both paths produce identical bits.

/// `c = op(a) x op(b)` (or `c += ...` when `accumulate`), with logical shapes
/// `[m, k] x [k, n]`. A transposed operand is stored in the opposite layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every access the strides describe.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Branch-free; saturates cleanly since `1 / (1 + inf) == 0`.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Normalizes each length-`c` row of `x` into `out`; stores `1/std` per row.
pub fn layer_norm(x: &[f64], c: usize, eps: f64, out: &mut [f64], inv_std: &mut [f64]) {
    for (r, (row, dst)) in x.chunks_exact(c).zip(out.chunks_exact_mut(c)).enumerate() {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let denom = var + eps;
        // A constant row with eps = 0 normalizes to zero rather than 0/0.
        let is = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std[r] = is;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - mean) * is;
        }
    }
}

/// `dx = inv_std * (dy - mean(dy) - y * mean(dy * y))` per row.
pub fn layer_norm_backward(y: &[f64], dy: &[f64], inv_std: &[f64], c: usize, dx: &mut [f64]) {
    for (r, ((yr, dyr), dxr)) in y
        .chunks_exact(c)
        .zip(dy.chunks_exact(c))
        .zip(dx.chunks_exact_mut(c))
        .enumerate()
    {
        let mean_dy = dyr.iter().sum::<f64>() / c as f64;
        let mean_dyy = dyr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
        for ((d, &g), &yv) in dxr.iter_mut().zip(dyr).zip(yr) {
            *d += inv_std[r] * (g - mean_dy - yv * mean_dyy);
        }
    }
}

/// In-place row softmax with max subtraction.
pub fn softmax_rows(x: &mut [f64], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `dx = y * (dy - sum(dy * y))` per row, accumulated into `dx`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], n: usize, dx: &mut [f64]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(n)
        .zip(dy.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d += yv * (g - dot);
        }
    }
}

/// Dot product with four independent partial sums, combined in a fixed order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Geometry of a batched multi-head attention call over `[batch, tokens, width]`.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Scaled dot-product attention. Writes `out` and the softmax weights
/// `probs` laid out `[batch, heads, tokens, tokens]`.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], d: AttnDims, out: &mut [f64], probs: &mut [f64]) {
    let (t, c, dh) = (d.tokens, d.width, d.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    for b in 0..d.batch {
        for h in 0..d.heads {
            let p = &mut probs[(b * d.heads + h) * t * t..][..t * t];
            for i in 0..t {
                let qi = &q[(b * t + i) * c + h * dh..][..dh];
                for j in 0..t {
                    let kj = &k[(b * t + j) * c + h * dh..][..dh];
                    p[i * t + j] = dot(qi, kj) * scale;
                }
            }
            softmax_rows(p, t);
            for i in 0..t {
                let oi = &mut out[(b * t + i) * c + h * dh..][..dh];
                oi.fill(0.0);
                for j in 0..t {
                    let w = p[i * t + j];
                    let vj = &v[(b * t + j) * c + h * dh..][..dh];
                    for (o, x) in oi.iter_mut().zip(vj) {
                        *o += w * x;
                    }
                }
            }
        }
    }
}

/// Backward of [`attention`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    d: AttnDims,
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let (t, c, dh) = (d.tokens, d.width, d.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0; t * t];
    let mut ds = vec![0.0; t * t];
    for b in 0..d.batch {
        for h in 0..d.heads {
            let p = &probs[(b * d.heads + h) * t * t..][..t * t];
            let at = |i: usize| (b * t + i) * c + h * dh;
            for i in 0..t {
                let doi = &dout[at(i)..][..dh];
                for j in 0..t {
                    let vj = &v[at(j)..][..dh];
                    dp[i * t + j] = dot(doi, vj);
                    let w = p[i * t + j];
                    let dvj = &mut dv[at(j)..][..dh];
                    for (g, x) in dvj.iter_mut().zip(doi) {
                        *g += w * x;
                    }
                }
            }
            ds.fill(0.0);
            softmax_rows_backward(p, &dp, t, &mut ds);
            for i in 0..t {
                let qi = &q[at(i)..][..dh];
                for j in 0..t {
                    let g = ds[i * t + j] * scale;
                    let kj = &k[at(j)..][..dh];
                    for (d, x) in dq[at(i)..][..dh].iter_mut().zip(kj) {
                        *d += g * x;
                    }
                    for (d, x) in dk[at(j)..][..dh].iter_mut().zip(qi) {
                        *d += g * x;
                    }
                }
            }
        }
    }
}
