//! Shared forward kernels used both by tape ops and by tape-free inference.

use super::tensor::Tensor;

/// Standard SELU constants.
pub const SELU_LAMBDA: f64 = 1.0507009873554805;
pub const SELU_ALPHA: f64 = 1.6732632423543772;

/// Probabilities are clamped into [P_CLAMP, 1 - P_CLAMP] before logarithms.
pub const P_CLAMP: f64 = 1e-7;

/// `y = x W^T + b` with `x: (B, in)`, `w: (out, in)`, `b: (out)`.
/// Dot product with four independent accumulators so the adds can overlap
/// instead of forming one serial dependency chain.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ai = a.chunks_exact(4);
    let mut bi = b.chunks_exact(4);
    for (ca, cb) in (&mut ai).zip(&mut bi) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut tail = 0.0;
    for (x, y) in ai.remainder().iter().zip(bi.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (batch, n_in) = (x.shape()[0], x.shape()[1]);
    let n_out = w.shape()[0];
    let mut out = vec![0.0; batch * n_out];
    let xv = x.values();
    let wv = w.values();
    let bv = b.values();
    for bi in 0..batch {
        let xrow = &xv[bi * n_in..(bi + 1) * n_in];
        let orow = &mut out[bi * n_out..(bi + 1) * n_out];
        for (o, orow_o) in orow.iter_mut().enumerate() {
            let wrow = &wv[o * n_in..(o + 1) * n_in];
            *orow_o = bv[o] + dot(xrow, wrow);
        }
    }
    Tensor::new(vec![batch, n_out], out).unwrap()
}

/// Dense with an elementwise 0/1 mask on the weights. The mask is folded into
/// the weights once, so the batch loop runs at plain dense speed.
pub fn masked_dense(x: &Tensor, w: &Tensor, b: &Tensor, mask: &Tensor) -> Tensor {
    let masked: Vec<f64> = w
        .values()
        .iter()
        .zip(mask.values())
        .map(|(wi, mi)| wi * mi)
        .collect();
    let wm = Tensor::new(w.shape().to_vec(), masked).unwrap();
    dense(x, &wm, b)
}

/// Circular 1-D convolution: `x: (B, C_in, N)`, `w: (C_out, C_in, K)` with K
/// odd and centered, `b: (C_out)`; output length equals input length.
pub fn conv1d_circular(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (batch, c_in, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, k) = (w.shape()[0], w.shape()[2]);
    let off = k / 2;
    let src = wrap_table(n, k);
    let mut out = vec![0.0; batch * c_out * n];
    let xv = x.values();
    let wv = w.values();
    let bv = b.values();
    for bi in 0..batch {
        for o in 0..c_out {
            let orow = &mut out[(bi * c_out + o) * n..(bi * c_out + o + 1) * n];
            orow.fill(bv[o]);
            for c in 0..c_in {
                let wrow = &wv[(o * c_in + c) * k..(o * c_in + c + 1) * k];
                let xrow = &xv[(bi * c_in + c) * n..(bi * c_in + c + 1) * n];
                if k == 3 && n >= 2 {
                    let (w0, w1, w2) = (wrow[0], wrow[1], wrow[2]);
                    orow[0] += w0 * xrow[n - 1] + w1 * xrow[0] + w2 * xrow[1];
                    for (acc, win) in orow[1..n - 1].iter_mut().zip(xrow.windows(3)) {
                        *acc += w0 * win[0] + w1 * win[1] + w2 * win[2];
                    }
                    orow[n - 1] += w0 * xrow[n - 2] + w1 * xrow[n - 1] + w2 * xrow[0];
                    continue;
                }
                for (pos, acc) in orow.iter_mut().enumerate() {
                    let mut s = 0.0;
                    if pos >= off && pos + off < n {
                        // Interior positions read a contiguous window.
                        for (wk, xk) in wrow.iter().zip(&xrow[pos - off..]) {
                            s += wk * xk;
                        }
                    } else {
                        for (wk, &si) in wrow.iter().zip(&src[pos * k..(pos + 1) * k]) {
                            s += wk * xrow[si];
                        }
                    }
                    *acc += s;
                }
            }
        }
    }
    Tensor::new(vec![batch, c_out, n], out).unwrap()
}

/// Precomputed circular source indices: entry `pos * k + kk` is the input
/// position feeding output `pos` through kernel tap `kk`.
pub fn wrap_table(n: usize, k: usize) -> Vec<usize> {
    let off = k / 2;
    let mut table = Vec::with_capacity(n * k);
    for pos in 0..n {
        for kk in 0..k {
            table.push((pos + n + kk - off) % n);
        }
    }
    table
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn selu(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v > 0.0 {
            SELU_LAMBDA * v
        } else {
            SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
        }
    })
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

pub fn tanh(x: &Tensor) -> Tensor {
    x.map(f64::tanh)
}

/// `(B, C, N) -> (B, C)` mean over the spatial axis.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (batch, c, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = vec![0.0; batch * c];
    for bi in 0..batch {
        for ci in 0..c {
            let mut acc = 0.0;
            for pos in 0..n {
                acc += x.at3(bi, ci, pos);
            }
            out[bi * c + ci] = acc / n as f64;
        }
    }
    Tensor::new(vec![batch, c], out).unwrap()
}

/// Column-wise concatenation of two (B, F) tensors.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (batch, fa, fb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; batch * (fa + fb)];
    for bi in 0..batch {
        out[bi * (fa + fb)..bi * (fa + fb) + fa]
            .copy_from_slice(&a.values()[bi * fa..(bi + 1) * fa]);
        out[bi * (fa + fb) + fa..(bi + 1) * (fa + fb)]
            .copy_from_slice(&b.values()[bi * fb..(bi + 1) * fb]);
    }
    Tensor::new(vec![batch, fa + fb], out).unwrap()
}

pub fn clamp_probability(p: f64) -> f64 {
    p.clamp(P_CLAMP, 1.0 - P_CLAMP)
}
