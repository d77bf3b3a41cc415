//! Numeric kernels shared by the forward and backward passes.

use crate::gemm::{gemm, View};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)` with `Φ` the standard normal CDF.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for l in 0..len {
                max = max.max(x[base + l * inner]);
            }
            let mut total = 0.0;
            for l in 0..len {
                let e = (x[base + l * inner] - max).exp();
                out[base + l * inner] = e;
                total += e;
            }
            for l in 0..len {
                out[base + l * inner] /= total;
            }
        }
    }
    out
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` along `axis`.
pub(crate) fn softmax_backward(
    y: &[f64],
    dy: &[f64],
    shape: &[usize],
    axis: usize,
    dx: &mut [f64],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = 0.0;
            for l in 0..len {
                dot += dy[base + l * inner] * y[base + l * inner];
            }
            for l in 0..len {
                let idx = base + l * inner;
                dx[idx] += y[idx] * (dy[idx] - dot);
            }
        }
    }
}

/// Row-wise softmax of a dense `[rows × cols]` block, in place.
fn softmax_rows_inplace(x: &mut [f64], cols: usize) {
    for row in x.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

pub(crate) struct LayerNormOut {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each length-`n` row with population variance, then applies the affine map.
pub(crate) fn layer_norm_forward(
    x: &[f64],
    n: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> LayerNormOut {
    let rows = x.len() / n;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for j in 0..n {
            let h = (row[j] - mean) * s;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormOut { y, xhat, rstd }
}

pub(crate) struct AttentionDims {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    pub width: usize,
}

impl AttentionDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }

    /// View of head `h` of sample `b` inside a `[batch·seq × width]` buffer.
    fn head_view(&self, b: usize, h: usize) -> View {
        View::dense(self.width).at(b * self.seq * self.width + h * self.head_dim())
    }

    fn head_view_t(&self, b: usize, h: usize) -> View {
        View {
            offset: b * self.seq * self.width + h * self.head_dim(),
            row_stride: 1,
            col_stride: self.width,
        }
    }

    fn probs_offset(&self, b: usize, h: usize) -> usize {
        (b * self.heads + h) * self.seq * self.seq
    }
}

/// Scaled dot-product attention for every (sample, head) pair.
/// Returns the output `[batch·seq × width]` and the probabilities
/// `[batch × heads × seq × seq]`.
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &AttentionDims,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionDims {
        batch,
        heads,
        seq,
        width,
    } = *dims;
    let d = dims.head_dim();
    let mut out = vec![0.0; batch * seq * width];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    let pv = View::dense(seq);
    for b in 0..batch {
        for h in 0..heads {
            let off = dims.probs_offset(b, h);
            let p = &mut probs[off..off + seq * seq];
            gemm(
                seq,
                d,
                seq,
                q,
                dims.head_view(b, h),
                k,
                dims.head_view_t(b, h),
                0.0,
                p,
                pv,
            );
            let scale = dims.scale();
            p.iter_mut().for_each(|s| *s *= scale);
            softmax_rows_inplace(p, seq);
            gemm(
                seq,
                seq,
                d,
                p,
                pv,
                v,
                dims.head_view(b, h),
                0.0,
                &mut out,
                dims.head_view(b, h),
            );
        }
    }
    (out, probs)
}

pub(crate) struct AttentionGrads<'g> {
    pub dq: Option<&'g mut [f64]>,
    pub dk: Option<&'g mut [f64]>,
    pub dv: Option<&'g mut [f64]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    dout: &[f64],
    dims: &AttentionDims,
    grads: AttentionGrads<'_>,
) {
    let AttentionDims {
        batch, heads, seq, ..
    } = *dims;
    let d = dims.head_dim();
    let scale = dims.scale();
    let pv = View::dense(seq);
    let pvt = View::dense_t(seq);
    let AttentionGrads {
        mut dq,
        mut dk,
        mut dv,
    } = grads;
    let mut dp = vec![0.0; seq * seq];
    let mut ds = vec![0.0; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = dims.probs_offset(b, h);
            let p = &probs[off..off + seq * seq];
            if let Some(dv) = dv.as_deref_mut() {
                // dV += Pᵀ·dO
                gemm(
                    seq,
                    seq,
                    d,
                    p,
                    pvt,
                    dout,
                    dims.head_view(b, h),
                    1.0,
                    dv,
                    dims.head_view(b, h),
                );
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dO·Vᵀ
            gemm(
                seq,
                d,
                seq,
                dout,
                dims.head_view(b, h),
                v,
                dims.head_view_t(b, h),
                0.0,
                &mut dp,
                pv,
            );
            ds.iter_mut().for_each(|s| *s = 0.0);
            softmax_backward(p, &dp, &[seq, seq], 1, &mut ds);
            ds.iter_mut().for_each(|s| *s *= scale);
            if let Some(dq) = dq.as_deref_mut() {
                gemm(
                    seq,
                    seq,
                    d,
                    &ds,
                    pv,
                    k,
                    dims.head_view(b, h),
                    1.0,
                    dq,
                    dims.head_view(b, h),
                );
            }
            if let Some(dk) = dk.as_deref_mut() {
                gemm(
                    seq,
                    seq,
                    d,
                    &ds,
                    pvt,
                    q,
                    dims.head_view(b, h),
                    1.0,
                    dk,
                    dims.head_view(b, h),
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Φ(1) = 0.841344746...
        assert!((gelu_scalar(1.0) - 0.841_344_746).abs() < 1e-6);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }
}
