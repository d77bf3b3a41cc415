use std::borrow::Cow;

use crate::gemm::{gemm, View};
use crate::ops::{self, AttentionDims, AttentionGrads};
use crate::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRows {
        x: Var,
        rows: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows {
        x: Var,
        s: Var,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        src: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Leaves may borrow their data (`'a`), so binding model parameters costs no copies.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Attention probabilities recorded by [`Tape::attention`], laid out as
/// `[batch × heads × seq × seq]`.
pub struct AttentionProbs<'t> {
    pub batch: usize,
    pub heads: usize,
    pub seq: usize,
    pub probs: &'t [f64],
}

impl AttentionProbs<'_> {
    /// The `[seq × seq]` map of one (sample, head) pair.
    pub fn map(&self, sample: usize, head: usize) -> &[f64] {
        let n = self.seq * self.seq;
        let off = (sample * self.heads + head) * n;
        &self.probs[off..off + n]
    }
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::Rank {
            op,
            expected: 2,
            shape: shape.to_vec(),
        }),
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        debug_assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value produced by op with shape {shape:?}"
        );
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    /// Trainable leaf borrowing the tensor's data.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    /// Non-trainable leaf that owns its data.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Trainable leaf that owns its data.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Recorded probabilities of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_>> {
        match &self.node(v).op {
            Op::Attention {
                batch,
                heads,
                probs,
                ..
            } => Some(AttentionProbs {
                batch: *batch,
                heads: *heads,
                seq: self.node(v).shape[0] / batch,
                probs,
            }),
            _ => None,
        }
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m×k]·[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (br, bc) = rank2("matmul", self.shape(b))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let bv = if trans_b {
            View::dense_t(bc)
        } else {
            View::dense(bc)
        };
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            View::dense(k),
            self.value(b),
            bv,
            0.0,
            &mut out,
            View::dense(n),
        );
        let g = self.grad_any(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul { a, b, trans_b }, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let g = self.grad_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let g = self.grad_any(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul(a, b), g))
    }

    /// `x[i, :] + rows[i mod r, :]` for `x: [m×n]`, `rows: [r×n]` with `r | m`.
    /// A `[1×n]` (or `[n]`) right-hand side is a bias add.
    pub fn add_rows(&mut self, x: Var, rows: Var) -> Result<Var> {
        let (m, n) = rank2("add_rows", self.shape(x))?;
        let rs = self.shape(rows);
        let (r, rn) = match rs {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            _ => return Err(mismatch("add_rows", self.shape(x), rs)),
        };
        if rn != n || r == 0 || m % r != 0 {
            return Err(mismatch("add_rows", self.shape(x), rs));
        }
        let xv = self.value(x);
        let rv = self.value(rows);
        let mut out = xv.to_vec();
        for i in 0..m {
            let src = &rv[(i % r) * n..(i % r + 1) * n];
            for (o, s) in out[i * n..(i + 1) * n].iter_mut().zip(src) {
                *o += s;
            }
        }
        let g = self.grad_any(&[x, rows]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::AddRows { x, rows }, g))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * factor).collect();
        let g = self.grad_any(&[x]);
        self.push(
            self.shape(x).to_vec(),
            Cow::Owned(out),
            Op::Scale(x, factor),
            g,
        )
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v + offset).collect();
        let g = self.grad_any(&[x]);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::AddScalar(x), g)
    }

    /// `x[i, :] · s[i]` for `x: [m×n]`, `s: [m×1]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = rank2("scale_rows", self.shape(x))?;
        if self.shape(s) != [m, 1] {
            return Err(mismatch("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(n)
            .zip(sv)
            .flat_map(|(row, f)| row.iter().map(move |v| v * f))
            .collect();
        let g = self.grad_any(&[x, s]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::ScaleRows { x, s }, g))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|&v| ops::gelu_scalar(v)).collect();
        let g = self.grad_any(&[x]);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Gelu(x), g)
    }

    /// Softmax along `axis`, shifted by the per-slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Invalid {
                op: "softmax",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let out = ops::softmax_forward(self.value(x), &shape, axis);
        let g = self.grad_any(&[x]);
        Ok(self.push(shape, Cow::Owned(out), Op::Softmax { x, axis }, g))
    }

    /// Layer normalization over the last axis, `eps` inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| TensorError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: shape.clone(),
        })?;
        if n < 2 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("normalized axis must have length >= 2, got {n}"),
            });
        }
        for p in [gain, bias] {
            if self.node(p).value.len() != n {
                return Err(mismatch("layer_norm", &shape, self.shape(p)));
            }
        }
        let ln = ops::layer_norm_forward(self.value(x), n, self.value(gain), self.value(bias), eps);
        let g = self.grad_any(&[x, gain, bias]);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat: ln.xhat,
            rstd: ln.rstd,
        };
        Ok(self.push(shape, Cow::Owned(ln.y), op, g))
    }

    /// Multi-head scaled dot-product attention. `q`, `k`, `v` are
    /// `[batch·seq × width]`; each sample attends only within its own `seq` rows,
    /// and each head uses a contiguous `width/heads` column block.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rows, width) = rank2("attention", self.shape(q))?;
        if self.shape(k) != self.shape(q) || self.shape(v) != self.shape(q) {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        if batch == 0 || rows % batch != 0 || heads == 0 || width % heads != 0 {
            return Err(TensorError::Invalid {
                op: "attention",
                msg: format!("cannot split [{rows}×{width}] into {batch} samples of {heads} heads"),
            });
        }
        let dims = AttentionDims {
            batch,
            heads,
            seq: rows / batch,
            width,
        };
        let (out, probs) =
            ops::attention_forward(self.value(q), self.value(k), self.value(v), &dims);
        let g = self.grad_any(&[q, k, v]);
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            heads,
            probs,
        };
        Ok(self.push(vec![rows, width], Cow::Owned(out), op, g))
    }

    /// `out[i] = src[index[i]]` over the flat buffer, reshaped to `shape`.
    /// Covers embedding lookups, row selection and patch extraction.
    pub fn gather(&mut self, src: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() {
            return Err(TensorError::DataLength {
                shape,
                len: index.len(),
            });
        }
        let sv = self.value(src);
        if let Some(&bad) = index.iter().find(|&&i| i >= sv.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: format!("index {bad} out of range for {} elements", sv.len()),
            });
        }
        let out: Vec<f64> = index.iter().map(|&i| sv[i]).collect();
        let g = self.grad_any(&[src]);
        Ok(self.push(shape, Cow::Owned(out), Op::Gather { src, index }, g))
    }

    /// Selects whole rows of a `[m×n]` matrix (rows may repeat).
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rank2("gather_rows", self.shape(src))?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("row {bad} out of range for {m} rows"),
            });
        }
        let index = rows.iter().flat_map(|&r| r * n..(r + 1) * n).collect();
        self.gather(src, index, vec![rows.len(), n])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, n) = rank2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = rank2("concat_rows", self.shape(p))?;
            if c != n {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let g = self.grad_any(parts);
        Ok(self.push(
            vec![rows, n],
            Cow::Owned(out),
            Op::ConcatRows(parts.to_vec()),
            g,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let (m, _) = rank2("concat_cols", self.shape(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rank2("concat_cols", self.shape(p))?;
            if r != m {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let g = self.grad_any(parts);
        Ok(self.push(
            vec![m, total],
            Cow::Owned(out),
            Op::ConcatCols(parts.to_vec()),
            g,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rank2("slice_rows", self.shape(x))?;
        if start + len > m {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for {m}", start + len),
            });
        }
        let out = self.value(x)[start * n..(start + len) * n].to_vec();
        let g = self.grad_any(&[x]);
        Ok(self.push(vec![len, n], Cow::Owned(out), Op::SliceRows { x, start }, g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = rank2("slice_cols", self.shape(x))?;
        if start + len > n {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for {n}", start + len),
            });
        }
        let xv = self.value(x);
        let out: Vec<f64> = (0..m)
            .flat_map(|i| xv[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let g = self.grad_any(&[x]);
        Ok(self.push(vec![m, len], Cow::Owned(out), Op::SliceCols { x, start }, g))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = rank2("transpose", self.shape(x))?;
        let xv = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let g = self.grad_any(&[x]);
        Ok(self.push(vec![n, m], Cow::Owned(out), Op::Transpose(x), g))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum::<f64>();
        let g = self.grad_any(&[x]);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Sum(x), g)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let g = self.grad_any(&[x]);
        self.push(Vec::new(), Cow::Owned(vec![s]), Op::Mean(x), g)
    }

    /// Batch-mean cross-entropy of `[B×K]` logits against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, k) = rank2("cross_entropy", self.shape(logits))?;
        if targets.len() != b {
            return Err(TensorError::Invalid {
                op: "cross_entropy",
                msg: format!("{} targets for a batch of {b}", targets.len()),
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::TargetOutOfRange {
                target: t,
                classes: k,
            });
        }
        let probs = ops::softmax_forward(self.value(logits), &[b, k], 1);
        let lv = self.value(logits);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= b as f64;
        let g = self.grad_any(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), Cow::Owned(vec![loss]), op, g))
    }

    /// Reverse sweep from a scalar root.
    ///
    /// Every trainable leaf gets a gradient buffer; leaves the root does not
    /// depend on keep an all-zero gradient.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rn = self.node(root);
        if rn.value.len() != 1 {
            return Err(TensorError::NonScalarRoot(rn.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if rn.needs_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.node(v).needs_grad;
        // Accumulation buffer for `v`, created zeroed on first use.
        fn buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let len_of = |v: Var| self.node(v).value.len();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = node.shape[1];
                if needs(*a) {
                    // dA = G·Bᵀ (or G·B when B was used transposed)
                    let bcols = self.shape(*b)[1];
                    let bv = if *trans_b {
                        View::dense(bcols)
                    } else {
                        View::dense_t(bcols)
                    };
                    let da = buf(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        View::dense(n),
                        self.value(*b),
                        bv,
                        1.0,
                        da,
                        View::dense(k),
                    );
                }
                if needs(*b) {
                    let db = buf(grads, *b, k * n);
                    if *trans_b {
                        // B is [n×k]: dB = Gᵀ·A
                        gemm(
                            n,
                            m,
                            k,
                            g,
                            View::dense_t(n),
                            self.value(*a),
                            View::dense(k),
                            1.0,
                            db,
                            View::dense(k),
                        );
                    } else {
                        // dB = Aᵀ·G
                        gemm(
                            k,
                            m,
                            n,
                            self.value(*a),
                            View::dense_t(k),
                            g,
                            View::dense(n),
                            1.0,
                            db,
                            View::dense(n),
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        let d = buf(grads, v, g.len());
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b);
                    let d = buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if needs(*b) {
                    let av = self.value(*a);
                    let d = buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRows { x, rows } => {
                if needs(*x) {
                    let d = buf(grads, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if needs(*rows) {
                    let rl = len_of(*rows);
                    let d = buf(grads, *rows, rl);
                    for (i, gv) in g.iter().enumerate() {
                        d[i % rl] += gv;
                    }
                }
            }
            Op::Scale(x, f) => {
                let d = buf(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * f);
            }
            Op::AddScalar(x) => {
                let d = buf(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
            }
            Op::ScaleRows { x, s } => {
                let n = node.shape[1];
                if needs(*x) {
                    let sv = self.value(*s);
                    let d = buf(grads, *x, g.len());
                    for (i, gv) in g.iter().enumerate() {
                        d[i] += gv * sv[i / n];
                    }
                }
                if needs(*s) {
                    let xv = self.value(*x);
                    let d = buf(grads, *s, node.shape[0]);
                    for (i, gv) in g.iter().enumerate() {
                        d[i / n] += gv * xv[i];
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = buf(grads, *x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * ops::gelu_grad(xv[i]);
                }
            }
            Op::Softmax { x, axis } => {
                let d = buf(grads, *x, g.len());
                ops::softmax_backward(&node.value, g, &node.shape, *axis, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = *node.shape.last().unwrap();
                let rows = g.len() / n;
                let gv = self.value(*gain);
                if needs(*x) {
                    let d = buf(grads, *x, g.len());
                    for r in 0..rows {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for j in 0..n {
                            let dh = gr[j] * gv[j];
                            d[r * n + j] += rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if needs(*gain) {
                    let d = buf(grads, *gain, n);
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv * xhat[i];
                    }
                }
                if needs(*bias) {
                    let d = buf(grads, *bias, n);
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let dims = AttentionDims {
                    batch: *batch,
                    heads: *heads,
                    seq: node.shape[0] / batch,
                    width: node.shape[1],
                };
                let len = g.len();
                let mut dq = needs(*q).then(|| grads[q.0].take().unwrap_or_else(|| vec![0.0; len]));
                let mut dk = needs(*k).then(|| grads[k.0].take().unwrap_or_else(|| vec![0.0; len]));
                let mut dv = needs(*v).then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; len]));
                ops::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    &dims,
                    AttentionGrads {
                        dq: dq.as_deref_mut(),
                        dk: dk.as_deref_mut(),
                        dv: dv.as_deref_mut(),
                    },
                );
                // q, k, v may be the same node; merge rather than overwrite.
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(d) = d {
                        match &mut grads[var.0] {
                            Some(existing) => {
                                existing.iter_mut().zip(&d).for_each(|(e, x)| *e += x)
                            }
                            slot => *slot = Some(d),
                        }
                    }
                }
            }
            Op::Gather { src, index } => {
                let d = buf(grads, *src, len_of(*src));
                for (gv, &i) in g.iter().zip(index) {
                    d[i] += gv;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len_of(p);
                    if needs(p) {
                        let d = buf(grads, p, l);
                        d.iter_mut()
                            .zip(&g[off..off + l])
                            .for_each(|(d, g)| *d += g);
                    }
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.shape[0], node.shape[1]);
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if needs(p) {
                        let d = buf(grads, p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                d[i * w + j] += g[i * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                let d = buf(grads, *x, len_of(*x));
                d[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, g)| *d += g);
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (node.shape[0], node.shape[1]);
                let n = self.shape(*x)[1];
                let d = buf(grads, *x, m * n);
                for i in 0..m {
                    for j in 0..len {
                        d[i * n + start + j] += g[i * len + j];
                    }
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                let d = buf(grads, *x, m * n);
                for i in 0..m {
                    for j in 0..n {
                        d[i * n + j] += g[j * m + i];
                    }
                }
            }
            Op::Sum(x) => {
                let d = buf(grads, *x, len_of(*x));
                d.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let l = len_of(*x);
                let d = buf(grads, *x, l);
                let s = g[0] / l as f64;
                d.iter_mut().for_each(|d| *d += s);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let k = probs.len() / b;
                let s = g[0] / b as f64;
                let d = buf(grads, *logits, probs.len());
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let y = if j == t { 1.0 } else { 0.0 };
                        d[i * k + j] += s * (probs[i * k + j] - y);
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a trainable leaf; `None` for constants and intermediates.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
