//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Forward calls execute eagerly and append one node per result. `backward`
//! replays adjoints in reverse record order, so every `requires_grad` leaf
//! reachable from the loss receives its gradient exactly once; unreachable
//! leaves read back as zeros.
//!
//! A tape is confined to one logical training task. Parallelism happens
//! across independent examples, each with its own tape.

use crate::error::{EngineError, Result};
use crate::tensor::{broadcast_shape, strides, unflatten, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Ln,
    Softplus,
    Neg,
    Scale(f64),
    AddConst(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
    },
    Transpose2 {
        x: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
    },
    Unary {
        kind: UnaryKind,
        x: usize,
    },
    Softmax {
        x: usize,
        axis: usize,
        mask: Option<Vec<bool>>,
    },
    ReduceMax {
        x: usize,
        argmax: Vec<usize>,
    },
    ReduceMean {
        x: usize,
        axes: Vec<usize>,
    },
    ReduceSumAll {
        x: usize,
    },
    Conv3d {
        input: usize,
        kernel: usize,
        bias: usize,
        stride: [usize; 3],
        pad: [usize; 3],
    },
    MaxPool3d {
        x: usize,
        argmax: Vec<usize>,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Normalization bookkeeping filled in by softmax forward passes. Used by the
/// evaluation path to report worst-case row-sum deviation over a whole run.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct TapeAudit {
    pub softmax_slices: u64,
    pub max_softmax_dev: f64,
}

impl TapeAudit {
    pub fn merge(&mut self, other: &TapeAudit) {
        self.softmax_slices += other.softmax_slices;
        self.max_softmax_dev = self.max_softmax_dev.max(other.max_softmax_dev);
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    audit: TapeAudit,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn audit(&self) -> TapeAudit {
        self.audit
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Record a leaf, copying the tensor's data onto the tape.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::from_vec(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![], false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let n = &self.nodes[v.0];
        if n.data.len() != 1 {
            return Err(EngineError::Contract(format!(
                "expected scalar, got shape {:?}",
                n.shape
            )));
        }
        Ok(n.data[0])
    }

    // ── matrix ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(EngineError::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = da[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn transpose2(&mut self, x: Var) -> Result<Var> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 2 {
            return Err(EngineError::Dimension {
                op: "transpose",
                msg: format!("expected rank 2, got {s:?}"),
            });
        }
        let (r, c) = (s[0], s[1]);
        let d = &self.nodes[x.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, vec![c, r], rg, Op::Transpose2 { x: x.0 }))
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(
            "elementwise",
            &self.nodes[a.0].shape,
            &self.nodes[b.0].shape,
        )?;
        let numel: usize = out_shape.iter().product();
        let amap = BroadcastMap::new(&self.nodes[a.0].shape, &out_shape);
        let bmap = BroadcastMap::new(&self.nodes[b.0].shape, &out_shape);
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; numel];
        for (i, o) in out.iter_mut().enumerate() {
            let (x, y) = (da[amap.src(i)], db[bmap.src(i)]);
            *o = match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            };
        }
        let rg = self.needs_grad(&[a.0, b.0]);
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::LeakyRelu(alpha) => {
                    if v > 0.0 {
                        v
                    } else {
                        alpha * v
                    }
                }
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Ln => v.ln(),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Neg => -v,
                UnaryKind::Scale(c) => c * v,
                UnaryKind::AddConst(c) => v + c,
            })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(data, shape, rg, Op::Unary { kind, x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Var {
        self.unary(UnaryKind::LeakyRelu(alpha), x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.unary(UnaryKind::Exp, x);
        self.check_finite("exp", v)?;
        Ok(v)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.nodes[x.0].data.iter().any(|&v| v <= 0.0) {
            return Err(EngineError::Numeric("ln of non-positive value".into()));
        }
        Ok(self.unary(UnaryKind::Ln, x))
    }

    /// ln(1 + e^x), evaluated without overflow for large |x|.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::Scale(c), x)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(UnaryKind::AddConst(c), x)
    }

    fn check_finite(&self, op: &str, v: Var) -> Result<()> {
        if self.nodes[v.0].data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(EngineError::Numeric(format!(
                "{op} produced non-finite value"
            )))
        }
    }

    // ── softmax ─────────────────────────────────────────────────────

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(x, axis, None)
    }

    /// Exp-normalize along `axis` with max-subtraction. Masked entries are
    /// exactly zero and excluded from the normalization; a fully masked slice
    /// is an error.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(EngineError::InvalidAxis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        if let Some(m) = mask {
            if m.len() != self.nodes[x.0].data.len() {
                return Err(EngineError::Dimension {
                    op: "softmax",
                    msg: format!(
                        "mask length {} != tensor numel {}",
                        m.len(),
                        self.nodes[x.0].data.len()
                    ),
                });
            }
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let data = &self.nodes[x.0].data;
        let mut out = vec![0.0; data.len()];
        let live = |idx: usize| mask.map_or(true, |m| m[idx]);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..axis_len {
                    let idx = base + l * inner;
                    if live(idx) {
                        max = max.max(data[idx]);
                    }
                }
                if max == f64::NEG_INFINITY {
                    return Err(EngineError::DegenerateSlice {
                        axis,
                        slice: o * inner + i,
                    });
                }
                let mut denom = 0.0;
                for l in 0..axis_len {
                    let idx = base + l * inner;
                    if live(idx) {
                        let e = (data[idx] - max).exp();
                        out[idx] = e;
                        denom += e;
                    }
                }
                let mut sum = 0.0;
                for l in 0..axis_len {
                    let idx = base + l * inner;
                    if live(idx) {
                        out[idx] /= denom;
                        sum += out[idx];
                    }
                }
                self.audit.softmax_slices += 1;
                self.audit.max_softmax_dev = self.audit.max_softmax_dev.max((sum - 1.0).abs());
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            out,
            shape,
            rg,
            Op::Softmax {
                x: x.0,
                axis,
                mask: mask.map(|m| m.to_vec()),
            },
        ))
    }

    // ── reductions ──────────────────────────────────────────────────

    /// Max along one axis; ties route the backward pass to the lowest index.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(EngineError::InvalidAxis {
                op: "reduce_max",
                axis,
                rank: shape.len(),
            });
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let data = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut best = data[base];
                let mut best_idx = base;
                for l in 1..axis_len {
                    let idx = base + l * inner;
                    if data[idx] > best {
                        best = data[idx];
                        best_idx = idx;
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, out_shape, rg, Op::ReduceMax { x: x.0, argmax }))
    }

    /// Mean over the given axes (deduplicated); output drops those axes.
    pub fn reduce_mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let mut axes: Vec<usize> = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.is_empty() {
            return Err(EngineError::Dimension {
                op: "reduce_mean",
                msg: "empty axis list".into(),
            });
        }
        for &a in &axes {
            if a >= shape.len() {
                return Err(EngineError::InvalidAxis {
                    op: "reduce_mean",
                    axis: a,
                    rank: shape.len(),
                });
            }
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(d, _)| !axes.contains(d))
            .map(|(_, &e)| e)
            .collect();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let numel_out: usize = out_shape.iter().product();
        let data = &self.nodes[x.0].data;
        let mut out = vec![0.0; numel_out];
        let out_strides = strides(&out_shape);
        for (flat, &v) in data.iter().enumerate() {
            let coords = unflatten(flat, &shape);
            let mut of = 0;
            let mut od = 0;
            for (d, &c) in coords.iter().enumerate() {
                if !axes.contains(&d) {
                    of += c * out_strides[od];
                    od += 1;
                }
            }
            out[of] += v;
        }
        let inv = 1.0 / count as f64;
        for v in &mut out {
            *v *= inv;
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, out_shape, rg, Op::ReduceMean { x: x.0, axes }))
    }

    /// Sum of all elements, producing a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![s], vec![], rg, Op::ReduceSumAll { x: x.0 })
    }

    // ── convolution and pooling ─────────────────────────────────────

    /// 3-D cross-correlation plus bias.
    ///
    /// input `[T,H,W,Ci]`, kernel `[kt,kh,kw,Ci,Co]`, bias `[Co]`; output
    /// extent per spatiotemporal axis is `(in + 2p - k)/stride + 1`.
    pub fn conv3d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let ishape = self.nodes[input.0].shape.clone();
        let kshape = self.nodes[kernel.0].shape.clone();
        let bshape = self.nodes[bias.0].shape.clone();
        if ishape.len() != 4 || kshape.len() != 5 {
            return Err(EngineError::Dimension {
                op: "conv3d",
                msg: format!(
                    "expected input rank 4 and kernel rank 5, got {ishape:?} / {kshape:?}"
                ),
            });
        }
        if kshape[3] != ishape[3] {
            return Err(EngineError::ShapeMismatch {
                op: "conv3d",
                lhs: ishape,
                rhs: kshape,
            });
        }
        let co = kshape[4];
        if bshape != [co] {
            return Err(EngineError::ShapeMismatch {
                op: "conv3d",
                lhs: bshape,
                rhs: vec![co],
            });
        }
        if stride.iter().any(|&s| s == 0) {
            return Err(EngineError::Dimension {
                op: "conv3d",
                msg: "zero stride".into(),
            });
        }
        let mut out_sp = [0usize; 3];
        for d in 0..3 {
            let padded = ishape[d] + 2 * pad[d];
            if kshape[d] > padded {
                return Err(EngineError::Dimension {
                    op: "conv3d",
                    msg: format!(
                        "kernel extent {} exceeds padded input extent {} on axis {}",
                        kshape[d], padded, d
                    ),
                });
            }
            out_sp[d] = (padded - kshape[d]) / stride[d] + 1;
        }
        let ci = ishape[3];
        let (kt, kh, kw) = (kshape[0], kshape[1], kshape[2]);
        let idata = &self.nodes[input.0].data;
        let kdata = &self.nodes[kernel.0].data;
        let bdata = &self.nodes[bias.0].data;
        let istr = strides(&ishape);
        let kstr = strides(&kshape);
        let mut out = vec![0.0; out_sp[0] * out_sp[1] * out_sp[2] * co];
        let mut of = 0;
        for ot in 0..out_sp[0] {
            for oy in 0..out_sp[1] {
                for ox in 0..out_sp[2] {
                    for c in 0..co {
                        let mut acc = bdata[c];
                        for dt in 0..kt {
                            let it = (ot * stride[0] + dt) as isize - pad[0] as isize;
                            if it < 0 || it as usize >= ishape[0] {
                                continue;
                            }
                            for dy in 0..kh {
                                let iy = (oy * stride[1] + dy) as isize - pad[1] as isize;
                                if iy < 0 || iy as usize >= ishape[1] {
                                    continue;
                                }
                                for dx in 0..kw {
                                    let ix = (ox * stride[2] + dx) as isize - pad[2] as isize;
                                    if ix < 0 || ix as usize >= ishape[2] {
                                        continue;
                                    }
                                    let ib = it as usize * istr[0]
                                        + iy as usize * istr[1]
                                        + ix as usize * istr[2];
                                    let kb = dt * kstr[0] + dy * kstr[1] + dx * kstr[2];
                                    for cin in 0..ci {
                                        acc += idata[ib + cin] * kdata[kb + cin * co + c];
                                    }
                                }
                            }
                        }
                        out[of] = acc;
                        of += 1;
                    }
                }
            }
        }
        let rg = self.needs_grad(&[input.0, kernel.0, bias.0]);
        Ok(self.push(
            out,
            vec![out_sp[0], out_sp[1], out_sp[2], co],
            rg,
            Op::Conv3d {
                input: input.0,
                kernel: kernel.0,
                bias: bias.0,
                stride,
                pad,
            },
        ))
    }

    /// Channel-wise max pooling with stride 1 and same padding (padded
    /// positions never win). Window extents must be odd.
    pub fn max_pool3d_same(&mut self, x: Var, window: [usize; 3]) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 4 {
            return Err(EngineError::Dimension {
                op: "max_pool3d",
                msg: format!("expected rank 4, got {shape:?}"),
            });
        }
        if window.iter().any(|&w| w == 0 || w % 2 == 0) {
            return Err(EngineError::Dimension {
                op: "max_pool3d",
                msg: format!("window extents must be odd, got {window:?}"),
            });
        }
        let half = [window[0] / 2, window[1] / 2, window[2] / 2];
        let (t, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let str_ = strides(&shape);
        let data = &self.nodes[x.0].data;
        let mut out = vec![0.0; data.len()];
        let mut argmax = vec![0usize; data.len()];
        for ot in 0..t {
            for oy in 0..h {
                for ox in 0..w {
                    for cc in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dt in 0..window[0] {
                            let it = ot as isize + dt as isize - half[0] as isize;
                            if it < 0 || it as usize >= t {
                                continue;
                            }
                            for dy in 0..window[1] {
                                let iy = oy as isize + dy as isize - half[1] as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for dx in 0..window[2] {
                                    let ix = ox as isize + dx as isize - half[2] as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    let idx = it as usize * str_[0]
                                        + iy as usize * str_[1]
                                        + ix as usize * str_[2]
                                        + cc;
                                    if data[idx] > best {
                                        best = data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        let of = ot * str_[0] + oy * str_[1] + ox * str_[2] + cc;
                        out[of] = best;
                        argmax[of] = best_idx;
                    }
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(out, shape, rg, Op::MaxPool3d { x: x.0, argmax }))
    }

    // ── structural ops ──────────────────────────────────────────────

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(EngineError::Contract("concat of zero tensors".into()));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(EngineError::InvalidAxis {
                op: "concat",
                axis,
                rank: first.len(),
            });
        }
        let mut axis_total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(EngineError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut out = vec![0.0; out_shape.iter().product()];
        let out_block = axis_total * inner;
        for o in 0..outer {
            let mut offset = 0;
            for p in parts {
                let s_axis = self.nodes[p.0].shape[axis];
                let block = s_axis * inner;
                let src = &self.nodes[p.0].data[o * block..(o + 1) * block];
                out[o * out_block + offset..o * out_block + offset + block].copy_from_slice(src);
                offset += block;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.needs_grad(&ids);
        Ok(self.push(out, out_shape, rg, Op::Concat { parts: ids, axis }))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(EngineError::InvalidAxis {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(EngineError::Dimension {
                op: "slice",
                msg: format!(
                    "range {}..{} out of extent {}",
                    start,
                    start + len,
                    shape[axis]
                ),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        let in_block = shape[axis] * inner;
        let out_block = len * inner;
        for o in 0..outer {
            let src = &self.nodes[x.0].data
                [o * in_block + start * inner..o * in_block + (start + len) * inner];
            out[o * out_block..(o + 1) * out_block].copy_from_slice(src);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            out,
            out_shape,
            rg,
            Op::Slice {
                x: x.0,
                axis,
                start,
            },
        ))
    }

    /// Row gather from a `[V, d]` table. Gradients accumulate per row, so a
    /// repeated id receives the sum of its occurrences' adjoints.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.nodes[table.0].shape.clone();
        if shape.len() != 2 {
            return Err(EngineError::Dimension {
                op: "gather_rows",
                msg: format!("expected rank 2 table, got {shape:?}"),
            });
        }
        if ids.is_empty() {
            return Err(EngineError::Contract("gather of zero rows".into()));
        }
        let (v, d) = (shape[0], shape[1]);
        for &id in ids {
            if id >= v {
                return Err(EngineError::Lookup { id, vocab: v });
            }
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&self.nodes[table.0].data[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(
            out,
            vec![ids.len(), d],
            rg,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(EngineError::Dimension {
                op: "reshape",
                msg: format!(
                    "cannot reshape {:?} into {:?}",
                    self.nodes[x.0].shape, new_shape
                ),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(data, new_shape, rg, Op::Reshape { x: x.0 }))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Replay adjoints from a scalar loss. After this call, `grad` returns
    /// the gradient of every `requires_grad` var (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            return Err(EngineError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_inputs(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        // Unreached requires_grad vars read back as zeros.
        for (i, slot) in grads.iter_mut().enumerate() {
            if slot.is_none() && self.nodes[i].requires_grad {
                *slot = Some(vec![0.0; self.nodes[i].data.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient buffer of a var after `backward`.
    pub fn grad(&self, v: Var) -> Result<&[f64]> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_deref())
            .ok_or_else(|| EngineError::Contract("grad requested before backward".into()))
    }

    fn accumulate_inputs(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let slot = |grads: &mut [Option<Vec<f64>>], idx: usize| -> bool {
            if !nodes[idx].requires_grad {
                return false;
            }
            if grads[idx].is_none() {
                grads[idx] = Some(vec![0.0; nodes[idx].data.len()]);
            }
            true
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                if slot(grads, *a) {
                    let db = &nodes[*b].data;
                    let ga = grads[*a].as_mut().unwrap();
                    for r in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[r * n + j] * db[p * n + j];
                            }
                            ga[r * k + p] += acc;
                        }
                    }
                }
                if slot(grads, *b) {
                    let da = &nodes[*a].data;
                    let gb = grads[*b].as_mut().unwrap();
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for r in 0..m {
                                acc += da[r * k + p] * g[r * n + j];
                            }
                            gb[p * n + j] += acc;
                        }
                    }
                }
            }
            Op::Transpose2 { x } => {
                if slot(grads, *x) {
                    let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
                    let gx = grads[*x].as_mut().unwrap();
                    for a in 0..r {
                        for b in 0..c {
                            gx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let out_shape = &nodes[i].shape;
                let amap = BroadcastMap::new(&nodes[*a].shape, out_shape);
                let bmap = BroadcastMap::new(&nodes[*b].shape, out_shape);
                if slot(grads, *a) {
                    let bd = &nodes[*b].data;
                    let ga = grads[*a].as_mut().unwrap();
                    for (idx, &gv) in g.iter().enumerate() {
                        let contrib = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gv,
                            BinaryKind::Mul => gv * bd[bmap.src(idx)],
                        };
                        ga[amap.src(idx)] += contrib;
                    }
                }
                if slot(grads, *b) {
                    let ad = &nodes[*a].data;
                    let gb = grads[*b].as_mut().unwrap();
                    for (idx, &gv) in g.iter().enumerate() {
                        let contrib = match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * ad[amap.src(idx)],
                        };
                        gb[bmap.src(idx)] += contrib;
                    }
                }
            }
            Op::Unary { kind, x } => {
                if slot(grads, *x) {
                    let xd = &nodes[*x].data;
                    let yd = &nodes[i].data;
                    let gx = grads[*x].as_mut().unwrap();
                    for (idx, &gv) in g.iter().enumerate() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if xd[idx] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::LeakyRelu(alpha) => {
                                if xd[idx] > 0.0 {
                                    1.0
                                } else {
                                    *alpha
                                }
                            }
                            UnaryKind::Sigmoid => yd[idx] * (1.0 - yd[idx]),
                            UnaryKind::Tanh => 1.0 - yd[idx] * yd[idx],
                            UnaryKind::Exp => yd[idx],
                            UnaryKind::Ln => 1.0 / xd[idx],
                            UnaryKind::Softplus => sigmoid(xd[idx]),
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Scale(c) => *c,
                            UnaryKind::AddConst(_) => 1.0,
                        };
                        gx[idx] += gv * d;
                    }
                }
            }
            Op::Softmax { x, axis, mask } => {
                if slot(grads, *x) {
                    let shape = &nodes[i].shape;
                    let axis_len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let y = &nodes[i].data;
                    let live = |idx: usize| mask.as_ref().map_or(true, |m| m[idx]);
                    let gx = grads[*x].as_mut().unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * axis_len * inner + ii;
                            let mut dot = 0.0;
                            for l in 0..axis_len {
                                let idx = base + l * inner;
                                if live(idx) {
                                    dot += g[idx] * y[idx];
                                }
                            }
                            for l in 0..axis_len {
                                let idx = base + l * inner;
                                if live(idx) {
                                    gx[idx] += y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                    }
                }
            }
            Op::ReduceMax { x, argmax } => {
                if slot(grads, *x) {
                    let gx = grads[*x].as_mut().unwrap();
                    for (of, &src) in argmax.iter().enumerate() {
                        gx[src] += g[of];
                    }
                }
            }
            Op::ReduceMean { x, axes } => {
                if slot(grads, *x) {
                    let shape = &nodes[*x].shape;
                    let count: usize = axes.iter().map(|&a| shape[a]).product();
                    let inv = 1.0 / count as f64;
                    let out_shape = &nodes[i].shape;
                    let out_strides = strides(out_shape);
                    let gx = grads[*x].as_mut().unwrap();
                    for flat in 0..gx.len() {
                        let coords = unflatten(flat, shape);
                        let mut of = 0;
                        let mut od = 0;
                        for (d, &c) in coords.iter().enumerate() {
                            if !axes.contains(&d) {
                                of += c * out_strides[od];
                                od += 1;
                            }
                        }
                        gx[flat] += g[of] * inv;
                    }
                }
            }
            Op::ReduceSumAll { x } => {
                if slot(grads, *x) {
                    let gx = grads[*x].as_mut().unwrap();
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::Conv3d {
                input,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let ishape = &nodes[*input].shape;
                let kshape = &nodes[*kernel].shape;
                let oshape = &nodes[i].shape;
                let (ci, co) = (kshape[3], kshape[4]);
                let istr = strides(ishape);
                let kstr = strides(kshape);
                let want_in = nodes[*input].requires_grad;
                let want_k = nodes[*kernel].requires_grad;
                let want_b = nodes[*bias].requires_grad;
                if want_in {
                    slot(grads, *input);
                }
                if want_k {
                    slot(grads, *kernel);
                }
                if want_b {
                    slot(grads, *bias);
                }
                let idata = &nodes[*input].data;
                let kdata = &nodes[*kernel].data;
                let mut gi = if want_in { grads[*input].take() } else { None };
                let mut gk = if want_k { grads[*kernel].take() } else { None };
                let mut gb = if want_b { grads[*bias].take() } else { None };
                let mut of = 0;
                for ot in 0..oshape[0] {
                    for oy in 0..oshape[1] {
                        for ox in 0..oshape[2] {
                            for c in 0..co {
                                let gv = g[of];
                                of += 1;
                                if gv == 0.0 {
                                    continue;
                                }
                                if let Some(b) = gb.as_mut() {
                                    b[c] += gv;
                                }
                                for dt in 0..kshape[0] {
                                    let it = (ot * stride[0] + dt) as isize - pad[0] as isize;
                                    if it < 0 || it as usize >= ishape[0] {
                                        continue;
                                    }
                                    for dy in 0..kshape[1] {
                                        let iy = (oy * stride[1] + dy) as isize - pad[1] as isize;
                                        if iy < 0 || iy as usize >= ishape[1] {
                                            continue;
                                        }
                                        for dx in 0..kshape[2] {
                                            let ix =
                                                (ox * stride[2] + dx) as isize - pad[2] as isize;
                                            if ix < 0 || ix as usize >= ishape[2] {
                                                continue;
                                            }
                                            let ib = it as usize * istr[0]
                                                + iy as usize * istr[1]
                                                + ix as usize * istr[2];
                                            let kb = dt * kstr[0] + dy * kstr[1] + dx * kstr[2];
                                            for cin in 0..ci {
                                                if let Some(k) = gk.as_mut() {
                                                    k[kb + cin * co + c] += gv * idata[ib + cin];
                                                }
                                                if let Some(inp) = gi.as_mut() {
                                                    inp[ib + cin] += gv * kdata[kb + cin * co + c];
                                                }
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(b) = gi {
                    grads[*input] = Some(b);
                }
                if let Some(b) = gk {
                    grads[*kernel] = Some(b);
                }
                if let Some(b) = gb {
                    grads[*bias] = Some(b);
                }
            }
            Op::MaxPool3d { x, argmax } => {
                if slot(grads, *x) {
                    let gx = grads[*x].as_mut().unwrap();
                    for (of, &src) in argmax.iter().enumerate() {
                        gx[src] += g[of];
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = &nodes[i].shape;
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let outer: usize = out_shape[..*axis].iter().product();
                let out_block = out_shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let block = nodes[p].shape[*axis] * inner;
                    if slot(grads, p) {
                        let gp = grads[p].as_mut().unwrap();
                        for o in 0..outer {
                            for j in 0..block {
                                gp[o * block + j] += g[o * out_block + offset + j];
                            }
                        }
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                if slot(grads, *x) {
                    let xshape = &nodes[*x].shape;
                    let out_shape = &nodes[i].shape;
                    let inner: usize = xshape[*axis + 1..].iter().product();
                    let outer: usize = xshape[..*axis].iter().product();
                    let in_block = xshape[*axis] * inner;
                    let out_block = out_shape[*axis] * inner;
                    let gx = grads[*x].as_mut().unwrap();
                    for o in 0..outer {
                        for j in 0..out_block {
                            gx[o * in_block + start * inner + j] += g[o * out_block + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if slot(grads, *table) {
                    let d = nodes[*table].shape[1];
                    let gt = grads[*table].as_mut().unwrap();
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if slot(grads, *x) {
                    let gx = grads[*x].as_mut().unwrap();
                    for (idx, &gv) in g.iter().enumerate() {
                        gx[idx] += gv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Maps flat output indices back to flat source indices under broadcasting.
struct BroadcastMap {
    out_shape: Vec<usize>,
    src_strides: Vec<usize>,
}

impl BroadcastMap {
    fn new(src: &[usize], out: &[usize]) -> Self {
        let rank = out.len();
        let full_strides = strides(src);
        let mut src_strides = vec![0usize; rank];
        let offset = rank - src.len();
        for d in 0..src.len() {
            src_strides[offset + d] = if src[d] == 1 { 0 } else { full_strides[d] };
        }
        BroadcastMap {
            out_shape: out.to_vec(),
            src_strides,
        }
    }

    fn src(&self, mut flat: usize) -> usize {
        let mut idx = 0;
        for d in (0..self.out_shape.len()).rev() {
            let c = flat % self.out_shape[d];
            flat /= self.out_shape[d];
            idx += c * self.src_strides[d];
        }
        idx
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let t = Tensor::from_vec(shape, data).unwrap().with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_hand_scalar_product() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.5, -2.0, 0.25]);
        let ones = tape.constant(vec![3], vec![1.0; 3]).unwrap();
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.leaky_relu(x, 0.01);
        assert_eq!(tape.value(y), &[-0.01, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y), &[0.5]);
    }

    #[test]
    fn softmax_symmetric_and_single() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4], vec![1.0; 4]);
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y) {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let s = leaf(&mut tape, vec![1], vec![42.0]);
        let ys = tape.softmax(s, 0).unwrap();
        assert_eq!(tape.value(ys), &[1.0]);
    }

    #[test]
    fn softmax_hand_value() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![0.0, 3.0_f64.ln()]);
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y)[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_zeros_and_degenerate() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4], vec![5.0, 1.0, 2.0, 3.0]);
        let mask = [false, true, true, true];
        let y = tape.softmax_masked(x, 0, Some(&mask)).unwrap();
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] + v[3] - 1.0).abs() < 1e-12);

        let all_masked = [false; 4];
        let err = tape.softmax_masked(x, 0, Some(&all_masked)).unwrap_err();
        assert!(matches!(err, EngineError::DegenerateSlice { .. }));
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.3, -1.2, 2.5]);
        let y1 = tape.softmax(x, 0).unwrap();
        let shifted = tape.add_const(x, 123.456);
        let y2 = tape.softmax(shifted, 0).unwrap();
        for (a, b) in tape.value(y1).iter().zip(tape.value(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_max_hand_and_mean_constant() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 2], vec![1.0, 5.0, 3.0, 2.0]);
        let m = tape.reduce_max(x, 0).unwrap();
        assert_eq!(tape.value(m), &[3.0, 5.0]);

        let c = leaf(&mut tape, vec![2, 3], vec![7.5; 6]);
        let mean = tape.reduce_mean(c, &[0, 1]).unwrap();
        assert_eq!(tape.value(mean), &[7.5]);
        assert_eq!(tape.shape(mean), &[] as &[usize]);
    }

    #[test]
    fn reduce_max_tie_routes_to_lowest_index() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4], vec![2.0, 5.0, 5.0, 1.0]);
        let m = tape.reduce_max(x, 0).unwrap();
        let loss = tape.sum_all(m);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_quadratic_gives_two_x() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![1.0, -2.0, 0.5]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(EngineError::Contract(_))));
    }

    #[test]
    fn unreachable_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        let orphan = leaf(&mut tape, vec![3], vec![9.0; 3]);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(orphan).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn broadcast_backward_sums_over_broadcast_axes() {
        // y = x * s with s of shape [1, 2] against x [3, 2]; d(sum y)/ds
        // must equal the column sums of x.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = leaf(&mut tape, vec![1, 2], vec![2.0, -1.0]);
        let y = tape.mul(x, s).unwrap();
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[9.0, 12.0]);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -1.0, 2.0, -1.0, 2.0, -1.0]);
    }

    #[test]
    fn gather_accumulates_repeated_ids() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![5, 2], (0..10).map(|v| v as f64).collect());
        let rows = tape.gather_rows(table, &[3, 3]).unwrap();
        assert_eq!(tape.value(rows), &[6.0, 7.0, 6.0, 7.0]);
        let loss = tape.sum_all(rows);
        tape.backward(loss).unwrap();
        let g = tape.grad(table).unwrap();
        assert_eq!(&g[6..8], &[2.0, 2.0]);
        assert_eq!(&g[0..6], &[0.0; 6]);
    }

    #[test]
    fn gather_out_of_vocab_errors() {
        let mut tape = Tape::new();
        let table = leaf(&mut tape, vec![3, 2], vec![0.0; 6]);
        assert!(matches!(
            tape.gather_rows(table, &[5]),
            Err(EngineError::Lookup { id: 5, vocab: 3 })
        ));
    }

    #[test]
    fn concat_slice_roundtrip_gradients() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, vec![2, 3], vec![5.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
        let cat = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(cat), &[2, 5]);
        assert_eq!(
            tape.value(cat),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 3.0, 4.0, 8.0, 9.0, 10.0]
        );
        let right = tape.slice(cat, 1, 2, 3).unwrap();
        let loss = tape.sum_all(right);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0; 4]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut tape = Tape::new();
        let input = leaf(
            &mut tape,
            vec![2, 2, 2, 1],
            (1..=8).map(|v| v as f64).collect(),
        );
        let kernel = leaf(&mut tape, vec![1, 1, 1, 1, 1], vec![1.0]);
        let bias = tape.constant(vec![1], vec![0.0]).unwrap();
        let out = tape
            .conv3d(input, kernel, bias, [1, 1, 1], [0, 0, 0])
            .unwrap();
        assert_eq!(tape.value(out), tape.value(input));
    }

    #[test]
    fn conv3d_counting_kernel() {
        let mut tape = Tape::new();
        let input = leaf(&mut tape, vec![3, 3, 3, 1], vec![1.0; 27]);
        let kernel = leaf(&mut tape, vec![2, 2, 2, 1, 1], vec![1.0; 8]);
        let bias = tape.constant(vec![1], vec![0.0]).unwrap();
        let out = tape
            .conv3d(input, kernel, bias, [1, 1, 1], [0, 0, 0])
            .unwrap();
        assert_eq!(tape.shape(out), &[2, 2, 2, 1]);
        assert!(tape.value(out).iter().all(|&v| v == 8.0));
    }

    #[test]
    fn conv3d_kernel_too_large() {
        let mut tape = Tape::new();
        let input = leaf(&mut tape, vec![2, 2, 2, 1], vec![0.0; 8]);
        let kernel = leaf(&mut tape, vec![3, 1, 1, 1, 1], vec![0.0; 3]);
        let bias = tape.constant(vec![1], vec![0.0]).unwrap();
        assert!(tape
            .conv3d(input, kernel, bias, [1, 1, 1], [0, 0, 0])
            .is_err());
    }

    #[test]
    fn max_pool_same_ignores_padding() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 1, 3, 1], vec![-5.0, -2.0, -7.0]);
        let y = tape.max_pool3d_same(x, [1, 1, 3]).unwrap();
        // Padded -inf positions never win, so borders still pick real values.
        assert_eq!(tape.value(y), &[-2.0, -2.0, -2.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let x = leaf(&mut tape, vec![4], vec![0.3, -1.7, 2.2, 0.9]);
            let y = tape.tanh(x);
            let z = tape.softmax(y, 0).unwrap();
            tape.value(z).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
