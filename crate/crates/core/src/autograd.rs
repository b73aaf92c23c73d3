//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s in creation
//! order, which is also a valid topological order. [`Graph::backward`] walks
//! the tape in reverse and returns a [`Gradients`] table indexed by `Var`.
//!
//! Attention, normalization and convolution are single fused nodes so the
//! tape stays short enough for desk-scale training.

use crate::error::{contract, Result};
use crate::flops::{FlopKind, FlopLedger};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, strides, Precision, Tensor};
use std::rc::Rc;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
        trans_b: bool,
    },
    Add(usize, usize),
    AddBroadcast(usize, usize),
    Mul(usize, usize),
    MulBroadcast(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: Option<usize>,
        beta: Option<usize>,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        groups: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        stride: usize,
        pad: usize,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Repeat(usize, usize),
    Stack(Vec<usize>),
    SumAxis(usize, usize),
    SumAll(usize),
    Rope {
        x: usize,
        table: Rc<RopeCache>,
    },
    MaskRows {
        x: usize,
        token: usize,
        mask: Vec<bool>,
    },
    ScaleRows {
        x: usize,
        factors: Vec<f64>,
    },
    SmoothL1 {
        pred: usize,
        target: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Precomputed rotary tables, `cos`/`sin` of shape `(len, dim/2)`.
#[derive(Debug, Clone)]
pub struct RopeCache {
    pub len: usize,
    pub half: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

/// Numerical epsilon used by every normalization.
pub const NORM_EPS: f64 = 1e-5;

pub struct Graph {
    nodes: Vec<Node>,
    precision: Precision,
    ledger: FlopLedger,
    stage: String,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::Double)
    }
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            ledger: FlopLedger::new(),
            stage: String::from("default"),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn ledger(&self) -> &FlopLedger {
        &self.ledger
    }

    pub fn take_ledger(&mut self) -> FlopLedger {
        std::mem::take(&mut self.ledger)
    }

    /// Name under which subsequent products are charged.
    pub fn set_stage(&mut self, stage: &str) {
        self.stage.clear();
        self.stage.push_str(stage);
    }

    pub fn stage(&self) -> &str {
        &self.stage
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.precision.round_slice(value.data_mut());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    // ----- products -------------------------------------------------------

    /// `a[..., m, k] · b[k, n]`; `b` is shared across all leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_kind(a, b, FlopKind::Dense)
    }

    pub fn matmul_kind(&mut self, a: Var, b: Var, kind: FlopKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() != 2 {
            return contract(format!("matmul expects a[..,m,k]·b[k,n], got {sa:?}·{sb:?}"));
        }
        let k = sa[sa.len() - 1];
        if sb[0] != k {
            return contract(format!("matmul inner extents differ: {sa:?}·{sb:?}"));
        }
        let n = sb[1];
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; m * n];
        gemm_acc(self.data(a.0), self.data(b.0), &mut out, m, k, n);
        let stage = self.stage.clone();
        self.ledger.charge_matmul(&stage, kind, 1, m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch: 1,
                m,
                k,
                n,
                b_batched: false,
                trans_b: false,
            },
            rg,
        ))
    }

    /// Batched product over matching leading dims. With `trans_b` the right
    /// operand is read as `[..., n, k]` and transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool, kind: FlopKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 3 || sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return contract(format!("bmm leading dims differ: {sa:?} vs {sb:?}"));
        }
        let r = sa.len();
        let (m, k) = (sa[r - 2], sa[r - 1]);
        let (kb, n) = if trans_b {
            (sb[r - 1], sb[r - 2])
        } else {
            (sb[r - 2], sb[r - 1])
        };
        if kb != k {
            return contract(format!("bmm inner extents differ: {sa:?} vs {sb:?}"));
        }
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let da = self.data(a.0);
            let db = self.data(b.0);
            for t in 0..batch {
                let ab = &da[t * m * k..(t + 1) * m * k];
                let bb = &db[t * k * n..(t + 1) * k * n];
                let ob = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    gemm_nt_acc(ab, bb, ob, m, k, n);
                } else {
                    gemm_acc(ab, bb, ob, m, k, n);
                }
            }
        }
        let stage = self.stage.clone();
        self.ledger.charge_matmul(&stage, kind, batch, m, k, n);
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                b_batched: true,
                trans_b,
            },
            rg,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return contract(format!("add shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a.0).iter().zip(self.data(b.0)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    fn check_suffix(&self, a: Var, b: Var) -> Result<usize> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return contract(format!("cannot broadcast {sb:?} onto {sa:?}"));
        }
        Ok(sb.iter().product())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix(a, b)?;
        let db = self.data(b.0);
        let out: Vec<f64> = self
            .data(a.0)
            .iter()
            .enumerate()
            .map(|(i, x)| x + db[i % inner])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::AddBroadcast(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return contract(format!("mul shapes differ: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.data(a.0).iter().zip(self.data(b.0)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// `a ⊙ b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix(a, b)?;
        let db = self.data(b.0);
        let out: Vec<f64> = self
            .data(a.0)
            .iter()
            .enumerate()
            .map(|(i, x)| x * db[i % inner])
            .collect();
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::MulBroadcast(a.0, b.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(t, Op::Scale(a.0, s), rg)
    }

    /// Exact (erf) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.data(a.0).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a);
        let t = Tensor::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(t, Op::Gelu(a.0), rg)
    }

    /// Max-stabilized softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return contract("softmax over an empty axis");
        }
        let x = self.data(a.0);
        if x.iter().any(|v| !v.is_finite()) {
            return contract("softmax input is not finite");
        }
        let mut out = x.to_vec();
        softmax_rows(&mut out, d);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a.0), rg))
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 {
            return contract("layer_norm over an empty axis");
        }
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [d] {
                return contract(format!("layer_norm affine shape {:?} != [{d}]", self.shape(p)));
            }
        }
        let xs = self.data(x.0);
        let rows = xs.len() / d;
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = rs;
            for (o, v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let gd = self.data(g.0);
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gd[i % d];
            }
        }
        if let Some(b) = beta {
            let bd = self.data(b.0);
            for (i, o) in out.iter_mut().enumerate() {
                *o += bd[i % d];
            }
        }
        let rg = self.rg(x) || gamma.is_some_and(|g| self.rg(g)) || beta.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.map(|v| v.0),
                beta: beta.map(|v| v.0),
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Group normalization of `x[N, C, L]` with per-channel affine terms.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return contract(format!("group_norm expects [N, C, L], got {shape:?}"));
        }
        let (n, c, l) = (shape[0], shape[1], shape[2]);
        if groups == 0 || c % groups != 0 {
            return crate::error::config(format!("group_norm: {c} channels not divisible into {groups} groups"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return contract("group_norm affine terms must have one entry per channel");
        }
        let gsize = (c / groups) * l;
        let xs = self.data(x.0);
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; n * groups];
        for gi in 0..n * groups {
            let blk = &xs[gi * gsize..(gi + 1) * gsize];
            let mean = blk.iter().sum::<f64>() / gsize as f64;
            let var = blk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
            let rs = 1.0 / (var + NORM_EPS).sqrt();
            rstd[gi] = rs;
            for (o, v) in xhat[gi * gsize..(gi + 1) * gsize].iter_mut().zip(blk) {
                *o = (v - mean) * rs;
            }
        }
        let gd = self.data(gamma.0);
        let bd = self.data(beta.0);
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let ch = (i / l) % c;
                v * gd[ch] + bd[ch]
            })
            .collect();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GroupNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                groups,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// 1-D convolution of `x[N, Cin, L]` with `w[Cout, Cin, K]` and bias `b[Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] || self.shape(b) != [sw[0]] {
            return contract(format!("conv1d shapes incompatible: x {sx:?}, w {sw:?}"));
        }
        let (n, cin, l) = (sx[0], sx[1], sx[2]);
        let (cout, k) = (sw[0], sw[2]);
        let lout = conv_out_len(l, k, stride, pad)?;
        let ck = cin * k;
        let cols = im2col(self.data(x.0), n, cin, l, k, stride, pad, lout);
        let mut rows = vec![0.0; n * lout * cout];
        gemm_nt_acc(&cols, self.data(w.0), &mut rows, n * lout, ck, cout);
        let bs = self.data(b.0);
        let mut out = vec![0.0; n * cout * lout];
        for s in 0..n {
            for t in 0..lout {
                let r = &rows[(s * lout + t) * cout..(s * lout + t + 1) * cout];
                for (o, v) in r.iter().enumerate() {
                    out[(s * cout + o) * lout + t] = v + bs[o];
                }
            }
        }
        let stage = self.stage.clone();
        self.ledger
            .charge_matmul(&stage, FlopKind::Dense, 1, n * lout, cin * k, cout);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![n, cout, lout], out)?,
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                stride,
                pad,
            },
            rg,
        ))
    }

    // ----- layout -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a.0), rg))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return contract(format!("invalid permutation {perm:?} for rank {}", shape.len()));
        }
        let (data, new_shape) = permute_data(self.data(a.0), &shape, perm);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, data)?, Op::Permute(a.0, perm.to_vec()), rg))
    }

    /// Prepend an axis of extent `n` by repetition.
    pub fn repeat(&mut self, a: Var, n: usize) -> Var {
        let src = self.data(a.0);
        let mut out = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape(a));
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out).expect("repeat"), Op::Repeat(a.0, n), rg)
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return contract("stack of zero tensors");
        };
        let inner = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(inner.iter().product::<usize>() * parts.len());
        for p in parts {
            if self.shape(*p) != inner.as_slice() {
                return contract("stack operands differ in shape");
            }
            out.extend_from_slice(self.data(p.0));
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let rg = parts.iter().any(|p| self.rg(*p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Stack(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return contract(format!("axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(a.0);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::SumAxis(a.0, axis), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a.0).iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a.0), rg)
    }

    // ----- model-specific fused ops ----------------------------------------

    /// Rotate consecutive pairs of the last axis of `x[..., len, dim]` by the
    /// angles cached for each position along the second-to-last axis.
    pub fn rope(&mut self, x: Var, table: Rc<RopeCache>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != 2 * table.half || shape[r - 2] > table.len {
            return contract(format!(
                "rope table ({} positions, dim {}) does not fit {shape:?}",
                table.len,
                2 * table.half
            ));
        }
        let (s, d) = (shape[r - 2], shape[r - 1]);
        let mut out = self.data(x.0).to_vec();
        rope_apply(&mut out, s, d, &table, false);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Rope { x: x.0, table }, rg))
    }

    /// Replace the rows of `x[..., E]` flagged in `mask` with `token[E]`.
    pub fn mask_rows(&mut self, x: Var, token: Var, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let e = *shape.last().unwrap_or(&0);
        if self.shape(token) != [e] || mask.len() * e != self.value(x).len() {
            return contract("mask_rows: token or mask does not match rows");
        }
        let tok = self.data(token.0).to_vec();
        let mut out = self.data(x.0).to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * e..(r + 1) * e].copy_from_slice(&tok);
            }
        }
        let rg = self.rg(x) || self.rg(token);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MaskRows {
                x: x.0,
                token: token.0,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Multiply each slice along the leading axis by its own factor.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&factors.len()) {
            return contract("scale_rows: one factor per leading index required");
        }
        let inner = self.value(x).len() / factors.len().max(1);
        let out: Vec<f64> = self
            .data(x.0)
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / inner])
            .collect();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScaleRows {
                x: x.0,
                factors: factors.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ wᵢ · SmoothL1(predᵢ, targetᵢ)` with transition `beta`.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], weights: &[f64], beta: f64) -> Result<Var> {
        let p = self.data(pred.0);
        if p.len() != target.len() || p.len() != weights.len() {
            return contract("smooth_l1: prediction, target and weights differ in length");
        }
        if beta <= 0.0 {
            return crate::error::config("smooth_l1 requires beta > 0");
        }
        let loss: f64 = p
            .iter()
            .zip(target)
            .zip(weights)
            .filter(|(_, &w)| w != 0.0)
            .map(|((a, b), w)| w * smooth_l1(a - b, beta))
            .sum();
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothL1 {
                pred: pred.0,
                target: target.to_vec(),
                weights: weights.to_vec(),
                beta,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits[B, K]` against integer targets with
    /// label smoothing `eps` (target mass `1-eps` on the class plus `eps/K`
    /// spread uniformly).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return contract(format!("cross_entropy expects [B, K] logits, got {shape:?}"));
        }
        let (b, k) = (shape[0], shape[1]);
        if targets.iter().any(|&t| t >= k) {
            return contract("cross_entropy target out of range");
        }
        let mut dist = vec![eps / k as f64; b * k];
        for (i, &t) in targets.iter().enumerate() {
            dist[i * k + t] += 1.0 - eps;
        }
        let x = self.data(logits.0);
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x[i * k..(i + 1) * k];
            let lse = log_sum_exp(row);
            for j in 0..k {
                loss -= dist[i * k + j] * (row[j] - lse);
            }
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: dist,
            },
            rg,
        ))
    }

    // ----- reverse pass -----------------------------------------------------

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
                trans_b,
            } => {
                let (a, b, batch, m, k, n) = (*a, *b, *batch, *m, *k, *n);
                let ad = self.data(a);
                let bd = self.data(b);
                if self.wants(a) {
                    let da = acc(grads, a, ad.len());
                    for t in 0..batch {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let bb = if *b_batched {
                            &bd[t * k * n..(t + 1) * k * n]
                        } else {
                            bd
                        };
                        let out = &mut da[t * m * k..(t + 1) * m * k];
                        if *trans_b {
                            gemm_acc(gb, bb, out, m, n, k);
                        } else {
                            gemm_nt_acc(gb, bb, out, m, n, k);
                        }
                    }
                }
                if self.wants(b) {
                    let db = acc(grads, b, bd.len());
                    for t in 0..batch {
                        let gb = &g[t * m * n..(t + 1) * m * n];
                        let ab = &ad[t * m * k..(t + 1) * m * k];
                        let out = if *b_batched {
                            &mut db[t * k * n..(t + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        if *trans_b {
                            gemm_tn_acc(gb, ab, out, n, m, k);
                        } else {
                            gemm_tn_acc(ab, gb, out, k, m, n);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if self.wants(p) {
                        add_into(acc(grads, p, g.len()), g);
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if self.wants(*b) {
                    let inner = self.nodes[*b].value.len();
                    let db = acc(grads, *b, inner);
                    for (j, v) in g.iter().enumerate() {
                        db[j % inner] += v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.wants(a) {
                    let bd = self.data(b).to_vec();
                    let da = acc(grads, a, g.len());
                    for ((d, gv), bv) in da.iter_mut().zip(g).zip(&bd) {
                        *d += gv * bv;
                    }
                }
                if self.wants(b) {
                    let ad = self.data(a).to_vec();
                    let db = acc(grads, b, g.len());
                    for ((d, gv), av) in db.iter_mut().zip(g).zip(&ad) {
                        *d += gv * av;
                    }
                }
            }
            Op::MulBroadcast(a, b) => {
                let (a, b) = (*a, *b);
                let inner = self.nodes[b].value.len();
                if self.wants(a) {
                    let bd = self.data(b).to_vec();
                    let da = acc(grads, a, g.len());
                    for (j, (d, gv)) in da.iter_mut().zip(g).enumerate() {
                        *d += gv * bd[j % inner];
                    }
                }
                if self.wants(b) {
                    let ad = self.data(a).to_vec();
                    let db = acc(grads, b, inner);
                    for (j, gv) in g.iter().enumerate() {
                        db[j % inner] += gv * ad[j];
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.wants(*a) {
                    let da = acc(grads, *a, g.len());
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv * s;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.wants(*a) {
                    let xs = self.data(*a).to_vec();
                    let da = acc(grads, *a, g.len());
                    for ((d, gv), x) in da.iter_mut().zip(g).zip(xs) {
                        *d += gv * gelu_grad(x);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.wants(*a) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let da = acc(grads, *a, g.len());
                    for r in 0..y.len() / d {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..d {
                            da[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let rows = xhat.len() / d;
                let gam = gamma.map(|gi| self.data(gi).to_vec());
                if let Some(gi) = gamma {
                    if self.wants(*gi) {
                        let dg = acc(grads, *gi, d);
                        for (j, gv) in g.iter().enumerate() {
                            dg[j % d] += gv * xhat[j];
                        }
                    }
                }
                if let Some(bi) = beta {
                    if self.wants(*bi) {
                        let db = acc(grads, *bi, d);
                        for (j, gv) in g.iter().enumerate() {
                            db[j % d] += gv;
                        }
                    }
                }
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g[r * d + j];
                            dxhat[j] = match &gam {
                                Some(gm) => gv * gm[j],
                                None => gv,
                            };
                        }
                        norm_backward(&dxhat, &xhat[r * d..(r + 1) * d], rstd[r], &mut dx[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                rstd,
            } => {
                let shape = node.value.shape();
                let (c, l) = (shape[1], shape[2]);
                let gam = self.data(*gamma).to_vec();
                if self.wants(*gamma) {
                    let dg = acc(grads, *gamma, c);
                    for (j, gv) in g.iter().enumerate() {
                        dg[(j / l) % c] += gv * xhat[j];
                    }
                }
                if self.wants(*beta) {
                    let db = acc(grads, *beta, c);
                    for (j, gv) in g.iter().enumerate() {
                        db[(j / l) % c] += gv;
                    }
                }
                if self.wants(*x) {
                    let gsize = (c / groups) * l;
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; gsize];
                    for (gi, rs) in rstd.iter().enumerate() {
                        let base = gi * gsize;
                        for (j, dh) in dxhat.iter_mut().enumerate() {
                            let ch = ((base + j) / l) % c;
                            *dh = g[base + j] * gam[ch];
                        }
                        norm_backward(&dxhat, &xhat[base..base + gsize], *rs, &mut dx[base..base + gsize]);
                    }
                }
            }
            Op::Conv1d { x, w, b, stride, pad } => {
                let sx = self.nodes[*x].value.shape().to_vec();
                let sw = self.nodes[*w].value.shape().to_vec();
                let (n, cin, l) = (sx[0], sx[1], sx[2]);
                let (cout, k) = (sw[0], sw[2]);
                let lout = node.value.shape()[2];
                let ck = cin * k;
                if self.wants(*b) {
                    let db = acc(grads, *b, cout);
                    for (j, gv) in g.iter().enumerate() {
                        db[(j / lout) % cout] += gv;
                    }
                }
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                // gradient rows [N·Lout, Cout]
                let mut grows = vec![0.0; n * lout * cout];
                for s in 0..n {
                    for o in 0..cout {
                        for t in 0..lout {
                            grows[(s * lout + t) * cout + o] = g[(s * cout + o) * lout + t];
                        }
                    }
                }
                let wlen = cout * ck;
                let xlen = n * cin * l;
                let mut dw = vec![0.0; if want_w { wlen } else { 0 }];
                let mut dx = vec![0.0; if want_x { xlen } else { 0 }];
                if want_w {
                    let cols = im2col(self.data(*x), n, cin, l, k, *stride, *pad, lout);
                    gemm_tn_acc(&grows, &cols, &mut dw, cout, n * lout, ck);
                }
                if want_x {
                    let mut dcols = vec![0.0; n * lout * ck];
                    gemm_acc(&grows, self.data(*w), &mut dcols, n * lout, cout, ck);
                    col2im(&dcols, &mut dx, n, cin, l, k, *stride, *pad, lout);
                }
                if want_w {
                    add_into(acc(grads, *w, wlen), &dw);
                }
                if want_x {
                    add_into(acc(grads, *x, xlen), &dx);
                }
            }
            Op::Reshape(a) => {
                if self.wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
            }
            Op::Permute(a, perm) => {
                if self.wants(*a) {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let (back, _) = permute_data(g, node.value.shape(), &inv);
                    add_into(acc(grads, *a, g.len()), &back);
                }
            }
            Op::Repeat(a, n) => {
                if self.wants(*a) {
                    let inner = g.len() / n;
                    let da = acc(grads, *a, inner);
                    for (j, gv) in g.iter().enumerate() {
                        da[j % inner] += gv;
                    }
                }
            }
            Op::Stack(parts) => {
                let inner = g.len() / parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    if self.wants(p) {
                        add_into(acc(grads, p, inner), &g[pi * inner..(pi + 1) * inner]);
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                if self.wants(*a) {
                    let shape = self.nodes[*a].value.shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let mid = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let da = acc(grads, *a, outer * mid * inner);
                    for o in 0..outer {
                        for m in 0..mid {
                            let base = (o * mid + m) * inner;
                            for i in 0..inner {
                                da[base + i] += g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if self.wants(*a) {
                    let n = self.nodes[*a].value.len();
                    let da = acc(grads, *a, n);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Rope { x, table } => {
                if self.wants(*x) {
                    let shape = node.value.shape();
                    let r = shape.len();
                    let mut back = g.to_vec();
                    rope_apply(&mut back, shape[r - 2], shape[r - 1], table, true);
                    add_into(acc(grads, *x, g.len()), &back);
                }
            }
            Op::MaskRows { x, token, mask } => {
                let e = self.nodes[*token].value.len();
                if self.wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            add_into(&mut dx[r * e..(r + 1) * e], &g[r * e..(r + 1) * e]);
                        }
                    }
                }
                if self.wants(*token) {
                    let dt = acc(grads, *token, e);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            add_into(dt, &g[r * e..(r + 1) * e]);
                        }
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                if self.wants(*x) {
                    let inner = g.len() / factors.len();
                    let dx = acc(grads, *x, g.len());
                    for (j, (d, gv)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gv * factors[j / inner];
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                target,
                weights,
                beta,
            } => {
                if self.wants(*pred) {
                    let p = self.data(*pred).to_vec();
                    let dp = acc(grads, *pred, p.len());
                    for j in 0..p.len() {
                        if weights[j] != 0.0 {
                            dp[j] += g[0] * weights[j] * smooth_l1_grad(p[j] - target[j], *beta);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.wants(*logits) {
                    let shape = self.nodes[*logits].value.shape();
                    let (b, k) = (shape[0], shape[1]);
                    let mut probs = self.data(*logits).to_vec();
                    softmax_rows(&mut probs, k);
                    let dl = acc(grads, *logits, b * k);
                    for j in 0..b * k {
                        dl[j] += g[0] * (probs[j] - targets[j]) / b as f64;
                    }
                }
            }
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], |g| g.to_vec())
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Shared backward of a standardization given `dL/dxhat`.
fn norm_backward(dxhat: &[f64], xhat: &[f64], rstd: f64, dx: &mut [f64]) {
    let n = dxhat.len() as f64;
    let sum: f64 = dxhat.iter().sum();
    let dot: f64 = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum();
    for ((d, dh), xh) in dx.iter_mut().zip(dxhat).zip(xhat) {
        *d += rstd / n * (n * dh - sum - xh * dot);
    }
}

pub(crate) fn softmax_rows(x: &mut [f64], d: usize) {
    for row in x.chunks_mut(d) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
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

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)) + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Piecewise Smooth-L1 of a residual `d`: `0.5·d²` inside `|d| < beta`,
/// `beta·|d| − 0.5·beta²` outside.
pub fn smooth_l1(d: f64, beta: f64) -> f64 {
    let a = d.abs();
    if a < beta {
        0.5 * d * d
    } else {
        beta * a - 0.5 * beta * beta
    }
}

fn smooth_l1_grad(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d
    } else {
        beta * d.signum()
    }
}

/// Unfold `x[N, Cin, L]` into rows `[N·Lout, Cin·K]` with zero padding.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], n: usize, cin: usize, l: usize, k: usize, stride: usize, pad: usize, lout: usize) -> Vec<f64> {
    let ck = cin * k;
    let mut cols = vec![0.0; n * lout * ck];
    for s in 0..n {
        for t in 0..lout {
            let row = &mut cols[(s * lout + t) * ck..(s * lout + t + 1) * ck];
            let start = (t * stride) as isize - pad as isize;
            for c in 0..cin {
                let xrow = &x[(s * cin + c) * l..(s * cin + c + 1) * l];
                for j in 0..k {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < l {
                        row[c * k + j] = xrow[idx as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add rows back onto `dx[N, Cin, L]`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    dx: &mut [f64],
    n: usize,
    cin: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) {
    let ck = cin * k;
    for s in 0..n {
        for t in 0..lout {
            let row = &cols[(s * lout + t) * ck..(s * lout + t + 1) * ck];
            let start = (t * stride) as isize - pad as isize;
            for c in 0..cin {
                for j in 0..k {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < l {
                        dx[(s * cin + c) * l + idx as usize] += row[c * k + j];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv_out_len(l: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 || l + 2 * pad < k {
        return crate::error::config(format!(
            "convolution with kernel {k}, stride {stride}, padding {pad} does not fit length {l}"
        ));
    }
    Ok((l + 2 * pad - k) / stride + 1)
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let new_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides = strides(shape);
    let moved: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += moved[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            off -= moved[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

fn rope_apply(x: &mut [f64], s: usize, d: usize, table: &RopeCache, inverse: bool) {
    let half = d / 2;
    for (r, row) in x.chunks_mut(d).enumerate() {
        let pos = r % s;
        let cs = &table.cos[pos * half..(pos + 1) * half];
        let sn = &table.sin[pos * half..(pos + 1) * half];
        for i in 0..half {
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            let (c, si) = (cs[i], if inverse { -sn[i] } else { sn[i] });
            row[2 * i] = a * c - b * si;
            row[2 * i + 1] = a * si + b * c;
        }
    }
}
