//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution order,
//! which is already a topological order. [`Graph::backward`] replays the tape
//! in reverse. Graphs are built per forward pass and dropped afterwards.
//!
//! Nodes that do not depend on any trainable input are marked as not
//! requiring a gradient, and their backward rules are skipped entirely. This
//! is what makes frozen-backbone training cheap: no weight gradients are ever
//! formed for frozen parameters.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicBool, Ordering};

use crate::error::{dim_err, Error, Result};
use crate::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::real::Real;
use crate::tensor::{ParamId, ParamStore, Tensor};

static CORRUPT_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Mutation hook for the gradient checker's own test: when enabled, the key
/// gradient of [`Graph::batched_qk`] is deliberately scaled by 1.05.
pub fn set_corrupt_backward(on: bool) {
    CORRUPT_BACKWARD.store(on, Ordering::SeqCst);
}

fn corrupt_backward() -> bool {
    CORRUPT_BACKWARD.load(Ordering::Relaxed)
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Block structure shared by the multi-head score/mixing ops.
///
/// Queries are `batch * q_rows` rows of width `C`; keys/values are
/// `batch * k_rows` rows (or just `k_rows` when `kv_shared`). Heads split the
/// width into contiguous `C / heads` slices. Score tensors are laid out as
/// `(batch, head, q_row)` rows of `k_rows` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub batch: usize,
    pub heads: usize,
    pub q_rows: usize,
    pub k_rows: usize,
    pub kv_shared: bool,
}

impl HeadLayout {
    pub fn self_attention(batch: usize, heads: usize, seq: usize) -> Self {
        Self {
            batch,
            heads,
            q_rows: seq,
            k_rows: seq,
            kv_shared: false,
        }
    }

    pub fn score_rows(&self) -> usize {
        self.batch * self.heads * self.q_rows
    }

    #[inline]
    fn kv_block(&self, b: usize) -> usize {
        if self.kv_shared {
            0
        } else {
            b
        }
    }

    fn kv_blocks(&self) -> usize {
        if self.kv_shared {
            1
        } else {
            self.batch
        }
    }
}

enum Op<R> {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Silu(Var),
    Tanh(Var),
    Sum(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    MaskedFill {
        x: Var,
        mask: Arc<[bool]>,
    },
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv: Vec<R>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<R>,
        count: usize,
    },
    Rope {
        x: Var,
        seq: usize,
        heads: usize,
        cos: Vec<R>,
        sin: Vec<R>,
    },
    BatchedQK {
        q: Var,
        k: Var,
        layout: HeadLayout,
        scale: R,
    },
    BatchedPV {
        p: Var,
        v: Var,
        layout: HeadLayout,
    },
    ScaleHeads {
        s: Var,
        g: Var,
        layout: HeadLayout,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    param_leaves: BTreeMap<ParamId, Var>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_leaves: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
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

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// An input tensor. With `requires_grad`, its gradient can be read after
    /// `backward` via [`Graph::grad`].
    pub fn input(&mut self, t: Tensor<R>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.input(t, false)
    }

    /// A copy of `v`'s value cut off from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf bound to a stored parameter. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param, !p.frozen);
        self.param_leaves.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(dim_err("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![R::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(dim_err("transpose", self.shape(a), &[]));
        }
        let (m, n) = self.value(a).dims2();
        let src = self.value(a).data();
        let mut out = vec![R::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<R> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| *x * s).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t
            .data()
            .iter()
            .map(|&x| x / (R::one() + (-x).exp()))
            .collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x.tanh()).collect();
        let t = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<R>();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![1], vec![s]).expect("scalar"), Op::Sum(a), rg)
    }

    /// Gathers rows of `table` (shape `[vocab, C]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, c) = self.value(table).dims2();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { token: id, vocab });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Contract("concat of nothing".into()))?;
        let c = self.value(first).dims2().1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            if pc != c || self.shape(p).len() != 2 {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > r {
            return Err(dim_err("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Contract("concat of nothing".into()))?;
        let r = self.value(first).dims2().0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2();
            if pr != r {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if start + len > c {
            return Err(dim_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, rg))
    }

    /// Replace masked entries with `fill`. The mask covers `period` rows of
    /// the same width as `x` and is tiled down the rows of `x`.
    pub fn masked_fill(&mut self, x: Var, mask: Arc<[bool]>, fill: R) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if c == 0 || mask.len() % c != 0 || mask.is_empty() || r % (mask.len() / c) != 0 {
            return Err(dim_err("masked_fill", self.shape(x), &[mask.len()]));
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask[i % mask.len()] { fill } else { v })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaskedFill { x, mask }, rg))
    }

    /// Row-wise softmax with max subtraction. `-inf` entries get probability
    /// zero; a row that is entirely `-inf` is an error.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        let src = self.value(x).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(R::neg_infinity(), R::max);
            if m == R::neg_infinity() {
                return Err(Error::DegenerateRow { row: i });
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut s = R::zero();
            for (oj, &xj) in o.iter_mut().zip(row) {
                *oj = (xj - m).exp();
                s += *oj;
            }
            let inv = R::one() / s;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(x), rg))
    }

    /// `x / sqrt(mean(x²) + eps) ⊙ w` per row; `w` has shape `[C]`.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: R) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if self.value(w).len() != c || c == 0 {
            return Err(dim_err("rmsnorm", self.shape(x), self.shape(w)));
        }
        let src = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![R::zero(); r * c];
        let mut inv = vec![R::zero(); r];
        let cf = R::from_usize(c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| *v * *v).sum::<R>() / cf + eps;
            let s = if ms > R::zero() { R::one() / ms.sqrt() } else { R::zero() };
            inv[i] = s;
            for j in 0..c {
                out[i * c + j] = row[j] * s * wd[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::new(shape, out)?, Op::RmsNorm { x, w, inv }, rg))
    }

    /// Mean negative log-likelihood over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let (r, v) = self.value(logits).dims2();
        if targets.len() != r {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let src = self.value(logits).data();
        let mut probs = vec![R::zero(); r * v];
        let mut total = R::zero();
        let mut count = 0usize;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t >= v {
                return Err(Error::Vocabulary { token: t, vocab: v });
            }
            let row = &src[i * v..(i + 1) * v];
            let m = row.iter().copied().fold(R::neg_infinity(), R::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut s = R::zero();
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - m).exp();
                s += *pj;
            }
            let inv = R::one() / s;
            p.iter_mut().for_each(|q| *q *= inv);
            total += m + s.ln() - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let loss = total / R::from_usize(count);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Rotary position rotation of `x` (`batch * seq` rows, `heads` contiguous
    /// slices). Within each head, dimension `d` pairs with `d + head_dim/2`;
    /// the position of a row is its index modulo `seq`.
    pub fn rope(&mut self, x: Var, seq: usize, heads: usize, base: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2();
        if heads == 0 || seq == 0 || c % heads != 0 || (c / heads) % 2 != 0 || r % seq != 0 {
            return Err(dim_err("rope", self.shape(x), &[seq, heads]));
        }
        let hd = c / heads;
        let half = hd / 2;
        let mut cos = vec![R::zero(); seq * half];
        let mut sin = vec![R::zero(); seq * half];
        for p in 0..seq {
            for d in 0..half {
                let freq = libm_pow(base, -2.0 * d as f64 / hd as f64);
                let ang = p as f64 * freq;
                cos[p * half + d] = R::from_f64(num_traits::Float::cos(ang));
                sin[p * half + d] = R::from_f64(num_traits::Float::sin(ang));
            }
        }
        let src = self.value(x).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            let p = i % seq;
            for h in 0..heads {
                let o = i * c + h * hd;
                for d in 0..half {
                    let (cs, sn) = (cos[p * half + d], sin[p * half + d]);
                    let (x1, x2) = (src[o + d], src[o + d + half]);
                    out[o + d] = x1 * cs - x2 * sn;
                    out[o + d + half] = x1 * sn + x2 * cs;
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Rope {
                x,
                seq,
                heads,
                cos,
                sin,
            },
            rg,
        ))
    }

    fn check_layout(&self, op: &'static str, q: Var, k: Var, l: &HeadLayout) -> Result<(usize, usize)> {
        let (qr, c) = self.value(q).dims2();
        let (kr, kc) = self.value(k).dims2();
        if l.heads == 0
            || c != kc
            || c % l.heads != 0
            || qr != l.batch * l.q_rows
            || kr != l.kv_blocks() * l.k_rows
        {
            return Err(dim_err(op, self.shape(q), self.shape(k)));
        }
        Ok((c, c / l.heads))
    }

    /// Per-(batch, head) scores `scale · Qₕ Kₕᵀ`. Output has
    /// `batch * heads * q_rows` rows and `k_rows` columns.
    pub fn batched_qk(&mut self, q: Var, k: Var, layout: HeadLayout, scale: R) -> Result<Var> {
        let (c, hd) = self.check_layout("batched_qk", q, k, &layout)?;
        let HeadLayout {
            batch,
            heads,
            q_rows,
            k_rows,
            ..
        } = layout;
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let mut out = vec![R::zero(); batch * heads * q_rows * k_rows];
        for b in 0..batch {
            let kb = layout.kv_block(b);
            for h in 0..heads {
                for i in 0..q_rows {
                    let qo = (b * q_rows + i) * c + h * hd;
                    let qrow = &qd[qo..qo + hd];
                    let orow = ((b * heads + h) * q_rows + i) * k_rows;
                    for j in 0..k_rows {
                        let ko = (kb * k_rows + j) * c + h * hd;
                        out[orow + j] = scale * dot(qrow, &kd[ko..ko + hd]);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            Tensor::new(vec![batch * heads * q_rows, k_rows], out)?,
            Op::BatchedQK { q, k, layout, scale },
            rg,
        ))
    }

    /// Per-(batch, head) mixing `Pₕ Vₕ`, with heads concatenated back into
    /// `batch * q_rows` rows of width `C`.
    pub fn batched_pv(&mut self, p: Var, v: Var, layout: HeadLayout) -> Result<Var> {
        let (vr, c) = self.value(v).dims2();
        let (pr, pc) = self.value(p).dims2();
        if layout.heads == 0
            || c % layout.heads != 0
            || vr != layout.kv_blocks() * layout.k_rows
            || pr != layout.score_rows()
            || pc != layout.k_rows
        {
            return Err(dim_err("batched_pv", self.shape(p), self.shape(v)));
        }
        let hd = c / layout.heads;
        let HeadLayout {
            batch,
            heads,
            q_rows,
            k_rows,
            ..
        } = layout;
        let pd = self.value(p).data();
        let vd = self.value(v).data();
        let mut out = vec![R::zero(); batch * q_rows * c];
        for b in 0..batch {
            let kb = layout.kv_block(b);
            for h in 0..heads {
                for i in 0..q_rows {
                    let prow = &pd[((b * heads + h) * q_rows + i) * k_rows..][..k_rows];
                    let oo = (b * q_rows + i) * c + h * hd;
                    for (j, &pij) in prow.iter().enumerate() {
                        let vo = (kb * k_rows + j) * c + h * hd;
                        axpy(pij, &vd[vo..vo + hd], &mut out[oo..oo + hd]);
                    }
                }
            }
        }
        let rg = self.rg(p) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![batch * q_rows, c], out)?,
            Op::BatchedPV { p, v, layout },
            rg,
        ))
    }

    /// Multiply each head's score block by that head's entry of `g`. A
    /// one-element `g` scales every head.
    pub fn scale_heads(&mut self, s: Var, g: Var, layout: HeadLayout) -> Result<Var> {
        let (r, kc) = self.value(s).dims2();
        let gl = self.value(g).len();
        if r != layout.score_rows() || kc != layout.k_rows || !(gl == layout.heads || gl == 1) {
            return Err(dim_err("scale_heads", self.shape(s), self.shape(g)));
        }
        let gd = self.value(g).data();
        let src = self.value(s).data();
        let block = layout.q_rows * layout.k_rows;
        let out = src
            .iter()
            .enumerate()
            .map(|(idx, &x)| {
                let h = (idx / block) % layout.heads;
                x * gd[if gl == 1 { 0 } else { h }]
            })
            .collect();
        let shape = self.shape(s).to_vec();
        let rg = self.rg(s) || self.rg(g);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleHeads { s, g, layout }, rg))
    }

    /// Reverse-mode sweep from the scalar `loss`. Gradients of trainable
    /// parameters are added into `store`; gradients of every graph node stay
    /// readable through [`Graph::grad`] until the next call.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<R>) -> Result<()> {
        self.backward_inner(loss)?;
        for (&id, &v) in &self.param_leaves {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            if let Some(g) = &self.grads[v.0] {
                for (a, b) in p.grad.iter_mut().zip(g) {
                    *a += *b;
                }
            }
        }
        Ok(())
    }

    /// Backward without a parameter store (all leaves are plain inputs).
    pub fn backward_inputs(&mut self, loss: Var) -> Result<()> {
        self.backward_inner(loss)
    }

    fn backward_inner(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract("backward target must be a scalar".into()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<R>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        if self.rg(loss) {
            grads[loss.0] = Some(vec![R::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let need = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![R::zero(); len])
            }};
        }
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.dims2().1;
                if need(*a) {
                    gemm_nt(gout, val(*b), acc!(*a), m, n, k);
                }
                if need(*b) {
                    gemm_tn(val(*a), gout, acc!(*b), m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = nodes[a.0].value.dims2();
                let n = nodes[b.0].value.dims2().0;
                if need(*a) {
                    gemm_nn(gout, val(*b), acc!(*a), m, n, k);
                }
                if need(*b) {
                    gemm_tn(gout, val(*a), acc!(*b), m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = nodes[a.0].value.dims2();
                let g = acc!(*a);
                for r in 0..m {
                    for c in 0..n {
                        g[r * n + c] += gout[c * m + r];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        axpy(R::one(), gout, acc!(v));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if need(a) {
                    let bv = val(b);
                    let g = acc!(a);
                    for idx in 0..g.len() {
                        g[idx] += gout[idx] * bv[idx];
                    }
                }
                if need(b) {
                    let av = val(a);
                    let g = acc!(b);
                    for idx in 0..g.len() {
                        g[idx] += gout[idx] * av[idx];
                    }
                }
            }
            Op::Scale(a, s) => axpy(*s, gout, acc!(*a)),
            Op::Silu(a) => {
                let x = val(*a);
                let g = acc!(*a);
                for idx in 0..g.len() {
                    let s = R::one() / (R::one() + (-x[idx]).exp());
                    g[idx] += gout[idx] * s * (R::one() + x[idx] * (R::one() - s));
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                let g = acc!(*a);
                for idx in 0..g.len() {
                    g[idx] += gout[idx] * (R::one() - y[idx] * y[idx]);
                }
            }
            Op::Sum(a) => {
                let g = acc!(*a);
                g.iter_mut().for_each(|x| *x += gout[0]);
            }
            Op::Embedding { table, ids } => {
                let c = nodes[table.0].value.dims2().1;
                let g = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    axpy(R::one(), &gout[r * c..(r + 1) * c], &mut g[id * c..(id + 1) * c]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    if need(p) {
                        axpy(R::one(), &gout[off..off + len], acc!(p));
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = nodes[x.0].value.dims2().1;
                let g = acc!(*x);
                axpy(R::one(), gout, &mut g[start * c..start * c + gout.len()]);
            }
            Op::ConcatCols(parts) => {
                let (r, c) = out.dims2();
                let mut off = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.dims2().1;
                    if need(p) {
                        let g = acc!(p);
                        for row in 0..r {
                            axpy(
                                R::one(),
                                &gout[row * c + off..row * c + off + pc],
                                &mut g[row * pc..(row + 1) * pc],
                            );
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceCols { x, start } => {
                let c = nodes[x.0].value.dims2().1;
                let (r, len) = out.dims2();
                let g = acc!(*x);
                for row in 0..r {
                    axpy(
                        R::one(),
                        &gout[row * len..(row + 1) * len],
                        &mut g[row * c + start..row * c + start + len],
                    );
                }
            }
            Op::MaskedFill { x, mask } => {
                let g = acc!(*x);
                for idx in 0..g.len() {
                    if !mask[idx % mask.len()] {
                        g[idx] += gout[idx];
                    }
                }
            }
            Op::Softmax(x) => {
                let (r, c) = out.dims2();
                let y = out.data();
                let g = acc!(*x);
                for row in 0..r {
                    let yr = &y[row * c..(row + 1) * c];
                    let gr = &gout[row * c..(row + 1) * c];
                    let s = dot(yr, gr);
                    let dst = &mut g[row * c..(row + 1) * c];
                    for j in 0..c {
                        dst[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let (r, c) = out.dims2();
                let xd = val(*x);
                let wd = val(*w);
                let cf = R::from_usize(c);
                if need(*x) {
                    let g = acc!(*x);
                    for row in 0..r {
                        let s = inv[row];
                        let xr = &xd[row * c..(row + 1) * c];
                        let gr = &gout[row * c..(row + 1) * c];
                        let mut proj = R::zero();
                        for j in 0..c {
                            proj += gr[j] * wd[j] * xr[j];
                        }
                        let k = s * s * s / cf * proj;
                        for j in 0..c {
                            g[row * c + j] += s * gr[j] * wd[j] - k * xr[j];
                        }
                    }
                }
                if need(*w) {
                    let g = acc!(*w);
                    for row in 0..r {
                        let s = inv[row];
                        for j in 0..c {
                            g[j] += gout[row * c + j] * xd[row * c + j] * s;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = nodes[logits.0].value.dims2().1;
                let scale = gout[0] / R::from_usize(*count);
                let g = acc!(*logits);
                for (row, &t) in targets.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    let p = &probs[row * v..(row + 1) * v];
                    let dst = &mut g[row * v..(row + 1) * v];
                    for j in 0..v {
                        dst[j] += scale * p[j];
                    }
                    dst[t] -= scale;
                }
            }
            Op::Rope {
                x,
                seq,
                heads,
                cos,
                sin,
            } => {
                let (r, c) = out.dims2();
                let hd = c / heads;
                let half = hd / 2;
                let g = acc!(*x);
                for row in 0..r {
                    let p = row % seq;
                    for h in 0..*heads {
                        let o = row * c + h * hd;
                        for d in 0..half {
                            let (cs, sn) = (cos[p * half + d], sin[p * half + d]);
                            let (g1, g2) = (gout[o + d], gout[o + d + half]);
                            g[o + d] += g1 * cs + g2 * sn;
                            g[o + d + half] += -g1 * sn + g2 * cs;
                        }
                    }
                }
            }
            Op::BatchedQK { q, k, layout, scale } => {
                let c = nodes[q.0].value.dims2().1;
                let hd = c / layout.heads;
                let HeadLayout {
                    batch,
                    heads,
                    q_rows,
                    k_rows,
                    ..
                } = *layout;
                let qd = val(*q);
                let kd = val(*k);
                if need(*q) {
                    let g = acc!(*q);
                    for b in 0..batch {
                        let kb = layout.kv_block(b);
                        for h in 0..heads {
                            for i in 0..q_rows {
                                let grow = &gout[((b * heads + h) * q_rows + i) * k_rows..][..k_rows];
                                let qo = (b * q_rows + i) * c + h * hd;
                                for (j, &d) in grow.iter().enumerate() {
                                    let ko = (kb * k_rows + j) * c + h * hd;
                                    axpy(*scale * d, &kd[ko..ko + hd], &mut g[qo..qo + hd]);
                                }
                            }
                        }
                    }
                }
                if need(*k) {
                    let mut kscale = *scale;
                    if corrupt_backward() {
                        kscale *= R::from_f64(1.05);
                    }
                    let g = acc!(*k);
                    for b in 0..batch {
                        let kb = layout.kv_block(b);
                        for h in 0..heads {
                            for i in 0..q_rows {
                                let grow = &gout[((b * heads + h) * q_rows + i) * k_rows..][..k_rows];
                                let qo = (b * q_rows + i) * c + h * hd;
                                for (j, &d) in grow.iter().enumerate() {
                                    let ko = (kb * k_rows + j) * c + h * hd;
                                    axpy(kscale * d, &qd[qo..qo + hd], &mut g[ko..ko + hd]);
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchedPV { p, v, layout } => {
                let c = nodes[v.0].value.dims2().1;
                let hd = c / layout.heads;
                let HeadLayout {
                    batch,
                    heads,
                    q_rows,
                    k_rows,
                    ..
                } = *layout;
                let pd = val(*p);
                let vd = val(*v);
                if need(*p) {
                    let g = acc!(*p);
                    for b in 0..batch {
                        let kb = layout.kv_block(b);
                        for h in 0..heads {
                            for i in 0..q_rows {
                                let prow = ((b * heads + h) * q_rows + i) * k_rows;
                                let oo = (b * q_rows + i) * c + h * hd;
                                let grow = &gout[oo..oo + hd];
                                for j in 0..k_rows {
                                    let vo = (kb * k_rows + j) * c + h * hd;
                                    g[prow + j] += dot(grow, &vd[vo..vo + hd]);
                                }
                            }
                        }
                    }
                }
                if need(*v) {
                    let g = acc!(*v);
                    for b in 0..batch {
                        let kb = layout.kv_block(b);
                        for h in 0..heads {
                            for i in 0..q_rows {
                                let prow = &pd[((b * heads + h) * q_rows + i) * k_rows..][..k_rows];
                                let oo = (b * q_rows + i) * c + h * hd;
                                for (j, &pij) in prow.iter().enumerate() {
                                    let vo = (kb * k_rows + j) * c + h * hd;
                                    axpy(pij, &gout[oo..oo + hd], &mut g[vo..vo + hd]);
                                }
                            }
                        }
                    }
                }
            }
            Op::ScaleHeads { s, g: gate, layout } => {
                let gl = nodes[gate.0].value.len();
                let block = layout.q_rows * layout.k_rows;
                let head_of = |idx: usize| if gl == 1 { 0 } else { (idx / block) % layout.heads };
                if need(*s) {
                    let gd = val(*gate);
                    let g = acc!(*s);
                    for idx in 0..g.len() {
                        g[idx] += gout[idx] * gd[head_of(idx)];
                    }
                }
                if need(*gate) {
                    let sd = val(*s);
                    let g = acc!(*gate);
                    for idx in 0..gout.len() {
                        g[head_of(idx)] += gout[idx] * sd[idx];
                    }
                }
            }
        }
    }
}

fn libm_pow(base: f64, e: f64) -> f64 {
    num_traits::Float::powf(base, e)
}

#[cfg(test)]
mod tests;
