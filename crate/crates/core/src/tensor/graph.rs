use std::collections::BTreeMap;

use super::kernels::{self, gemm, transpose};
use super::{c, Element, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Category under which a matrix product's multiply-accumulates are counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MacTag {
    /// `Q·Kᵀ` and `attention·V` products of an attention over the x axis
    /// (or over the whole token set for a flat attention).
    ScoreX,
    /// The same two products for an attention over the y axis.
    ScoreY,
    /// Input/output projections of attention.
    Projection,
    Other,
}

/// Multiply-accumulate counters collected while recording a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub score_x: u64,
    pub score_y: u64,
    pub projection: u64,
    pub other: u64,
}

impl MacCounter {
    pub fn score(&self) -> u64 {
        self.score_x + self.score_y
    }

    fn add(&mut self, tag: MacTag, n: u64) {
        match tag {
            MacTag::ScoreX => self.score_x += n,
            MacTag::ScoreY => self.score_y += n,
            MacTag::Projection => self.projection += n,
            MacTag::Other => self.other += n,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BatchMode {
    /// Right operand is a single matrix shared by every leading index of the left.
    Flat,
    /// Left operand is a single matrix shared by every leading index of the right.
    LeftShared,
    /// Equal leading extents.
    Batched,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, mode: BatchMode },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Relu(Var),
    Tanh(Var),
    Softplus(Var),
    Abs(Var),
    Cos(Var),
    Sin(Var),
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Select { a: Var, idx: Vec<usize> },
    Embedding { table: Var, ids: Vec<usize> },
    Conv3x3 { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, inner: usize },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T>, valid: Vec<bool>, count: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Reverse-mode tape. Operations are recorded in execution order, so every
/// operand index is smaller than the index of the node that consumes it.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    macs: MacCounter,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

const LN_EPS: f64 = 1e-5;
const BN_EPS: f64 = 1e-5;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: MacCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn macs(&self) -> MacCounter {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = MacCounter::default();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf, false)
    }

    /// Free leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// Trainable parameter leaf copied from `store`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?
            .clone();
        let v = self.push("param", t, Op::Leaf, true)?;
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    // ---------------------------------------------------------------- linear algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_tagged(a, b, MacTag::Other)
    }

    /// Batched matrix product `[.., M, K] · [.., K, N] -> [.., M, N]`.
    pub fn matmul_tagged(&mut self, a: Var, b: Var, tag: MacTag) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = sb[sb.len() - 1];
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let (mode, lead) = if sb.len() == 2 {
            (BatchMode::Flat, sa[..sa.len() - 2].to_vec())
        } else if sa.len() == 2 {
            (BatchMode::LeftShared, sb[..sb.len() - 2].to_vec())
        } else if sa[..sa.len() - 2] == sb[..sb.len() - 2] {
            (BatchMode::Batched, sa[..sa.len() - 2].to_vec())
        } else {
            return Err(Error::shape("matmul", &sa, &sb));
        };
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let batch = batch_a.max(batch_b);
        let mut out = vec![T::zero(); batch * m * n];
        match mode {
            BatchMode::Flat => gemm(batch_a * m, k, n, ad, bd, &mut out),
            BatchMode::LeftShared => {
                for i in 0..batch_b {
                    gemm(m, k, n, ad, &bd[i * k * n..(i + 1) * k * n], &mut out[i * m * n..(i + 1) * m * n]);
                }
            }
            BatchMode::Batched => {
                for i in 0..batch_a {
                    gemm(
                        m,
                        k,
                        n,
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                    );
                }
            }
        }
        self.macs.add(tag, (batch * m * k * n) as u64);
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b, mode }, rg)
    }

    // ---------------------------------------------------------------- elementwise

    /// `a + b`, where `b`'s shape must equal a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bd = self.value(b).data();
        let bn = bd.len();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(bn) {
            for (o, &v) in chunk.iter_mut().zip(bd) {
                *o += v;
            }
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("add", t, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("sub", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x - y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("sub", t, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push("mul", t, Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor: T = c(factor);
        let t = self.value(a).map(|v| v * factor);
        let rg = self.requires(a);
        self.push("scale", t, Op::Scale { a, factor }, rg)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let t = self.value(a).map(f);
        let rg = self.requires(a);
        self.push(name, t, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |v| v.tanh(), Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, |v| v.abs(), Op::Abs(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary("cos", a, |v| v.cos(), Op::Cos(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary("sin", a, |v| v.sin(), Op::Sin(a))
    }

    // ---------------------------------------------------------------- normalisation

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        let rg = self.requires(a);
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { a, outer, len, inner }, rg)
    }

    /// Layer normalisation over the last axis followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        let dn: T = c(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + c(LN_EPS)).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            rg,
        )
    }

    /// Inference-mode batch normalisation over axis 1 with stored statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Contract(format!("batch_norm needs rank >= 2, got {shape:?}")));
        }
        let ch = shape[1];
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] || mean.len() != ch || var.len() != ch {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let inner: usize = shape[2..].iter().product();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + c(BN_EPS)).sqrt()).collect();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for (i, &v) in xd.iter().enumerate() {
            let ci = (i / inner) % ch;
            let h = (v - mean[ci]) * inv_std[ci];
            xhat[i] = h;
            out[i] = h * gd[ci] + bd[ci];
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push(
            "batch_norm",
            Tensor::new(shape, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, inner },
            rg,
        )
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.requires(a);
        self.push("reshape", t, Op::Reshape(a), rg)
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..shape.len()).collect::<Vec<_>>() {
            return Err(Error::Contract(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let (out_shape, out) = kernels::permute(&shape, perm, self.value(a).data());
        let rg = self.requires(a);
        self.push("permute", Tensor::new(out_shape, out)?, Op::Permute { a, perm: perm.to_vec() }, rg)
    }

    /// Gathers positions `idx` of the last axis: `out[.., i] = a[.., idx[i]]`.
    pub fn select(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape.last().expect("rank >= 1");
        if idx.is_empty() || idx.iter().any(|&i| i >= d) {
            return Err(Error::Contract(format!("select indices out of range for last axis {d}")));
        }
        let x = self.value(a).data();
        let rows = x.len() / d;
        let mut out = Vec::with_capacity(rows * idx.len());
        for r in 0..rows {
            out.extend(idx.iter().map(|&i| x[r * d + i]));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = idx.len();
        let rg = self.requires(a);
        self.push("select", Tensor::new(out_shape, out)?, Op::Select { a, idx: idx.to_vec() }, rg)
    }

    /// Row lookup `table[ids[i]]`, output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Contract(format!("embedding table must be rank 2, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Contract(format!("token id {bad} outside table of {v} rows")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let rg = self.requires(table);
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    // ---------------------------------------------------------------- convolution

    /// 3×3 convolution, stride 1, zero padding 1. `x: [B, C_in, H, W]`,
    /// `w: [C_out, C_in, 3, 3]`, `b: [C_out]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != 3 || sw[3] != 3 {
            return Err(Error::shape("conv3x3", &sx, &sw));
        }
        let (bsz, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let co = sw[0];
        if self.shape(b) != [co] {
            return Err(Error::shape("conv3x3 bias", &sw, self.shape(b)));
        }
        let hw = h * wd;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); bsz * co * hw];
        for bi in 0..bsz {
            let cols = im2col(&xd[bi * ci * hw..(bi + 1) * ci * hw], ci, h, wd);
            let o = &mut out[bi * co * hw..(bi + 1) * co * hw];
            for (oc, chunk) in o.chunks_mut(hw).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bd[oc]);
            }
            gemm(co, ci * 9, hw, wdat, &cols, o);
        }
        self.macs.add(MacTag::Other, (bsz * co * ci * 9 * hw) as u64);
        let rg = self.requires(x) || self.requires(w) || self.requires(b);
        self.push("conv3x3", Tensor::new(vec![bsz, co, h, wd], out)?, Op::Conv3x3 { x, w, b }, rg)
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || sx[2] < 2 || sx[3] < 2 {
            return Err(Error::Contract(format!("max_pool2 needs [B, C, H>=2, W>=2], got {sx:?}")));
        }
        let (bc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        for p in 0..bc {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.requires(x);
        self.push(
            "max_pool2",
            Tensor::new(vec![sx[0], sx[1], oh, ow], out)?,
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.requires(a);
        self.push("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n: T = c(self.value(a).numel() as f64);
        let s = self.value(a).data().iter().copied().sum::<T>() / n;
        let rg = self.requires(a);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean token-level cross-entropy of `logits: [.., C]` against `targets`,
    /// skipping positions where `valid` is false.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().expect("rank >= 1");
        let rows = self.value(logits).numel() / classes;
        if targets.len() != rows || valid.len() != rows {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        if targets.iter().zip(valid).any(|(&t, &ok)| ok && t >= classes) {
            return Err(Error::Contract("cross_entropy target outside class range".into()));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy with no valid positions".into()));
        }
        let x = self.value(logits).data();
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..classes {
                probs[r * classes + j] = (row[j] - lse).exp();
            }
            if valid[r] {
                loss += lse - row[targets[r]];
            }
        }
        loss = loss / c(count as f64);
        let rg = self.requires(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                valid: valid.to_vec(),
                count,
            },
            rg,
        )
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, node) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of node with shape {:?}",
                        node.value.shape()
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates parameter gradients into
    /// `store`. Trainable parameters not reachable from `loss` receive zeros.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.backward(loss)?;
        store.ensure_grads();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(name), Some(g)) = (&node.param, &grads.grads[i]) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, mode } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let (ad, bd) = (val(*a), val(*b));
                let need_a = self.requires(*a);
                let need_b = self.requires(*b);
                match mode {
                    BatchMode::Flat => {
                        let rows = ad.len() / k;
                        if need_a {
                            let bt = transpose(k, n, bd);
                            let mut da = vec![T::zero(); rows * k];
                            gemm(rows, n, k, g, &bt, &mut da);
                            accumulate(grads, *a, da);
                        }
                        if need_b {
                            let at = transpose(rows, k, ad);
                            let mut db = vec![T::zero(); k * n];
                            gemm(k, rows, n, &at, g, &mut db);
                            accumulate(grads, *b, db);
                        }
                    }
                    BatchMode::LeftShared => {
                        let batch = bd.len() / (k * n);
                        let mut da = vec![T::zero(); m * k];
                        let mut db = vec![T::zero(); bd.len()];
                        let at = transpose(m, k, ad);
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let bi = &bd[i * k * n..(i + 1) * k * n];
                            if need_a {
                                let bt = transpose(k, n, bi);
                                gemm(m, n, k, gi, &bt, &mut da);
                            }
                            if need_b {
                                gemm(k, m, n, &at, gi, &mut db[i * k * n..(i + 1) * k * n]);
                            }
                        }
                        if need_a {
                            accumulate(grads, *a, da);
                        }
                        if need_b {
                            accumulate(grads, *b, db);
                        }
                    }
                    BatchMode::Batched => {
                        let batch = ad.len() / (m * k);
                        let mut da = vec![T::zero(); ad.len()];
                        let mut db = vec![T::zero(); bd.len()];
                        for i in 0..batch {
                            let gi = &g[i * m * n..(i + 1) * m * n];
                            let ai = &ad[i * m * k..(i + 1) * m * k];
                            let bi = &bd[i * k * n..(i + 1) * k * n];
                            if need_a {
                                let bt = transpose(k, n, bi);
                                gemm(m, n, k, gi, &bt, &mut da[i * m * k..(i + 1) * m * k]);
                            }
                            if need_b {
                                let at = transpose(m, k, ai);
                                gemm(k, m, n, &at, gi, &mut db[i * k * n..(i + 1) * k * n]);
                            }
                        }
                        if need_a {
                            accumulate(grads, *a, da);
                        }
                        if need_b {
                            accumulate(grads, *b, db);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.requires(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.requires(*b) {
                    let bn = self.value(*b).numel();
                    let mut db = vec![T::zero(); bn];
                    for chunk in g.chunks(bn) {
                        for (d, &v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Sub { a, b } => {
                if self.requires(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.requires(*b) {
                    accumulate(grads, *b, g.iter().map(|&v| -v).collect());
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    accumulate(grads, *a, g.iter().zip(val(*b)).map(|(&gv, &bv)| gv * bv).collect());
                }
                if self.requires(*b) {
                    accumulate(grads, *b, g.iter().zip(val(*a)).map(|(&gv, &av)| gv * av).collect());
                }
            }
            Op::Scale { a, factor } => {
                accumulate(grads, *a, g.iter().map(|&v| v * *factor).collect());
            }
            Op::Relu(a) => {
                let d = g
                    .iter()
                    .zip(val(*a))
                    .map(|(&gv, &x)| if x > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                accumulate(grads, *a, g.iter().zip(y).map(|(&gv, &yv)| gv * (T::one() - yv * yv)).collect());
            }
            Op::Softplus(a) => {
                let d = g.iter().zip(val(*a)).map(|(&gv, &x)| gv * sigmoid(x)).collect();
                accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.iter().zip(val(*a)).map(|(&gv, &x)| gv * sign(x)).collect();
                accumulate(grads, *a, d);
            }
            Op::Cos(a) => {
                let d = g.iter().zip(val(*a)).map(|(&gv, &x)| -gv * x.sin()).collect();
                accumulate(grads, *a, d);
            }
            Op::Sin(a) => {
                let d = g.iter().zip(val(*a)).map(|(&gv, &x)| gv * x.cos()).collect();
                accumulate(grads, *a, d);
            }
            Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..*len {
                            dot += g[base + j * inner] * y[base + j * inner];
                        }
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = self.value(*gain).numel();
                let gd = val(*gain);
                let rows = xhat.len() / d;
                if self.requires(*x) {
                    let mut dx = vec![T::zero(); xhat.len()];
                    let dn: T = c(d as f64);
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gd[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let p = r * d + j;
                            let dh = g[p] * gd[j];
                            dx[p] = inv_std[r] * (dh - mean_dh - xhat[p] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.requires(*gain) {
                    let mut dg = vec![T::zero(); d];
                    for (p, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                        dg[p % d] += gv * h;
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.requires(*bias) {
                    let mut db = vec![T::zero(); d];
                    for (p, &gv) in g.iter().enumerate() {
                        db[p % d] += gv;
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, inner } => {
                let ch = inv_std.len();
                let gd = val(*gamma);
                if self.requires(*x) {
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| {
                            let ci = (i / inner) % ch;
                            gv * gd[ci] * inv_std[ci]
                        })
                        .collect();
                    accumulate(grads, *x, dx);
                }
                let mut dg = vec![T::zero(); ch];
                let mut db = vec![T::zero(); ch];
                for (i, &gv) in g.iter().enumerate() {
                    let ci = (i / inner) % ch;
                    dg[ci] += gv * xhat[i];
                    db[ci] += gv;
                }
                if self.requires(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if self.requires(*beta) {
                    accumulate(grads, *beta, db);
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.to_vec()),
            Op::Permute { a, perm } => {
                let inv = kernels::inverse_permutation(perm);
                let (_, d) = kernels::permute(node.value.shape(), &inv, g);
                accumulate(grads, *a, d);
            }
            Op::Select { a, idx } => {
                let d = *self.shape(*a).last().unwrap();
                let n = idx.len();
                let mut dx = vec![T::zero(); self.value(*a).numel()];
                for (r, chunk) in g.chunks(n).enumerate() {
                    for (&i, &gv) in idx.iter().zip(chunk) {
                        dx[r * d + i] += gv;
                    }
                }
                accumulate(grads, *a, dx);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[i * d + j] += g[r * d + j];
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Conv3x3 { x, w, b } => {
                let sx = self.shape(*x);
                let (bsz, ci, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
                let co = self.shape(*w)[0];
                let hw = h * wd;
                let xd = val(*x);
                let wdat = val(*w);
                let mut dw = vec![T::zero(); co * ci * 9];
                let mut dx = vec![T::zero(); xd.len()];
                let wt = transpose(co, ci * 9, wdat);
                for bi in 0..bsz {
                    let gb = &g[bi * co * hw..(bi + 1) * co * hw];
                    if self.requires(*w) {
                        let cols = im2col(&xd[bi * ci * hw..(bi + 1) * ci * hw], ci, h, wd);
                        let ct = transpose(ci * 9, hw, &cols);
                        gemm(co, hw, ci * 9, gb, &ct, &mut dw);
                    }
                    if self.requires(*x) {
                        let mut dcols = vec![T::zero(); ci * 9 * hw];
                        gemm(ci * 9, co, hw, &wt, gb, &mut dcols);
                        col2im_add(&dcols, ci, h, wd, &mut dx[bi * ci * hw..(bi + 1) * ci * hw]);
                    }
                }
                if self.requires(*w) {
                    accumulate(grads, *w, dw);
                }
                if self.requires(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.requires(*b) {
                    let mut db = vec![T::zero(); co];
                    for (i, &gv) in g.iter().enumerate() {
                        db[(i / hw) % co] += gv;
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &gv) in argmax.iter().zip(g) {
                    dx[i] += gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, vec![g[0] / c(n as f64); n]);
            }
            Op::CrossEntropy { logits, targets, probs, valid, count } => {
                let classes = *self.shape(*logits).last().unwrap();
                let scale = g[0] / c(*count as f64);
                let mut dx = vec![T::zero(); probs.len()];
                for (r, (&t, &ok)) in targets.iter().zip(valid).enumerate() {
                    if !ok {
                        continue;
                    }
                    for j in 0..classes {
                        let p = probs[r * classes + j];
                        let y = if j == t { T::one() } else { T::zero() };
                        dx[r * classes + j] = (p - y) * scale;
                    }
                }
                accumulate(grads, *logits, dx);
            }
        }
    }

    /// Names of parameters recorded on this graph, with their handles.
    pub fn params(&self) -> BTreeMap<String, Var> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|p| (p, Var(i))))
            .collect()
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn im2col<T: Element>(x: &[T], ci: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let mut cols = vec![T::zero(); ci * 9 * hw];
    for c_in in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c_in * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        cols[row + y * w + xx] = x[c_in * hw + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Element>(cols: &[T], ci: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    for c_in in 0..ci {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c_in * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dx[c_in * hw + sy as usize * w + sx as usize] += cols[row + y * w + xx];
                    }
                }
            }
        }
    }
}

pub(crate) fn softplus<T: Element>(v: T) -> T {
    v.max(T::zero()) + (T::one() + (-v.abs()).exp()).ln()
}

fn sigmoid<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn sign<T: Element>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
