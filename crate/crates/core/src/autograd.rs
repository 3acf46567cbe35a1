//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the node list is
//! already topologically sorted and [`Graph::backward`] is a single reverse
//! sweep. Ops are coarse (matmul, attention, normalization layers) to keep
//! tapes short.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{self, dot};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::training::loss::info_nce_with_grad;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One weighted source row of a [`Graph::row_combine`] output row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowTerm {
    pub input: u32,
    pub row: u32,
    pub weight: f64,
}

impl RowTerm {
    pub fn copy(input: usize, row: usize) -> Self {
        RowTerm { input: input as u32, row: row as u32, weight: 1.0 }
    }

    pub fn weighted(input: usize, row: usize, weight: f64) -> Self {
        RowTerm { input: input as u32, row: row as u32, weight }
    }
}

const NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    PatchConv { x: Var, w: Var, b: Var, k: usize },
    Ibn(IbnCache),
    ChannelAffine { x: Var, gamma: Var, beta: Var },
    ChannelsToTokens(Var),
    Attention(AttentionCache),
    RowCombine { inputs: Vec<Var>, terms: Vec<Vec<RowTerm>> },
    ConcatCols(Vec<Var>),
    L2Normalize { x: Var, norms: Vec<f64> },
    InfoNce { a: Var, b: Var, grad_a: Vec<f64>, grad_b: Vec<f64> },
    CosineDistance { a: Var, b: Var },
    Mean(Var),
    Sum(Var),
    /// Test fixture: forward is the identity, backward deliberately doubles.
    WrongIdentity(Var),
}

struct IbnCache {
    x: Var,
    instance_channels: usize,
    train: bool,
    xhat: Vec<f64>,
    /// `B * instance_channels` instance entries followed by one entry per
    /// batch-normalized channel.
    rstd: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
}

struct AttentionCache {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Running statistics used by [`Graph::ibn`] in eval mode.
#[derive(Debug, Clone, Copy)]
pub struct IbnRunning<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

pub struct Graph {
    nodes: Vec<Node>,
    param_vars: Vec<(ParamId, Var)>,
    min_relu_margin: f64,
    relu_signature: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_vars: Vec::new(), min_relu_margin: f64::INFINITY, relu_signature: FNV_OFFSET }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.param_vars.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.param_vars.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Smallest |pre-activation| seen by any ReLU in this graph.
    pub fn min_relu_margin(&self) -> f64 {
        self.min_relu_margin
    }

    /// Hash of the sign pattern of every ReLU input; two evaluations with
    /// equal signatures took the same side of every kink.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb, "add_bias: {sa:?} vs {sb:?}");
        let nb = vb.numel();
        let data = va.data().iter().enumerate().map(|(i, x)| x + vb.data()[i % nb]).collect();
        let out = Tensor::from_vec(sa, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::AddBias(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        let out = Tensor::from_vec(va.shape(), va.data().iter().map(|x| x * c).collect());
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// `a[..., K] @ w[K, N]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (va, vw) = (self.value(a), self.value(w));
        assert_eq!(vw.shape().len(), 2, "matmul: weight must be 2-D");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(va.cols(), k, "matmul: inner dimension mismatch");
        let m = va.rows();
        let mut out = vec![0.0; m * n];
        math::matmul_acc(va.data(), vw.data(), &mut out, m, k, n);
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(w);
        self.push(Tensor::from_vec(&shape, out), Op::MatMul(a, w), rg)
    }

    /// Affine map over the trailing dimension.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let margin = va.data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        let mut h = self.relu_signature;
        for &x in va.data() {
            h = (h ^ (x > 0.0) as u64).wrapping_mul(FNV_PRIME);
        }
        let out = Tensor::from_vec(va.shape(), va.data().iter().map(|x| x.max(0.0)).collect());
        self.min_relu_margin = self.min_relu_margin.min(margin);
        self.relu_signature = h;
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x))))
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Tensor::from_vec(va.shape(), va.data().iter().map(|&x| math::sigmoid(x)).collect());
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    /// Layer normalization over the trailing dimension with affine output.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let d = vx.cols();
        assert_eq!(self.value(gamma).numel(), d);
        assert_eq!(self.value(beta).numel(), d);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / math::sqrt(var + NORM_EPS);
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(vx.shape(), out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg)
    }

    /// Convolution whose stride equals its kernel size (non-overlapping
    /// patches). `x: [B, C, H, W]`, `w: [C_out, C*k*k]`, `b: [C_out]`.
    pub fn patch_conv(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4, "patch_conv: input must be NCHW");
        let (bn, c, h, wd) = (s[0], s[1], s[2], s[3]);
        assert!(h % k == 0 && wd % k == 0, "patch_conv: spatial size not divisible by kernel");
        let vw = self.value(w);
        let cout = vw.shape()[0];
        assert_eq!(vw.shape()[1], c * k * k, "patch_conv: weight shape");
        let (ho, wo) = (h / k, wd / k);
        let patches = im2patch(vx.data(), bn, c, h, wd, k);
        let m = bn * ho * wo;
        let mut rows = vec![0.0; m * cout];
        math::matmul_a_bt_acc(&patches, vw.data(), &mut rows, m, c * k * k, cout);
        let bias = self.value(b).data();
        let mut out = vec![0.0; bn * cout * ho * wo];
        for bi in 0..bn {
            for p in 0..ho * wo {
                let r = (bi * ho * wo + p) * cout;
                for oc in 0..cout {
                    out[(bi * cout + oc) * ho * wo + p] = rows[r + oc] + bias[oc];
                }
            }
        }
        let out = Tensor::from_vec(&[bn, cout, ho, wo], out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::PatchConv { x, w, b, k }, rg)
    }

    /// Pre-affine IBN normalization of `x: [B, C, H, W]`: the first
    /// `instance_channels` channels are instance-normalized, the remaining
    /// ones batch-normalized with batch statistics (`running == None`) or
    /// with the supplied running statistics.
    pub fn ibn(&mut self, x: Var, instance_channels: usize, running: Option<IbnRunning<'_>>) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        assert_eq!(s.len(), 4, "ibn: input must be NCHW");
        let (bn, c, sp) = (s[0], s[1], s[2] * s[3]);
        assert!(instance_channels <= c);
        let nbn = c - instance_channels;
        let data = vx.data();
        let mut xhat = vec![0.0; data.len()];
        let mut rstd = vec![0.0; bn * instance_channels + nbn];
        let mut batch_mean = Vec::new();
        let mut batch_var = Vec::new();
        for bi in 0..bn {
            for ch in 0..instance_channels {
                let off = (bi * c + ch) * sp;
                let seg = &data[off..off + sp];
                let mean = seg.iter().sum::<f64>() / sp as f64;
                let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / sp as f64;
                let r = 1.0 / math::sqrt(var + NORM_EPS);
                rstd[bi * instance_channels + ch] = r;
                for i in 0..sp {
                    xhat[off + i] = (seg[i] - mean) * r;
                }
            }
        }
        for j in 0..nbn {
            let ch = instance_channels + j;
            let (mean, var) = match running {
                Some(run) => (run.mean[j], run.var[j]),
                None => {
                    let n = (bn * sp) as f64;
                    let mut sum = 0.0;
                    for bi in 0..bn {
                        let off = (bi * c + ch) * sp;
                        sum += data[off..off + sp].iter().sum::<f64>();
                    }
                    let mean = sum / n;
                    let mut sq = 0.0;
                    for bi in 0..bn {
                        let off = (bi * c + ch) * sp;
                        sq += data[off..off + sp].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / n;
                    batch_mean.push(mean);
                    batch_var.push(var);
                    (mean, var)
                }
            };
            let r = 1.0 / math::sqrt(var + NORM_EPS);
            rstd[bn * instance_channels + j] = r;
            for bi in 0..bn {
                let off = (bi * c + ch) * sp;
                for i in 0..sp {
                    xhat[off + i] = (data[off + i] - mean) * r;
                }
            }
        }
        let out = Tensor::from_vec(s, xhat.clone());
        let rg = self.rg(x);
        let cache = IbnCache {
            x,
            instance_channels,
            train: running.is_none(),
            xhat,
            rstd,
            batch_mean,
            batch_var,
        };
        self.push(out, Op::Ibn(cache), rg)
    }

    /// Biased batch mean and variance of the batch-normalized channels of
    /// a train-mode [`Graph::ibn`] node.
    pub fn ibn_batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Ibn(c) if c.train => Some((&c.batch_mean, &c.batch_var)),
            _ => None,
        }
    }

    /// Per-channel affine over `[B, C, H, W]`.
    pub fn channel_affine(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (bn, c, sp) = (s[0], s[1], s[2] * s[3]);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), c);
        let mut out = vx.data().to_vec();
        for bi in 0..bn {
            for ch in 0..c {
                let off = (bi * c + ch) * sp;
                for v in &mut out[off..off + sp] {
                    *v = *v * g[ch] + b[ch];
                }
            }
        }
        let out = Tensor::from_vec(s, out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(out, Op::ChannelAffine { x, gamma, beta }, rg)
    }

    /// `[B, C, h, w] -> [B, h*w, C]`, spatial grid flattened row-major.
    pub fn channels_to_tokens(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let s = vx.shape();
        let (bn, c, sp) = (s[0], s[1], s[2] * s[3]);
        let d = vx.data();
        let mut out = vec![0.0; d.len()];
        for bi in 0..bn {
            for ch in 0..c {
                for p in 0..sp {
                    out[(bi * sp + p) * c + ch] = d[(bi * c + ch) * sp + p];
                }
            }
        }
        let out = Tensor::from_vec(&[bn, sp, c], out);
        let rg = self.rg(x);
        self.push(out, Op::ChannelsToTokens(x), rg)
    }

    /// Scaled dot-product multi-head attention over already projected
    /// `q: [B, Lq, D]`, `k, v: [B, Lk, D]`. `mask[b][i][j]` allows query `i`
    /// to attend key `j`; a query with no allowed key outputs zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Vec<bool>) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let (sq, sk) = (vq.shape(), vk.shape());
        assert_eq!(sq.len(), 3);
        assert_eq!(sk, vv.shape());
        let (bn, lq, d) = (sq[0], sq[1], sq[2]);
        let lk = sk[1];
        assert_eq!(sk[0], bn);
        assert_eq!(sk[2], d);
        assert_eq!(d % heads, 0);
        assert_eq!(mask.len(), bn * lq * lk);
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut probs = vec![0.0; bn * heads * lq * lk];
        let mut out = vec![0.0; bn * lq * d];
        let mut scores = vec![0.0; lk];
        for b in 0..bn {
            for h in 0..heads {
                for i in 0..lq {
                    let qi = &vq.data()[(b * lq + i) * d + h * dh..][..dh];
                    let mrow = &mask[(b * lq + i) * lk..][..lk];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if mrow[j] {
                            let kj = &vk.data()[(b * lk + j) * d + h * dh..][..dh];
                            scores[j] = dot(qi, kj) * scale;
                            max = max.max(scores[j]);
                        }
                    }
                    if max == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = &mut probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let mut z = 0.0;
                    for j in 0..lk {
                        if mrow[j] {
                            p[j] = math::exp(scores[j] - max);
                            z += p[j];
                        }
                    }
                    let o = &mut out[(b * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        if mrow[j] {
                            p[j] /= z;
                            let vj = &vv.data()[(b * lk + j) * d + h * dh..][..dh];
                            for (ov, x) in o.iter_mut().zip(vj) {
                                *ov += p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[bn, lq, d], out);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention(AttentionCache { q, k, v, heads, probs }), rg)
    }

    /// Builds each output row as a weighted sum of rows taken from `inputs`;
    /// an empty term list yields a zero row. Covers gathers, embedding
    /// lookups, concatenation along rows, broadcasting and mean pooling.
    pub fn row_combine(&mut self, inputs: &[Var], terms: Vec<Vec<RowTerm>>, shape: &[usize]) -> Var {
        assert!(!inputs.is_empty());
        let cols = self.value(inputs[0]).cols();
        for &i in inputs {
            assert_eq!(self.value(i).cols(), cols, "row_combine: column mismatch");
        }
        assert_eq!(shape.iter().product::<usize>(), terms.len() * cols, "row_combine: shape");
        let mut out = vec![0.0; terms.len() * cols];
        for (r, ts) in terms.iter().enumerate() {
            let o = &mut out[r * cols..(r + 1) * cols];
            for t in ts {
                let src = self.value(inputs[t.input as usize]).row(t.row as usize);
                for (ov, x) in o.iter_mut().zip(src) {
                    *ov += t.weight * x;
                }
            }
        }
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(Tensor::from_vec(shape, out), Op::RowCombine { inputs: inputs.to_vec(), terms }, rg)
    }

    /// Concatenates 2-D inputs with equal row counts along columns.
    pub fn concat_cols(&mut self, inputs: &[Var]) -> Var {
        let rows = self.value(inputs[0]).rows();
        let widths: Vec<usize> = inputs.iter().map(|&i| self.value(i).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for (&i, &w) in inputs.iter().zip(&widths) {
            let v = self.value(i);
            assert_eq!(v.rows(), rows, "concat_cols: row mismatch");
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(v.row(r));
            }
            off += w;
        }
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(Tensor::from_vec(&[rows, total], out), Op::ConcatCols(inputs.to_vec()), rg)
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.data().to_vec();
        let c = vx.cols();
        let mut norms = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let n = math::norm(vx.row(r)).max(1e-12);
            norms.push(n);
            for v in &mut out[r * c..(r + 1) * c] {
                *v /= n;
            }
        }
        let out = Tensor::from_vec(vx.shape(), out);
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Symmetric multi-positive InfoNCE between the rows of `a` and `b`.
    pub fn info_nce(&mut self, a: Var, b: Var, labels_a: &[u64], labels_b: &[u64], tau: f64) -> crate::Result<Var> {
        let (loss, grad_a, grad_b) = info_nce_with_grad(self.value(a), self.value(b), labels_a, labels_b, tau)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(loss), Op::InfoNce { a, b, grad_a, grad_b }, rg))
    }

    /// Row-wise `1 - cos(a_r, b_r)`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape());
        let out: Vec<f64> = (0..va.rows())
            .map(|r| 1.0 - math::cosine(va.row(r), vb.row(r)).unwrap_or(0.0))
            .collect();
        let n = out.len();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_vec(&[n], out), Op::CosineDistance { a, b }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let m = vx.data().iter().sum::<f64>() / vx.numel() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    #[doc(hidden)]
    pub fn wrong_identity(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::WrongIdentity(x), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "backward: loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads, params: self.param_vars.clone() }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |o| add_into(o, gd));
                self.acc(grads, *b, |o| add_into(o, gd));
            }
            Op::AddBias(a, b) => {
                self.acc(grads, *a, |o| add_into(o, gd));
                self.acc(grads, *b, |o| {
                    let nb = o.len();
                    for (k, x) in gd.iter().enumerate() {
                        o[k % nb] += x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |o| {
                    for k in 0..o.len() {
                        o[k] += gd[k] * vb[k];
                    }
                });
                self.acc(grads, *b, |o| {
                    for k in 0..o.len() {
                        o[k] += gd[k] * va[k];
                    }
                });
            }
            Op::Scale(a, c) => self.acc(grads, *a, |o| {
                for (ov, x) in o.iter_mut().zip(gd) {
                    *ov += c * x;
                }
            }),
            Op::MatMul(a, w) => {
                let (va, vw) = (self.value(*a), self.value(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = va.rows();
                self.acc(grads, *a, |o| math::matmul_a_bt_acc(gd, vw.data(), o, m, n, k));
                self.acc(grads, *w, |o| math::matmul_at_b_acc(va.data(), gd, o, m, k, n));
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |o| {
                    for k in 0..o.len() {
                        if va[k] > 0.0 {
                            o[k] += gd[k];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |o| {
                    for k in 0..o.len() {
                        let x = va[k];
                        let t = math::tanh(GELU_C * (x + GELU_A * x * x * x));
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        o[k] += gd[k] * d;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[i].value.data();
                self.acc(grads, *a, |o| {
                    for k in 0..o.len() {
                        o[k] += gd[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = self.value(*gamma).data();
                let d = gam.len();
                let rows = rstd.len();
                self.acc(grads, *x, |o| {
                    let mut dxh = vec![0.0; d];
                    for r in 0..rows {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxh[j] = gr[j] * gam[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2 = dot(&dxh, xh);
                        let f = rstd[r] / d as f64;
                        for j in 0..d {
                            o[r * d + j] += f * (d as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
                self.acc(grads, *gamma, |o| {
                    for r in 0..rows {
                        for j in 0..d {
                            o[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.acc(grads, *beta, |o| {
                    for r in 0..rows {
                        for j in 0..d {
                            o[j] += gd[r * d + j];
                        }
                    }
                });
            }
            Op::PatchConv { x, w, b, k } => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let s = vx.shape();
                let (bn, c, h, wd) = (s[0], s[1], s[2], s[3]);
                let k = *k;
                let cout = vw.shape()[0];
                let (ho, wo) = (h / k, wd / k);
                let m = bn * ho * wo;
                let ckk = c * k * k;
                // gradient in patch-row layout [m, cout]
                let mut grow = vec![0.0; m * cout];
                for bi in 0..bn {
                    for oc in 0..cout {
                        for p in 0..ho * wo {
                            grow[(bi * ho * wo + p) * cout + oc] = gd[(bi * cout + oc) * ho * wo + p];
                        }
                    }
                }
                self.acc(grads, *w, |o| {
                    let patches = im2patch(vx.data(), bn, c, h, wd, k);
                    math::matmul_at_b_acc(&grow, &patches, o, m, cout, ckk);
                });
                self.acc(grads, *b, |o| {
                    for r in 0..m {
                        for oc in 0..cout {
                            o[oc] += grow[r * cout + oc];
                        }
                    }
                });
                self.acc(grads, *x, |o| {
                    let mut dp = vec![0.0; m * ckk];
                    math::matmul_acc(&grow, vw.data(), &mut dp, m, cout, ckk);
                    patch2im_acc(&dp, o, bn, c, h, wd, k);
                });
            }
            Op::Ibn(cache) => {
                let vx = self.value(cache.x);
                let s = vx.shape();
                let (bn, c, sp) = (s[0], s[1], s[2] * s[3]);
                let nin = cache.instance_channels;
                let xhat = &cache.xhat;
                self.acc(grads, cache.x, |o| {
                    for bi in 0..bn {
                        for ch in 0..nin {
                            let off = (bi * c + ch) * sp;
                            let r = cache.rstd[bi * nin + ch];
                            norm_backward(&gd[off..off + sp], &xhat[off..off + sp], r, &mut o[off..off + sp]);
                        }
                    }
                    for j in 0..c - nin {
                        let ch = nin + j;
                        let r = cache.rstd[bn * nin + j];
                        if cache.train {
                            let n = (bn * sp) as f64;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for bi in 0..bn {
                                let off = (bi * c + ch) * sp;
                                s1 += gd[off..off + sp].iter().sum::<f64>();
                                s2 += dot(&gd[off..off + sp], &xhat[off..off + sp]);
                            }
                            for bi in 0..bn {
                                let off = (bi * c + ch) * sp;
                                for q in off..off + sp {
                                    o[q] += r / n * (n * gd[q] - s1 - xhat[q] * s2);
                                }
                            }
                        } else {
                            for bi in 0..bn {
                                let off = (bi * c + ch) * sp;
                                for q in off..off + sp {
                                    o[q] += r * gd[q];
                                }
                            }
                        }
                    }
                });
            }
            Op::ChannelAffine { x, gamma, beta } => {
                let vx = self.value(*x);
                let s = vx.shape();
                let (bn, c, sp) = (s[0], s[1], s[2] * s[3]);
                let gam = self.value(*gamma).data();
                let xd = vx.data();
                self.acc(grads, *x, |o| {
                    for bi in 0..bn {
                        for ch in 0..c {
                            let off = (bi * c + ch) * sp;
                            for q in off..off + sp {
                                o[q] += gd[q] * gam[ch];
                            }
                        }
                    }
                });
                self.acc(grads, *gamma, |o| {
                    for bi in 0..bn {
                        for ch in 0..c {
                            let off = (bi * c + ch) * sp;
                            o[ch] += dot(&gd[off..off + sp], &xd[off..off + sp]);
                        }
                    }
                });
                self.acc(grads, *beta, |o| {
                    for bi in 0..bn {
                        for ch in 0..c {
                            let off = (bi * c + ch) * sp;
                            o[ch] += gd[off..off + sp].iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::ChannelsToTokens(x) => {
                let s = self.value(*x).shape();
                let (bn, c, sp) = (s[0], s[1], s[2] * s[3]);
                self.acc(grads, *x, |o| {
                    for bi in 0..bn {
                        for ch in 0..c {
                            for p in 0..sp {
                                o[(bi * c + ch) * sp + p] += gd[(bi * sp + p) * c + ch];
                            }
                        }
                    }
                });
            }
            Op::Attention(cache) => self.attention_backward(cache, gd, grads),
            Op::RowCombine { inputs, terms } => {
                let cols = g.cols();
                for (idx, &inp) in inputs.iter().enumerate() {
                    if !self.rg(inp) {
                        continue;
                    }
                    self.acc(grads, inp, |o| {
                        for (r, ts) in terms.iter().enumerate() {
                            let gr = &gd[r * cols..(r + 1) * cols];
                            for t in ts.iter().filter(|t| t.input as usize == idx) {
                                let dst = &mut o[t.row as usize * cols..(t.row as usize + 1) * cols];
                                for (dv, x) in dst.iter_mut().zip(gr) {
                                    *dv += t.weight * x;
                                }
                            }
                        }
                    });
                }
            }
            Op::ConcatCols(inputs) => {
                let total = g.cols();
                let rows = g.rows();
                let mut off = 0;
                for &inp in inputs {
                    let w = self.value(inp).cols();
                    self.acc(grads, inp, |o| {
                        for r in 0..rows {
                            add_into(&mut o[r * w..(r + 1) * w], &gd[r * total + off..r * total + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = &self.nodes[i].value;
                let c = y.cols();
                self.acc(grads, *x, |o| {
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &gd[r * c..(r + 1) * c];
                        let p = dot(yr, gr);
                        for j in 0..c {
                            o[r * c + j] += (gr[j] - yr[j] * p) / n;
                        }
                    }
                });
            }
            Op::InfoNce { a, b, grad_a, grad_b } => {
                let s = gd[0];
                self.acc(grads, *a, |o| {
                    for (ov, x) in o.iter_mut().zip(grad_a) {
                        *ov += s * x;
                    }
                });
                self.acc(grads, *b, |o| {
                    for (ov, x) in o.iter_mut().zip(grad_b) {
                        *ov += s * x;
                    }
                });
            }
            Op::CosineDistance { a, b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let c = va.cols();
                for (src, other, tgt) in [(va, vb, *a), (vb, va, *b)] {
                    self.acc(grads, tgt, |o| {
                        for r in 0..src.rows() {
                            let (x, y) = (src.row(r), other.row(r));
                            let (nx, ny) = (math::norm(x), math::norm(y));
                            if nx == 0.0 || ny == 0.0 {
                                continue;
                            }
                            let cos = dot(x, y) / (nx * ny);
                            for j in 0..c {
                                let dcos = y[j] / (nx * ny) - cos * x[j] / (nx * nx);
                                o[r * c + j] -= gd[r] * dcos;
                            }
                        }
                    });
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                self.acc(grads, *x, |o| {
                    for v in o.iter_mut() {
                        *v += gd[0] / n;
                    }
                });
            }
            Op::Sum(x) => self.acc(grads, *x, |o| {
                for v in o.iter_mut() {
                    *v += gd[0];
                }
            }),
            Op::WrongIdentity(x) => self.acc(grads, *x, |o| {
                for (ov, v) in o.iter_mut().zip(gd) {
                    *ov += 2.0 * v;
                }
            }),
        }
    }

    fn attention_backward(&self, c: &AttentionCache, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let (vq, vk, vv) = (self.value(c.q), self.value(c.k), self.value(c.v));
        let (bn, lq, d) = (vq.shape()[0], vq.shape()[1], vq.shape()[2]);
        let lk = vk.shape()[1];
        let heads = c.heads;
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut dq = vec![0.0; vq.numel()];
        let mut dk = vec![0.0; vk.numel()];
        let mut dv = vec![0.0; vv.numel()];
        let mut dp = vec![0.0; lk];
        for b in 0..bn {
            for h in 0..heads {
                for i in 0..lq {
                    let p = &c.probs[((b * heads + h) * lq + i) * lk..][..lk];
                    let go = &gd[(b * lq + i) * d + h * dh..][..dh];
                    let mut s = 0.0;
                    for j in 0..lk {
                        if p[j] != 0.0 {
                            let vj = &vv.data()[(b * lk + j) * d + h * dh..][..dh];
                            dp[j] = dot(go, vj);
                            s += p[j] * dp[j];
                            let dvj = &mut dv[(b * lk + j) * d + h * dh..][..dh];
                            for (x, y) in dvj.iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                    }
                    let qi = &vq.data()[(b * lq + i) * d + h * dh..][..dh];
                    for j in 0..lk {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = &vk.data()[(b * lk + j) * d + h * dh..][..dh];
                        let dqi = &mut dq[(b * lq + i) * d + h * dh..][..dh];
                        for (x, y) in dqi.iter_mut().zip(kj) {
                            *x += ds * y;
                        }
                        let dkj = &mut dk[(b * lk + j) * d + h * dh..][..dh];
                        for (x, y) in dkj.iter_mut().zip(qi) {
                            *x += ds * y;
                        }
                    }
                }
            }
        }
        self.acc(grads, c.q, |o| add_into(o, &dq));
        self.acc(grads, c.k, |o| add_into(o, &dk));
        self.acc(grads, c.v, |o| add_into(o, &dv));
    }
}

fn add_into(o: &mut [f64], g: &[f64]) {
    for (a, b) in o.iter_mut().zip(g) {
        *a += b;
    }
}

/// `dx = rstd/n * (n*dy - sum(dy) - xhat*sum(dy*xhat))`, accumulated into `o`.
fn norm_backward(dy: &[f64], xhat: &[f64], rstd: f64, o: &mut [f64]) {
    let n = dy.len() as f64;
    let s1: f64 = dy.iter().sum();
    let s2 = dot(dy, xhat);
    for q in 0..dy.len() {
        o[q] += rstd / n * (n * dy[q] - s1 - xhat[q] * s2);
    }
}

/// Patch matrix `[B*Ho*Wo, C*k*k]` of non-overlapping `k x k` patches.
fn im2patch(x: &[f64], bn: usize, c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (ho, wo) = (h / k, w / k);
    let ckk = c * k * k;
    let mut p = vec![0.0; bn * ho * wo * ckk];
    for b in 0..bn {
        for oy in 0..ho {
            for ox in 0..wo {
                let r = (b * ho * wo + oy * wo + ox) * ckk;
                for ch in 0..c {
                    for ky in 0..k {
                        let src = ((b * c + ch) * h + oy * k + ky) * w + ox * k;
                        let dst = r + (ch * k + ky) * k;
                        p[dst..dst + k].copy_from_slice(&x[src..src + k]);
                    }
                }
            }
        }
    }
    p
}

fn patch2im_acc(p: &[f64], o: &mut [f64], bn: usize, c: usize, h: usize, w: usize, k: usize) {
    let (ho, wo) = (h / k, w / k);
    let ckk = c * k * k;
    for b in 0..bn {
        for oy in 0..ho {
            for ox in 0..wo {
                let r = (b * ho * wo + oy * wo + ox) * ckk;
                for ch in 0..c {
                    for ky in 0..k {
                        let dst = ((b * c + ch) * h + oy * k + ky) * w + ox * k;
                        let src = r + (ch * k + ky) * k;
                        add_into(&mut o[dst..dst + k], &p[src..src + k]);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any node that requires one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.wrt(v))
    }

    /// `(param, gradient)` pairs for every parameter that received one.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params.iter().filter_map(|&(p, v)| self.wrt(v).map(|g| (p, g)))
    }
}
