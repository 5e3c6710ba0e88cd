//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation validates shapes, computes its output eagerly, checks the
//! result for non-finite values, and records what the backward rule needs.
//! Entries are appended in topological order by construction: an operation's
//! inputs always have smaller ids than its output.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Batch statistics produced by a train-mode batch norm, used by the caller
/// to update running statistics.
#[derive(Debug, Clone)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Biased (population) variance per channel.
    pub var: Vec<S>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    TransposeLast2 {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    AddBias {
        x: TensorId,
        bias: TensorId,
    },
    /// x [B,T,D] + pos [T,D], broadcast over the batch.
    AddPos {
        x: TensorId,
        pos: TensorId,
    },
    /// p [D] replicated to [B,1,D].
    BroadcastToken {
        p: TensorId,
        batch: usize,
    },
    Scale {
        x: TensorId,
        c: S,
    },
    Gelu {
        x: TensorId,
    },
    SoftmaxLastDim {
        x: TensorId,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    Reshape {
        x: TensorId,
    },
    SliceLastDim {
        x: TensorId,
        start: usize,
    },
    ToHeads {
        x: TensorId,
        heads: usize,
    },
    FromHeads {
        x: TensorId,
        heads: usize,
    },
    SliceTokens {
        x: TensorId,
        start: usize,
    },
    ConcatTokens {
        parts: Vec<TensorId>,
    },
    GatherTokens {
        x: TensorId,
        idx: Vec<u32>,
    },
    GatherScores {
        a: TensorId,
        idx: Vec<u32>,
    },
    ClsAttention {
        attn: TensorId,
        heads: usize,
    },
    NormalizeRows {
        a: TensorId,
        sums: Vec<S>,
        uniform_rows: Vec<bool>,
    },
    WeightedSumTokens {
        x: TensorId,
        w: TensorId,
    },
    MeanTokens {
        x: TensorId,
        start: usize,
        end: usize,
    },
    StackLastDim {
        parts: Vec<TensorId>,
    },
    DepthwiseConvFull {
        x: TensorId,
        kernel: TensorId,
    },
    CrossEntropyMean {
        logits: TensorId,
        targets: Vec<u32>,
        smoothing: S,
    },
    SumAll {
        x: TensorId,
    },
}

struct Node<S> {
    data: Vec<S>,
    shape: Vec<usize>,
    op: Op<S>,
    needs_grad: bool,
}

/// Single-writer operation tape. One forward/backward pass at a time.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_finite<S: Scalar>(op: &'static str, data: &[S]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Insert an input tensor. Gradients are accumulated for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> TensorId {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> TensorId {
        self.leaf(t, false)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: TensorId) -> Tensor<S> {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shapes are consistent")
    }

    /// Gradient populated by [`backward`]; `None` for ids that do not require
    /// or have not received one.
    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<S>, shape: Vec<usize>, op: Op<S>, needs_grad: bool) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    // ── shape helpers ──────────────────────────────────────────────────

    fn rank3(&self, op: &'static str, id: TensorId) -> Result<(usize, usize, usize)> {
        let s = self.shape(id);
        if s.len() != 3 {
            return Err(Error::shape(op, format!("expected rank-3 tensor, got {:?}", s)));
        }
        Ok((s[0], s[1], s[2]))
    }

    // ── forward operations ─────────────────────────────────────────────

    /// Matrix product. Supports `[m,k]·[k,n]`, batched `[B,m,k]·[B,k,n]`,
    /// and a rank-2 right operand broadcast over the batch `[B,m,k]·[k,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = MatmulDims::resolve(&sa, &sb)?;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![S::zero(); dims.batch * dims.m * dims.n];
        for bi in 0..dims.batch {
            let a_off = bi * dims.m * dims.k;
            let b_off = if dims.broadcast_b { 0 } else { bi * dims.k * dims.n };
            mm(
                &ad[a_off..a_off + dims.m * dims.k],
                &bd[b_off..b_off + dims.k * dims.n],
                dims.m,
                dims.k,
                dims.n,
                &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
            );
        }
        ensure_finite("matmul", &out)?;
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(dims.m);
        shape.push(dims.n);
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, shape, Op::Matmul { a, b }, needs))
    }

    pub fn transpose_last2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "transpose_last2",
                format!("expected rank >= 2, got {:?}", s),
            ));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch: usize = s[..s.len() - 2].iter().product();
        let xd = self.data(x);
        let mut out = vec![S::zero(); xd.len()];
        for bi in 0..batch {
            let off = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[off + j * r + i] = xd[off + i * c + j];
                }
            }
        }
        let mut shape = s[..s.len() - 2].to_vec();
        shape.push(c);
        shape.push(r);
        let needs = self.needs(&[x]);
        Ok(self.push(out, shape, Op::TransposeLast2 { x }, needs))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        ensure_finite("add", &out)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, shape, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<S> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        ensure_finite("mul", &out)?;
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(out, shape, Op::Mul { a, b }, needs))
    }

    /// `x [.., D] + bias [D]`.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or_else(|| Error::shape("add_bias", "rank-0 input"))?;
        if self.shape(bias) != [d] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} vs bias {:?}", xs, self.shape(bias)),
            ));
        }
        let bd = self.data(bias).to_vec();
        let out: Vec<S> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        ensure_finite("add_bias", &out)?;
        let needs = self.needs(&[x, bias]);
        Ok(self.push(out, xs, Op::AddBias { x, bias }, needs))
    }

    /// `x [B,T,D] + pos [T,D]`, broadcast over the batch.
    pub fn add_pos(&mut self, x: TensorId, pos: TensorId) -> Result<TensorId> {
        let (b, t, d) = self.rank3("add_pos", x)?;
        if self.shape(pos) != [t, d] {
            return Err(Error::shape(
                "add_pos",
                format!("sequence [{},{},{}] vs positions {:?}", b, t, d, self.shape(pos)),
            ));
        }
        let pd = self.data(pos).to_vec();
        let out: Vec<S> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + pd[i % (t * d)])
            .collect();
        ensure_finite("add_pos", &out)?;
        let needs = self.needs(&[x, pos]);
        Ok(self.push(out, vec![b, t, d], Op::AddPos { x, pos }, needs))
    }

    /// Replicate a parameter `p [D]` to `[batch, 1, D]`.
    pub fn broadcast_token(&mut self, p: TensorId, batch: usize) -> Result<TensorId> {
        let s = self.shape(p).to_vec();
        if s.len() != 1 {
            return Err(Error::shape(
                "broadcast_token",
                format!("expected rank-1 token, got {:?}", s),
            ));
        }
        let d = s[0];
        let pd = self.data(p).to_vec();
        let mut out = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            out.extend_from_slice(&pd);
        }
        let needs = self.needs(&[p]);
        Ok(self.push(out, vec![batch, 1, d], Op::BroadcastToken { p, batch }, needs))
    }

    pub fn scale(&mut self, x: TensorId, c: S) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| v * c).collect();
        ensure_finite("scale", &out)?;
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(out, shape, Op::Scale { x, c }, needs))
    }

    /// Exact Gaussian-CDF GELU: `x * Phi(x)` with `Phi` from `erf`.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let out: Vec<S> = self.data(x).iter().map(|&v| v * gauss_cdf(v)).collect();
        ensure_finite("gelu", &out)?;
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(out, shape, Op::Gelu { x }, needs))
    }

    /// Row-wise softmax over the last dimension, computed with
    /// max-subtraction for stability.
    pub fn softmax_lastdim(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("softmax_lastdim", "rank-0 input"))?;
        if d == 0 {
            return Err(Error::shape("softmax_lastdim", "empty last dimension"));
        }
        let xd = self.data(x);
        let mut out = vec![S::zero(); xd.len()];
        for (row_in, row_out) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row_in.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                let e = (v - max).exp();
                *o = e;
                sum = sum + e;
            }
            for o in row_out.iter_mut() {
                *o = *o / sum;
            }
        }
        ensure_finite("softmax_lastdim", &out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, s, Op::SoftmaxLastDim { x }, needs))
    }

    /// Per-row normalization over the last dimension to zero mean and unit
    /// variance, followed by the affine map `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?} vs gamma {:?} / beta {:?}",
                    s,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = S::from_f64(eps);
        let rows = self.data(x).len() / d;
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let xd = self.data(x);
        let mut out = vec![S::zero(); xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut inv_stds = Vec::with_capacity(rows);
        let dn = S::from_f64(d as f64);
        for (row_in, row_out) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let mut mean = S::zero();
            for &v in row_in {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = S::zero();
            for &v in row_in {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let inv_std = (var + eps).sqrt().recip();
            for (j, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                *o = (v - mean) * inv_std * gd[j] + bd[j];
            }
            means.push(mean);
            inv_stds.push(inv_std);
        }
        ensure_finite("layer_norm", &out)?;
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            s,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                inv_std: inv_stds,
            },
            needs,
        ))
    }

    /// Train-mode batch norm over `[B, C]` or `[B, C, S]`: normalizes by the
    /// batch statistics of each channel and returns them so the caller can
    /// update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, BatchStats<S>)> {
        let (b, c, sp) = self.bn_dims(x)?;
        self.bn_check_params("batch_norm", c, gamma, beta)?;
        let n = b * sp;
        let xd = self.data(x);
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        let nf = S::from_f64(n as f64);
        for ch in 0..c {
            let mut m = S::zero();
            for bi in 0..b {
                for si in 0..sp {
                    m = m + xd[(bi * c + ch) * sp + si];
                }
            }
            m = m / nf;
            let mut v = S::zero();
            for bi in 0..b {
                for si in 0..sp {
                    let d = xd[(bi * c + ch) * sp + si] - m;
                    v = v + d * d;
                }
            }
            mean[ch] = m;
            var[ch] = v / nf;
        }
        let eps = S::from_f64(eps);
        let inv_std: Vec<S> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        ensure_finite("batch_norm", &out)?;
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        let id = self.push(
            out,
            shape,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
            needs,
        );
        Ok((id, BatchStats { mean, var, count: n }))
    }

    /// Eval-mode batch norm: an affine map using the provided running
    /// statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[S],
        running_var: &[S],
        eps: f64,
    ) -> Result<TensorId> {
        let (_b, c, _sp) = self.bn_dims(x)?;
        self.bn_check_params("batch_norm", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "{} channels vs running stats {}/{}",
                    c,
                    running_mean.len(),
                    running_var.len()
                ),
            ));
        }
        let eps = S::from_f64(eps);
        let inv_std: Vec<S> = running_var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mean = running_mean.to_vec();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        ensure_finite("batch_norm", &out)?;
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            out,
            shape,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            },
            needs,
        ))
    }

    fn bn_dims(&self, x: TensorId) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        match s.len() {
            2 => Ok((s[0], s[1], 1)),
            3 => Ok((s[0], s[1], s[2])),
            _ => Err(Error::shape(
                "batch_norm",
                format!("expected [B,C] or [B,C,S], got {:?}", s),
            )),
        }
    }

    fn bn_check_params(
        &self,
        op: &'static str,
        c: usize,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<()> {
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                op,
                format!(
                    "{} channels vs gamma {:?} / beta {:?}",
                    c,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        mean: &[S],
        inv_std: &[S],
    ) -> Vec<S> {
        let (b, c, sp) = self.bn_dims(x).expect("validated");
        let xd = self.data(x);
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut out = vec![S::zero(); xd.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * sp;
                for si in 0..sp {
                    out[base + si] = (xd[base + si] - mean[ch]) * inv_std[ch] * gd[ch] + bd[ch];
                }
            }
        }
        out
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.data(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(x), shape),
            ));
        }
        let out = self.data(x).to_vec();
        let needs = self.needs(&[x]);
        Ok(self.push(out, shape, Op::Reshape { x }, needs))
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn slice_lastdim(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Error::shape("slice_lastdim", "rank-0 input"))?;
        if start + len > d {
            return Err(Error::shape(
                "slice_lastdim",
                format!("[{start}, {}) out of {:?}", start + len, s),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len() / d * len);
        for row in xd.chunks_exact(d) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(&[x]);
        Ok(self.push(out, shape, Op::SliceLastDim { x, start }, needs))
    }

    /// `[B, T, D] -> [B*H, T, D/H]` head split for attention.
    pub fn to_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let (b, t, d) = self.rank3("to_heads", x)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "to_heads",
                format!("width {} not divisible by {} heads", d, heads),
            ));
        }
        let dh = d / heads;
        let xd = self.data(x);
        let mut out = vec![S::zero(); xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = (bi * t + ti) * d + h * dh;
                    let dst = ((bi * heads + h) * t + ti) * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, vec![b * heads, t, dh], Op::ToHeads { x, heads }, needs))
    }

    /// `[B*H, T, D/H] -> [B, T, D]`, inverse of [`Tape::to_heads`].
    pub fn from_heads(&mut self, x: TensorId, heads: usize) -> Result<TensorId> {
        let (bh, t, dh) = self.rank3("from_heads", x)?;
        if heads == 0 || bh % heads != 0 {
            return Err(Error::shape(
                "from_heads",
                format!("batch*heads {} not divisible by {} heads", bh, heads),
            ));
        }
        let b = bh / heads;
        let d = dh * heads;
        let xd = self.data(x);
        let mut out = vec![S::zero(); xd.len()];
        for bi in 0..b {
            for h in 0..heads {
                for ti in 0..t {
                    let src = ((bi * heads + h) * t + ti) * dh;
                    let dst = (bi * t + ti) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xd[src..src + dh]);
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, vec![b, t, d], Op::FromHeads { x, heads }, needs))
    }

    /// Contiguous token range `[start, start+len)` of `[B, T, D]`.
    pub fn slice_tokens(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (b, t, d) = self.rank3("slice_tokens", x)?;
        if start + len > t {
            return Err(Error::shape(
                "slice_tokens",
                format!("[{start}, {}) out of {} tokens", start + len, t),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            let base = (bi * t + start) * d;
            out.extend_from_slice(&xd[base..base + len * d]);
        }
        let needs = self.needs(&[x]);
        Ok(self.push(out, vec![b, len, d], Op::SliceTokens { x, start }, needs))
    }

    /// Concatenate along the token dimension.
    pub fn concat_tokens(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("concat_tokens", "no parts"));
        }
        let (b, _, d) = self.rank3("concat_tokens", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pb, pt, pd) = self.rank3("concat_tokens", p)?;
            if pb != b || pd != d {
                return Err(Error::shape(
                    "concat_tokens",
                    format!("incompatible part {:?} vs [B={}, _, D={}]", self.shape(p), b, d),
                ));
            }
            total += pt;
        }
        let mut out = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let pt = self.shape(p)[1];
                let pd = self.data(p);
                out.extend_from_slice(&pd[bi * pt * d..(bi + 1) * pt * d]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            out,
            vec![b, total, d],
            Op::ConcatTokens {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Per-sample token gather: `out[b, i, :] = x[b, idx[b*k+i], :]`.
    pub fn gather_tokens(&mut self, x: TensorId, idx: &[u32], k: usize) -> Result<TensorId> {
        let (b, t, d) = self.rank3("gather_tokens", x)?;
        if idx.len() != b * k {
            return Err(Error::shape(
                "gather_tokens",
                format!("{} indices for batch {} x k {}", idx.len(), b, k),
            ));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i as usize >= t) {
            return Err(Error::shape(
                "gather_tokens",
                format!("index {} out of {} tokens", bad, t),
            ));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * k * d);
        for bi in 0..b {
            for i in 0..k {
                let ti = idx[bi * k + i] as usize;
                let base = (bi * t + ti) * d;
                out.extend_from_slice(&xd[base..base + d]);
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            out,
            vec![b, k, d],
            Op::GatherTokens { x, idx: idx.to_vec() },
            needs,
        ))
    }

    /// Per-sample score gather from `[B, T]`: `out[b, i] = a[b, idx[b*k+i]]`.
    pub fn gather_scores(&mut self, a: TensorId, idx: &[u32], k: usize) -> Result<TensorId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(
                "gather_scores",
                format!("expected [B, T], got {:?}", s),
            ));
        }
        let (b, t) = (s[0], s[1]);
        if idx.len() != b * k {
            return Err(Error::shape(
                "gather_scores",
                format!("{} indices for batch {} x k {}", idx.len(), b, k),
            ));
        }
        let ad = self.data(a);
        let mut out = Vec::with_capacity(b * k);
        for bi in 0..b {
            for i in 0..k {
                let ti = idx[bi * k + i] as usize;
                if ti >= t {
                    return Err(Error::shape(
                        "gather_scores",
                        format!("index {} out of {} scores", ti, t),
                    ));
                }
                out.push(ad[bi * t + ti]);
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(
            out,
            vec![b, k],
            Op::GatherScores { a, idx: idx.to_vec() },
            needs,
        ))
    }

    /// CLS attention row averaged over heads: `attn [B*H, T, T] -> [B, T]`.
    pub fn cls_attention(&mut self, attn: TensorId, heads: usize) -> Result<TensorId> {
        let (bh, tq, tk) = self.rank3("cls_attention", attn)?;
        if tq != tk || heads == 0 || bh % heads != 0 {
            return Err(Error::shape(
                "cls_attention",
                format!("attn {:?} with {} heads", self.shape(attn), heads),
            ));
        }
        let b = bh / heads;
        let t = tk;
        let ad = self.data(attn);
        let hf = S::from_f64(heads as f64);
        let mut out = vec![S::zero(); b * t];
        for bi in 0..b {
            for h in 0..heads {
                let base = (bi * heads + h) * t * t; // CLS query row is row 0
                for ti in 0..t {
                    out[bi * t + ti] = out[bi * t + ti] + ad[base + ti];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v / hf;
        }
        let needs = self.needs(&[attn]);
        Ok(self.push(out, vec![b, t], Op::ClsAttention { attn, heads }, needs))
    }

    /// Normalize each row of `[B, n]` to sum 1. Rows whose sum is exactly
    /// zero fall back to uniform weights and are treated as constants in the
    /// backward pass; the returned mask flags those rows.
    pub fn normalize_rows_or_uniform(&mut self, a: TensorId) -> Result<(TensorId, Vec<bool>)> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] == 0 {
            return Err(Error::shape(
                "normalize_rows",
                format!("expected [B, n>0], got {:?}", s),
            ));
        }
        let (b, n) = (s[0], s[1]);
        let ad = self.data(a);
        let uniform = S::from_f64(1.0 / n as f64);
        let mut out = vec![S::zero(); ad.len()];
        let mut sums = Vec::with_capacity(b);
        let mut mask = vec![false; b];
        for bi in 0..b {
            let row = &ad[bi * n..(bi + 1) * n];
            let mut sum = S::zero();
            for &v in row {
                sum = sum + v;
            }
            if sum == S::zero() {
                mask[bi] = true;
                for v in &mut out[bi * n..(bi + 1) * n] {
                    *v = uniform;
                }
            } else {
                for (o, &v) in out[bi * n..(bi + 1) * n].iter_mut().zip(row) {
                    *o = v / sum;
                }
            }
            sums.push(sum);
        }
        ensure_finite("normalize_rows", &out)?;
        let needs = self.needs(&[a]);
        let id = self.push(
            out,
            vec![b, n],
            Op::NormalizeRows {
                a,
                sums,
                uniform_rows: mask.clone(),
            },
            needs,
        );
        Ok((id, mask))
    }

    /// Weighted sum over tokens: `x [B, n, D]`, `w [B, n]` -> `[B, D]`.
    pub fn weighted_sum_tokens(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (b, n, d) = self.rank3("weighted_sum_tokens", x)?;
        if self.shape(w) != [b, n] {
            return Err(Error::shape(
                "weighted_sum_tokens",
                format!("tokens [{},{},{}] vs weights {:?}", b, n, d, self.shape(w)),
            ));
        }
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![S::zero(); b * d];
        for bi in 0..b {
            for i in 0..n {
                let wv = wd[bi * n + i];
                let base = (bi * n + i) * d;
                for c in 0..d {
                    out[bi * d + c] = out[bi * d + c] + wv * xd[base + c];
                }
            }
        }
        ensure_finite("weighted_sum_tokens", &out)?;
        let needs = self.needs(&[x, w]);
        Ok(self.push(out, vec![b, d], Op::WeightedSumTokens { x, w }, needs))
    }

    /// Mean over the token range `[start, end)` of `[B, T, D]` -> `[B, D]`.
    pub fn mean_tokens(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (b, t, d) = self.rank3("mean_tokens", x)?;
        if start >= end || end > t {
            return Err(Error::shape(
                "mean_tokens",
                format!("range [{start}, {end}) out of {} tokens", t),
            ));
        }
        let xd = self.data(x);
        let nf = S::from_f64((end - start) as f64);
        let mut out = vec![S::zero(); b * d];
        for bi in 0..b {
            for ti in start..end {
                let base = (bi * t + ti) * d;
                for c in 0..d {
                    out[bi * d + c] = out[bi * d + c] + xd[base + c];
                }
            }
            for c in 0..d {
                out[bi * d + c] = out[bi * d + c] / nf;
            }
        }
        ensure_finite("mean_tokens", &out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(out, vec![b, d], Op::MeanTokens { x, start, end }, needs))
    }

    /// Stack `g` tensors of `[B, D]` into `[B, D, g]`.
    pub fn stack_lastdim(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::shape("stack_lastdim", "no parts"));
        }
        let s0 = self.shape(parts[0]).to_vec();
        if s0.len() != 2 {
            return Err(Error::shape(
                "stack_lastdim",
                format!("expected [B, D] parts, got {:?}", s0),
            ));
        }
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(Error::shape(
                    "stack_lastdim",
                    format!("part {:?} vs {:?}", self.shape(p), s0),
                ));
            }
        }
        let (b, d) = (s0[0], s0[1]);
        let g = parts.len();
        let mut out = vec![S::zero(); b * d * g];
        for (j, &p) in parts.iter().enumerate() {
            let pd = self.data(p);
            for bi in 0..b {
                for c in 0..d {
                    out[(bi * d + c) * g + j] = pd[bi * d + c];
                }
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(
            out,
            vec![b, d, g],
            Op::StackLastDim {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Depthwise convolution whose kernel spans the whole last axis:
    /// `x [B, D, g]`, `kernel [D, M, g]` -> `[B, D*M]`.
    pub fn depthwise_conv_full(&mut self, x: TensorId, kernel: TensorId) -> Result<TensorId> {
        let (b, d, g) = self.rank3("depthwise_conv, x", x)?;
        let ks = self.shape(kernel).to_vec();
        if ks.len() != 3 || ks[0] != d || ks[2] != g {
            return Err(Error::shape(
                "depthwise_conv",
                format!("input [{},{},{}] vs kernel {:?}", b, d, g, ks),
            ));
        }
        let m = ks[1];
        let xd = self.data(x);
        let kd = self.data(kernel);
        let mut out = vec![S::zero(); b * d * m];
        for bi in 0..b {
            for ch in 0..d {
                let xbase = (bi * d + ch) * g;
                for mi in 0..m {
                    let kbase = (ch * m + mi) * g;
                    let mut acc = S::zero();
                    for j in 0..g {
                        acc = acc + kd[kbase + j] * xd[xbase + j];
                    }
                    out[bi * d * m + ch * m + mi] = acc;
                }
            }
        }
        ensure_finite("depthwise_conv", &out)?;
        let needs = self.needs(&[x, kernel]);
        Ok(self.push(
            out,
            vec![b, d * m],
            Op::DepthwiseConvFull { x, kernel },
            needs,
        ))
    }

    /// Mean cross-entropy over the batch with optional label smoothing.
    pub fn cross_entropy_mean(
        &mut self,
        logits: TensorId,
        targets: &[u32],
        smoothing: f64,
    ) -> Result<TensorId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::shape(
                "cross_entropy",
                format!("expected [B, C], got {:?}", s),
            ));
        }
        let (b, c) = (s[0], s[1]);
        if targets.len() != b {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for batch {}", targets.len(), b),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {} out of {} classes", bad, c),
            ));
        }
        let eps = S::from_f64(smoothing);
        let ld = self.data(logits);
        let mut total = S::zero();
        for bi in 0..b {
            let row = &ld[bi * c..(bi + 1) * c];
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let mut lse = S::zero();
            for &v in row {
                lse = lse + (v - max).exp();
            }
            let lse = lse.ln() + max;
            // loss = -sum_c q_c * logp_c with q the smoothed one-hot.
            let mut mean_logp = S::zero();
            for &v in row {
                mean_logp = mean_logp + (v - lse);
            }
            mean_logp = mean_logp / S::from_f64(c as f64);
            let logp_t = row[targets[bi] as usize] - lse;
            total = total - ((S::one() - eps) * logp_t + eps * mean_logp);
        }
        let loss = total / S::from_f64(b as f64);
        ensure_finite("cross_entropy", std::slice::from_ref(&loss))?;
        let needs = self.needs(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::CrossEntropyMean {
                logits,
                targets: targets.to_vec(),
                smoothing: eps,
            },
            needs,
        ))
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut total = S::zero();
        for &v in self.data(x) {
            total = total + v;
        }
        ensure_finite("sum_all", std::slice::from_ref(&total))?;
        let needs = self.needs(&[x]);
        Ok(self.push(vec![total], vec![1], Op::SumAll { x }, needs))
    }
}

fn gauss_cdf<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let inv_sqrt2 = S::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (S::one() + (x * inv_sqrt2).erf())
}

fn gauss_pdf<S: Scalar>(x: S) -> S {
    let inv_sqrt_2pi = S::from_f64(0.3989422804014327);
    inv_sqrt_2pi * (-(x * x) * S::from_f64(0.5)).exp()
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    broadcast_b: bool,
}

impl MatmulDims {
    fn resolve(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let err = || Error::shape("matmul", format!("{:?} x {:?}", sa, sb));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        if sb.len() == 2 {
            return Ok(MatmulDims {
                batch: batch_a,
                m,
                k,
                n,
                broadcast_b: true,
            });
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        Ok(MatmulDims {
            batch: batch_a,
            m,
            k,
            n,
            broadcast_b: false,
        })
    }
}

/// `out = a[m,k] * b[k,n]`, accumulated in k-order.
fn mm<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// `out += g[m,n] * b[k,n]^T` (i.e. dA for `C = A*B`).
fn mm_gbt_acc<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let o_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = S::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc = acc + gv * bv;
            }
            o_row[p] = o_row[p] + acc;
        }
    }
}

/// `out += a[m,k]^T * g[m,n]` (i.e. dB for `C = A*B`).
fn mm_atg_acc<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in o_row.iter_mut().zip(g_row) {
                *o = *o + a_ip * gv;
            }
        }
    }
}

/// Reverse accumulation from a scalar `loss`. Gradients of leaves not
/// reachable from the loss stay zero (reported as `None` by [`Tape::grad`]
/// until touched; use [`Tape::grad`] on leaf ids after this returns).
pub fn backward<S: Scalar>(tape: &mut Tape<S>, loss: TensorId) -> Result<()> {
    if tape.shape(loss) != [1] {
        return Err(Error::shape(
            "backward",
            format!("loss must be scalar, got {:?}", tape.shape(loss)),
        ));
    }
    for g in tape.grads.iter_mut() {
        *g = None;
    }
    tape.grads[loss.0] = Some(vec![S::one()]);

    for i in (0..tape.nodes.len()).rev() {
        if tape.grads[i].is_none() || !tape.nodes[i].needs_grad {
            continue;
        }
        // Inputs precede outputs on the tape.
        let (before, rest) = tape.grads.split_at_mut(i);
        let g = rest[0].as_ref().expect("checked above").clone();
        let node = &tape.nodes[i];
        let nodes = &tape.nodes;
        let needs = |id: TensorId| nodes[id.0].needs_grad;
        let mut acc = |id: TensorId, f: &mut dyn FnMut(&mut [S])| {
            debug_assert!(id.0 < i, "tape must be topologically ordered");
            let slot =
                before[id.0].get_or_insert_with(|| vec![S::zero(); nodes[id.0].data.len()]);
            f(slot);
        };

        match &node.op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let dims = MatmulDims::resolve(&nodes[a.0].shape, &nodes[b.0].shape)
                    .expect("validated in forward");
                let (mk, kn, mn) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
                if needs(*a) {
                    acc(*a, &mut |da| {
                        for bi in 0..dims.batch {
                            let b_off = if dims.broadcast_b { 0 } else { bi * kn };
                            mm_gbt_acc(
                                &g[bi * mn..(bi + 1) * mn],
                                &nodes[b.0].data[b_off..b_off + kn],
                                dims.m,
                                dims.k,
                                dims.n,
                                &mut da[bi * mk..(bi + 1) * mk],
                            );
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |db| {
                        for bi in 0..dims.batch {
                            let b_off = if dims.broadcast_b { 0 } else { bi * kn };
                            mm_atg_acc(
                                &nodes[a.0].data[bi * mk..(bi + 1) * mk],
                                &g[bi * mn..(bi + 1) * mn],
                                dims.m,
                                dims.k,
                                dims.n,
                                &mut db[b_off..b_off + kn],
                            );
                        }
                    });
                }
            }

            Op::TransposeLast2 { x } => {
                if needs(*x) {
                    let s = &node.shape;
                    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                    let batch: usize = s[..s.len() - 2].iter().product();
                    acc(*x, &mut |dx| {
                        for bi in 0..batch {
                            let off = bi * r * c;
                            for ri in 0..r {
                                for ci in 0..c {
                                    dx[off + ci * r + ri] = dx[off + ci * r + ri] + g[off + ri * c + ci];
                                }
                            }
                        }
                    });
                }
            }

            Op::Add { a, b } => {
                for id in [a, b] {
                    if needs(*id) {
                        acc(*id, &mut |d| {
                            for (o, &gv) in d.iter_mut().zip(&g) {
                                *o = *o + gv;
                            }
                        });
                    }
                }
            }

            Op::Mul { a, b } => {
                if needs(*a) {
                    acc(*a, &mut |da| {
                        for ((o, &gv), &bv) in da.iter_mut().zip(&g).zip(&nodes[b.0].data) {
                            *o = *o + gv * bv;
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |db| {
                        for ((o, &gv), &av) in db.iter_mut().zip(&g).zip(&nodes[a.0].data) {
                            *o = *o + gv * av;
                        }
                    });
                }
            }

            Op::AddBias { x, bias } => {
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for (o, &gv) in dx.iter_mut().zip(&g) {
                            *o = *o + gv;
                        }
                    });
                }
                if needs(*bias) {
                    let d = nodes[bias.0].data.len();
                    acc(*bias, &mut |db| {
                        for (i, &gv) in g.iter().enumerate() {
                            db[i % d] = db[i % d] + gv;
                        }
                    });
                }
            }

            Op::AddPos { x, pos } => {
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for (o, &gv) in dx.iter_mut().zip(&g) {
                            *o = *o + gv;
                        }
                    });
                }
                if needs(*pos) {
                    let td = nodes[pos.0].data.len();
                    acc(*pos, &mut |dp| {
                        for (i, &gv) in g.iter().enumerate() {
                            dp[i % td] = dp[i % td] + gv;
                        }
                    });
                }
            }

            Op::BroadcastToken { p, batch } => {
                if needs(*p) {
                    let d = nodes[p.0].data.len();
                    let batch = *batch;
                    acc(*p, &mut |dp| {
                        for bi in 0..batch {
                            for c in 0..d {
                                dp[c] = dp[c] + g[bi * d + c];
                            }
                        }
                    });
                }
            }

            Op::Scale { x, c } => {
                if needs(*x) {
                    let c = *c;
                    acc(*x, &mut |dx| {
                        for (o, &gv) in dx.iter_mut().zip(&g) {
                            *o = *o + gv * c;
                        }
                    });
                }
            }

            Op::Gelu { x } => {
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for ((o, &gv), &xv) in dx.iter_mut().zip(&g).zip(&nodes[x.0].data) {
                            let d = gauss_cdf(xv) + xv * gauss_pdf(xv);
                            *o = *o + gv * d;
                        }
                    });
                }
            }

            Op::SoftmaxLastDim { x } => {
                if needs(*x) {
                    let d = *node.shape.last().unwrap();
                    let y = &node.data;
                    acc(*x, &mut |dx| {
                        for r in 0..y.len() / d {
                            let (ys, gs) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                            let mut dot = S::zero();
                            for (&yv, &gv) in ys.iter().zip(gs) {
                                dot = dot + yv * gv;
                            }
                            for (j, o) in dx[r * d..(r + 1) * d].iter_mut().enumerate() {
                                *o = *o + ys[j] * (gs[j] - dot);
                            }
                        }
                    });
                }
            }

            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let d = *node.shape.last().unwrap();
                let rows = node.data.len() / d;
                let xd = &nodes[x.0].data;
                let gd = &nodes[gamma.0].data;
                if needs(*gamma) {
                    acc(*gamma, &mut |dg| {
                        for r in 0..rows {
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                                dg[j] = dg[j] + g[r * d + j] * xhat;
                            }
                        }
                    });
                }
                if needs(*beta) {
                    acc(*beta, &mut |db| {
                        for r in 0..rows {
                            for j in 0..d {
                                db[j] = db[j] + g[r * d + j];
                            }
                        }
                    });
                }
                if needs(*x) {
                    let dn = S::from_f64(d as f64);
                    acc(*x, &mut |dx| {
                        for r in 0..rows {
                            let mut sum_dxhat = S::zero();
                            let mut sum_dxhat_xhat = S::zero();
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                                let dxhat = g[r * d + j] * gd[j];
                                sum_dxhat = sum_dxhat + dxhat;
                                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                            }
                            for j in 0..d {
                                let xhat = (xd[r * d + j] - mean[r]) * inv_std[r];
                                let dxhat = g[r * d + j] * gd[j];
                                dx[r * d + j] = dx[r * d + j]
                                    + inv_std[r] * (dxhat - sum_dxhat / dn - xhat * sum_dxhat_xhat / dn);
                            }
                        }
                    });
                }
            }

            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (b, c, sp) = match node.shape.len() {
                    2 => (node.shape[0], node.shape[1], 1),
                    _ => (node.shape[0], node.shape[1], node.shape[2]),
                };
                let xd = &nodes[x.0].data;
                let gd = &nodes[gamma.0].data;
                let n = S::from_f64((b * sp) as f64);
                if needs(*gamma) || needs(*beta) || needs(*x) {
                    // Per-channel reductions shared by all three gradients.
                    let mut sum_g = vec![S::zero(); c];
                    let mut sum_g_xhat = vec![S::zero(); c];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * sp;
                            for si in 0..sp {
                                let xhat = (xd[base + si] - mean[ch]) * inv_std[ch];
                                sum_g[ch] = sum_g[ch] + g[base + si];
                                sum_g_xhat[ch] = sum_g_xhat[ch] + g[base + si] * xhat;
                            }
                        }
                    }
                    if needs(*gamma) {
                        acc(*gamma, &mut |dg| {
                            for ch in 0..c {
                                dg[ch] = dg[ch] + sum_g_xhat[ch];
                            }
                        });
                    }
                    if needs(*beta) {
                        acc(*beta, &mut |db| {
                            for ch in 0..c {
                                db[ch] = db[ch] + sum_g[ch];
                            }
                        });
                    }
                    if needs(*x) {
                        acc(*x, &mut |dx| {
                            for bi in 0..b {
                                for ch in 0..c {
                                    let base = (bi * c + ch) * sp;
                                    for si in 0..sp {
                                        let xhat = (xd[base + si] - mean[ch]) * inv_std[ch];
                                        dx[base + si] = dx[base + si]
                                            + gd[ch] * inv_std[ch]
                                                * (g[base + si]
                                                    - sum_g[ch] / n
                                                    - xhat * sum_g_xhat[ch] / n);
                                    }
                                }
                            }
                        });
                    }
                }
            }

            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (b, c, sp) = match node.shape.len() {
                    2 => (node.shape[0], node.shape[1], 1),
                    _ => (node.shape[0], node.shape[1], node.shape[2]),
                };
                let xd = &nodes[x.0].data;
                let gd = &nodes[gamma.0].data;
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * sp;
                                for si in 0..sp {
                                    dx[base + si] = dx[base + si] + g[base + si] * gd[ch] * inv_std[ch];
                                }
                            }
                        }
                    });
                }
                if needs(*gamma) {
                    acc(*gamma, &mut |dg| {
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * sp;
                                for si in 0..sp {
                                    let xhat = (xd[base + si] - mean[ch]) * inv_std[ch];
                                    dg[ch] = dg[ch] + g[base + si] * xhat;
                                }
                            }
                        }
                    });
                }
                if needs(*beta) {
                    acc(*beta, &mut |db| {
                        for bi in 0..b {
                            for ch in 0..c {
                                let base = (bi * c + ch) * sp;
                                for si in 0..sp {
                                    db[ch] = db[ch] + g[base + si];
                                }
                            }
                        }
                    });
                }
            }

            Op::Reshape { x } => {
                if needs(*x) {
                    acc(*x, &mut |dx| {
                        for (o, &gv) in dx.iter_mut().zip(&g) {
                            *o = *o + gv;
                        }
                    });
                }
            }

            Op::SliceLastDim { x, start } => {
                if needs(*x) {
                    let len = *node.shape.last().unwrap();
                    let d = *nodes[x.0].shape.last().unwrap();
                    let start = *start;
                    acc(*x, &mut |dx| {
                        for (r, gr) in g.chunks_exact(len).enumerate() {
                            for (j, &gv) in gr.iter().enumerate() {
                                dx[r * d + start + j] = dx[r * d + start + j] + gv;
                            }
                        }
                    });
                }
            }

            Op::ToHeads { x, heads } => {
                if needs(*x) {
                    let (b, t, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1], nodes[x.0].shape[2]);
                    let dh = d / heads;
                    let heads = *heads;
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for h in 0..heads {
                                for ti in 0..t {
                                    let src = ((bi * heads + h) * t + ti) * dh;
                                    let dst = (bi * t + ti) * d + h * dh;
                                    for c in 0..dh {
                                        dx[dst + c] = dx[dst + c] + g[src + c];
                                    }
                                }
                            }
                        }
                    });
                }
            }

            Op::FromHeads { x, heads } => {
                if needs(*x) {
                    let (b, t, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let dh = d / heads;
                    let heads = *heads;
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for h in 0..heads {
                                for ti in 0..t {
                                    let src = (bi * t + ti) * d + h * dh;
                                    let dst = ((bi * heads + h) * t + ti) * dh;
                                    for c in 0..dh {
                                        dx[dst + c] = dx[dst + c] + g[src + c];
                                    }
                                }
                            }
                        }
                    });
                }
            }

            Op::SliceTokens { x, start } => {
                if needs(*x) {
                    let (b, len, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let t = nodes[x.0].shape[1];
                    let start = *start;
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for ti in 0..len {
                                let src = (bi * len + ti) * d;
                                let dst = (bi * t + start + ti) * d;
                                for c in 0..d {
                                    dx[dst + c] = dx[dst + c] + g[src + c];
                                }
                            }
                        }
                    });
                }
            }

            Op::ConcatTokens { parts } => {
                let b = node.shape[0];
                let d = node.shape[2];
                let total = node.shape[1];
                let mut offset = 0;
                for &p in parts {
                    let pt = nodes[p.0].shape[1];
                    if needs(p) {
                        let off = offset;
                        acc(p, &mut |dp| {
                            for bi in 0..b {
                                for ti in 0..pt {
                                    let src = (bi * total + off + ti) * d;
                                    let dst = (bi * pt + ti) * d;
                                    for c in 0..d {
                                        dp[dst + c] = dp[dst + c] + g[src + c];
                                    }
                                }
                            }
                        });
                    }
                    offset += pt;
                }
            }

            Op::GatherTokens { x, idx } => {
                if needs(*x) {
                    let (b, k, d) = (node.shape[0], node.shape[1], node.shape[2]);
                    let t = nodes[x.0].shape[1];
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for i in 0..k {
                                let ti = idx[bi * k + i] as usize;
                                let src = (bi * k + i) * d;
                                let dst = (bi * t + ti) * d;
                                for c in 0..d {
                                    dx[dst + c] = dx[dst + c] + g[src + c];
                                }
                            }
                        }
                    });
                }
            }

            Op::GatherScores { a, idx } => {
                if needs(*a) {
                    let (b, k) = (node.shape[0], node.shape[1]);
                    let t = nodes[a.0].shape[1];
                    acc(*a, &mut |da| {
                        for bi in 0..b {
                            for i in 0..k {
                                let ti = idx[bi * k + i] as usize;
                                da[bi * t + ti] = da[bi * t + ti] + g[bi * k + i];
                            }
                        }
                    });
                }
            }

            Op::ClsAttention { attn, heads } => {
                if needs(*attn) {
                    let (b, t) = (node.shape[0], node.shape[1]);
                    let hf = S::from_f64(*heads as f64);
                    let heads = *heads;
                    acc(*attn, &mut |da| {
                        for bi in 0..b {
                            for h in 0..heads {
                                let base = (bi * heads + h) * t * t;
                                for ti in 0..t {
                                    da[base + ti] = da[base + ti] + g[bi * t + ti] / hf;
                                }
                            }
                        }
                    });
                }
            }

            Op::NormalizeRows {
                a,
                sums,
                uniform_rows,
            } => {
                if needs(*a) {
                    let (b, n) = (node.shape[0], node.shape[1]);
                    let y = &node.data;
                    acc(*a, &mut |da| {
                        for bi in 0..b {
                            if uniform_rows[bi] {
                                continue; // fallback rows are constants
                            }
                            let (ys, gs) = (&y[bi * n..(bi + 1) * n], &g[bi * n..(bi + 1) * n]);
                            let mut dot = S::zero();
                            for (&yv, &gv) in ys.iter().zip(gs) {
                                dot = dot + yv * gv;
                            }
                            for j in 0..n {
                                da[bi * n + j] = da[bi * n + j] + (gs[j] - dot) / sums[bi];
                            }
                        }
                    });
                }
            }

            Op::WeightedSumTokens { x, w } => {
                let (b, n, d) = (
                    nodes[x.0].shape[0],
                    nodes[x.0].shape[1],
                    nodes[x.0].shape[2],
                );
                if needs(*x) {
                    let wd = &nodes[w.0].data;
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for i in 0..n {
                                let wv = wd[bi * n + i];
                                let base = (bi * n + i) * d;
                                for c in 0..d {
                                    dx[base + c] = dx[base + c] + wv * g[bi * d + c];
                                }
                            }
                        }
                    });
                }
                if needs(*w) {
                    let xd = &nodes[x.0].data;
                    acc(*w, &mut |dw| {
                        for bi in 0..b {
                            for i in 0..n {
                                let base = (bi * n + i) * d;
                                let mut dot = S::zero();
                                for c in 0..d {
                                    dot = dot + xd[base + c] * g[bi * d + c];
                                }
                                dw[bi * n + i] = dw[bi * n + i] + dot;
                            }
                        }
                    });
                }
            }

            Op::MeanTokens { x, start, end } => {
                if needs(*x) {
                    let (b, d) = (node.shape[0], node.shape[1]);
                    let t = nodes[x.0].shape[1];
                    let inv = S::from_f64(1.0 / (end - start) as f64);
                    let (start, end) = (*start, *end);
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for ti in start..end {
                                let dst = (bi * t + ti) * d;
                                for c in 0..d {
                                    dx[dst + c] = dx[dst + c] + g[bi * d + c] * inv;
                                }
                            }
                        }
                    });
                }
            }

            Op::StackLastDim { parts } => {
                let (b, d, gdim) = (node.shape[0], node.shape[1], node.shape[2]);
                for (j, &p) in parts.iter().enumerate() {
                    if needs(p) {
                        acc(p, &mut |dp| {
                            for bi in 0..b {
                                for c in 0..d {
                                    dp[bi * d + c] = dp[bi * d + c] + g[(bi * d + c) * gdim + j];
                                }
                            }
                        });
                    }
                }
            }

            Op::DepthwiseConvFull { x, kernel } => {
                let (b, d, gdim) = (
                    nodes[x.0].shape[0],
                    nodes[x.0].shape[1],
                    nodes[x.0].shape[2],
                );
                let m = nodes[kernel.0].shape[1];
                if needs(*x) {
                    let kd = &nodes[kernel.0].data;
                    acc(*x, &mut |dx| {
                        for bi in 0..b {
                            for ch in 0..d {
                                for mi in 0..m {
                                    let gv = g[bi * d * m + ch * m + mi];
                                    let kbase = (ch * m + mi) * gdim;
                                    let xbase = (bi * d + ch) * gdim;
                                    for j in 0..gdim {
                                        dx[xbase + j] = dx[xbase + j] + gv * kd[kbase + j];
                                    }
                                }
                            }
                        }
                    });
                }
                if needs(*kernel) {
                    let xd = &nodes[x.0].data;
                    acc(*kernel, &mut |dk| {
                        for bi in 0..b {
                            for ch in 0..d {
                                for mi in 0..m {
                                    let gv = g[bi * d * m + ch * m + mi];
                                    let kbase = (ch * m + mi) * gdim;
                                    let xbase = (bi * d + ch) * gdim;
                                    for j in 0..gdim {
                                        dk[kbase + j] = dk[kbase + j] + gv * xd[xbase + j];
                                    }
                                }
                            }
                        }
                    });
                }
            }

            Op::CrossEntropyMean {
                logits,
                targets,
                smoothing,
            } => {
                if needs(*logits) {
                    let (b, c) = (nodes[logits.0].shape[0], nodes[logits.0].shape[1]);
                    let ld = &nodes[logits.0].data;
                    let g0 = g[0];
                    let eps = *smoothing;
                    let bf = S::from_f64(b as f64);
                    let cf = S::from_f64(c as f64);
                    acc(*logits, &mut |dl| {
                        for bi in 0..b {
                            let row = &ld[bi * c..(bi + 1) * c];
                            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
                            let mut sum = S::zero();
                            for &v in row {
                                sum = sum + (v - max).exp();
                            }
                            for (j, o) in dl[bi * c..(bi + 1) * c].iter_mut().enumerate() {
                                let p = (row[j] - max).exp() / sum;
                                let q = if j == targets[bi] as usize {
                                    S::one() - eps + eps / cf
                                } else {
                                    eps / cf
                                };
                                *o = *o + g0 * (p - q) / bf;
                            }
                        }
                    });
                }
            }

            Op::SumAll { x } => {
                if needs(*x) {
                    let g0 = g[0];
                    acc(*x, &mut |dx| {
                        for o in dx.iter_mut() {
                            *o = *o + g0;
                        }
                    });
                }
            }
        }
    }
    Ok(())
}
