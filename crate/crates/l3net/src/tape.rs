//! Reverse-mode gradient tape over dense tensors.
//!
//! Every primitive records the inputs its adjoint needs; `backward` replays
//! the records in reverse. Evaluation order is fixed, so a given (seed,
//! config) pair produces bit-identical gradients run after run.

use std::sync::Arc;

use crate::error::{NumericError, ShapeError};
use crate::graph::{PatchLayout, SparseMatrix};
use crate::linalg::Mat;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

/// Block-diagonal symmetric operator on a concatenated patch vector; one
/// block per patch, in patch order.
#[derive(Debug, Clone)]
pub struct BlockDiag {
    pub offsets: Vec<usize>,
    pub blocks: Vec<Mat>,
}

impl BlockDiag {
    pub fn new(blocks: Vec<Mat>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        offsets.push(0);
        for b in &blocks {
            offsets.push(offsets.last().unwrap() + b.rows());
        }
        Self { offsets, blocks }
    }

    pub fn total_len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, block) in self.blocks.iter().enumerate() {
            let r = self.offsets[i]..self.offsets[i + 1];
            let y = block.matvec(&x[r.clone()]);
            out[r].copy_from_slice(&y);
        }
    }
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    AddBias { x: TensorId, bias: TensorId },
    Scale { x: TensorId, c: f64 },
    Relu(TensorId),
    LeakyRelu { x: TensorId, slope: f64 },
    MatMul { a: TensorId, b: TensorId },
    Reshape { x: TensorId },
    GatherPatch { x: TensorId, layout: Arc<PatchLayout> },
    ScatterAccumulate { y: TensorId, layout: Arc<PatchLayout> },
    SegmentSum { y: TensorId, layout: Arc<PatchLayout> },
    MulPatchWeights { x: TensorId, w: TensorId, layout: Arc<PatchLayout> },
    MulPatchScalar { x: TensorId, s: TensorId },
    PatchPairSum { src: TensorId, dst: TensorId, layout: Arc<PatchLayout> },
    PatchSoftmax { e: TensorId, layout: Arc<PatchLayout> },
    ChannelContract { x: TensorId, v: TensorId },
    ApplySparse { x: TensorId, m: Arc<SparseMatrix> },
    ApplyBlockDiag { x: TensorId, blocks: Arc<BlockDiag> },
    Dot { a: TensorId, b: TensorId },
    BatchNormTrain {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    GlobalMeanPool { x: TensorId },
    Stride2MaxPool { x: TensorId, argmax: Vec<usize> },
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Arc<Vec<usize>>,
        probs: Tensor,
    },
    SumSquares { x: TensorId },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a leaf. `requires_grad` marks trainable inputs.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradient of a leaf, zeros if it never received one.
    pub fn grad_or_zeros(&self, id: TensorId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- primitives ----

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError::Mismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = self.nodes[a.0].value.clone();
        out.add_assign(&self.nodes[b.0].value);
        let req = self.requires(&[a, b]);
        Ok(self.push(out, req, Op::Add(a, b)))
    }

    /// Broadcast a length-C bias over the last axis.
    pub fn add_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId, ShapeError> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return Err(ShapeError::Mismatch {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut out = self.nodes[x.0].value.clone();
        let b = self.nodes[bias.0].value.data();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % c];
        }
        let req = self.requires(&[x, bias]);
        Ok(self.push(out, req, Op::AddBias { x, bias }))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let mut out = self.nodes[x.0].value.clone();
        out.scale_assign(c);
        let req = self.requires(&[x]);
        self.push(out, req, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let req = self.requires(&[x]);
        self.push(out, req, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> TensorId {
        let mut out = self.nodes[x.0].value.clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let req = self.requires(&[x]);
        self.push(out, req, Op::LeakyRelu { x, slope })
    }

    /// (m, k) x (k, n) matrix product.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(ShapeError::Mismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        let req = self.requires(&[a, b]);
        Ok(self.push(Tensor::from_vec(&[m, n], out), req, Op::MatMul { a, b }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId, ShapeError> {
        if shape.iter().product::<usize>() != self.nodes[x.0].value.len() {
            return Err(ShapeError::Bad {
                op: "reshape",
                expected: format!("{} elements", self.nodes[x.0].value.len()),
                got: shape.to_vec(),
            });
        }
        let out = self.nodes[x.0].value.reshaped(shape);
        let req = self.requires(&[x]);
        Ok(self.push(out, req, Op::Reshape { x }))
    }

    /// (B, n, C) -> (B, P, C): copy node features into concatenated patches.
    pub fn gather_patch(
        &mut self,
        x: TensorId,
        layout: &Arc<PatchLayout>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != layout.n() {
            return Err(ShapeError::Bad {
                op: "gather_patch",
                expected: format!("(B, {}, C)", layout.n()),
                got: s,
            });
        }
        let (bsz, _, c) = (s[0], s[1], s[2]);
        let p = layout.total_len();
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; bsz * p * c];
        for b in 0..bsz {
            for (pos, &v) in layout.members.iter().enumerate() {
                let src = (b * layout.n() + v) * c;
                let dst = (b * p + pos) * c;
                out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
            }
        }
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[bsz, p, c], out),
            req,
            Op::GatherPatch {
                x,
                layout: Arc::clone(layout),
            },
        ))
    }

    /// (B, P, C) -> (B, n, C): add every patch entry back onto its source
    /// node. Adjoint of [`Tape::gather_patch`].
    pub fn scatter_accumulate(
        &mut self,
        y: TensorId,
        layout: &Arc<PatchLayout>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(y).to_vec();
        if s.len() != 3 || s[1] != layout.total_len() {
            return Err(ShapeError::Bad {
                op: "scatter_accumulate",
                expected: format!("(B, {}, C)", layout.total_len()),
                got: s,
            });
        }
        let (bsz, p, c) = (s[0], s[1], s[2]);
        let n = layout.n();
        let yv = self.nodes[y.0].value.data();
        let mut out = vec![0.0; bsz * n * c];
        for b in 0..bsz {
            for (pos, &v) in layout.members.iter().enumerate() {
                let src = (b * p + pos) * c;
                let dst = (b * n + v) * c;
                for cc in 0..c {
                    out[dst + cc] += yv[src + cc];
                }
            }
        }
        let req = self.requires(&[y]);
        Ok(self.push(
            Tensor::from_vec(&[bsz, n, c], out),
            req,
            Op::ScatterAccumulate {
                y,
                layout: Arc::clone(layout),
            },
        ))
    }

    /// (B, P, C) -> (B, n, C): sum each patch block onto its center node.
    pub fn segment_sum(
        &mut self,
        y: TensorId,
        layout: &Arc<PatchLayout>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(y).to_vec();
        if s.len() != 3 || s[1] != layout.total_len() {
            return Err(ShapeError::Bad {
                op: "segment_sum",
                expected: format!("(B, {}, C)", layout.total_len()),
                got: s,
            });
        }
        let (bsz, p, c) = (s[0], s[1], s[2]);
        let n = layout.n();
        let yv = self.nodes[y.0].value.data();
        let mut out = vec![0.0; bsz * n * c];
        for b in 0..bsz {
            for (pos, &u) in layout.centers.iter().enumerate() {
                let src = (b * p + pos) * c;
                let dst = (b * n + u) * c;
                for cc in 0..c {
                    out[dst + cc] += yv[src + cc];
                }
            }
        }
        let req = self.requires(&[y]);
        Ok(self.push(
            Tensor::from_vec(&[bsz, n, c], out),
            req,
            Op::SegmentSum {
                y,
                layout: Arc::clone(layout),
            },
        ))
    }

    /// Multiply patch entries by per-position filter weights, broadcast over
    /// batch and channels. `w` is either one weight per patch position or a
    /// shared template indexed through the layout's template map.
    pub fn mul_patch_weights(
        &mut self,
        x: TensorId,
        w: TensorId,
        layout: &Arc<PatchLayout>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(x).to_vec();
        let p = layout.total_len();
        if s.len() != 3 || s[1] != p {
            return Err(ShapeError::Bad {
                op: "mul_patch_weights",
                expected: format!("(B, {p}, C)"),
                got: s,
            });
        }
        let expected_w = match &layout.template_map {
            Some(_) => layout.template_len(),
            None => p,
        };
        if self.shape(w) != [expected_w] {
            return Err(ShapeError::Bad {
                op: "mul_patch_weights",
                expected: format!("weights of length {expected_w}"),
                got: self.shape(w).to_vec(),
            });
        }
        let (bsz, _, c) = (s[0], s[1], s[2]);
        let xv = self.nodes[x.0].value.data();
        let wv = self.nodes[w.0].value.data();
        let mut out = vec![0.0; bsz * p * c];
        for b in 0..bsz {
            for pos in 0..p {
                let weight = match &layout.template_map {
                    Some(map) => wv[map[pos]],
                    None => wv[pos],
                };
                let base = (b * p + pos) * c;
                for cc in 0..c {
                    out[base + cc] = weight * xv[base + cc];
                }
            }
        }
        let req = self.requires(&[x, w]);
        Ok(self.push(
            Tensor::from_vec(&s, out),
            req,
            Op::MulPatchWeights {
                x,
                w,
                layout: Arc::clone(layout),
            },
        ))
    }

    /// (B, P, C) * (B, P) -> (B, P, C), scalar per patch position.
    pub fn mul_patch_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId, ShapeError> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if sx.len() != 3 || ss.len() != 2 || sx[0] != ss[0] || sx[1] != ss[1] {
            return Err(ShapeError::Mismatch {
                op: "mul_patch_scalar",
                lhs: sx,
                rhs: ss,
            });
        }
        let (bsz, p, c) = (sx[0], sx[1], sx[2]);
        let xv = self.nodes[x.0].value.data();
        let sv = self.nodes[s.0].value.data();
        let mut out = vec![0.0; bsz * p * c];
        for bp in 0..bsz * p {
            let w = sv[bp];
            for cc in 0..c {
                out[bp * c + cc] = w * xv[bp * c + cc];
            }
        }
        let req = self.requires(&[x, s]);
        Ok(self.push(
            Tensor::from_vec(&sx, out),
            req,
            Op::MulPatchScalar { x, s },
        ))
    }

    /// Attention logits layout: e(b, pos) = src(b, center(pos)) + dst(b, member(pos)).
    pub fn patch_pair_sum(
        &mut self,
        src: TensorId,
        dst: TensorId,
        layout: &Arc<PatchLayout>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(src).to_vec();
        if s != self.shape(dst) || s.len() != 2 || s[1] != layout.n() {
            return Err(ShapeError::Mismatch {
                op: "patch_pair_sum",
                lhs: s,
                rhs: self.shape(dst).to_vec(),
            });
        }
        let (bsz, n) = (s[0], s[1]);
        let p = layout.total_len();
        let sv = self.nodes[src.0].value.data();
        let dv = self.nodes[dst.0].value.data();
        let mut out = vec![0.0; bsz * p];
        for b in 0..bsz {
            for pos in 0..p {
                out[b * p + pos] =
                    sv[b * n + layout.centers[pos]] + dv[b * n + layout.members[pos]];
            }
        }
        let req = self.requires(&[src, dst]);
        Ok(self.push(
            Tensor::from_vec(&[bsz, p], out),
            req,
            Op::PatchPairSum {
                src,
                dst,
                layout: Arc::clone(layout),
            },
        ))
    }

    /// Softmax within each patch segment of a (B, P) tensor.
    pub fn patch_softmax(
        &mut self,
        e: TensorId,
        layout: &Arc<PatchLayout>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(e).to_vec();
        if s.len() != 2 || s[1] != layout.total_len() {
            return Err(ShapeError::Bad {
                op: "patch_softmax",
                expected: format!("(B, {})", layout.total_len()),
                got: s,
            });
        }
        let (bsz, p) = (s[0], s[1]);
        let ev = self.nodes[e.0].value.data();
        let mut out = vec![0.0; bsz * p];
        for b in 0..bsz {
            for u in 0..layout.n() {
                let r = layout.range(u);
                let seg = &ev[b * p + r.start..b * p + r.end];
                let m = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (i, &x) in seg.iter().enumerate() {
                    let v = (x - m).exp();
                    out[b * p + r.start + i] = v;
                    z += v;
                }
                for i in r.clone() {
                    out[b * p + i] /= z;
                }
            }
        }
        let probs = Tensor::from_vec(&[bsz, p], out);
        let req = self.requires(&[e]);
        Ok(self.push(
            probs,
            req,
            Op::PatchSoftmax {
                e,
                layout: Arc::clone(layout),
            },
        ))
    }

    /// (B, n, C) . (C,) -> (B, n): contract the channel axis.
    pub fn channel_contract(&mut self, x: TensorId, v: TensorId) -> Result<TensorId, ShapeError> {
        let sx = self.shape(x).to_vec();
        let sv = self.shape(v).to_vec();
        if sx.len() != 3 || sv != [sx[2]] {
            return Err(ShapeError::Mismatch {
                op: "channel_contract",
                lhs: sx,
                rhs: sv,
            });
        }
        let (bsz, n, c) = (sx[0], sx[1], sx[2]);
        let xv = self.nodes[x.0].value.data();
        let vv = self.nodes[v.0].value.data();
        let mut out = vec![0.0; bsz * n];
        for bn in 0..bsz * n {
            out[bn] = xv[bn * c..(bn + 1) * c]
                .iter()
                .zip(vv)
                .map(|(a, b)| a * b)
                .sum();
        }
        let req = self.requires(&[x, v]);
        Ok(self.push(
            Tensor::from_vec(&[bsz, n], out),
            req,
            Op::ChannelContract { x, v },
        ))
    }

    /// Apply a fixed sparse operator along the node axis:
    /// z(b, u, :) = sum_v S[u, v] x(b, v, :).
    pub fn apply_sparse(
        &mut self,
        x: TensorId,
        m: &Arc<SparseMatrix>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] != m.n {
            return Err(ShapeError::Bad {
                op: "apply_sparse",
                expected: format!("(B, {}, C)", m.n),
                got: s,
            });
        }
        let (bsz, n, c) = (s[0], s[1], s[2]);
        let xv = self.nodes[x.0].value.data();
        let out = sparse_node_apply(m, xv, bsz, n, c);
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::from_vec(&s, out),
            req,
            Op::ApplySparse {
                x,
                m: Arc::clone(m),
            },
        ))
    }

    /// Block-diagonal symmetric operator on a flat concatenated-patch vector.
    pub fn apply_block_diag(
        &mut self,
        x: TensorId,
        blocks: &Arc<BlockDiag>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(x).to_vec();
        if s != [blocks.total_len()] {
            return Err(ShapeError::Bad {
                op: "apply_block_diag",
                expected: format!("({},)", blocks.total_len()),
                got: s,
            });
        }
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; xv.len()];
        blocks.apply(xv, &mut out);
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::from_vec(&s, out),
            req,
            Op::ApplyBlockDiag {
                x,
                blocks: Arc::clone(blocks),
            },
        ))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError::Mismatch {
                op: "dot",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let v = crate::linalg::dot(self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let req = self.requires(&[a, b]);
        Ok(self.push(Tensor::scalar(v), req, Op::Dot { a, b }))
    }

    /// Batch norm over (batch x nodes) per channel. Training mode uses batch
    /// statistics and returns them so the caller can maintain running stats.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<(TensorId, Vec<f64>, Vec<f64>), ShapeError> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if s.len() != 3 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(ShapeError::Bad {
                op: "batch_norm",
                expected: "(B, n, C) with (C,) affine".into(),
                got: s,
            });
        }
        let reduce = s[0] * s[1];
        let xv = self.nodes[x.0].value.data();
        let mut mean = vec![0.0; c];
        for i in 0..reduce {
            for cc in 0..c {
                mean[cc] += xv[i * c + cc];
            }
        }
        mean.iter_mut().for_each(|m| *m /= reduce as f64);
        let mut var = vec![0.0; c];
        for i in 0..reduce {
            for cc in 0..c {
                let d = xv[i * c + cc] - mean[cc];
                var[cc] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= reduce as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = vec![0.0; xv.len()];
        for i in 0..reduce {
            for cc in 0..c {
                xhat[i * c + cc] = (xv[i * c + cc] - mean[cc]) * inv_std[cc];
            }
        }
        let g = self.nodes[gamma.0].value.data().to_vec();
        let bt = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![0.0; xv.len()];
        for i in 0..reduce {
            for cc in 0..c {
                out[i * c + cc] = g[cc] * xhat[i * c + cc] + bt[cc];
            }
        }
        let xhat = Tensor::from_vec(&s, xhat);
        let req = self.requires(&[x, gamma, beta]);
        let id = self.push(
            Tensor::from_vec(&s, out),
            req,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((id, mean, var))
    }

    /// Batch norm with frozen (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(x).to_vec();
        let c = *s.last().unwrap();
        if s.len() != 3 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(ShapeError::Bad {
                op: "batch_norm",
                expected: "(B, n, C) with (C,) affine".into(),
                got: s,
            });
        }
        let reduce = s[0] * s[1];
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.nodes[x.0].value.data();
        let mut xhat = vec![0.0; xv.len()];
        for i in 0..reduce {
            for cc in 0..c {
                xhat[i * c + cc] = (xv[i * c + cc] - running_mean[cc]) * inv_std[cc];
            }
        }
        let g = self.nodes[gamma.0].value.data().to_vec();
        let bt = self.nodes[beta.0].value.data().to_vec();
        let mut out = vec![0.0; xv.len()];
        for i in 0..reduce {
            for cc in 0..c {
                out[i * c + cc] = g[cc] * xhat[i * c + cc] + bt[cc];
            }
        }
        let xhat = Tensor::from_vec(&s, xhat);
        let req = self.requires(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(&s, out),
            req,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// (B, n, C) -> (B, C), mean over the node axis.
    pub fn global_mean_pool_nodes(&mut self, x: TensorId) -> Result<TensorId, ShapeError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(ShapeError::Bad {
                op: "global_mean_pool_nodes",
                expected: "(B, n, C)".into(),
                got: s,
            });
        }
        let (bsz, n, c) = (s[0], s[1], s[2]);
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; bsz * c];
        for b in 0..bsz {
            for u in 0..n {
                for cc in 0..c {
                    out[b * c + cc] += xv[(b * n + u) * c + cc];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[bsz, c], out),
            req,
            Op::GlobalMeanPool { x },
        ))
    }

    /// (B, n, C) -> (B, n/2, C): max over consecutive node pairs. Ties go to
    /// the earlier node.
    pub fn stride2_max_pool_nodes(&mut self, x: TensorId) -> Result<TensorId, ShapeError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] % 2 != 0 {
            return Err(ShapeError::Bad {
                op: "stride2_max_pool_nodes",
                expected: "(B, n, C) with even n".into(),
                got: s,
            });
        }
        let (bsz, n, c) = (s[0], s[1], s[2]);
        let half = n / 2;
        let xv = self.nodes[x.0].value.data();
        let mut out = vec![0.0; bsz * half * c];
        let mut argmax = vec![0usize; bsz * half * c];
        for b in 0..bsz {
            for j in 0..half {
                for cc in 0..c {
                    let i0 = (b * n + 2 * j) * c + cc;
                    let i1 = (b * n + 2 * j + 1) * c + cc;
                    let o = (b * half + j) * c + cc;
                    if xv[i1] > xv[i0] {
                        out[o] = xv[i1];
                        argmax[o] = i1;
                    } else {
                        out[o] = xv[i0];
                        argmax[o] = i0;
                    }
                }
            }
        }
        let req = self.requires(&[x]);
        Ok(self.push(
            Tensor::from_vec(&[bsz, half, c], out),
            req,
            Op::Stride2MaxPool { x, argmax },
        ))
    }

    /// Mean cross-entropy of softmax(logits) against integer labels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &Arc<Vec<usize>>,
    ) -> Result<TensorId, ShapeError> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(ShapeError::Bad {
                op: "softmax_cross_entropy",
                expected: format!("({}, L) logits", labels.len()),
                got: s,
            });
        }
        let (bsz, l) = (s[0], s[1]);
        let xv = self.nodes[logits.0].value.data();
        let mut probs = vec![0.0; bsz * l];
        let mut loss = 0.0;
        for b in 0..bsz {
            let row = &xv[b * l..(b + 1) * l];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - m).exp();
                probs[b * l + j] = e;
                z += e;
            }
            for j in 0..l {
                probs[b * l + j] /= z;
            }
            loss -= row[labels[b]] - m - z.ln();
        }
        loss /= bsz as f64;
        let probs = Tensor::from_vec(&[bsz, l], probs);
        let req = self.requires(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            req,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: Arc::clone(labels),
                probs,
            },
        ))
    }

    pub fn sum_squares(&mut self, x: TensorId) -> TensorId {
        let v: f64 = self.nodes[x.0].value.data().iter().map(|a| a * a).sum();
        let req = self.requires(&[x]);
        self.push(Tensor::scalar(v), req, Op::SumSquares { x })
    }

    // ---- backward ----

    /// Seed the scalar `loss` with gradient 1 and run all adjoints in
    /// reverse recording order.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), NumericError> {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        if !self.nodes[loss.0].value.data()[0].is_finite() {
            return Err(NumericError::NonFinite {
                context: "loss before backward".into(),
            });
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.nodes[loss.0].grad = Some(Tensor::from_vec(&seed_shape, vec![1.0]));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            self.apply_adjoint(i, &grad);
        }
        Ok(())
    }

    fn add_grad(&mut self, id: TensorId, delta: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut self.nodes[id.0].grad {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn apply_adjoint(&mut self, i: usize, grad: &Tensor) {
        // `grad` is d(loss)/d(node i); push contributions to the inputs.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(*a, grad.clone());
                self.add_grad(*b, grad.clone());
            }
            Op::AddBias { x, bias } => {
                self.add_grad(*x, grad.clone());
                let c = self.nodes[bias.0].value.len();
                let mut gb = vec![0.0; c];
                for (i, g) in grad.data().iter().enumerate() {
                    gb[i % c] += g;
                }
                self.add_grad(*bias, Tensor::from_vec(&[c], gb));
            }
            Op::Scale { x, c } => {
                let mut g = grad.clone();
                g.scale_assign(*c);
                self.add_grad(*x, g);
            }
            Op::Relu(x) => {
                let mut g = grad.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.add_grad(*x, g);
            }
            Op::LeakyRelu { x, slope } => {
                let mut g = grad.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(self.nodes[x.0].value.data()) {
                    if xv < 0.0 {
                        *gv *= slope;
                    }
                }
                self.add_grad(*x, g);
            }
            Op::MatMul { a, b } => {
                let sa = self.nodes[a.0].value.shape().to_vec();
                let sb = self.nodes[b.0].value.shape().to_vec();
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gv = grad.data();
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.data();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        let garow = &mut ga[i * k..(i + 1) * k];
                        for (kk, gaik) in garow.iter_mut().enumerate() {
                            let brow = &bv[kk * n..(kk + 1) * n];
                            *gaik += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                    self.add_grad(*a, Tensor::from_vec(&sa, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.data();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gv[i * n..(i + 1) * n];
                        let arow = &av[i * k..(i + 1) * k];
                        for (kk, &aik) in arow.iter().enumerate() {
                            if aik == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[kk * n..(kk + 1) * n];
                            for (gbv, &g) in gbrow.iter_mut().zip(grow) {
                                *gbv += aik * g;
                            }
                        }
                    }
                    self.add_grad(*b, Tensor::from_vec(&sb, gb));
                }
            }
            Op::Reshape { x } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                self.add_grad(*x, grad.reshaped(&shape));
            }
            Op::GatherPatch { x, layout } => {
                // adjoint is scatter-accumulate
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (bsz, n, c) = (sx[0], sx[1], sx[2]);
                let p = layout.total_len();
                let gv = grad.data();
                let mut gx = vec![0.0; bsz * n * c];
                for b in 0..bsz {
                    for (pos, &v) in layout.members.iter().enumerate() {
                        let src = (b * p + pos) * c;
                        let dst = (b * n + v) * c;
                        for cc in 0..c {
                            gx[dst + cc] += gv[src + cc];
                        }
                    }
                }
                self.add_grad(*x, Tensor::from_vec(&sx, gx));
            }
            Op::ScatterAccumulate { y, layout } => {
                // adjoint is gather
                let sy = self.nodes[y.0].value.shape().to_vec();
                let (bsz, p, c) = (sy[0], sy[1], sy[2]);
                let n = layout.n();
                let gv = grad.data();
                let mut gy = vec![0.0; bsz * p * c];
                for b in 0..bsz {
                    for (pos, &v) in layout.members.iter().enumerate() {
                        let src = (b * n + v) * c;
                        let dst = (b * p + pos) * c;
                        gy[dst..dst + c].copy_from_slice(&gv[src..src + c]);
                    }
                }
                self.add_grad(*y, Tensor::from_vec(&sy, gy));
            }
            Op::SegmentSum { y, layout } => {
                let sy = self.nodes[y.0].value.shape().to_vec();
                let (bsz, p, c) = (sy[0], sy[1], sy[2]);
                let n = layout.n();
                let gv = grad.data();
                let mut gy = vec![0.0; bsz * p * c];
                for b in 0..bsz {
                    for (pos, &u) in layout.centers.iter().enumerate() {
                        let src = (b * n + u) * c;
                        let dst = (b * p + pos) * c;
                        gy[dst..dst + c].copy_from_slice(&gv[src..src + c]);
                    }
                }
                self.add_grad(*y, Tensor::from_vec(&sy, gy));
            }
            Op::MulPatchWeights { x, w, layout } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (bsz, p, c) = (sx[0], sx[1], sx[2]);
                let gv = grad.data();
                let wv = self.nodes[w.0].value.data().to_vec();
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; bsz * p * c];
                    for b in 0..bsz {
                        for pos in 0..p {
                            let weight = match &layout.template_map {
                                Some(map) => wv[map[pos]],
                                None => wv[pos],
                            };
                            let base = (b * p + pos) * c;
                            for cc in 0..c {
                                gx[base + cc] = weight * gv[base + cc];
                            }
                        }
                    }
                    self.add_grad(*x, Tensor::from_vec(&sx, gx));
                }
                if self.nodes[w.0].requires_grad {
                    let xv = self.nodes[x.0].value.data();
                    let wlen = self.nodes[w.0].value.len();
                    let mut gw = vec![0.0; wlen];
                    for b in 0..bsz {
                        for pos in 0..p {
                            let slot = match &layout.template_map {
                                Some(map) => map[pos],
                                None => pos,
                            };
                            let base = (b * p + pos) * c;
                            let mut s = 0.0;
                            for cc in 0..c {
                                s += xv[base + cc] * gv[base + cc];
                            }
                            gw[slot] += s;
                        }
                    }
                    self.add_grad(*w, Tensor::from_vec(&[wlen], gw));
                }
            }
            Op::MulPatchScalar { x, s } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (bsz, p, c) = (sx[0], sx[1], sx[2]);
                let gv = grad.data();
                if self.nodes[x.0].requires_grad {
                    let sv = self.nodes[s.0].value.data();
                    let mut gx = vec![0.0; bsz * p * c];
                    for bp in 0..bsz * p {
                        for cc in 0..c {
                            gx[bp * c + cc] = sv[bp] * gv[bp * c + cc];
                        }
                    }
                    self.add_grad(*x, Tensor::from_vec(&sx, gx));
                }
                if self.nodes[s.0].requires_grad {
                    let xv = self.nodes[x.0].value.data();
                    let mut gs = vec![0.0; bsz * p];
                    for bp in 0..bsz * p {
                        let mut acc = 0.0;
                        for cc in 0..c {
                            acc += xv[bp * c + cc] * gv[bp * c + cc];
                        }
                        gs[bp] = acc;
                    }
                    self.add_grad(*s, Tensor::from_vec(&[bsz, p], gs));
                }
            }
            Op::PatchPairSum { src, dst, layout } => {
                let s = self.nodes[src.0].value.shape().to_vec();
                let (bsz, n) = (s[0], s[1]);
                let p = layout.total_len();
                let gv = grad.data();
                if self.nodes[src.0].requires_grad {
                    let mut g = vec![0.0; bsz * n];
                    for b in 0..bsz {
                        for pos in 0..p {
                            g[b * n + layout.centers[pos]] += gv[b * p + pos];
                        }
                    }
                    self.add_grad(*src, Tensor::from_vec(&s, g));
                }
                if self.nodes[dst.0].requires_grad {
                    let mut g = vec![0.0; bsz * n];
                    for b in 0..bsz {
                        for pos in 0..p {
                            g[b * n + layout.members[pos]] += gv[b * p + pos];
                        }
                    }
                    self.add_grad(*dst, Tensor::from_vec(&s, g));
                }
            }
            Op::PatchSoftmax { e, layout } => {
                let s = self.nodes[i].value.shape().to_vec();
                let (bsz, p) = (s[0], s[1]);
                let alpha = self.nodes[i].value.data();
                let gv = grad.data();
                let mut ge = vec![0.0; bsz * p];
                for b in 0..bsz {
                    for u in 0..layout.n() {
                        let r = layout.range(u);
                        let mut inner = 0.0;
                        for j in r.clone() {
                            inner += alpha[b * p + j] * gv[b * p + j];
                        }
                        for j in r {
                            ge[b * p + j] = alpha[b * p + j] * (gv[b * p + j] - inner);
                        }
                    }
                }
                self.add_grad(*e, Tensor::from_vec(&s, ge));
            }
            Op::ChannelContract { x, v } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (bsz, n, c) = (sx[0], sx[1], sx[2]);
                let gv = grad.data();
                if self.nodes[x.0].requires_grad {
                    let vv = self.nodes[v.0].value.data();
                    let mut gx = vec![0.0; bsz * n * c];
                    for bn in 0..bsz * n {
                        for cc in 0..c {
                            gx[bn * c + cc] = gv[bn] * vv[cc];
                        }
                    }
                    self.add_grad(*x, Tensor::from_vec(&sx, gx));
                }
                if self.nodes[v.0].requires_grad {
                    let xv = self.nodes[x.0].value.data();
                    let mut gvv = vec![0.0; c];
                    for bn in 0..bsz * n {
                        for cc in 0..c {
                            gvv[cc] += gv[bn] * xv[bn * c + cc];
                        }
                    }
                    self.add_grad(*v, Tensor::from_vec(&[c], gvv));
                }
            }
            Op::ApplySparse { x, m } => {
                // operators here are symmetric, but transpose explicitly
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (bsz, n, c) = (sx[0], sx[1], sx[2]);
                let gv = grad.data();
                let mut gx = vec![0.0; bsz * n * c];
                for b in 0..bsz {
                    for (u, row) in m.rows.iter().enumerate() {
                        let src = (b * n + u) * c;
                        for &(v, w) in row {
                            let dst = (b * n + v) * c;
                            for cc in 0..c {
                                gx[dst + cc] += w * gv[src + cc];
                            }
                        }
                    }
                }
                self.add_grad(*x, Tensor::from_vec(&sx, gx));
            }
            Op::ApplyBlockDiag { x, blocks } => {
                let gv = grad.data();
                let mut gx = vec![0.0; gv.len()];
                // blocks are symmetric Laplacians; L^T = L
                blocks.apply(gv, &mut gx);
                let sx = self.nodes[x.0].value.shape().to_vec();
                self.add_grad(*x, Tensor::from_vec(&sx, gx));
            }
            Op::Dot { a, b } => {
                let g = grad.item();
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].value.clone();
                    let sa = self.nodes[a.0].value.shape().to_vec();
                    let ga: Vec<f64> = bv.data().iter().map(|x| g * x).collect();
                    self.add_grad(*a, Tensor::from_vec(&sa, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].value.clone();
                    let sb = self.nodes[b.0].value.shape().to_vec();
                    let gb: Vec<f64> = av.data().iter().map(|x| g * x).collect();
                    self.add_grad(*b, Tensor::from_vec(&sb, gb));
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = xhat.shape().to_vec();
                let (bsz, n, c) = (s[0], s[1], s[2]);
                let reduce = (bsz * n) as f64;
                let gv = grad.data();
                let xh = xhat.data();
                let gamma_v = self.nodes[gamma.0].value.data().to_vec();

                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..bsz * n {
                    for cc in 0..c {
                        sum_g[cc] += gv[i * c + cc];
                        sum_gx[cc] += gv[i * c + cc] * xh[i * c + cc];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![0.0; bsz * n * c];
                    for i in 0..bsz * n {
                        for cc in 0..c {
                            let t = gv[i * c + cc]
                                - sum_g[cc] / reduce
                                - xh[i * c + cc] * sum_gx[cc] / reduce;
                            gx[i * c + cc] = gamma_v[cc] * inv_std[cc] * t;
                        }
                    }
                    self.add_grad(*x, Tensor::from_vec(&s, gx));
                }
                self.add_grad(*gamma, Tensor::from_vec(&[c], sum_gx));
                self.add_grad(*beta, Tensor::from_vec(&[c], sum_g));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let s = xhat.shape().to_vec();
                let c = *s.last().unwrap();
                let gv = grad.data();
                let xh = xhat.data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for i in 0..gv.len() / c {
                    for cc in 0..c {
                        sum_g[cc] += gv[i * c + cc];
                        sum_gx[cc] += gv[i * c + cc] * xh[i * c + cc];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    // frozen stats make the map affine per channel
                    let gamma_v = self.nodes[gamma.0].value.data().to_vec();
                    let mut gx = vec![0.0; gv.len()];
                    for i in 0..gv.len() / c {
                        for cc in 0..c {
                            gx[i * c + cc] = gamma_v[cc] * inv_std[cc] * gv[i * c + cc];
                        }
                    }
                    self.add_grad(*x, Tensor::from_vec(&s, gx));
                }
                self.add_grad(*gamma, Tensor::from_vec(&[c], sum_gx));
                self.add_grad(*beta, Tensor::from_vec(&[c], sum_g));
            }
            Op::GlobalMeanPool { x } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let (bsz, n, c) = (sx[0], sx[1], sx[2]);
                let gv = grad.data();
                let mut gx = vec![0.0; bsz * n * c];
                for b in 0..bsz {
                    for u in 0..n {
                        for cc in 0..c {
                            gx[(b * n + u) * c + cc] = gv[b * c + cc] / n as f64;
                        }
                    }
                }
                self.add_grad(*x, Tensor::from_vec(&sx, gx));
            }
            Op::Stride2MaxPool { x, argmax } => {
                let sx = self.nodes[x.0].value.shape().to_vec();
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += grad.data()[o];
                }
                self.add_grad(*x, Tensor::from_vec(&sx, gx));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let s = probs.shape().to_vec();
                let (bsz, l) = (s[0], s[1]);
                let g = grad.item() / bsz as f64;
                let mut gl = probs.data().to_vec();
                for (b, &label) in labels.iter().enumerate() {
                    gl[b * l + label] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= g);
                self.add_grad(*logits, Tensor::from_vec(&s, gl));
            }
            Op::SumSquares { x } => {
                let g = grad.item();
                let sx = self.nodes[x.0].value.shape().to_vec();
                let gx: Vec<f64> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .map(|v| 2.0 * v * g)
                    .collect();
                self.add_grad(*x, Tensor::from_vec(&sx, gx));
            }
        }
        self.nodes[i].op = op;
    }
}

fn sparse_node_apply(m: &SparseMatrix, xv: &[f64], bsz: usize, n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; bsz * n * c];
    for b in 0..bsz {
        for (u, row) in m.rows.iter().enumerate() {
            let dst = (b * n + u) * c;
            for &(v, w) in row {
                let src = (b * n + v) * c;
                for cc in 0..c {
                    out[dst + cc] += w * xv[src + cc];
                }
            }
        }
    }
    out
}

/// Central-difference gradient check.
///
/// `f` evaluates the scalar objective at a flat parameter vector and also
/// returns its analytic gradient; only the value is used at the shifted
/// points. Returns the max over coordinates of
/// |analytic - central| / (|analytic| + |central| + 1e-12).
pub fn grad_check<F>(f: F, theta: &[f64], eps: f64) -> Result<f64, NumericError>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    let (value, analytic) = f(theta);
    if !value.is_finite() || analytic.iter().any(|g| !g.is_finite()) {
        return Err(NumericError::NonFinite {
            context: "grad_check center evaluation".into(),
        });
    }
    assert_eq!(analytic.len(), theta.len());
    let mut worst = 0.0f64;
    let mut shifted = theta.to_vec();
    for i in 0..theta.len() {
        shifted[i] = theta[i] + eps;
        let (fp, _) = f(&shifted);
        shifted[i] = theta[i] - eps;
        let (fm, _) = f(&shifted);
        shifted[i] = theta[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(NumericError::NonFinite {
                context: format!("grad_check shifted evaluation at coordinate {i}"),
            });
        }
        let central = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - central).abs() / (analytic[i].abs() + central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
