//! The layer zoo: the low-rank local-filter graph convolution plus the
//! reference spectral and spatial layers it subsumes (Chebyshev, GCN,
//! attention, edge-varying). All layers share one forward contract so
//! reductions can be checked output against output.

use std::sync::Arc;

use rand::Rng;

use crate::error::{LayerError, ShapeError};
use crate::graph::{AdjacencyMode, Graph, PatchLayout, SparseMatrix};
use crate::linalg::Mat;
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Id,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: TensorId) -> TensorId {
        match self {
            Activation::Id => x,
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Chebyshev rescaling: alpha_1 = -1, alpha_2 = 1, so the recursion operator
/// is -A_sym and its spectrum sits in [-1, 1] without estimating lambda_max.
pub const CHEB_ALPHA: (f64, f64) = (-1.0, 1.0);

fn mix_channels(
    tape: &mut Tape,
    z: TensorId,
    theta: TensorId,
    bsz: usize,
    n: usize,
    c_in: usize,
    c_out: usize,
) -> Result<TensorId, ShapeError> {
    let flat = tape.reshape(z, &[bsz * n, c_in])?;
    let mixed = tape.matmul(flat, theta)?;
    tape.reshape(mixed, &[bsz, n, c_out])
}

// ---------------------------------------------------------------------------
// L3Net filter bank
// ---------------------------------------------------------------------------

/// Trainable low-rank local filter bank: K per-node basis filters over
/// d_k-order neighborhoods, mixed across channels by per-basis coefficient
/// matrices, plus an output bias.
///
/// Basis storage is the structural sparsity: filter k at node u is a dense
/// vector over the canonical (ascending node id) members of the order-d_k
/// patch of u. With `shared` set there is one signed-offset template per
/// basis instead of per-node vectors.
#[derive(Debug, Clone)]
pub struct FilterBank {
    pub n: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub orders: Vec<usize>,
    pub layouts: Vec<Arc<PatchLayout>>,
    /// Per basis: concatenated per-node filter values, or one template when
    /// `shared`.
    pub basis: Vec<Tensor>,
    /// Per basis: (C_in, C_out) mixing coefficients.
    pub coeffs: Vec<Tensor>,
    pub bias: Tensor,
    pub shared: bool,
}

impl FilterBank {
    /// Random bank: basis entries uniform in +/- |patch|^{-1/2}, coefficients
    /// uniform in +/- (K * C_in)^{-1/2}, zero bias.
    pub fn new<R: Rng>(
        g: &Graph,
        orders: &[usize],
        c_in: usize,
        c_out: usize,
        shared: bool,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        let mut bank = Self::zeros(g, orders, c_in, c_out, shared)?;
        let t = 1.0 / ((orders.len() * c_in) as f64).sqrt();
        for k in 0..orders.len() {
            let layout = Arc::clone(&bank.layouts[k]);
            let w = bank.basis[k].data_mut();
            if shared {
                let s = 1.0 / (layout.template_len() as f64).sqrt();
                for v in w.iter_mut() {
                    *v = rng.random_range(-s..=s);
                }
            } else {
                for u in 0..layout.n() {
                    let s = 1.0 / (layout.patch_len(u) as f64).sqrt();
                    for pos in layout.range(u) {
                        w[pos] = rng.random_range(-s..=s);
                    }
                }
            }
            for v in bank.coeffs[k].data_mut() {
                *v = rng.random_range(-t..=t);
            }
        }
        Ok(bank)
    }

    pub fn zeros(
        g: &Graph,
        orders: &[usize],
        c_in: usize,
        c_out: usize,
        shared: bool,
    ) -> Result<Self, LayerError> {
        assert!(!orders.is_empty(), "need at least one basis");
        let mut layout_cache: Vec<(usize, Arc<PatchLayout>)> = Vec::new();
        let mut layouts = Vec::with_capacity(orders.len());
        for &d in orders {
            if let Some((_, l)) = layout_cache.iter().find(|(order, _)| *order == d) {
                layouts.push(Arc::clone(l));
                continue;
            }
            let layout = if shared {
                PatchLayout::with_shared_template(g, d).map_err(|_| LayerError::GraphMismatch {
                    expected: g.n(),
                    got: g.n(),
                })?
            } else {
                PatchLayout::new(g, d)
            };
            let rc = Arc::new(layout);
            layout_cache.push((d, Arc::clone(&rc)));
            layouts.push(rc);
        }
        let basis = layouts
            .iter()
            .map(|l| {
                let len = if shared { l.template_len() } else { l.total_len() };
                Tensor::zeros(&[len])
            })
            .collect();
        let coeffs = orders
            .iter()
            .map(|_| Tensor::zeros(&[c_in, c_out]))
            .collect();
        Ok(Self {
            n: g.n(),
            in_channels: c_in,
            out_channels: c_out,
            orders: orders.to_vec(),
            layouts,
            basis,
            coeffs,
            bias: Tensor::zeros(&[c_out]),
            shared,
        })
    }

    pub fn rank(&self) -> usize {
        self.orders.len()
    }

    /// B_k(u', u): filter value at source node u' for center u; zero outside
    /// the patch (the structural sparsity).
    pub fn basis_value(&self, k: usize, source: usize, center: usize) -> f64 {
        let layout = &self.layouts[k];
        let range = layout.range(center);
        let patch = layout.patch(center);
        match patch.binary_search(&source) {
            Ok(i) => {
                let pos = range.start + i;
                match &layout.template_map {
                    Some(map) => self.basis[k].data()[map[pos]],
                    None => self.basis[k].data()[pos],
                }
            }
            Err(_) => 0.0,
        }
    }

    /// The per-node filter of basis k at node u, in canonical patch order.
    pub fn filter_at(&self, k: usize, u: usize) -> Vec<f64> {
        let layout = &self.layouts[k];
        layout
            .range(u)
            .map(|pos| match &layout.template_map {
                Some(map) => self.basis[k].data()[map[pos]],
                None => self.basis[k].data()[pos],
            })
            .collect()
    }

    /// Trainable parameter count: coefficients + basis storage + bias.
    pub fn param_count(&self) -> usize {
        let coeff: usize = self.coeffs.iter().map(Tensor::len).sum();
        let basis: usize = self.basis.iter().map(Tensor::len).sum();
        coeff + basis + self.bias.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.basis.iter().collect();
        out.extend(self.coeffs.iter());
        out.push(&self.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.basis.iter_mut().collect();
        out.extend(self.coeffs.iter_mut());
        out.push(&mut self.bias);
        out
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let ids = self.register(tape);
        self.forward_with_ids(tape, &ids, x, act)
    }

    /// Forward with pre-registered parameter ids (order of [`Self::params`]).
    pub fn forward_with_ids(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(ShapeError::Bad {
                op: "l3net_forward",
                expected: format!("(B, {}, {})", self.n, self.in_channels),
                got: shape,
            }
            .into());
        }
        if shape[1] != self.n {
            return Err(LayerError::GraphMismatch {
                expected: self.n,
                got: shape[1],
            });
        }
        let (bsz, n) = (shape[0], shape[1]);
        let k = self.rank();
        let (basis_ids, rest) = ids.split_at(k);
        let (coeff_ids, bias_id) = rest.split_at(k);

        let mut acc: Option<TensorId> = None;
        for kk in 0..k {
            let layout = &self.layouts[kk];
            let xp = tape.gather_patch(x, layout)?;
            let wx = tape.mul_patch_weights(xp, basis_ids[kk], layout)?;
            let z = tape.segment_sum(wx, layout)?;
            let mixed = mix_channels(
                tape,
                z,
                coeff_ids[kk],
                bsz,
                n,
                self.in_channels,
                self.out_channels,
            )?;
            acc = Some(match acc {
                None => mixed,
                Some(a) => tape.add(a, mixed)?,
            });
        }
        let linear = tape.add_bias(acc.expect("K >= 1"), bias_id[0])?;
        Ok(act.apply(tape, linear))
    }
}

/// Forward map of one low-rank local-filter layer.
pub fn l3net_forward(
    tape: &mut Tape,
    x: TensorId,
    fb: &FilterBank,
    act: Activation,
) -> Result<TensorId, LayerError> {
    fb.forward(tape, x, act)
}

/// Materialize the full layer tensor M(u', u; c', c) as an
/// (n*C_in) x (n*C_out) matrix, row index (u', c'), column index (u, c).
/// Oracle form for tests.
pub fn assemble_dense_m(fb: &FilterBank) -> Mat {
    let (n, ci, co) = (fb.n, fb.in_channels, fb.out_channels);
    let mut m = Mat::zeros(n * ci, n * co);
    for k in 0..fb.rank() {
        let a = &fb.coeffs[k];
        let layout = &fb.layouts[k];
        for u in 0..n {
            for (i, &source) in layout.patch(u).iter().enumerate() {
                let pos = layout.range(u).start + i;
                let b = match &layout.template_map {
                    Some(map) => fb.basis[k].data()[map[pos]],
                    None => fb.basis[k].data()[pos],
                };
                if b == 0.0 {
                    continue;
                }
                for cp in 0..ci {
                    for c in 0..co {
                        m[(source * ci + cp, u * co + c)] += a.data()[cp * co + c] * b;
                    }
                }
            }
        }
    }
    m
}

/// The ring "difference" bank: one order-1 basis with filter
/// (e_u - e_{u+1}) at every node u, unit channel mixing, zero bias.
pub fn difference_bank(g: &Graph) -> Result<FilterBank, LayerError> {
    let mut fb = FilterBank::zeros(g, &[1], 1, 1, false)?;
    let n = g.n();
    let layout = Arc::clone(&fb.layouts[0]);
    let w = fb.basis[0].data_mut();
    for u in 0..n {
        let next = (u + 1) % n;
        let patch = layout.patch(u);
        let start = layout.range(u).start;
        let i_self = patch.binary_search(&u).expect("center in patch");
        let i_next = patch
            .binary_search(&next)
            .expect("ring neighbor in order-1 patch");
        w[start + i_self] = 1.0;
        w[start + i_next] = -1.0;
    }
    fb.coeffs[0].data_mut()[0] = 1.0;
    Ok(fb)
}

// ---------------------------------------------------------------------------
// ChebNet / GCN
// ---------------------------------------------------------------------------

/// Chebyshev spectral layer. `theta[l]` mixes the l-th recursion term; with
/// `tied_gcn` there is a single theta and the self-loop-normalized adjacency
/// is applied once.
#[derive(Debug, Clone)]
pub struct ChebLayer {
    pub n: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub degree: usize,
    pub tied_gcn: bool,
    pub theta: Vec<Tensor>,
    pub bias: Tensor,
    pub operator: Arc<SparseMatrix>,
}

impl ChebLayer {
    pub fn new<R: Rng>(
        g: &Graph,
        degree: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        assert!(degree >= 1);
        let adj = g
            .normalized_adjacency(AdjacencyMode::Sym)
            .map_err(|_| LayerError::GraphMismatch {
                expected: g.n(),
                got: g.n(),
            })?;
        let operator = Arc::new(adj.scaled_laplacian(CHEB_ALPHA.0, CHEB_ALPHA.1));
        let t = 1.0 / ((degree * c_in) as f64).sqrt();
        let theta = (0..degree)
            .map(|_| {
                let mut m = Tensor::zeros(&[c_in, c_out]);
                for v in m.data_mut() {
                    *v = rng.random_range(-t..=t);
                }
                m
            })
            .collect();
        Ok(Self {
            n: g.n(),
            in_channels: c_in,
            out_channels: c_out,
            degree,
            tied_gcn: false,
            theta,
            bias: Tensor::zeros(&[c_out]),
            operator,
        })
    }

    /// GCN: degree-1 polynomial with tied coefficients on the self-loop
    /// normalized adjacency.
    pub fn gcn<R: Rng>(
        g: &Graph,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Result<Self, LayerError> {
        let adj = g
            .normalized_adjacency(AdjacencyMode::SymSelfLoop)
            .map_err(|_| LayerError::GraphMismatch {
                expected: g.n(),
                got: g.n(),
            })?;
        let operator = Arc::new(adj.matrix);
        let t = 1.0 / (c_in as f64).sqrt();
        let mut m = Tensor::zeros(&[c_in, c_out]);
        for v in m.data_mut() {
            *v = rng.random_range(-t..=t);
        }
        Ok(Self {
            n: g.n(),
            in_channels: c_in,
            out_channels: c_out,
            degree: 2,
            tied_gcn: true,
            theta: vec![m],
            bias: Tensor::zeros(&[c_out]),
            operator,
        })
    }

    pub fn param_count(&self) -> usize {
        self.theta.iter().map(Tensor::len).sum::<usize>() + self.bias.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.theta.iter().collect();
        out.push(&self.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.theta.iter_mut().collect();
        out.push(&mut self.bias);
        out
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let ids = self.register(tape);
        self.forward_with_ids(tape, &ids, x, act)
    }

    pub fn forward_with_ids(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(ShapeError::Bad {
                op: "chebnet_forward",
                expected: format!("(B, {}, {})", self.n, self.in_channels),
                got: shape,
            }
            .into());
        }
        if shape[1] != self.n {
            return Err(LayerError::GraphMismatch {
                expected: self.n,
                got: shape[1],
            });
        }
        let (bsz, n) = (shape[0], shape[1]);
        let bias_id = *ids.last().unwrap();

        let linear = if self.tied_gcn {
            let ax = tape.apply_sparse(x, &self.operator)?;
            mix_channels(tape, ax, ids[0], bsz, n, self.in_channels, self.out_channels)?
        } else {
            // T_0 = X, T_1 = op X, T_{l+1} = 2 op T_l - T_{l-1}
            let mut acc =
                mix_channels(tape, x, ids[0], bsz, n, self.in_channels, self.out_channels)?;
            let mut t_prev = x;
            let mut t_cur = x;
            for l in 1..self.degree {
                let t_next = if l == 1 {
                    tape.apply_sparse(x, &self.operator)?
                } else {
                    let ot = tape.apply_sparse(t_cur, &self.operator)?;
                    let ot2 = tape.scale(ot, 2.0);
                    let neg = tape.scale(t_prev, -1.0);
                    tape.add(ot2, neg)?
                };
                let mixed = mix_channels(
                    tape,
                    t_next,
                    ids[l],
                    bsz,
                    n,
                    self.in_channels,
                    self.out_channels,
                )?;
                acc = tape.add(acc, mixed)?;
                t_prev = t_cur;
                t_cur = t_next;
            }
            acc
        };
        let with_bias = tape.add_bias(linear, bias_id)?;
        Ok(act.apply(tape, with_bias))
    }
}

pub fn chebnet_forward(
    tape: &mut Tape,
    x: TensorId,
    layer: &ChebLayer,
    act: Activation,
) -> Result<TensorId, LayerError> {
    layer.forward(tape, x, act)
}

// ---------------------------------------------------------------------------
// GAT
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum GatMixing {
    /// Trainable per-head mixing matrices (C_in, C_out); head outputs sum.
    Free(Vec<Tensor>),
    /// Concatenation of per-head W-projected aggregates into output blocks.
    Concat,
}

/// Graph attention layer over order-1 neighborhoods (centers included).
/// Attention logits use a leaky-relu with slope 0.2.
#[derive(Debug, Clone)]
pub struct GatLayer {
    pub n: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub w: Vec<Tensor>,
    pub att_src: Vec<Tensor>,
    pub att_dst: Vec<Tensor>,
    pub mixing: GatMixing,
    pub bias: Tensor,
    pub leaky_slope: f64,
    pub layout: Arc<PatchLayout>,
}

impl GatLayer {
    /// Free-mixing variant (the default).
    pub fn new<R: Rng>(
        g: &Graph,
        heads: usize,
        head_dim: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut R,
    ) -> Self {
        let layout = Arc::new(PatchLayout::new(g, 1));
        let sw = 1.0 / (c_in as f64).sqrt();
        let sa = 1.0 / (head_dim as f64).sqrt();
        let st = 1.0 / ((heads * c_in) as f64).sqrt();
        let mk = |shape: &[usize], s: f64, rng: &mut R| {
            let mut t = Tensor::zeros(shape);
            for v in t.data_mut() {
                *v = rng.random_range(-s..=s);
            }
            t
        };
        let w = (0..heads).map(|_| mk(&[c_in, head_dim], sw, rng)).collect();
        let att_src = (0..heads).map(|_| mk(&[head_dim], sa, rng)).collect();
        let att_dst = (0..heads).map(|_| mk(&[head_dim], sa, rng)).collect();
        let mixing = GatMixing::Free((0..heads).map(|_| mk(&[c_in, c_out], st, rng)).collect());
        Self {
            n: g.n(),
            in_channels: c_in,
            out_channels: c_out,
            heads,
            head_dim,
            w,
            att_src,
            att_dst,
            mixing,
            bias: Tensor::zeros(&[c_out]),
            leaky_slope: 0.2,
            layout,
        }
    }

    /// Concatenating variant: output channels = heads * head_dim.
    pub fn new_concat<R: Rng>(
        g: &Graph,
        heads: usize,
        head_dim: usize,
        c_in: usize,
        rng: &mut R,
    ) -> Self {
        let mut layer = Self::new(g, heads, head_dim, c_in, heads * head_dim, rng);
        layer.mixing = GatMixing::Concat;
        layer
    }

    pub fn param_count(&self) -> usize {
        let mut c: usize = self.w.iter().map(Tensor::len).sum();
        c += self.att_src.iter().map(Tensor::len).sum::<usize>();
        c += self.att_dst.iter().map(Tensor::len).sum::<usize>();
        if let GatMixing::Free(thetas) = &self.mixing {
            c += thetas.iter().map(Tensor::len).sum::<usize>();
        }
        c + self.bias.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = Vec::new();
        out.extend(self.w.iter());
        out.extend(self.att_src.iter());
        out.extend(self.att_dst.iter());
        if let GatMixing::Free(thetas) = &self.mixing {
            out.extend(thetas.iter());
        }
        out.push(&self.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.extend(self.w.iter_mut());
        out.extend(self.att_src.iter_mut());
        out.extend(self.att_dst.iter_mut());
        if let GatMixing::Free(thetas) = &mut self.mixing {
            out.extend(thetas.iter_mut());
        }
        out.push(&mut self.bias);
        out
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect()
    }

    #[allow(clippy::type_complexity)]
    fn split_ids<'a>(
        &self,
        ids: &'a [TensorId],
    ) -> (
        &'a [TensorId],
        &'a [TensorId],
        &'a [TensorId],
        &'a [TensorId],
        TensorId,
    ) {
        let r = self.heads;
        let (w, rest) = ids.split_at(r);
        let (asrc, rest) = rest.split_at(r);
        let (adst, rest) = rest.split_at(r);
        let (theta, rest) = match &self.mixing {
            GatMixing::Free(_) => rest.split_at(r),
            GatMixing::Concat => rest.split_at(0),
        };
        (w, asrc, adst, theta, rest[0])
    }

    /// Per-head attention over the layout's patches, recorded on the tape so
    /// gradients flow through the softmax.
    fn attention_on_tape(
        &self,
        tape: &mut Tape,
        x: TensorId,
        w: TensorId,
        asrc: TensorId,
        adst: TensorId,
        bsz: usize,
    ) -> Result<TensorId, LayerError> {
        let h_flat = tape.reshape(x, &[bsz * self.n, self.in_channels])?;
        let h = tape.matmul(h_flat, w)?;
        let h3 = tape.reshape(h, &[bsz, self.n, self.head_dim])?;
        let s_src = tape.channel_contract(h3, asrc)?;
        let s_dst = tape.channel_contract(h3, adst)?;
        let e = tape.patch_pair_sum(s_src, s_dst, &self.layout)?;
        let e = tape.leaky_relu(e, self.leaky_slope);
        Ok(tape.patch_softmax(e, &self.layout)?)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let ids = self.register(tape);
        self.forward_with_ids(tape, &ids, x, act)
    }

    pub fn forward_with_ids(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(ShapeError::Bad {
                op: "gat_forward",
                expected: format!("(B, {}, {})", self.n, self.in_channels),
                got: shape,
            }
            .into());
        }
        if shape[1] != self.n {
            return Err(LayerError::GraphMismatch {
                expected: self.n,
                got: shape[1],
            });
        }
        let (bsz, n) = (shape[0], shape[1]);
        let (w_ids, asrc_ids, adst_ids, theta_ids, bias_id) = self.split_ids(ids);

        let mut acc: Option<TensorId> = None;
        for r in 0..self.heads {
            let alpha = self.attention_on_tape(tape, x, w_ids[r], asrc_ids[r], adst_ids[r], bsz)?;
            // free mixing aggregates raw features; concat aggregates W x
            let (z_src, z_ci) = match &self.mixing {
                GatMixing::Free(_) => (x, self.in_channels),
                GatMixing::Concat => {
                    let flat = tape.reshape(x, &[bsz * n, self.in_channels])?;
                    let h = tape.matmul(flat, w_ids[r])?;
                    (tape.reshape(h, &[bsz, n, self.head_dim])?, self.head_dim)
                }
            };
            let xp = tape.gather_patch(z_src, &self.layout)?;
            let ax = tape.mul_patch_scalar(xp, alpha)?;
            let z = tape.segment_sum(ax, &self.layout)?;
            let mixed = match &self.mixing {
                GatMixing::Free(_) => {
                    mix_channels(tape, z, theta_ids[r], bsz, n, z_ci, self.out_channels)?
                }
                GatMixing::Concat => {
                    // fixed block embedding of head r into the output
                    let mut embed = Tensor::zeros(&[self.head_dim, self.out_channels]);
                    for i in 0..self.head_dim {
                        embed.data_mut()[i * self.out_channels + r * self.head_dim + i] = 1.0;
                    }
                    let e = tape.leaf(embed, false);
                    mix_channels(tape, z, e, bsz, n, z_ci, self.out_channels)?
                }
            };
            acc = Some(match acc {
                None => mixed,
                Some(a) => tape.add(a, mixed)?,
            });
        }
        let linear = tape.add_bias(acc.expect("R >= 1"), bias_id)?;
        Ok(act.apply(tape, linear))
    }

    /// Attention rows for one fixed input (n, C_in), one concatenated-patch
    /// vector per head. Used to freeze the attention into a filter bank.
    pub fn attention_rows(&self, x: &Tensor) -> Result<Vec<Vec<f64>>, LayerError> {
        let mut tape = Tape::new();
        let xs = tape.leaf(
            Tensor::from_vec(&[1, self.n, self.in_channels], x.data().to_vec()),
            false,
        );
        let mut out = Vec::with_capacity(self.heads);
        for r in 0..self.heads {
            let w = tape.leaf(self.w[r].clone(), false);
            let asrc = tape.leaf(self.att_src[r].clone(), false);
            let adst = tape.leaf(self.att_dst[r].clone(), false);
            let alpha = self.attention_on_tape(&mut tape, xs, w, asrc, adst, 1)?;
            out.push(tape.value(alpha).data().to_vec());
        }
        Ok(out)
    }

    /// Per-head mixing matrices as dense (C_in or head_dim, C_out) tensors;
    /// for the concat variant this materializes W^(r) followed by the block
    /// embedding.
    pub fn mixing_matrices(&self) -> Vec<Tensor> {
        match &self.mixing {
            GatMixing::Free(thetas) => thetas.clone(),
            GatMixing::Concat => (0..self.heads)
                .map(|r| {
                    let mut m = Tensor::zeros(&[self.in_channels, self.out_channels]);
                    for ci in 0..self.in_channels {
                        for j in 0..self.head_dim {
                            m.data_mut()[ci * self.out_channels + r * self.head_dim + j] =
                                self.w[r].data()[ci * self.head_dim + j];
                        }
                    }
                    m
                })
                .collect(),
        }
    }
}

pub fn gat_forward(
    tape: &mut Tape,
    x: TensorId,
    layer: &GatLayer,
    act: Activation,
) -> Result<TensorId, LayerError> {
    layer.forward(tape, x, act)
}

// ---------------------------------------------------------------------------
// EdgeNet (edge-varying convolution)
// ---------------------------------------------------------------------------

/// Edge-varying layer: running products of one-hop local filters, mixed per
/// tap. `phi0` is the diagonal tap; `phis[k]` holds row filters over order-1
/// patches. State recursion S_0 = Phi_0 X, S_r = Phi_r S_{r-1}.
#[derive(Debug, Clone)]
pub struct EdgeNetLayer {
    pub n: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub taps: usize,
    pub phi0: Tensor,
    pub phis: Vec<Tensor>,
    pub thetas: Vec<Tensor>,
    pub bias: Tensor,
    pub layout1: Arc<PatchLayout>,
}

impl EdgeNetLayer {
    pub fn new<R: Rng>(g: &Graph, taps: usize, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        assert!(taps >= 1);
        let layout1 = Arc::new(PatchLayout::new(g, 1));
        let t = 1.0 / ((taps * c_in) as f64).sqrt();
        let mk = |shape: &[usize], s: f64, rng: &mut R| {
            let mut m = Tensor::zeros(shape);
            for v in m.data_mut() {
                *v = rng.random_range(-s..=s);
            }
            m
        };
        let phi0 = mk(&[g.n()], 1.0, rng);
        let p1 = layout1.total_len();
        let avg_patch = p1 as f64 / g.n() as f64;
        let sphi = 1.0 / avg_patch.sqrt();
        let phis = (0..taps.saturating_sub(1))
            .map(|_| mk(&[p1], sphi, rng))
            .collect();
        let thetas = (0..taps).map(|_| mk(&[c_in, c_out], t, rng)).collect();
        Self {
            n: g.n(),
            in_channels: c_in,
            out_channels: c_out,
            taps,
            phi0,
            phis,
            thetas,
            bias: Tensor::zeros(&[c_out]),
            layout1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.phi0.len()
            + self.phis.iter().map(Tensor::len).sum::<usize>()
            + self.thetas.iter().map(Tensor::len).sum::<usize>()
            + self.bias.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.phi0];
        out.extend(self.phis.iter());
        out.extend(self.thetas.iter());
        out.push(&self.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.phi0];
        out.extend(self.phis.iter_mut());
        out.extend(self.thetas.iter_mut());
        out.push(&mut self.bias);
        out
    }

    pub fn register(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), true))
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let ids = self.register(tape);
        self.forward_with_ids(tape, &ids, x, act)
    }

    pub fn forward_with_ids(
        &self,
        tape: &mut Tape,
        ids: &[TensorId],
        x: TensorId,
        act: Activation,
    ) -> Result<TensorId, LayerError> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[2] != self.in_channels {
            return Err(ShapeError::Bad {
                op: "edgenet_forward",
                expected: format!("(B, {}, {})", self.n, self.in_channels),
                got: shape,
            }
            .into());
        }
        if shape[1] != self.n {
            return Err(LayerError::GraphMismatch {
                expected: self.n,
                got: shape[1],
            });
        }
        let (bsz, n) = (shape[0], shape[1]);
        let phi0_id = ids[0];
        let phi_ids = &ids[1..self.taps];
        let theta_ids = &ids[self.taps..2 * self.taps];
        let bias_id = ids[2 * self.taps];

        let mut state = self.apply_diag(tape, x, phi0_id, bsz)?;
        let mut acc = mix_channels(
            tape,
            state,
            theta_ids[0],
            bsz,
            n,
            self.in_channels,
            self.out_channels,
        )?;
        for r in 1..self.taps {
            let xp = tape.gather_patch(state, &self.layout1)?;
            let wx = tape.mul_patch_weights(xp, phi_ids[r - 1], &self.layout1)?;
            state = tape.segment_sum(wx, &self.layout1)?;
            let mixed = mix_channels(
                tape,
                state,
                theta_ids[r],
                bsz,
                n,
                self.in_channels,
                self.out_channels,
            )?;
            acc = tape.add(acc, mixed)?;
        }
        let linear = tape.add_bias(acc, bias_id)?;
        Ok(act.apply(tape, linear))
    }

    fn apply_diag(
        &self,
        tape: &mut Tape,
        x: TensorId,
        phi0: TensorId,
        bsz: usize,
    ) -> Result<TensorId, LayerError> {
        // broadcast the per-node diagonal over the batch
        let phi_mat = tape.reshape(phi0, &[1, self.n])?;
        let ones = tape.leaf(Tensor::from_vec(&[bsz, 1], vec![1.0; bsz]), false);
        let tiled = tape.matmul(ones, phi_mat)?;
        Ok(tape.mul_patch_scalar(x, tiled)?)
    }

    /// Dense cumulative product Phi_{k-1} ... Phi_1 Phi_0 (k >= 1); its row u
    /// is the effective filter of tap k at node u.
    pub fn product_matrix(&self, k: usize) -> Mat {
        let n = self.n;
        let mut prod = Mat::zeros(n, n);
        for u in 0..n {
            prod[(u, u)] = self.phi0.data()[u];
        }
        for step in 0..k.saturating_sub(1) {
            let phi = &self.phis[step];
            let mut next = Mat::zeros(n, n);
            for u in 0..n {
                for (i, &v) in self.layout1.patch(u).iter().enumerate() {
                    let w = phi.data()[self.layout1.range(u).start + i];
                    if w == 0.0 {
                        continue;
                    }
                    for col in 0..n {
                        next[(u, col)] += w * prod[(v, col)];
                    }
                }
            }
            prod = next;
        }
        prod
    }
}

pub fn edgenet_forward(
    tape: &mut Tape,
    x: TensorId,
    layer: &EdgeNetLayer,
    act: Activation,
) -> Result<TensorId, LayerError> {
    layer.forward(tape, x, act)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_signal<R: Rng>(bsz: usize, n: usize, c: usize, rng: &mut R) -> Tensor {
        let mut t = Tensor::zeros(&[bsz, n, c]);
        for v in t.data_mut() {
            *v = rng.random_range(-1.0..=1.0);
        }
        t
    }

    #[test]
    fn identity_bank_is_identity() {
        let g = Graph::ring(8).unwrap();
        let mut fb = FilterBank::zeros(&g, &[0], 2, 2, false).unwrap();
        // order-0 patches are singletons: diagonal-ones basis
        fb.basis[0].fill(1.0);
        fb.coeffs[0]
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut r = rng(0);
        let x = random_signal(3, 8, 2, &mut r);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), false);
        let y = l3net_forward(&mut tape, xid, &fb, Activation::Id).unwrap();
        for (a, b) in tape.value(y).data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn difference_bank_kills_constants() {
        let g = Graph::ring(8).unwrap();
        let mut fb = difference_bank(&g).unwrap();
        fb.bias.data_mut()[0] = 0.75;
        let x = Tensor::from_vec(&[1, 8, 1], vec![3.0; 8]);
        let mut tape = Tape::new();
        let xid = tape.leaf(x, false);
        let y = l3net_forward(&mut tape, xid, &fb, Activation::Id).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.75).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_matches_dense_assembly() {
        let g = Graph::ring(8).unwrap();
        let mut r = rng(7);
        let fb = FilterBank::new(&g, &[1, 2], 2, 3, false, &mut r).unwrap();
        let m = assemble_dense_m(&fb);
        for trial in 0..20 {
            let x = random_signal(1, 8, 2, &mut r);
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), false);
            let y = l3net_forward(&mut tape, xid, &fb, Activation::Id).unwrap();
            let yv = tape.value(y);
            for u in 0..8 {
                for c in 0..3 {
                    let mut want = fb.bias.data()[c];
                    for up in 0..8 {
                        for cp in 0..2 {
                            want += m[(up * 2 + cp, u * 3 + c)] * x.at3(0, up, cp);
                        }
                    }
                    let got = yv.at3(0, u, c);
                    assert!(
                        (got - want).abs() <= 1e-12,
                        "trial {trial} u={u} c={c}: {got} vs {want}"
                    );
                }
            }
        }
    }

    #[test]
    fn identity_bank_block_structure_in_dense_m() {
        let g = Graph::ring(4).unwrap();
        let mut fb = FilterBank::zeros(&g, &[0], 2, 2, false).unwrap();
        fb.basis[0].fill(1.0);
        fb.coeffs[0]
            .data_mut()
            .copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let m = assemble_dense_m(&fb);
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_eq!(m[(i, j)], want);
            }
        }
    }

    #[test]
    fn order1_bank_has_ring_sparsity_in_dense_m() {
        let g = Graph::ring(8).unwrap();
        let mut r = rng(2);
        let fb = FilterBank::new(&g, &[1], 1, 1, false, &mut r).unwrap();
        let m = assemble_dense_m(&fb);
        for u in 0..8 {
            for v in 0..8 {
                let ring_dist = (u as isize - v as isize).rem_euclid(8).min(
                    (v as isize - u as isize).rem_euclid(8),
                );
                if ring_dist > 1 {
                    assert_eq!(m[(v, u)], 0.0, "u={u} v={v}");
                }
            }
        }
    }

    #[test]
    fn structural_locality_exact() {
        // perturbing X at node v changes output only where v is in a patch
        let g = Graph::ring(12).unwrap();
        let mut r = rng(3);
        let fb = FilterBank::new(&g, &[0, 1], 1, 2, false, &mut r).unwrap();
        let x0 = random_signal(1, 12, 1, &mut r);
        let eval = |x: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), false);
            let y = l3net_forward(&mut tape, xid, &fb, Activation::Id).unwrap();
            tape.value(y).clone()
        };
        let y0 = eval(&x0);
        let v = 5usize;
        let mut x1 = x0.clone();
        x1.data_mut()[v] += 1.0;
        let y1 = eval(&x1);
        for u in 0..12 {
            let affected = fb
                .layouts
                .iter()
                .any(|l| l.patch(u).binary_search(&v).is_ok());
            if affected {
                continue;
            }
            for c in 0..2 {
                let delta = (y1.at3(0, u, c) - y0.at3(0, u, c)).abs();
                assert_eq!(delta, 0.0, "leak at u={u} c={c}");
            }
        }
    }

    #[test]
    fn param_count_formulas() {
        // K (C C' + n p) + C with uniform patches
        let g = Graph::ring(8).unwrap();
        let fb = FilterBank::zeros(&g, &[1, 1], 2, 3, false).unwrap();
        let np = 8 * 3;
        assert_eq!(fb.param_count(), 2 * (2 * 3 + np) + 3);

        let shared = FilterBank::zeros(&g, &[1], 2, 3, true).unwrap();
        assert_eq!(shared.param_count(), 2 * 3 + 3 + 3); // coeffs + template + bias

        let mut r = rng(0);
        let cheb = ChebLayer::new(&g, 5, 2, 3, &mut r).unwrap();
        assert_eq!(cheb.param_count(), 5 * 2 * 3 + 3);

        let gat = GatLayer::new(&g, 2, 4, 3, 5, &mut r);
        // R (C' C_0 + 2 C_0 + C' C) + bias
        assert_eq!(gat.param_count(), 2 * (3 * 4 + 2 * 4 + 3 * 5) + 5);

        let en = EdgeNetLayer::new(&g, 3, 2, 3, &mut r);
        // n + (L-1) n p1 + L C C' + bias
        assert_eq!(en.param_count(), 8 + 2 * 24 + 3 * 6 + 3);
    }

    #[test]
    fn cheb_degree_one_is_channel_mix() {
        let g = Graph::ring(8).unwrap();
        let mut r = rng(9);
        let layer = ChebLayer::new(&g, 1, 2, 3, &mut r).unwrap();
        let x = random_signal(2, 8, 2, &mut r);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), false);
        let y = layer.forward(&mut tape, xid, Activation::Id).unwrap();
        let yv = tape.value(y);
        for b in 0..2 {
            for u in 0..8 {
                for c in 0..3 {
                    let want: f64 = (0..2)
                        .map(|cp| x.at3(b, u, cp) * layer.theta[0].data()[cp * 3 + c])
                        .sum();
                    assert!((yv.at3(b, u, c) - want).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gcn_is_rotation_equivariant_on_ring() {
        let n = 8;
        let g = Graph::ring(n).unwrap();
        let mut r = rng(11);
        let layer = ChebLayer::gcn(&g, 1, 2, &mut r).unwrap();
        let x = random_signal(1, n, 1, &mut r);
        let shift = 3usize;
        let mut xr = Tensor::zeros(&[1, n, 1]);
        for u in 0..n {
            xr.data_mut()[(u + shift) % n] = x.data()[u];
        }
        let eval = |x: &Tensor| {
            let mut tape = Tape::new();
            let xid = tape.leaf(x.clone(), false);
            let y = layer.forward(&mut tape, xid, Activation::Id).unwrap();
            tape.value(y).clone()
        };
        let y = eval(&x);
        let yr = eval(&xr);
        for u in 0..n {
            for c in 0..2 {
                assert!((yr.at3(0, (u + shift) % n, c) - y.at3(0, u, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gat_uniform_attention_when_w_is_zero() {
        let g = Graph::ring(8).unwrap();
        let mut r = rng(5);
        let mut layer = GatLayer::new(&g, 2, 3, 1, 2, &mut r);
        for w in &mut layer.w {
            w.fill(0.0);
        }
        let x = random_signal(1, 8, 1, &mut r);
        let x1 = Tensor::from_vec(&[8, 1], x.data().to_vec());
        let rows = layer.attention_rows(&x1).unwrap();
        for head in &rows {
            for u in 0..8 {
                let range = layer.layout.range(u);
                let p = range.len() as f64;
                for pos in range {
                    assert!((head[pos] - 1.0 / p).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gat_attention_rows_are_stochastic() {
        let g = Graph::grid(3, 3).unwrap();
        let mut r = rng(6);
        let layer = GatLayer::new(&g, 3, 4, 2, 2, &mut r);
        let x = random_signal(1, 9, 2, &mut r);
        let x1 = Tensor::from_vec(&[9, 2], x.data().to_vec());
        let rows = layer.attention_rows(&x1).unwrap();
        for head in &rows {
            for u in 0..9 {
                let s: f64 = layer.layout.range(u).map(|p| head[p]).sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(layer.layout.range(u).all(|p| head[p] >= 0.0));
            }
        }
    }

    #[test]
    fn edgenet_degenerate_cases() {
        let g = Graph::ring(8).unwrap();
        let mut r = rng(13);
        // L = 1, Phi_0 = I: pure channel mix
        let mut layer = EdgeNetLayer::new(&g, 1, 2, 3, &mut r);
        layer.phi0.fill(1.0);
        let x = random_signal(1, 8, 2, &mut r);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), false);
        let y = layer.forward(&mut tape, xid, Activation::Id).unwrap();
        let yv = tape.value(y);
        for u in 0..8 {
            for c in 0..3 {
                let want: f64 = (0..2)
                    .map(|cp| x.at3(0, u, cp) * layer.thetas[0].data()[cp * 3 + c])
                    .sum();
                assert!((yv.at3(0, u, c) - want).abs() < 1e-14);
            }
        }

        // all Phi = identity: Y = X * sum Theta_r
        let mut layer = EdgeNetLayer::new(&g, 3, 2, 2, &mut r);
        layer.phi0.fill(1.0);
        for phi in layer.phis.iter_mut() {
            let layout = Arc::clone(&layer.layout1);
            let w = phi.data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for u in 0..8 {
                let patch = layout.patch(u);
                let i = patch.binary_search(&u).unwrap();
                w[layout.range(u).start + i] = 1.0;
            }
        }
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), false);
        let y = layer.forward(&mut tape, xid, Activation::Id).unwrap();
        let yv = tape.value(y);
        let mut theta_sum = vec![0.0; 4];
        for t in &layer.thetas {
            for (a, b) in theta_sum.iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        for u in 0..8 {
            for c in 0..2 {
                let want: f64 = (0..2)
                    .map(|cp| x.at3(0, u, cp) * theta_sum[cp * 2 + c])
                    .sum();
                assert!((yv.at3(0, u, c) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn shared_basis_forward_matches_dense_assembly() {
        let g = Graph::ring(8).unwrap();
        let mut r = rng(21);
        let fb = FilterBank::new(&g, &[1], 2, 2, true, &mut r).unwrap();
        let m = assemble_dense_m(&fb);
        let x = random_signal(1, 8, 2, &mut r);
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), false);
        let y = l3net_forward(&mut tape, xid, &fb, Activation::Id).unwrap();
        let yv = tape.value(y);
        for u in 0..8 {
            for c in 0..2 {
                let mut want = fb.bias.data()[c];
                for up in 0..8 {
                    for cp in 0..2 {
                        want += m[(up * 2 + cp, u * 2 + c)] * x.at3(0, up, cp);
                    }
                }
                assert!((yv.at3(0, u, c) - want).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn wrong_graph_size_is_a_structural_error() {
        let g = Graph::ring(8).unwrap();
        let fb = FilterBank::zeros(&g, &[1], 1, 1, false).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 9, 1]), false);
        assert!(matches!(
            fb.forward(&mut tape, x, Activation::Id),
            Err(LayerError::GraphMismatch { expected: 8, got: 9 })
        ));
    }

    #[test]
    fn layer_gradients_pass_grad_check() {
        use crate::tape::grad_check;
        let g = Graph::ring(6).unwrap();
        let mut r = rng(17);
        let x0 = random_signal(2, 6, 2, &mut r);

        // pack [layer params..., x] into one flat vector
        fn check<L>(
            layer: &L,
            x0: &Tensor,
            forward: impl Fn(&L, &mut Tape, &[TensorId], TensorId) -> TensorId,
            params: Vec<&Tensor>,
            tol: f64,
        ) {
            let sizes: Vec<usize> = params.iter().map(|p| p.len()).collect();
            let shapes: Vec<Vec<usize>> = params.iter().map(|p| p.shape().to_vec()).collect();
            let mut theta: Vec<f64> = Vec::new();
            for p in &params {
                theta.extend_from_slice(p.data());
            }
            theta.extend_from_slice(x0.data());
            let xshape = x0.shape().to_vec();
            let err = grad_check(
                |t| {
                    let mut tape = Tape::new();
                    let mut ids = Vec::new();
                    let mut off = 0;
                    for (len, shape) in sizes.iter().zip(&shapes) {
                        let ten = Tensor::from_vec(shape, t[off..off + len].to_vec());
                        ids.push(tape.leaf(ten, true));
                        off += len;
                    }
                    let x = tape.leaf(Tensor::from_vec(&xshape, t[off..].to_vec()), true);
                    let y = forward(layer, &mut tape, &ids, x);
                    let loss = tape.sum_squares(y);
                    tape.backward(loss).unwrap();
                    let mut grad = Vec::with_capacity(t.len());
                    for id in &ids {
                        grad.extend_from_slice(tape.grad_or_zeros(*id).data());
                    }
                    grad.extend_from_slice(tape.grad_or_zeros(x).data());
                    (tape.value(loss).item(), grad)
                },
                &theta,
                1e-5,
            )
            .unwrap();
            assert!(err <= tol, "grad check err = {err}");
        }

        let fb = FilterBank::new(&g, &[0, 1], 2, 3, false, &mut r).unwrap();
        check(
            &fb,
            &x0,
            |l, t, ids, x| l.forward_with_ids(t, ids, x, Activation::Id).unwrap(),
            fb.params(),
            1e-6,
        );

        let cheb = ChebLayer::new(&g, 3, 2, 2, &mut r).unwrap();
        check(
            &cheb,
            &x0,
            |l, t, ids, x| l.forward_with_ids(t, ids, x, Activation::Id).unwrap(),
            cheb.params(),
            1e-6,
        );

        let gat = GatLayer::new(&g, 2, 3, 2, 2, &mut r);
        check(
            &gat,
            &x0,
            |l, t, ids, x| l.forward_with_ids(t, ids, x, Activation::Id).unwrap(),
            gat.params(),
            1e-6,
        );

        let en = EdgeNetLayer::new(&g, 3, 2, 2, &mut r);
        check(
            &en,
            &x0,
            |l, t, ids, x| l.forward_with_ids(t, ids, x, Activation::Id).unwrap(),
            en.params(),
            1e-6,
        );
    }
}
