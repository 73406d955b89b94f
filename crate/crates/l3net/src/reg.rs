//! Local-graph-Laplacian penalty on basis filters, the combined training
//! objective, and the strong-regularization limit verifier.
//!
//! The penalty is sum_k sum_u b_u^T L_u b_u over the bank's basis vectors,
//! with L_u the Dirichlet local Laplacian of the patch. Its gradient is the
//! closed form 2 L_u b_u, applied directly to basis parameters; a tape route
//! through generic primitives exists for cross-checking.

use std::sync::Arc;

use crate::error::{NumericError, RegError};
use crate::graph::{first_dirichlet_eigvec, Graph, LocalLaplacian};
use crate::layers::FilterBank;
use crate::linalg::{dot, norm2, Mat};
use crate::tape::{BlockDiag, Tape, TensorId};
use crate::tensor::Tensor;

/// Regularization weight plus the per-(node, basis) local Laplacians aligned
/// with a bank's patch layouts.
#[derive(Debug, Clone)]
pub struct RegContext {
    pub lambda: f64,
    pub orders: Vec<usize>,
    /// laplacians[k][u] is over N_u^(d_k) in canonical member order.
    pub laplacians: Vec<Vec<LocalLaplacian>>,
}

impl RegContext {
    pub fn new(g: &Graph, orders: &[usize], lambda: f64) -> Result<Self, RegError> {
        if lambda < 0.0 {
            return Err(RegError::NegativeLambda(lambda));
        }
        let mut laplacians = Vec::with_capacity(orders.len());
        for (k, &d) in orders.iter().enumerate() {
            let mut per_node = Vec::with_capacity(g.n());
            for u in 0..g.n() {
                let nbhd = g.neighborhood(u, d).expect("u < n");
                let ll = g
                    .local_dirichlet_laplacian(&nbhd)
                    .map_err(|source| RegError::Numeric { u, k, source })?;
                per_node.push(ll);
            }
            laplacians.push(per_node);
        }
        Ok(Self {
            lambda,
            orders: orders.to_vec(),
            laplacians,
        })
    }

    pub fn for_bank(g: &Graph, fb: &FilterBank, lambda: f64) -> Result<Self, RegError> {
        Self::new(g, &fb.orders, lambda)
    }

    /// Patch-by-patch alignment against a bank's layouts.
    pub fn check_alignment(&self, fb: &FilterBank) -> Result<(), RegError> {
        if self.orders != fb.orders {
            return Err(RegError::Misaligned {
                u: 0,
                k: 0,
                ctx: self.orders.len(),
                bank: fb.orders.len(),
            });
        }
        for (k, per_node) in self.laplacians.iter().enumerate() {
            for (u, ll) in per_node.iter().enumerate() {
                let bank_len = fb.layouts[k].patch_len(u);
                if ll.size() != bank_len {
                    return Err(RegError::Misaligned {
                        u,
                        k,
                        ctx: ll.size(),
                        bank: bank_len,
                    });
                }
            }
        }
        Ok(())
    }

    /// Block-diagonal operator of basis k's Laplacians, for the tape route.
    pub fn block_diag(&self, k: usize) -> Arc<BlockDiag> {
        Arc::new(BlockDiag::new(
            self.laplacians[k]
                .iter()
                .map(|ll| ll.matrix.clone())
                .collect(),
        ))
    }
}

/// Penalty value sum_k sum_u b_u^T L_u b_u (always >= 0).
pub fn reg_penalty(fb: &FilterBank, ctx: &RegContext) -> Result<f64, RegError> {
    ctx.check_alignment(fb)?;
    let mut total = 0.0;
    for k in 0..fb.rank() {
        for u in 0..fb.n {
            let b = fb.filter_at(k, u);
            total += ctx.laplacians[k][u].quad_form(&b);
        }
    }
    Ok(total)
}

/// Analytic penalty gradient, one tensor per basis parameter (2 L_u b_u per
/// patch, mapped back through the shared template when the bank ties basis
/// vectors across nodes).
pub fn reg_penalty_grad(fb: &FilterBank, ctx: &RegContext) -> Result<Vec<Tensor>, RegError> {
    ctx.check_alignment(fb)?;
    let mut grads = Vec::with_capacity(fb.rank());
    for k in 0..fb.rank() {
        let layout = &fb.layouts[k];
        let mut g = Tensor::zeros(&[fb.basis[k].len()]);
        for u in 0..fb.n {
            let b = fb.filter_at(k, u);
            let lb = ctx.laplacians[k][u].matrix.matvec(&b);
            let start = layout.range(u).start;
            for (i, v) in lb.iter().enumerate() {
                let slot = match &layout.template_map {
                    Some(map) => map[start + i],
                    None => start + i,
                };
                g.data_mut()[slot] += 2.0 * v;
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Penalty recorded on the tape through generic primitives (block-diagonal
/// apply + dot). Cross-check route; training uses the analytic gradient.
pub fn reg_penalty_on_tape(
    tape: &mut Tape,
    basis_ids: &[TensorId],
    fb: &FilterBank,
    ctx: &RegContext,
) -> Result<TensorId, RegError> {
    ctx.check_alignment(fb)?;
    assert!(
        !fb.shared,
        "tape route expects per-node basis storage; shared banks use the analytic path"
    );
    let mut acc: Option<TensorId> = None;
    for (k, &bid) in basis_ids.iter().enumerate() {
        let blocks = ctx.block_diag(k);
        let lb = tape
            .apply_block_diag(bid, &blocks)
            .map_err(|e| RegError::Numeric {
                u: 0,
                k,
                source: NumericError::NonFinite {
                    context: format!("tape penalty: {e}"),
                },
            })?;
        let q = tape.dot(bid, lb).expect("shapes match by construction");
        acc = Some(match acc {
            None => q,
            Some(a) => tape.add(a, q).expect("scalars"),
        });
    }
    Ok(acc.expect("K >= 1"))
}

/// Training objective: classification loss plus lambda times the penalty.
pub fn objective(loss: f64, fb: &FilterBank, ctx: &RegContext) -> Result<f64, RegError> {
    if ctx.lambda < 0.0 {
        return Err(RegError::NegativeLambda(ctx.lambda));
    }
    Ok(loss + ctx.lambda * reg_penalty(fb, ctx)?)
}

/// One patch's entry in the strong-regularization report.
#[derive(Debug, Clone)]
pub struct PatchLimitReport {
    pub node: usize,
    pub basis: usize,
    pub lambda1: f64,
    /// |cosine| between the constrained minimizer (found by shifted power
    /// iteration) and the eigensolver's first eigenvector.
    pub cosine: f64,
    /// b^T L b of the minimizer; equals lambda1 * floor^2 at the optimum.
    pub objective: f64,
    pub floor: f64,
    pub sign_constant: bool,
}

#[derive(Debug, Clone)]
pub struct StrongRegReport {
    pub patches: Vec<PatchLimitReport>,
    pub min_cosine: f64,
    pub all_sign_constant: bool,
}

/// Minimize b^T L b subject to ||b||_2 >= floor for every (node, basis)
/// patch. The minimizer is found by shifted power iteration (independent of
/// the Jacobi eigendecomposition) and compared against the eigensolver's
/// first Dirichlet eigenvector.
pub fn verify_strong_reg_limit(
    g: &Graph,
    orders: &[usize],
    floors: &[Vec<f64>],
    ctx: &RegContext,
) -> Result<StrongRegReport, RegError> {
    assert_eq!(floors.len(), orders.len(), "one floor row per basis");
    const PD_TOL: f64 = 1e-10;
    let mut patches = Vec::new();
    let mut min_cosine = f64::INFINITY;
    let mut all_sign_constant = true;

    for (k, per_node) in ctx.laplacians.iter().enumerate() {
        for (u, ll) in per_node.iter().enumerate() {
            if !g.is_connected_subgraph(&ll.neighborhood.members) || ll.lambda_min() <= PD_TOL {
                return Err(RegError::NotPositiveDefinite {
                    u,
                    k,
                    lambda1: ll.lambda_min(),
                });
            }
            let floor = floors[k][u];
            let minimizer = shifted_power_min_eigvec(&ll.matrix, floor)
                .map_err(|source| RegError::Numeric { u, k, source })?;
            let psi1 =
                first_dirichlet_eigvec(ll).map_err(|source| RegError::Numeric { u, k, source })?;
            let cosine = (dot(&minimizer, &psi1) / (norm2(&minimizer) * norm2(&psi1))).abs();
            let objective = ll.quad_form(&minimizer);
            let sign_constant =
                minimizer.iter().all(|&x| x > 0.0) || minimizer.iter().all(|&x| x < 0.0);
            min_cosine = min_cosine.min(cosine);
            all_sign_constant &= sign_constant;
            patches.push(PatchLimitReport {
                node: u,
                basis: k,
                lambda1: ll.lambda_min(),
                cosine,
                objective,
                floor,
                sign_constant,
            });
        }
    }
    Ok(StrongRegReport {
        patches,
        min_cosine,
        all_sign_constant,
    })
}

pub fn uniform_floors(n: usize, k: usize, alpha: f64) -> Vec<Vec<f64>> {
    vec![vec![alpha; n]; k]
}

/// Smallest-eigenvector direction of a symmetric PSD matrix by power
/// iteration on (sigma I - L), scaled to the norm floor. Independent of the
/// Jacobi solver by construction.
fn shifted_power_min_eigvec(l: &Mat, floor: f64) -> Result<Vec<f64>, NumericError> {
    let p = l.rows();
    // Gershgorin upper bound on the spectrum
    let mut sigma = 0.0f64;
    for i in 0..p {
        let row_sum: f64 = l.row(i).iter().map(|x| x.abs()).sum();
        sigma = sigma.max(row_sum);
    }
    sigma += 1.0;
    let mut v = vec![1.0 / (p as f64).sqrt(); p];
    let mut rayleigh_prev = f64::INFINITY;
    for iter in 0..200_000usize {
        let lv = l.matvec(&v);
        let mut w: Vec<f64> = v
            .iter()
            .zip(&lv)
            .map(|(vi, lvi)| sigma * vi - lvi)
            .collect();
        let nw = norm2(&w);
        if nw == 0.0 || !nw.is_finite() {
            return Err(NumericError::NonFinite {
                context: "power iteration".into(),
            });
        }
        w.iter_mut().for_each(|x| *x /= nw);
        let lw = l.matvec(&w);
        let rayleigh = dot(&w, &lw);
        v = w;
        if (rayleigh - rayleigh_prev).abs() <= 1e-16 * sigma && iter > 4 {
            break;
        }
        rayleigh_prev = rayleigh;
    }
    v.iter_mut().for_each(|x| *x *= floor);
    Ok(v)
}
