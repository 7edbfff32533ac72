//! Stage I objectives, both as tape builders and as plain evaluators.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::mask::AlignmentMask;
use super::model::ModelBank;

/// Mean over rows of `‖x̂ − x‖² − λ·cos(x̂, x)`.
pub fn recon_loss_on(g: &mut Graph, xhat: Var, x: Var, lambda: f64) -> Result<Var> {
    let d = g.sub(xhat, x)?;
    let sq = g.mul(d, d)?;
    let per_row = g.row_sum(sq)?;
    let mse = g.mean(per_row)?;
    if lambda == 0.0 {
        return Ok(mse);
    }
    let cos = g.row_cosine(xhat, x)?;
    let cos = g.mean(cos)?;
    let cos = g.scale(cos, lambda)?;
    g.sub(mse, cos)
}

pub fn recon_loss(xhat: &Tensor, x: &Tensor, lambda: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(xhat.clone()), g.constant(x.clone()));
    let l = recon_loss_on(&mut g, a, b, lambda)?;
    Ok(g.value(l).item())
}

/// The full target code and the masked source code routed into the target
/// layout, zero on unmatched slots.
fn compared_views(g: &mut Graph, zi: Var, zj: Var, mask: &AlignmentMask) -> Result<(Var, Var)> {
    if mask.matched().is_empty() {
        return Err(Error::DegenerateInput(format!(
            "mask {} → {} routes no entries",
            mask.source + 1,
            mask.target + 1
        )));
    }
    let b = g.column_map(zj, mask.route())?;
    Ok((zi, b))
}

/// Per-row cosine between the full target code and the masked source code.
pub fn masked_similarity_on(g: &mut Graph, zi: Var, zj: Var, mask: &AlignmentMask) -> Result<Var> {
    let (a, b) = compared_views(g, zi, zj, mask)?;
    g.row_cosine(a, b)
}

pub fn masked_similarity(zi: &Tensor, zj: &Tensor, mask: &AlignmentMask) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(zi.clone()), g.constant(zj.clone()));
    let s = masked_similarity_on(&mut g, a, b, mask)?;
    Ok(g.value(s).data().to_vec())
}

/// Symmetric in-batch contrastive loss `½(CE(S/τ) + CE(Sᵀ/τ))` where
/// `S[p][q]` is the masked similarity of target row p and source row q.
pub fn contrastive_on(g: &mut Graph, zi: Var, zj: Var, mask: &AlignmentMask, tau: f64) -> Result<Var> {
    let n = g.value(zi).rows();
    if n < 2 {
        return Err(Error::contract("contrastive loss needs at least two rows"));
    }
    if !(tau > 0.0) {
        return Err(Error::contract(format!("temperature must be positive, got {tau}")));
    }
    let (a, b) = compared_views(g, zi, zj, mask)?;
    let s = g.cosine_matrix(a, b)?;
    let s = g.scale(s, 1.0 / tau)?;
    let st = g.transpose(s)?;
    let targets: Vec<usize> = (0..n).collect();
    let fwd = g.softmax_xent(s, &targets)?;
    let bwd = g.softmax_xent(st, &targets)?;
    let both = g.add(fwd, bwd)?;
    g.scale(both, 0.5)
}

pub fn contrastive_loss(zi: &Tensor, zj: &Tensor, mask: &AlignmentMask, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (a, b) = (g.constant(zi.clone()), g.constant(zj.clone()));
    let l = contrastive_on(&mut g, a, b, mask, tau)?;
    Ok(g.value(l).item())
}

/// Target-layout code: the masked source code routed into the target's
/// shared slots (zero where unmatched) followed by a zero specific slot.
pub fn routed_code_on(g: &mut Graph, zj: Var, mask: &AlignmentMask, d_s_target: usize) -> Result<Var> {
    if mask.matched().is_empty() {
        return Err(Error::DegenerateInput(format!(
            "mask {} → {} routes no entries",
            mask.source + 1,
            mask.target + 1
        )));
    }
    let code = g.column_map(zj, mask.route())?;
    if d_s_target == 0 {
        return Ok(code);
    }
    let n = g.value(zj).rows();
    let pad = g.constant(Tensor::zeros(&[n, d_s_target]));
    g.concat_cols(&[code, pad])
}

/// `recon_loss(Dec_i(routed code), x_i, λ)`.
pub fn cross_reconstruction_on(
    g: &mut Graph,
    bank: &ModelBank,
    zj: Var,
    mask: &AlignmentMask,
    xi: Var,
    lambda: f64,
) -> Result<Var> {
    let code = routed_code_on(g, zj, mask, bank.dims(mask.target).d_s)?;
    let xt = bank.decode_on(g, mask.target, code)?;
    recon_loss_on(g, xt, xi, lambda)
}

pub fn cross_reconstruction(bank: &ModelBank, zj: &Tensor, mask: &AlignmentMask, xi: &Tensor, lambda: f64) -> Result<f64> {
    let mut g = Graph::with_params(bank.params());
    let (a, b) = (g.constant(zj.clone()), g.constant(xi.clone()));
    let l = cross_reconstruction_on(&mut g, bank, a, mask, b, lambda)?;
    Ok(g.value(l).item())
}
