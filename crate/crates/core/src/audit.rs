//! Numerical certificates for the identifiability conditions on a
//! ground-truth generator.
//!
//! * [`partial_jacobian`]: A_{j←i}, the sensitivity of x^(j) to the shared
//!   block z_c^(i) of a neighbor, by central differences.
//! * [`collective_rank_audit`]: three independent tests that the stacked neighbor
//!   Jacobians are injective on z_c^(i).
//! * [`dedup_sparsity`] / [`conjugate_sparsity_test`]: support counts of
//!   the latent-SCM Jacobian over non-overlapping cross-modality blocks.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{condition_number, from_dmatrix, inverse, orthogonal_from, symmetric_eigenvalues, to_dmatrix};
use crate::rng::KeyedRng;
use crate::scm::{Edge, GroundTruthGenerator, LatentSpec};
use crate::tensor::Tensor;

/// λ_min / λ_max below this counts as singular.
pub const EIGEN_RATIO: f64 = 1e-8;
/// Largest acceptable ‖Σ L A − I‖_F for a positive verdict.
pub const LEFT_INVERSE_TOL: f64 = 1e-8;
pub const DEFAULT_FD_STEP: f64 = 1e-4;
pub const DEFAULT_TAU0: f64 = 1e-6;
pub const DEFAULT_PROBES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartialJacobian {
    /// Modality i whose shared block is perturbed.
    pub target: usize,
    /// Modality j whose observation responds.
    pub neighbor: usize,
    /// d_x^(j) × d_c^(i).
    pub matrix: Tensor,
    /// Latent row at which the derivative was taken.
    pub point: Vec<f64>,
    /// Central-difference step, or `None` for the chain-rule Jacobian.
    pub step: Option<f64>,
}

/// A_{j←i} at `point`: column k is the central difference of x^(j) when the
/// global factor c_{π_i(k)} is shifted and the shift is carried through the
/// SCM with all exogenous noise held fixed.
pub fn partial_jacobian(
    gen: &GroundTruthGenerator,
    target: usize,
    neighbor: usize,
    point: &[f64],
    step: f64,
) -> Result<PartialJacobian> {
    check_pair(gen, target, neighbor, point)?;
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    let spec = gen.spec();
    let (rows, cols) = (spec.observed_dim(neighbor), spec.shared_dim(target));
    let mut a = Tensor::zeros(&[rows, cols]);
    for (k, &factor) in spec.pi(target).iter().enumerate() {
        let up = gen.render_row(neighbor, &gen.scm().intervene(point, factor, step));
        let down = gen.render_row(neighbor, &gen.scm().intervene(point, factor, -step));
        for r in 0..rows {
            let d = (up[r] - down[r]) / (2.0 * step);
            if !d.is_finite() {
                return Err(Error::NumericOverflow {
                    primitive: "partial_jacobian",
                    detail: format!("difference along c{} is {d}", factor + 1),
                });
            }
            a.set(r, k, d);
        }
    }
    Ok(PartialJacobian { target, neighbor, matrix: a, point: point.to_vec(), step: Some(step) })
}

/// The same matrix by the chain rule: J_{g_j} times the SCM total effect.
pub fn analytic_partial_jacobian(
    gen: &GroundTruthGenerator,
    target: usize,
    neighbor: usize,
    point: &[f64],
) -> Result<PartialJacobian> {
    check_pair(gen, target, neighbor, point)?;
    let spec = gen.spec();
    let cols_j = spec.modality_columns(neighbor);
    let u: Vec<f64> = cols_j.iter().map(|&c| point[c]).collect();
    let jg = gen.mixing(neighbor).jacobian(&u);
    let mut a = Tensor::zeros(&[spec.observed_dim(neighbor), spec.shared_dim(target)]);
    for (k, &factor) in spec.pi(target).iter().enumerate() {
        let te = gen.scm().total_effect(point, factor);
        let du = DMatrix::from_iterator(cols_j.len(), 1, cols_j.iter().map(|&c| te[c]));
        let col = &jg * du;
        for r in 0..col.nrows() {
            a.set(r, k, col[(r, 0)]);
        }
    }
    Ok(PartialJacobian { target, neighbor, matrix: a, point: point.to_vec(), step: None })
}

fn check_pair(gen: &GroundTruthGenerator, target: usize, neighbor: usize, point: &[f64]) -> Result<()> {
    let spec = gen.spec();
    if target >= spec.modalities() || neighbor >= spec.modalities() || target == neighbor {
        return Err(Error::contract(format!("no modality pair ({}, {})", target + 1, neighbor + 1)));
    }
    if point.len() != spec.latent_dim() {
        return Err(Error::contract(format!("point has {} coordinates, layout needs {}", point.len(), spec.latent_dim())));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Identifiable,
    Deficient,
}

/// The three collective-rank criteria evaluated independently.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramReport {
    pub dim: usize,
    /// G = Σ_j A_jᵀ A_j.
    pub gram: Tensor,
    pub eig_min: f64,
    pub eig_max: f64,
    pub eig_ratio_threshold: f64,
    /// (i) the stacked operator has a trivial nullspace.
    pub stacked_injective: bool,
    pub stacked_rank: usize,
    /// Columns span the numerical nullspace of the stacked operator.
    pub nullspace: Tensor,
    /// (ii) λ_min > threshold · λ_max.
    pub gram_positive_definite: bool,
    /// (iii) L_j = G⁻¹ A_jᵀ solves Σ L_j A_j = I.
    pub left_inverse_exists: bool,
    pub left_inverses: Vec<Tensor>,
    pub left_inverse_residual: f64,
    pub criteria_agree: bool,
    pub verdict: Verdict,
}

/// Three characterizations of collective injectivity for one target modality.
pub fn collective_rank_audit(jacobians: &[Tensor]) -> Result<GramReport> {
    let first = jacobians.first().ok_or_else(|| Error::contract("no neighbor Jacobians"))?;
    let d = first.cols();
    if d == 0 || jacobians.iter().any(|a| !a.is_matrix() || a.cols() != d) {
        return Err(Error::contract("neighbor Jacobians must share a nonzero column count"));
    }
    let mats: Vec<DMatrix<f64>> = jacobians.iter().map(to_dmatrix).collect();

    // (i) SVD of the stacked operator, padded with zero rows so the full
    // right-singular basis is available.
    let total_rows: usize = mats.iter().map(|a| a.nrows()).sum();
    let mut stacked = DMatrix::zeros(total_rows.max(d), d);
    let mut r0 = 0;
    for a in &mats {
        stacked.view_mut((r0, 0), (a.nrows(), d)).copy_from(a);
        r0 += a.nrows();
    }
    let svd = stacked.svd(false, true);
    let v_t = svd.v_t.expect("requested V");
    let s_max = svd.singular_values.max();
    let sv_cut = EIGEN_RATIO.sqrt() * s_max;
    let mut null_cols = Vec::new();
    let mut rank = 0;
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s_max > 0.0 && s > sv_cut {
            rank += 1;
        } else {
            null_cols.push(v_t.row(k).transpose());
        }
    }
    let nullspace = if null_cols.is_empty() {
        Tensor::zeros(&[d, 0])
    } else {
        from_dmatrix(&DMatrix::from_columns(&null_cols))
    };
    let stacked_injective = rank == d;

    // (ii) Gram eigenvalues.
    let mut gram = DMatrix::zeros(d, d);
    for a in &mats {
        gram += a.transpose() * a;
    }
    let eig = symmetric_eigenvalues(&gram);
    let (eig_min, eig_max) = (eig[0], eig[d - 1]);
    let gram_positive_definite = eig_max > 0.0 && eig_min > EIGEN_RATIO * eig_max;

    // (iii) Left inverse through an LU solve of the Gram system.
    let lu = gram.clone().lu();
    let mut left_inverses = Vec::new();
    let mut residual = f64::INFINITY;
    let mut solved = true;
    let mut sum = DMatrix::zeros(d, d);
    for a in &mats {
        match lu.solve(&a.transpose()) {
            Some(l) if l.iter().all(|v| v.is_finite()) => {
                sum += &l * a;
                left_inverses.push(from_dmatrix(&l));
            }
            _ => {
                solved = false;
                break;
            }
        }
    }
    if solved {
        residual = (sum - DMatrix::identity(d, d)).norm();
    } else {
        left_inverses.clear();
    }
    let left_inverse_exists = solved && residual < LEFT_INVERSE_TOL;

    let criteria_agree = stacked_injective == gram_positive_definite && gram_positive_definite == left_inverse_exists;
    let verdict = if stacked_injective && gram_positive_definite && left_inverse_exists {
        Verdict::Identifiable
    } else {
        Verdict::Deficient
    };
    Ok(GramReport {
        dim: d,
        gram: from_dmatrix(&gram),
        eig_min,
        eig_max,
        eig_ratio_threshold: EIGEN_RATIO,
        stacked_injective,
        stacked_rank: rank,
        nullspace,
        gram_positive_definite,
        left_inverse_exists,
        left_inverses,
        left_inverse_residual: residual,
        criteria_agree,
        verdict,
    })
}

/// Sampled values of the latent-SCM Jacobian on the extended shared vector:
/// entry (u, v) is ∂f_{r(u)}/∂c_{r(v)} with r the extended-to-global map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianField {
    pub samples: Vec<Tensor>,
}

impl JacobianField {
    pub fn new(samples: Vec<Tensor>) -> Self {
        Self { samples }
    }

    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Tensor::rows)
    }

    /// Analytic field at `n_probe` points drawn from the SCM.
    pub fn from_generator(gen: &GroundTruthGenerator, n_probe: usize, seed: u64) -> Self {
        let spec = gen.spec();
        let z = gen.sample_latents(n_probe, seed, "audit/probes");
        let de = spec.extended_dim();
        let samples = (0..n_probe)
            .map(|p| {
                let row = z.row(p);
                let mut g = Tensor::zeros(&[de, de]);
                for u in 0..de {
                    for v in 0..de {
                        let (ru, rv) = (spec.extended_factor(u), spec.extended_factor(v));
                        if ru != rv {
                            g.set(u, v, gen.scm().direct_derivative(row, ru, rv));
                        }
                    }
                }
                g
            })
            .collect();
        Self { samples }
    }

    /// Central-difference version of [`JacobianField::from_generator`],
    /// perturbing the parent value inside each mechanism.
    pub fn from_generator_fd(gen: &GroundTruthGenerator, n_probe: usize, seed: u64, step: f64) -> Self {
        let spec = gen.spec();
        let z = gen.sample_latents(n_probe, seed, "audit/probes");
        let de = spec.extended_dim();
        let samples = (0..n_probe)
            .map(|p| {
                let mut g = Tensor::zeros(&[de, de]);
                for u in 0..de {
                    for v in 0..de {
                        let (ru, rv) = (spec.extended_factor(u), spec.extended_factor(v));
                        if ru == rv {
                            continue;
                        }
                        let mut row = z.row(p).to_vec();
                        row[rv] += step;
                        let up = gen.scm().mechanism(ru, &row);
                        row[rv] -= 2.0 * step;
                        let down = gen.scm().mechanism(ru, &row);
                        g.set(u, v, (up - down) / (2.0 * step));
                    }
                }
                g
            })
            .collect();
        Self { samples }
    }

    /// T⁻¹ G T at every sample.
    pub fn conjugate(&self, t: &Tensor) -> Result<Self> {
        let tm = to_dmatrix(t);
        let ti = inverse(&tm)?;
        Ok(Self {
            samples: self.samples.iter().map(|g| from_dmatrix(&(&ti * to_dmatrix(g) * &tm))).collect(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCount {
    /// Row modality (0-based).
    pub m: usize,
    pub n: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub count: usize,
    pub on_edge: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub tau0: f64,
    pub n_probe: usize,
    pub blocks: Vec<BlockCount>,
    /// ‖G‖₀ over all ordered modality pairs.
    pub total: usize,
    /// ‖G‖₀,ℰ over pairs on observed edges.
    pub total_on_edges: usize,
    /// Counts come from finitely many probes and may miss support.
    pub lower_bound: bool,
}

/// De-duplicated cross-modality support counts.
pub fn dedup_sparsity(field: &JacobianField, spec: &LatentSpec, edges: &[Edge], tau0: f64) -> Result<SparsityReport> {
    if !(tau0 > 0.0) {
        return Err(Error::contract(format!("support threshold must be positive, got {tau0}")));
    }
    let de = spec.extended_dim();
    if field.samples.is_empty() {
        return Err(Error::contract("Jacobian field has no samples"));
    }
    if field.samples.iter().any(|g| g.shape() != [de, de]) {
        return Err(Error::contract(format!("Jacobian samples must be {de}×{de}")));
    }
    let support = |u: usize, v: usize| field.samples.iter().any(|g| g.at(u, v).abs() > tau0);
    let mut blocks = Vec::new();
    for m in 0..spec.modalities() {
        for n in 0..spec.modalities() {
            if m == n {
                continue;
            }
            let rows = spec.nonoverlap(m, n)?;
            let cols = spec.nonoverlap(n, m)?;
            let count = rows.iter().map(|&u| cols.iter().filter(|&&v| support(u, v)).count()).sum();
            blocks.push(BlockCount {
                m,
                n,
                rows,
                cols,
                count,
                on_edge: edges.contains(&Edge::new(m, n)),
            });
        }
    }
    let total = blocks.iter().map(|b| b.count).sum();
    let total_on_edges = blocks.iter().filter(|b| b.on_edge).map(|b| b.count).sum();
    Ok(SparsityReport {
        tau0,
        n_probe: field.samples.len(),
        blocks,
        total,
        total_on_edges,
        lower_bound: true,
    })
}

/// Check that `t` is block diagonal over the index sets I_m and invertible.
pub fn check_block_diagonal(t: &Tensor, spec: &LatentSpec) -> Result<()> {
    let de = spec.extended_dim();
    if t.shape() != [de, de] {
        return Err(Error::contract(format!("transform must be {de}×{de}")));
    }
    for u in 0..de {
        for v in 0..de {
            if spec.extended_owner(u).0 != spec.extended_owner(v).0 && t.at(u, v) != 0.0 {
                return Err(Error::contract(format!("transform couples blocks at ({u}, {v})")));
            }
        }
    }
    let cond = condition_number(&to_dmatrix(t));
    if !(cond < 1e8) {
        return Err(Error::contract(format!("transform is singular (condition number {cond:.3e})")));
    }
    Ok(())
}

/// (‖G‖₀, ‖T⁻¹GT‖₀) under the same threshold and probes.
pub fn conjugate_sparsity_test(
    field: &JacobianField,
    spec: &LatentSpec,
    t: &Tensor,
    tau0: f64,
) -> Result<(usize, usize)> {
    check_block_diagonal(t, spec)?;
    let edges = spec.graph().edges().to_vec();
    let before = dedup_sparsity(field, spec, &edges, tau0)?.total;
    let after = dedup_sparsity(&field.conjugate(t)?, spec, &edges, tau0)?.total;
    Ok((before, after))
}

/// A random member of 𝒫_c: within each block, a permutation among
/// coordinates with the same overlap pattern, times nonzero scalings.
///
/// Permuting a coordinate that overlaps with modality n with one that does
/// not would move support between counted and uncounted entries, so such
/// swaps are excluded.
pub fn sample_pc_transform(spec: &LatentSpec, rng: &mut KeyedRng) -> Tensor {
    let de = spec.extended_dim();
    let mut t = Tensor::zeros(&[de, de]);
    for m in 0..spec.modalities() {
        let o = spec.offset(m);
        let signature = |k: usize| -> Vec<bool> {
            let r = spec.pi(m)[k];
            (0..spec.modalities()).map(|n| n != m && spec.pi(n).contains(&r)).collect()
        };
        let mut groups: std::collections::BTreeMap<Vec<bool>, Vec<usize>> = Default::default();
        for k in 0..spec.shared_dim(m) {
            groups.entry(signature(k)).or_default().push(k);
        }
        for members in groups.values() {
            let perm = rng.permutation(members.len());
            for (a, &p) in members.iter().zip(&perm) {
                let mag = 0.5 + 1.5 * rng.uniform();
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                t.set(o + a, o + members[p], sign * mag);
            }
        }
    }
    t
}

/// A Haar-random rotation on block I_n (identity elsewhere).
pub fn block_rotation(spec: &LatentSpec, n: usize, rng: &mut KeyedRng) -> Tensor {
    let de = spec.extended_dim();
    let mut t = Tensor::identity(de);
    let o = spec.offset(n);
    let d = spec.shared_dim(n);
    let q = orthogonal_from(d, d, rng);
    for a in 0..d {
        for b in 0..d {
            t.set(o + a, o + b, q.at(a, b));
        }
    }
    t
}

/// Per-modality collective-rank verdicts at several probe points plus the sparsity
/// counts, as written to `audit.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub modalities: Vec<ModalityAudit>,
    pub sparsity: SparsityReport,
    pub fd_step: f64,
    /// Largest |finite-difference − chain-rule| entry over all A_{j←i}.
    pub fd_max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityAudit {
    /// 1-based modality number.
    pub modality: usize,
    pub neighbors: Vec<usize>,
    pub verdict: AuditVerdict,
    pub points: usize,
    pub identifiable_points: usize,
    pub criteria_agree: bool,
    pub min_eig_ratio: f64,
    pub max_residual: f64,
    /// Nullspace basis at the first deficient point, entries labeled by the
    /// global factor they move.
    pub nullspace: Vec<Vec<(String, f64)>>,
    /// The full report at the first probe point.
    pub first_point: GramReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuditVerdict {
    Identifiable,
    Deficient,
    /// Some probe points pass and others fail.
    Mixed,
    /// The modality has no neighbors.
    Isolated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSettings {
    pub fd_step: f64,
    pub tau0: f64,
    pub n_probe: usize,
    /// Points at which the collective-rank criteria are evaluated.
    pub rank_points: usize,
}

impl Default for AuditSettings {
    fn default() -> Self {
        Self {
            fd_step: DEFAULT_FD_STEP,
            tau0: DEFAULT_TAU0,
            n_probe: DEFAULT_PROBES,
            rank_points: 16,
        }
    }
}

/// Audit every modality of `gen` against its own graph.
pub fn audit_generator(gen: &GroundTruthGenerator, settings: &AuditSettings, seed: u64) -> Result<AuditReport> {
    let spec = gen.spec();
    let points = gen.sample_latents(settings.rank_points.max(1), seed, "audit/rank-points");
    let mut modalities = Vec::new();
    let mut fd_max_deviation: f64 = 0.0;
    for i in 0..spec.modalities() {
        let neighbors = spec.graph().neighbors(i);
        let mut reports = Vec::new();
        if !neighbors.is_empty() {
            for p in 0..points.rows() {
                let point = points.row(p);
                let mut mats = Vec::new();
                for &j in &neighbors {
                    let fd = partial_jacobian(gen, i, j, point, settings.fd_step)?;
                    let an = analytic_partial_jacobian(gen, i, j, point)?;
                    fd_max_deviation = fd_max_deviation.max(fd.matrix.max_abs_diff(&an.matrix));
                    mats.push(fd.matrix);
                }
                reports.push(collective_rank_audit(&mats)?);
            }
        }
        let ok = reports.iter().filter(|r| r.verdict == Verdict::Identifiable).count();
        let verdict = match (reports.len(), ok) {
            (0, _) => AuditVerdict::Isolated,
            (n, k) if k == n => AuditVerdict::Identifiable,
            (_, 0) => AuditVerdict::Deficient,
            _ => AuditVerdict::Mixed,
        };
        let nullspace = reports
            .iter()
            .find(|r| r.verdict == Verdict::Deficient)
            .map(|r| {
                (0..r.nullspace.cols())
                    .map(|c| {
                        (0..r.dim)
                            .map(|k| (format!("c{}", spec.pi(i)[k] + 1), r.nullspace.at(k, c)))
                            .collect()
                    })
                    .collect()
            })
            .unwrap_or_default();
        let first_point = match reports.first() {
            Some(r) => r.clone(),
            None => collective_rank_audit(&[Tensor::zeros(&[1, spec.shared_dim(i)])])?,
        };
        modalities.push(ModalityAudit {
            modality: i + 1,
            neighbors: neighbors.iter().map(|n| n + 1).collect(),
            verdict,
            points: reports.len(),
            identifiable_points: ok,
            criteria_agree: reports.iter().all(|r| r.criteria_agree),
            min_eig_ratio: reports
                .iter()
                .map(|r| if r.eig_max > 0.0 { r.eig_min / r.eig_max } else { 0.0 })
                .fold(f64::INFINITY, f64::min),
            max_residual: reports.iter().map(|r| r.left_inverse_residual).fold(0.0, f64::max),
            nullspace,
            first_point,
        });
    }
    let field = JacobianField::from_generator(gen, settings.n_probe, seed);
    let sparsity = dedup_sparsity(&field, spec, spec.graph().edges(), settings.tau0)?;
    Ok(AuditReport { modalities, sparsity, fd_step: settings.fd_step, fd_max_deviation })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scm::{GroundTruthGenerator, Mixing, ModalityGraph, ScmNode, ScmSpec, WorldConfig};

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_neighbor() {
        let r = collective_rank_audit(&[m(2, 2, &[1.0, 0.0, 0.0, 1.0])]).unwrap();
        assert_eq!(r.verdict, Verdict::Identifiable);
        assert!(r.criteria_agree);
        assert_eq!(r.left_inverse_residual, 0.0);
        assert_eq!(r.nullspace.cols(), 0);
        assert!(r.gram.bits_eq(&Tensor::identity(2)));
    }

    #[test]
    fn individually_deficient_but_collectively_full() {
        let r = collective_rank_audit(&[m(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), m(1, 3, &[0.0, 0.0, 1.0])]).unwrap();
        assert_eq!(r.verdict, Verdict::Identifiable);
        assert!(r.gram.bits_eq(&Tensor::identity(3)));
        assert!(r.left_inverse_residual < 1e-12);
        assert_eq!(r.stacked_rank, 3);
    }

    #[test]
    fn collinear_neighbors_leave_a_direction() {
        let r = collective_rank_audit(&[m(1, 2, &[1.0, 0.0]), m(1, 2, &[2.0, 0.0])]).unwrap();
        assert_eq!(r.verdict, Verdict::Deficient);
        assert!(r.criteria_agree);
        assert!(r.gram.bits_eq(&m(2, 2, &[5.0, 0.0, 0.0, 0.0])));
        assert_eq!(r.nullspace.shape(), &[2, 1]);
        assert!(r.nullspace.at(0, 0).abs() < 1e-12);
        assert!((r.nullspace.at(1, 0).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_columns_are_rejected() {
        assert!(matches!(collective_rank_audit(&[m(1, 2, &[1.0, 0.0]), m(1, 1, &[1.0])]), Err(Error::Contract(_))));
        assert!(collective_rank_audit(&[]).is_err());
    }

    fn linear_world() -> GroundTruthGenerator {
        // Two modalities sharing c1; modality 2 also sees c2. Depth-1 mixings.
        let g = ModalityGraph::new(2, &[(0, 1)]).unwrap();
        let spec = LatentSpec::new(g, 2, vec![vec![0], vec![0, 1]], vec![1, 0]).unwrap();
        let root = || ScmNode { parents: vec![], noise_scale: 1.0 };
        let scm = ScmSpec::new(&spec, vec![root(), root(), root()]).unwrap();
        let mut rng = KeyedRng::new(3, "lin");
        let mixings = vec![Mixing::random(2, 1, 0.3, &mut rng), Mixing::random(2, 1, 0.3, &mut rng)];
        GroundTruthGenerator::new(spec, scm, mixings, None).unwrap()
    }

    #[test]
    fn affine_generator_jacobian_is_its_weight_columns() {
        let gen = linear_world();
        let point = [0.3, -0.7, 1.1];
        let a = partial_jacobian(&gen, 1, 0, &point, 1e-4).unwrap();
        // x1 = W·(c1, s1) + b, so ∂x1/∂c1 is W's first column and ∂x1/∂c2 = 0.
        let w = &gen.mixing(0).layers()[0].weight;
        for r in 0..2 {
            assert!((a.matrix.at(r, 0) - w.at(r, 0)).abs() < 1e-9);
            assert!(a.matrix.at(r, 1).abs() < 1e-9);
        }
    }

    #[test]
    fn deep_generator_fd_matches_chain_rule() {
        let cfg: WorldConfig = toml::from_str(
            r#"
            modalities = 2
            edges = [[1, 2]]
            shared = 2
            pi = [[1], [1, 2]]
            specific = [1, 1]
            mixing_depth = 3
            scm = [{ from = "c1", to = "c2", weight = 1.3 }]
            "#,
        )
        .unwrap();
        let gen = GroundTruthGenerator::from_config(&cfg, 4).unwrap();
        let z = gen.sample_latents(20, 5, "pts");
        for r in 0..20 {
            for (i, j) in [(0, 1), (1, 0)] {
                let fd = partial_jacobian(&gen, i, j, z.row(r), 1e-4).unwrap();
                let an = analytic_partial_jacobian(&gen, i, j, z.row(r)).unwrap();
                assert!(fd.matrix.max_abs_diff(&an.matrix) < 1e-6);
            }
        }
    }

    #[test]
    fn zero_field_has_zero_counts() {
        let g = ModalityGraph::new(2, &[(0, 1)]).unwrap();
        let spec = LatentSpec::new(g, 2, vec![vec![0], vec![1]], vec![0, 0]).unwrap();
        let field = JacobianField::new(vec![Tensor::zeros(&[2, 2])]);
        let r = dedup_sparsity(&field, &spec, spec.graph().edges(), 1e-6).unwrap();
        assert_eq!((r.total, r.total_on_edges), (0, 0));
    }

    #[test]
    fn identity_and_permutation_conjugation_preserve_counts() {
        let g = ModalityGraph::new(2, &[(0, 1)]).unwrap();
        let spec = LatentSpec::new(g, 4, vec![vec![0, 1], vec![2, 3]], vec![0, 0]).unwrap();
        let mut gm = Tensor::zeros(&[4, 4]);
        gm.set(0, 2, 0.7);
        gm.set(3, 1, -1.2);
        let field = JacobianField::new(vec![gm]);
        assert_eq!(conjugate_sparsity_test(&field, &spec, &Tensor::identity(4), 1e-6).unwrap(), (2, 2));
        let mut rng = KeyedRng::new(1, "pc");
        let t = sample_pc_transform(&spec, &mut rng);
        assert_eq!(conjugate_sparsity_test(&field, &spec, &t, 1e-6).unwrap(), (2, 2));
    }

    #[test]
    fn dense_rotation_grows_a_single_entry() {
        // One supported entry G[u=0, v=2]; rotating block 2 (coords 2, 3)
        // by θ gives row 0 entries (0.7 cos θ, −0.7 sin θ)·... both nonzero.
        let g = ModalityGraph::new(2, &[(0, 1)]).unwrap();
        let spec = LatentSpec::new(g, 4, vec![vec![0, 1], vec![2, 3]], vec![0, 0]).unwrap();
        let mut gm = Tensor::zeros(&[4, 4]);
        gm.set(0, 2, 0.7);
        let field = JacobianField::new(vec![gm]);
        let th: f64 = 0.4;
        let mut t = Tensor::identity(4);
        t.set(2, 2, th.cos());
        t.set(2, 3, -th.sin());
        t.set(3, 2, th.sin());
        t.set(3, 3, th.cos());
        let (before, after) = conjugate_sparsity_test(&field, &spec, &t, 1e-6).unwrap();
        assert_eq!((before, after), (1, 2));
    }

    #[test]
    fn singular_or_coupling_transforms_are_rejected() {
        let g = ModalityGraph::new(2, &[(0, 1)]).unwrap();
        let spec = LatentSpec::new(g, 2, vec![vec![0], vec![1]], vec![0, 0]).unwrap();
        let field = JacobianField::new(vec![Tensor::zeros(&[2, 2])]);
        let singular = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(conjugate_sparsity_test(&field, &spec, &singular, 1e-6), Err(Error::Contract(_))));
        let coupling = m(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(conjugate_sparsity_test(&field, &spec, &coupling, 1e-6).is_err());
    }

    #[test]
    fn analytic_field_matches_finite_differences() {
        let cfg: WorldConfig = toml::from_str(
            r#"
            modalities = 2
            edges = [[1, 2]]
            shared = 3
            pi = [[1, 2], [2, 3]]
            specific = [0, 0]
            scm = [{ from = "c1", to = "c2", weight = 1.3 }, { from = "c2", to = "c3", weight = -0.8 }]
            "#,
        )
        .unwrap();
        let gen = GroundTruthGenerator::from_config(&cfg, 1).unwrap();
        let a = JacobianField::from_generator(&gen, 8, 2);
        let f = JacobianField::from_generator_fd(&gen, 8, 2, 1e-5);
        for (x, y) in a.samples.iter().zip(&f.samples) {
            assert!(x.max_abs_diff(y) < 1e-8);
        }
    }
}
