//! Recovery scores for learned codes: affine R², leakage, rank-correlation
//! MCC with optimal matching, and the sparsity pattern of fitted maps.

pub mod ablation;
pub mod hungarian;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, singular_values, to_dmatrix};
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

pub use ablation::{ordering_verdict, AblationReport, OrderingVerdict, VariantScore, ABLATION_VARIANTS};
pub use hungarian::min_cost_assignment;

/// Design matrices whose smallest-to-largest singular value ratio falls
/// below this are solved with a ridge penalty instead.
pub const RANK_RATIO: f64 = 1e-10;

/// Affine map `y ≈ [1, x]·coef`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    /// `(p + 1) × q`, intercept row first, row-major.
    pub coef: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
    pub ridge_fallback: bool,
}

fn design(x: &Tensor) -> DMatrix<f64> {
    let (n, p) = (x.rows(), x.cols());
    DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { x.at(r, c - 1) })
}

impl AffineFit {
    pub fn fit(x: &Tensor, y: &Tensor) -> Result<Self> {
        if x.rows() != y.rows() {
            return Err(Error::contract(format!("fit: {} predictor rows, {} target rows", x.rows(), y.rows())));
        }
        let a = design(x);
        let b = to_dmatrix(y);
        let sv = singular_values(&a);
        let ratio = sv.last().copied().unwrap_or(0.0) / sv.first().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
        let (coef, ridge) = if ratio > RANK_RATIO {
            (lstsq(&a, &b)?, false)
        } else {
            let ata = a.transpose() * &a;
            let lam = 1e-8 * ata.diagonal().max().max(1.0);
            let reg = ata + DMatrix::identity(a.ncols(), a.ncols()) * lam;
            let sol = reg
                .lu()
                .solve(&(a.transpose() * &b))
                .ok_or_else(|| Error::contract("ridge system is singular"))?;
            (sol, true)
        };
        let (rows, cols) = (coef.nrows(), coef.ncols());
        Ok(Self {
            coef: (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| coef[(r, c)]).collect(),
            inputs: x.cols(),
            outputs: y.cols(),
            ridge_fallback: ridge,
        })
    }

    pub fn predict(&self, x: &Tensor) -> Tensor {
        let q = self.outputs;
        let mut out = vec![0.0; x.rows() * q];
        for r in 0..x.rows() {
            for c in 0..q {
                let mut acc = self.coef[c];
                for k in 0..self.inputs {
                    acc += x.at(r, k) * self.coef[(k + 1) * q + c];
                }
                out[r * q + c] = acc;
            }
        }
        Tensor::matrix(x.rows(), q, out).expect("sized above")
    }

    /// `∂y/∂x`, `q × p`.
    pub fn jacobian(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.outputs, self.inputs, |c, k| self.coef[(k + 1) * self.outputs + c])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Score {
    /// Mean over scored coordinates.
    pub mean: f64,
    /// `None` for a coordinate that is constant on the score rows.
    pub per_coordinate: Vec<Option<f64>>,
    pub ridge_fallback: bool,
    pub n_fit: usize,
    pub n_score: usize,
}

/// `1 − SS_res / SS_tot` per column; `None` when `SS_tot = 0`.
pub fn r2_columns(pred: &Tensor, truth: &Tensor) -> Vec<Option<f64>> {
    (0..truth.cols())
        .map(|c| {
            let y = truth.column(c);
            let mean = y.iter().sum::<f64>() / y.len() as f64;
            let tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
            let res: f64 = y.iter().enumerate().map(|(r, v)| (v - pred.at(r, c)).powi(2)).sum();
            (tot > 0.0).then(|| 1.0 - res / tot)
        })
        .collect()
}

/// Fit an affine map on one split and score R² on another.
pub fn r2_fit_score(x_fit: &Tensor, y_fit: &Tensor, x_score: &Tensor, y_score: &Tensor) -> Result<R2Score> {
    let fit = AffineFit::fit(x_fit, y_fit)?;
    let per = r2_columns(&fit.predict(x_score), y_score);
    let scored: Vec<f64> = per.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::DegenerateInput("every target coordinate is constant on the score rows".into()));
    }
    Ok(R2Score {
        mean: scored.iter().sum::<f64>() / scored.len() as f64,
        per_coordinate: per,
        ridge_fallback: fit.ridge_fallback,
        n_fit: x_fit.rows(),
        n_score: x_score.rows(),
    })
}

/// Split held-out rows in half (fit / score) by a keyed permutation.
pub fn fit_score_split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let perm = KeyedRng::new(seed, "eval/fit-score").permutation(n);
    let half = n / 2;
    (perm[..half].to_vec(), perm[half..].to_vec())
}

/// Held-out affine R² of `truths` from `estimates`, fitted on one half of
/// the rows and scored on the other.
pub fn block_r2(estimates: &Tensor, truths: &Tensor, seed: u64) -> Result<R2Score> {
    let n = estimates.rows();
    if truths.rows() != n {
        return Err(Error::contract(format!("{n} estimate rows, {} truth rows", truths.rows())));
    }
    let need = 10 * estimates.cols().max(truths.cols()).max(1);
    if n < need {
        return Err(Error::contract(format!("{n} rows is fewer than 10 × dimension ({need})")));
    }
    let (fit, score) = fit_score_split(n, seed);
    r2_fit_score(
        &estimates.select_rows(&fit),
        &truths.select_rows(&fit),
        &estimates.select_rows(&score),
        &truths.select_rows(&score),
    )
}

/// [`block_r2`] with the specific code as predictors; low values mean the
/// specific block carries little shared information.
pub fn leakage_r2(specific: &Tensor, truths: &Tensor, seed: u64) -> Result<R2Score> {
    block_r2(specific, truths, seed)
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    /// `|ρ_s|` between estimate column e and truth column t, `[e][t]`.
    pub abs_correlation: Vec<Vec<f64>>,
    /// Matched `(estimate, truth)` column pairs.
    pub matching: Vec<(usize, usize)>,
    pub mcc: f64,
    /// Constant columns left out of the matching.
    pub excluded_estimates: Vec<usize>,
    pub excluded_truths: Vec<usize>,
    pub notes: Vec<String>,
}

fn is_constant(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[0] == w[1])
}

/// Mean absolute Spearman correlation under the best one-to-one matching.
pub fn mcc(estimates: &Tensor, truths: &Tensor) -> Result<ComponentReport> {
    if estimates.rows() != truths.rows() || estimates.rows() < 2 {
        return Err(Error::contract("mcc needs at least two aligned rows"));
    }
    let ecols: Vec<Vec<f64>> = (0..estimates.cols()).map(|c| estimates.column(c)).collect();
    let tcols: Vec<Vec<f64>> = (0..truths.cols()).map(|c| truths.column(c)).collect();
    let mut notes = Vec::new();
    if ecols.len() != tcols.len() {
        notes.push(format!("{} estimated vs {} true components", ecols.len(), tcols.len()));
    }
    let excluded_estimates: Vec<usize> = (0..ecols.len()).filter(|&c| is_constant(&ecols[c])).collect();
    let excluded_truths: Vec<usize> = (0..tcols.len()).filter(|&c| is_constant(&tcols[c])).collect();
    for &c in &excluded_estimates {
        notes.push(format!("estimated component {c} is constant and was not matched"));
    }
    for &c in &excluded_truths {
        notes.push(format!("true component {c} is constant and was not matched"));
    }
    let er: Vec<Option<Vec<f64>>> = ecols.iter().map(|c| (!is_constant(c)).then(|| ranks(c))).collect();
    let tr: Vec<Option<Vec<f64>>> = tcols.iter().map(|c| (!is_constant(c)).then(|| ranks(c))).collect();
    let abs_correlation: Vec<Vec<f64>> = er
        .iter()
        .map(|e| {
            tr.iter()
                .map(|t| match (e, t) {
                    (Some(e), Some(t)) => pearson(e, t).abs(),
                    _ => 0.0,
                })
                .collect()
        })
        .collect();
    let ev: Vec<usize> = (0..ecols.len()).filter(|c| !excluded_estimates.contains(c)).collect();
    let tv: Vec<usize> = (0..tcols.len()).filter(|c| !excluded_truths.contains(c)).collect();
    if ev.is_empty() || tv.is_empty() {
        return Err(Error::DegenerateInput("no non-constant components to match".into()));
    }
    let matching: Vec<(usize, usize)> = if ev.len() <= tv.len() {
        let cost: Vec<Vec<f64>> = ev.iter().map(|&e| tv.iter().map(|&t| -abs_correlation[e][t]).collect()).collect();
        min_cost_assignment(&cost).into_iter().enumerate().map(|(i, j)| (ev[i], tv[j])).collect()
    } else {
        let cost: Vec<Vec<f64>> = tv.iter().map(|&t| ev.iter().map(|&e| -abs_correlation[e][t]).collect()).collect();
        let mut m: Vec<(usize, usize)> =
            min_cost_assignment(&cost).into_iter().enumerate().map(|(i, j)| (ev[j], tv[i])).collect();
        m.sort_unstable();
        m
    };
    let mcc = matching.iter().map(|&(e, t)| abs_correlation[e][t]).sum::<f64>() / matching.len() as f64;
    Ok(ComponentReport { abs_correlation, matching, mcc, excluded_estimates, excluded_truths, notes })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapSparsity {
    pub tau0: f64,
    /// Union over probes of `|J[r][c]| > τ₀`.
    pub pattern: Vec<Vec<bool>>,
    /// The thresholded pattern is the same at every probe.
    pub constant_pattern: bool,
    /// Square, one supported entry per row and column, and every entry maps
    /// within a group.
    pub in_pc: bool,
}

/// Thresholded support of a fitted map's Jacobians and whether it is a
/// generalized permutation respecting `groups` (one group label per
/// coordinate; pass all-equal labels to allow any permutation).
pub fn map_sparsity_report(jacobians: &[DMatrix<f64>], groups: &[usize], tau0: f64) -> MapSparsity {
    let Some(first) = jacobians.first() else {
        return MapSparsity { tau0, pattern: Vec::new(), constant_pattern: true, in_pc: false };
    };
    let (q, p) = first.shape();
    let support = |j: &DMatrix<f64>| -> Vec<Vec<bool>> {
        (0..q).map(|r| (0..p).map(|c| j[(r, c)].abs() > tau0).collect()).collect()
    };
    let base = support(first);
    let mut pattern = base.clone();
    let mut constant_pattern = true;
    for j in &jacobians[1..] {
        let s = support(j);
        constant_pattern &= s == base;
        for r in 0..q {
            for c in 0..p {
                pattern[r][c] |= s[r][c];
            }
        }
    }
    let rows_ok = pattern.iter().all(|row| row.iter().filter(|&&b| b).count() == 1);
    let cols_ok = (0..p).all(|c| pattern.iter().filter(|row| row[c]).count() == 1);
    let grouped = groups.len() == p
        && (0..q).all(|r| (0..p).all(|c| !pattern[r][c] || groups.get(r) == groups.get(c)));
    let in_pc = q == p && rows_ok && cols_ok && constant_pattern && grouped;
    MapSparsity { tau0, pattern, constant_pattern, in_pc }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gaussian(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::matrix(n, d, KeyedRng::new(seed, "eval-test").normals(n * d)).unwrap()
    }

    #[test]
    fn identity_recovery_is_perfect() {
        let z = gaussian(500, 3, 1);
        let s = block_r2(&z, &z, 0).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-12);
        assert!(!s.ridge_fallback);
    }

    #[test]
    fn invertible_linear_maps_keep_r2_at_one() {
        let z = gaussian(400, 2, 2);
        let a = Tensor::matrix(2, 2, vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        let est = z.matmul(&a).unwrap();
        assert!((block_r2(&est, &z, 0).unwrap().mean - 1.0).abs() < 1e-10);
    }

    #[test]
    fn independent_noise_scores_near_zero() {
        let z = gaussian(10_000, 2, 3);
        let noise = gaussian(10_000, 2, 4);
        let s = block_r2(&noise, &z, 0).unwrap();
        assert!(s.mean <= 0.02, "{}", s.mean);
    }

    #[test]
    fn duplicate_predictors_fall_back_to_ridge() {
        let z = gaussian(200, 1, 5);
        let est = Tensor::hcat(&[&z, &z]).unwrap();
        let s = block_r2(&est, &z, 0).unwrap();
        assert!(s.ridge_fallback);
        assert!(s.mean > 0.999_999);
    }

    #[test]
    fn too_few_rows_is_a_contract_error() {
        let z = gaussian(20, 3, 6);
        assert!(matches!(block_r2(&z, &z, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn leakage_controls() {
        let z = gaussian(10_000, 2, 7);
        assert!((leakage_r2(&z, &z, 1).unwrap().mean - 1.0).abs() < 1e-12);
        let s = gaussian(10_000, 1, 8);
        assert!(leakage_r2(&s, &z, 1).unwrap().mean <= 0.02);
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn mcc_absorbs_permutation_sign_and_monotone_maps() {
        let z = gaussian(1000, 3, 9);
        let est = Tensor::from_rows(
            &(0..1000)
                .map(|r| vec![-z.at(r, 2), z.at(r, 0).powi(3), (z.at(r, 1)).exp()])
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let rep = mcc(&est, &z).unwrap();
        assert!((rep.mcc - 1.0).abs() < 1e-12, "{}", rep.mcc);
        assert_eq!(rep.matching, vec![(0, 2), (1, 0), (2, 1)]);
    }

    #[test]
    fn rotated_gaussians_score_about_one_over_root_two() {
        let z = gaussian(20_000, 2, 10);
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let rot = Tensor::matrix(2, 2, vec![c, -c, c, c]).unwrap();
        let m = mcc(&z.matmul(&rot).unwrap(), &z).unwrap().mcc;
        // Spearman of a 45° mix of independent Gaussians: (6/π)·asin(ρ/2)
        // with ρ = 1/√2.
        let oracle = 6.0 / std::f64::consts::PI * (c / 2.0).asin();
        assert!((m - oracle).abs() < 0.02, "{m} vs {oracle}");
        assert!((m - c).abs() < 0.03);
    }

    #[test]
    fn constant_components_are_excluded() {
        let z = gaussian(100, 2, 11);
        let mut est = z.clone();
        for r in 0..100 {
            est.set(r, 1, 4.0);
        }
        let rep = mcc(&est, &z).unwrap();
        assert_eq!(rep.excluded_estimates, vec![1]);
        assert_eq!(rep.matching.len(), 1);
        assert!(!rep.notes.is_empty());
    }

    #[test]
    fn sparsity_verdicts() {
        let perm = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -1.0, 0.0]);
        assert!(map_sparsity_report(&[perm.clone()], &[0, 0], 1e-6).in_pc);
        assert!(!map_sparsity_report(&[perm], &[0, 1], 1e-6).in_pc);
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let rot = DMatrix::from_row_slice(2, 2, &[c, -c, c, c]);
        assert!(!map_sparsity_report(&[rot], &[0, 0], 1e-6).in_pc);
        let near = DMatrix::from_row_slice(2, 2, &[1.5, 1e-9, 0.0, -0.7]);
        assert!(map_sparsity_report(&[near], &[0, 1], 1e-6).in_pc);
    }

    proptest! {
        #[test]
        fn block_r2_is_affine_invariant(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0, d in -3.0f64..3.0, s in -5.0f64..5.0) {
            prop_assume!((a * d - b * c).abs() > 0.1);
            let z = gaussian(300, 2, 12);
            let est = z.map(|v| v.tanh());
            let base = block_r2(&est, &z, 3).unwrap().mean;
            let m = Tensor::matrix(2, 2, vec![a, b, c, d]).unwrap();
            let moved = est.matmul(&m).unwrap().map(|v| v + s);
            let other = block_r2(&moved, &z, 3).unwrap().mean;
            prop_assert!((base - other).abs() < 1e-10);
        }

        #[test]
        fn mcc_is_invariant_under_monotone_maps(shift in -2.0f64..2.0, scale in 0.1f64..3.0) {
            let z = gaussian(200, 2, 13);
            let base = mcc(&z.map(|v| v.tanh()), &z).unwrap().mcc;
            let moved = mcc(&z.map(|v| -(scale * v + shift).exp()), &z).unwrap().mcc;
            prop_assert!((base - moved).abs() < 1e-12);
        }
    }
}
