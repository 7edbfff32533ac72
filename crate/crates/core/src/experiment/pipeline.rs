//! The phases of a run: data, Stage I, evaluation, backbones, Stage II, and
//! the five-variant ablation.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::audit::{AuditReport, AuditVerdict};
use crate::error::{Error, Result};
use crate::eval::{
    map_sparsity_report, mcc, ordering_verdict, r2_fit_score, AblationReport, AffineFit, ComponentReport,
    MapSparsity, R2Score, VariantScore, ABLATION_VARIANTS,
};
use crate::scm::{Edge, GroundTruthGenerator, PairDataset};
use crate::stage1::{build_masks, train_stage1, MaskSet, ModelBank, Stage1Config, Stage1Outcome};
use crate::stage2::{
    accuracy, majority_baseline, train_stage2, transfer_logits, FrozenBackbone, Stage2Config, Stage2Outcome,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct EdgeSplits {
    pub edge: Edge,
    pub train: PairDataset,
    pub fit: PairDataset,
    pub score: PairDataset,
}

/// A generator plus every edge's train / fit / score rows.
#[derive(Clone, Debug)]
pub struct World {
    pub generator: GroundTruthGenerator,
    pub splits: Vec<EdgeSplits>,
    pub correspondences: BTreeMap<Edge, Vec<(usize, usize)>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Fit,
    Score,
}

/// Rows of one modality gathered from every edge it belongs to.
pub struct Gathered {
    pub x: Tensor,
    pub latents: Tensor,
    pub labels: Option<Tensor>,
}

fn vcat(parts: &[&Tensor]) -> Tensor {
    let cols = parts[0].cols();
    let rows = parts.iter().map(|t| t.rows()).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::matrix(rows, cols, data).expect("equal widths")
}

impl World {
    pub fn from_datasets(cfg: &ExperimentConfig, seed: u64, datasets: Vec<PairDataset>) -> Result<Self> {
        let generator = GroundTruthGenerator::from_config(&cfg.world, seed)?;
        let fp = generator.fingerprint();
        let mut splits = Vec::new();
        for ds in datasets {
            if ds.generator_fingerprint() != fp {
                return Err(Error::Config(format!(
                    "dataset for edge {} was generated by a different world (fingerprint {})",
                    ds.edge(),
                    ds.generator_fingerprint()
                )));
            }
            let mut parts = ds.split(&cfg.data.split).into_iter();
            let (train, fit, score) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
            splits.push(EdgeSplits { edge: ds.edge(), train, fit, score });
        }
        splits.sort_by_key(|s| s.edge);
        let expected: Vec<Edge> = generator.spec().graph().edges().to_vec();
        let got: Vec<Edge> = splits.iter().map(|s| s.edge).collect();
        if expected != got {
            return Err(Error::Config(format!("datasets cover edges {got:?}, the graph has {expected:?}")));
        }
        let correspondences = cfg.world.correspondences(generator.spec())?;
        Ok(Self { generator, splits, correspondences })
    }

    pub fn edges(&self) -> Vec<Edge> {
        self.splits.iter().map(|s| s.edge).collect()
    }

    fn part(s: &EdgeSplits, part: Part) -> &PairDataset {
        match part {
            Part::Train => &s.train,
            Part::Fit => &s.fit,
            Part::Score => &s.score,
        }
    }

    /// Observations of `m`, latents and labels over every edge touching `m`,
    /// in edge order.
    pub fn gather(&self, m: usize, part: Part) -> Result<Gathered> {
        let sets: Vec<&PairDataset> =
            self.splits.iter().filter(|s| s.edge.contains(m)).map(|s| Self::part(s, part)).collect();
        if sets.is_empty() {
            return Err(Error::Config(format!("modality {} belongs to no edge", m + 1)));
        }
        let xs: Vec<&Tensor> = sets.iter().map(|d| d.training_view().x_of(m)).collect::<Result<_>>()?;
        let zs: Vec<&Tensor> = sets
            .iter()
            .map(|d| d.eval_latents().ok_or_else(|| Error::Config("dataset carries no latents".into())))
            .collect::<Result<_>>()?;
        let labels = sets
            .iter()
            .map(|d| d.training_view().labels())
            .collect::<Option<Vec<_>>>()
            .map(|ls| Tensor::vector(ls.iter().flat_map(|l| l.data().iter().copied()).collect()));
        Ok(Gathered { x: vcat(&xs), latents: vcat(&zs), labels })
    }
}

pub fn build_world(cfg: &ExperimentConfig, seed: u64) -> Result<World> {
    let generator = GroundTruthGenerator::from_config(&cfg.world, seed)?;
    let datasets = generator
        .spec()
        .graph()
        .edges()
        .iter()
        .map(|&e| generator.sample_pair_dataset(e, cfg.data.rows_per_edge, seed))
        .collect::<Result<Vec<_>>>()?;
    World::from_datasets(cfg, seed, datasets)
}

pub fn masks_for(cfg: &ExperimentConfig, world: &World, seed: u64) -> Result<MaskSet> {
    build_masks(world.generator.spec(), &world.edges(), &world.correspondences, cfg.stage1.mask, seed)
}

pub fn fresh_bank(world: &World, s1: &Stage1Config, seed: u64) -> Result<ModelBank> {
    ModelBank::new(ModelBank::dims_from_spec(world.generator.spec()), s1.body(), seed)
}

pub fn stage1_phase(world: &World, masks: &MaskSet, s1: &Stage1Config, seed: u64) -> Result<Stage1Outcome> {
    let views: Vec<_> = world.splits.iter().map(|s| s.train.training_view()).collect();
    train_stage1(&views, fresh_bank(world, s1, seed)?, masks, s1, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionR2 {
    /// Unit direction in the modality's shared coordinates, labeled by factor.
    pub direction: Vec<(String, f64)>,
    /// `false` for a nullspace direction of the stacked neighbor Jacobians.
    pub identified: bool,
    pub r2: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityEval {
    pub modality: usize,
    pub factors: Vec<String>,
    pub block_r2: R2Score,
    pub leakage_r2: R2Score,
    pub mcc: ComponentReport,
    pub map_sparsity: MapSparsity,
    pub audit_verdict: Option<AuditVerdict>,
    /// Present when the audit finds a deficient direction.
    pub directions: Vec<DirectionR2>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_fingerprint: String,
    pub seed: u64,
    pub modalities: Vec<ModalityEval>,
    pub mean_block_r2: f64,
    pub mean_leakage_r2: f64,
    pub note: String,
}

const EVAL_NOTE: &str = "Affine R² of true shared factors from learned codes (a lower bound on recovery up to an \
invertible map) and rank-correlation MCC after optimal matching; both are this tool's recovery scores, fitted on \
the fit split and scored on the score split.";

/// Orthonormal basis of the span of `v`'s columns and of its complement.
fn split_basis(v: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = v.nrows();
    let k = v.ncols();
    let mut aug = DMatrix::zeros(d, k + d);
    aug.columns_mut(0, k).copy_from(v);
    aug.columns_mut(k, d).copy_from(&DMatrix::identity(d, d));
    let q = aug.qr().q();
    let full = q.columns(0, d).into_owned();
    (full.columns(0, k).into_owned(), full.columns(k, d - k).into_owned())
}

fn direction_r2(
    zc_fit: &Tensor,
    zc_score: &Tensor,
    truth_fit: &Tensor,
    truth_score: &Tensor,
    dir: &[f64],
) -> Result<f64> {
    let t = Tensor::matrix(dir.len(), 1, dir.to_vec())?;
    Ok(r2_fit_score(zc_fit, &truth_fit.matmul(&t)?, zc_score, &truth_score.matmul(&t)?)?.mean)
}

/// Coordinates that the masks route to the same set of neighbors share a
/// group; maps inside one group are the admissible permutations.
fn coordinate_groups(masks: &MaskSet, m: usize, d: usize) -> Vec<usize> {
    let sig: Vec<Vec<usize>> = (0..d)
        .map(|k| masks.iter().filter(|((s, _), mk)| *s == m && mk.bits()[k] == 1).map(|((_, t), _)| *t).collect())
        .collect();
    let mut seen: Vec<&Vec<usize>> = Vec::new();
    sig.iter()
        .map(|s| match seen.iter().position(|x| *x == s) {
            Some(i) => i,
            None => {
                seen.push(s);
                seen.len() - 1
            }
        })
        .collect()
}

/// Scores every modality's learned codes against the ground truth on rows
/// no training stage saw.
pub fn evaluate_phase(
    cfg: &ExperimentConfig,
    world: &World,
    bank: &ModelBank,
    masks: &MaskSet,
    audit: Option<&AuditReport>,
    seed: u64,
) -> Result<EvalReport> {
    let spec = world.generator.spec();
    let mut modalities = Vec::new();
    for m in 0..spec.modalities() {
        if spec.graph().neighbors(m).is_empty() {
            continue;
        }
        let fit = world.gather(m, Part::Fit)?;
        let score = world.gather(m, Part::Score)?;
        let cols = spec.pi(m).to_vec();
        let truth_fit = fit.latents.select_cols(&cols);
        let truth_score = score.latents.select_cols(&cols);
        let (zc_fit, zs_fit) = bank.encode(m, &fit.x)?;
        let (zc_score, zs_score) = bank.encode(m, &score.x)?;
        let block = r2_fit_score(&zc_fit, &truth_fit, &zc_score, &truth_score)?;
        let leak = r2_fit_score(&zs_fit, &truth_fit, &zs_score, &truth_score)?;
        let comp = mcc(&zc_score, &truth_score)?;
        let fitted = AffineFit::fit(&zc_fit, &truth_fit)?;
        let sparsity =
            map_sparsity_report(&[fitted.jacobian()], &coordinate_groups(masks, m, cols.len()), cfg.eval.map_tau0);
        let mod_audit = audit.and_then(|a| a.modalities.iter().find(|x| x.modality == m + 1));
        let mut directions = Vec::new();
        if let Some(a) = mod_audit.filter(|a| !a.nullspace.is_empty()) {
            let d = cols.len();
            let k = a.nullspace.len();
            let v = DMatrix::from_fn(d, k, |r, c| a.nullspace[c][r].1);
            let (null, comp_basis) = split_basis(&v);
            let names: Vec<String> = cols.iter().map(|c| format!("c{}", c + 1)).collect();
            for (basis, identified) in [(null, false), (comp_basis, true)] {
                for c in 0..basis.ncols() {
                    let dir: Vec<f64> = basis.column(c).iter().copied().collect();
                    let r2 = direction_r2(&zc_fit, &zc_score, &truth_fit, &truth_score, &dir)?;
                    directions.push(DirectionR2 {
                        direction: names.iter().cloned().zip(dir).collect(),
                        identified,
                        r2,
                    });
                }
            }
        }
        modalities.push(ModalityEval {
            modality: m + 1,
            factors: cols.iter().map(|c| format!("c{}", c + 1)).collect(),
            block_r2: block,
            leakage_r2: leak,
            mcc: comp,
            map_sparsity: sparsity,
            audit_verdict: mod_audit.map(|a| a.verdict),
            directions,
        });
    }
    let n = modalities.len().max(1) as f64;
    Ok(EvalReport {
        config_fingerprint: cfg.fingerprint(),
        seed,
        mean_block_r2: modalities.iter().map(|m| m.block_r2.mean).sum::<f64>() / n,
        mean_leakage_r2: modalities.iter().map(|m| m.leakage_r2.mean).sum::<f64>() / n,
        modalities,
        note: EVAL_NOTE.into(),
    })
}

fn labels_of(g: &Gathered) -> Result<&Tensor> {
    g.labels
        .as_ref()
        .ok_or_else(|| Error::Config("the world has no label_factor; Stage II needs labels".into()))
}

/// One probe per Stage II target, trained on clean train rows.
pub fn train_backbones(cfg: &ExperimentConfig, world: &World, seed: u64) -> Result<Vec<FrozenBackbone>> {
    cfg.stage2
        .targets0()?
        .into_iter()
        .map(|t| {
            let g = world.gather(t, Part::Train)?;
            FrozenBackbone::train(t, &g.x, labels_of(&g)?, &cfg.probe, seed)
        })
        .collect()
}

/// Held-out backbone accuracy (percent) on surrogates from the source
/// modality, and the majority-class rate on the same rows.
pub fn transfer_score(
    world: &World,
    bank: &ModelBank,
    backbones: &[FrozenBackbone],
    masks: &MaskSet,
    s2: &Stage2Config,
) -> Result<(f64, f64)> {
    let g = world.gather(s2.source0()?, Part::Score)?;
    let labels = labels_of(&g)?;
    let logits = transfer_logits(bank, backbones, masks, s2, &g.x)?;
    Ok((accuracy(&logits, labels)?, majority_baseline(labels)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionAccuracy {
    pub source: usize,
    pub target: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub config_fingerprint: String,
    pub seed: u64,
    pub source: usize,
    pub targets: Vec<usize>,
    /// Backbone accuracy on clean held-out target observations.
    pub backbone_clean_accuracy: Vec<f64>,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
    pub directions: Vec<DirectionAccuracy>,
    pub chance: f64,
    pub final_task_loss: Option<f64>,
    pub hashes_before: Vec<String>,
    pub hashes_after: Vec<String>,
    pub frozen_verified: bool,
}

pub fn stage2_phase(
    cfg: &ExperimentConfig,
    world: &World,
    bank: ModelBank,
    backbones: &[FrozenBackbone],
    masks: &MaskSet,
    s2: &Stage2Config,
    seed: u64,
) -> Result<(Stage2Outcome, Stage2Report)> {
    let (before, _) = transfer_score(world, &bank, backbones, masks, s2)?;
    let train = world.gather(s2.source0()?, Part::Train)?;
    let out = train_stage2(bank, backbones, masks, &train.x, labels_of(&train)?, s2, seed)?;
    let (after, chance) = transfer_score(world, &out.bank, backbones, masks, s2)?;
    let mut directions = Vec::new();
    for &t in &s2.targets {
        let single = Stage2Config { targets: vec![t], ..s2.clone() };
        let (acc, _) = transfer_score(world, &out.bank, backbones, masks, &single)?;
        directions.push(DirectionAccuracy { source: s2.source, target: t, accuracy: acc });
    }
    let clean = backbones
        .iter()
        .map(|b| {
            let g = world.gather(b.modality(), Part::Score)?;
            b.accuracy(&g.x, labels_of(&g)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = Stage2Report {
        config_fingerprint: cfg.fingerprint(),
        seed,
        source: s2.source,
        targets: s2.targets.clone(),
        backbone_clean_accuracy: clean,
        accuracy_before: before,
        accuracy_after: after,
        directions,
        chance,
        final_task_loss: out.trace.last().copied(),
        hashes_before: out.hashes_before.clone(),
        hashes_after: out.hashes_after.clone(),
        frozen_verified: out.hashes_before == out.hashes_after,
    };
    Ok((out, report))
}

/// Stage I settings for each ablation variant; `None` means no Stage I.
fn variant_stage1(name: &str, base: &Stage1Config) -> Option<Stage1Config> {
    match name {
        "full" | "w/o Stage II" => Some(base.clone()),
        "w/o L_con" => Some(Stage1Config { lambda_con: 0.0, lambda_cross: 0.0, ..base.clone() }),
        "w/o L_rec" => Some(Stage1Config { lambda_rec: 0.0, lambda_cross: 0.0, ..base.clone() }),
        "w/o Stage I" => None,
        other => unreachable!("unknown variant {other}"),
    }
}

fn run_variant(
    name: &str,
    cfg: &ExperimentConfig,
    world: &World,
    masks: &MaskSet,
    backbones: &[FrozenBackbone],
    seed: u64,
) -> Result<f64> {
    let bank = match variant_stage1(name, &cfg.stage1) {
        Some(s1) => stage1_phase(world, masks, &s1, seed)?.bank,
        None => fresh_bank(world, &cfg.stage1, seed)?,
    };
    let bank = if name == "w/o Stage II" {
        bank
    } else {
        let train = world.gather(cfg.stage2.source0()?, Part::Train)?;
        train_stage2(bank, backbones, masks, &train.x, labels_of(&train)?, &cfg.stage2, seed)?.bank
    };
    Ok(transfer_score(world, &bank, backbones, masks, &cfg.stage2)?.0)
}

/// Train and score the five variants on every seed with identical data,
/// masks, backbones and budgets. A failing variant is recorded, not fatal.
pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<AblationReport> {
    let mut scores: Vec<Vec<Option<f64>>> = vec![Vec::new(); ABLATION_VARIANTS.len()];
    let mut failures: Vec<Vec<String>> = vec![Vec::new(); ABLATION_VARIANTS.len()];
    let mut chances = Vec::new();
    for &seed in seeds {
        let world = build_world(cfg, seed)?;
        let masks = masks_for(cfg, &world, seed)?;
        let backbones = train_backbones(cfg, &world, seed)?;
        let g = world.gather(cfg.stage2.source0()?, Part::Score)?;
        chances.push(majority_baseline(labels_of(&g)?));
        for (k, name) in ABLATION_VARIANTS.iter().enumerate() {
            match run_variant(name, cfg, &world, &masks, &backbones, seed) {
                Ok(s) => scores[k].push(Some(s)),
                Err(e) => {
                    scores[k].push(None);
                    failures[k].push(format!("seed {seed}: {e}"));
                }
            }
        }
    }
    let variants: Vec<VariantScore> = ABLATION_VARIANTS
        .iter()
        .zip(scores)
        .zip(failures)
        .map(|((n, s), f)| VariantScore::new(n, s, f))
        .collect();
    let chance = chances.iter().sum::<f64>() / chances.len().max(1) as f64;
    let means: Vec<Option<f64>> = variants.iter().map(|v| v.mean).collect();
    let incomplete = variants.iter().any(|v| !v.failures.is_empty());
    let verdict =
        ordering_verdict(&means, chance, cfg.ablation.min_gap, cfg.ablation.chance_tolerance, incomplete);
    Ok(AblationReport { config_fingerprint: cfg.fingerprint(), seeds: seeds.to_vec(), chance, variants, verdict })
}
