//! Stage I: per-modality autoencoders trained pair by pair with
//! reconstruction, masked contrastive alignment and cross-reconstruction.

pub mod loss;
pub mod mask;
pub mod model;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptState};
use crate::rng::KeyedRng;
use crate::scm::{Edge, TrainingPairs};
use crate::tensor::Tensor;

pub use loss::{
    contrastive_loss, contrastive_on, cross_reconstruction, cross_reconstruction_on, masked_similarity,
    masked_similarity_on, recon_loss, recon_loss_on, routed_code_on,
};
pub use mask::{build_masks, AlignmentMask, MaskMode};
pub use model::{load_checkpoint, param_hash, save_checkpoint, BodyShape, ModalityDims, ModelBank, Mlp};

pub type MaskSet = BTreeMap<(usize, usize), AlignmentMask>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    /// Weight of the cosine term inside every reconstruction loss.
    pub lambda: f64,
    pub lambda_rec: f64,
    pub lambda_con: f64,
    pub lambda_cross: f64,
    pub tau: f64,
    pub lr: f64,
    /// Cosine-anneal the learning rate from `lr` down to this value over the
    /// run; constant when unset.
    pub lr_final: Option<f64>,
    pub batch: usize,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when set.
    pub steps: Option<usize>,
    pub hidden: usize,
    pub layers: usize,
    pub mask: MaskMode,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_rec: 1.0,
            lambda_con: 1.0,
            lambda_cross: 1.0,
            tau: 0.07,
            lr: 5e-5,
            lr_final: None,
            batch: 16,
            epochs: 1,
            steps: None,
            hidden: 32,
            layers: 3,
            mask: MaskMode::Oracle,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("lambda", self.lambda),
            ("lambda_rec", self.lambda_rec),
            ("lambda_con", self.lambda_con),
            ("lambda_cross", self.lambda_cross),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("stage1.{name} must be a finite non-negative weight, got {w}")));
            }
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("stage1.tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("stage1.lr must be positive, got {}", self.lr)));
        }
        if let Some(f) = self.lr_final {
            if !(f >= 0.0 && f <= self.lr) {
                return Err(Error::Config(format!("stage1.lr_final must lie in [0, lr], got {f}")));
            }
        }
        if self.batch == 0 || (self.lambda_con > 0.0 && self.batch < 2) {
            return Err(Error::Config(format!(
                "stage1.batch = {} is too small (contrastive terms need at least 2)",
                self.batch
            )));
        }
        if self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("stage1.hidden and stage1.layers must be positive".into()));
        }
        Ok(())
    }

    pub fn body(&self) -> BodyShape {
        BodyShape { hidden: self.hidden, layers: self.layers }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }

    /// Learning rate at `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.lr_final {
            Some(f) if total > 1 => {
                let t = step as f64 / (total - 1) as f64;
                f + 0.5 * (self.lr - f) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.lr,
        }
    }
}

/// One optimizer step. Terms with zero weight are not evaluated and are
/// recorded as `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub edge: Edge,
    pub rec_i: Option<f64>,
    pub rec_j: Option<f64>,
    pub con: Option<f64>,
    pub cross: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Outcome {
    pub bank: ModelBank,
    pub trace: Vec<TraceRow>,
}

/// Edge-local batching: for a step, which edge it trains and which rows.
#[derive(Clone, Debug)]
pub struct Schedule {
    edges: Vec<Edge>,
    sizes: Vec<usize>,
    batch: usize,
    seed: u64,
}

impl Schedule {
    pub fn new(edges: Vec<Edge>, sizes: Vec<usize>, batch: usize, seed: u64) -> Self {
        Self { edges, sizes, batch, seed }
    }

    pub fn batches_per_epoch(&self, e: usize) -> usize {
        (self.sizes[e] / self.batch).max(1)
    }

    /// Steps in one epoch: every edge, round-robin, for as many cycles as the
    /// largest edge has batches.
    pub fn epoch_len(&self) -> usize {
        let most = (0..self.edges.len()).map(|e| self.batches_per_epoch(e)).max().unwrap_or(0);
        most * self.edges.len()
    }

    /// Index of the edge trained at `step`.
    pub fn edge_at(&self, step: usize) -> usize {
        step % self.edges.len()
    }

    /// Row indices of the mini-batch at `step`.
    pub fn rows_at(&self, step: usize) -> Vec<usize> {
        let e = self.edge_at(step);
        let local = step / self.edges.len();
        let nb = self.batches_per_epoch(e);
        let (epoch, b) = (local / nb, local % nb);
        let mut rng = KeyedRng::new(self.seed, &format!("stage1/shuffle/{}-{}/{epoch}", self.edges[e].lo() + 1, self.edges[e].hi() + 1));
        let perm = rng.permutation(self.sizes[e]);
        let take = self.batch.min(self.sizes[e]);
        perm[b * take..(b + 1) * take].to_vec()
    }
}

fn overflow_to_diverged(step: usize, term: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::NumericOverflow { .. } => Error::Diverged { step, term: term.to_string(), value: f64::NAN },
        other => other,
    }
}

/// Builds the weighted Stage I objective for one mini-batch of `edge`.
/// Returns the total and the value of each evaluated term.
#[allow(clippy::too_many_arguments)]
pub fn pair_objective(
    g: &mut Graph,
    bank: &ModelBank,
    masks: &MaskSet,
    cfg: &Stage1Config,
    edge: Edge,
    xi: &Tensor,
    xj: &Tensor,
    step: usize,
) -> Result<(Var, [Option<f64>; 4])> {
    let (i, j) = (edge.lo(), edge.hi());
    let xi = g.constant(xi.clone());
    let xj = g.constant(xj.clone());
    let zi = bank.encoder(i).forward(g, xi)?;
    let zj = bank.encoder(j).forward(g, xj)?;
    let (dci, dcj) = (bank.dims(i).d_c, bank.dims(j).d_c);
    let zci = g.slice_cols(zi, 0, dci)?;
    let zcj = g.slice_cols(zj, 0, dcj)?;
    let mut terms: Vec<(Var, f64)> = Vec::new();
    let mut values = [None; 4];

    if cfg.lambda_rec > 0.0 {
        let ri = bank.decode_on(g, i, zi)?;
        let ri = recon_loss_on(g, ri, xi, cfg.lambda).map_err(overflow_to_diverged(step, "L_rec_i"))?;
        let rj = bank.decode_on(g, j, zj)?;
        let rj = recon_loss_on(g, rj, xj, cfg.lambda).map_err(overflow_to_diverged(step, "L_rec_j"))?;
        values[0] = Some(g.value(ri).item());
        values[1] = Some(g.value(rj).item());
        let both = g.add(ri, rj)?;
        terms.push((both, cfg.lambda_rec));
    }
    let mask = |s: usize, t: usize| {
        masks.get(&(s, t)).ok_or_else(|| {
            Error::Config(format!("no alignment mask for direction {} → {}", s + 1, t + 1))
        })
    };
    if cfg.lambda_con > 0.0 {
        let a = contrastive_on(g, zci, zcj, mask(j, i)?, cfg.tau).map_err(overflow_to_diverged(step, "L_con"))?;
        let b = contrastive_on(g, zcj, zci, mask(i, j)?, cfg.tau).map_err(overflow_to_diverged(step, "L_con"))?;
        let sum = g.add(a, b)?;
        let avg = g.scale(sum, 0.5)?;
        values[2] = Some(g.value(avg).item());
        terms.push((avg, cfg.lambda_con));
    }
    if cfg.lambda_cross > 0.0 {
        let a = cross_reconstruction_on(g, bank, zcj, mask(j, i)?, xi, cfg.lambda)
            .map_err(overflow_to_diverged(step, "L_cross"))?;
        let b = cross_reconstruction_on(g, bank, zci, mask(i, j)?, xj, cfg.lambda)
            .map_err(overflow_to_diverged(step, "L_cross"))?;
        let sum = g.add(a, b)?;
        let avg = g.scale(sum, 0.5)?;
        values[3] = Some(g.value(avg).item());
        terms.push((avg, cfg.lambda_cross));
    }
    let mut total: Option<Var> = None;
    for (v, w) in terms {
        let wv = g.scale(v, w)?;
        total = Some(match total {
            None => wv,
            Some(t) => g.add(t, wv)?,
        });
    }
    let total = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(0.0)),
    };
    Ok((total, values))
}

/// Round-robin training over `data`. Deterministic in `seed`.
pub fn train_stage1(
    data: &[TrainingPairs<'_>],
    mut bank: ModelBank,
    masks: &MaskSet,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Outcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::contract("Stage I needs at least one paired dataset"));
    }
    for d in data {
        let e = d.edge();
        if e.hi() >= bank.modalities() {
            return Err(Error::contract(format!("no encoder/decoder for edge {e}")));
        }
        if d.len() < 2 && cfg.lambda_con > 0.0 {
            return Err(Error::contract(format!("edge {e} has {} rows", d.len())));
        }
        for (s, t) in [(e.lo(), e.hi()), (e.hi(), e.lo())] {
            if !masks.contains_key(&(s, t)) {
                return Err(Error::Config(format!("no alignment mask for direction {} → {}", s + 1, t + 1)));
            }
        }
    }
    let edges: Vec<Edge> = data.iter().map(|d| d.edge()).collect();
    let schedule = Schedule::new(edges, data.iter().map(|d| d.len()).collect(), cfg.batch, seed);
    let total_steps = cfg.steps.unwrap_or(cfg.epochs * schedule.epoch_len());
    let mut opt = OptState::new(cfg.adam());
    let mut trace = Vec::with_capacity(total_steps);
    for step in 0..total_steps {
        let e = schedule.edge_at(step);
        let d = &data[e];
        let rows = schedule.rows_at(step);
        let xi = d.x_lo().select_rows(&rows);
        let xj = d.x_hi().select_rows(&rows);
        let mut g = Graph::with_params(bank.params());
        let (loss, values) = pair_objective(&mut g, &bank, masks, cfg, d.edge(), &xi, &xj, step)?;
        let total = g.value(loss).item();
        if !total.is_finite() {
            return Err(Error::Diverged { step, term: "total".into(), value: total });
        }
        let grads = g.param_grads(loss)?;
        drop(g);
        opt.config.lr = cfg.lr_at(step, total_steps);
        opt.update(bank.params_mut(), &grads)?;
        trace.push(TraceRow {
            step,
            edge: d.edge(),
            rec_i: values[0],
            rec_j: values[1],
            con: values[2],
            cross: values[3],
            total,
        });
    }
    Ok(Stage1Outcome { bank, trace })
}

pub fn write_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut out = String::from("step,edge,L_rec_i,L_rec_j,L_con,L_cross,total\n");
    let f = |v: Option<f64>| v.map(|v| format!("{v:e}")).unwrap_or_default();
    for r in trace {
        out.push_str(&format!(
            "{},{}-{},{},{},{},{},{:e}\n",
            r.step,
            r.edge.lo() + 1,
            r.edge.hi() + 1,
            f(r.rec_i),
            f(r.rec_j),
            f(r.con),
            f(r.cross),
            r.total
        ));
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
