//! Stage II: routing a source modality's shared code through a target
//! modality's decoder into a frozen probe, and tuning only the modality
//! encoders/decoders on the probe's task loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{AdamConfig, OptState};
use crate::rng::KeyedRng;
use crate::stage1::{param_hash, routed_code_on, AlignmentMask, MaskSet, Mlp, ModelBank};
use crate::tensor::{ParamSet, Tensor};

/// Training settings for the probe that stands in for a pre-trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { hidden: 32, layers: 3, lr: 1e-3, batch: 128, steps: 2000 }
    }
}

/// A classifier from clean x^(m) to two logits. Parameters are private and
/// the content hash is taken at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    modality: usize,
    mlp: Mlp,
    params: ParamSet,
    hash: String,
}

fn labels_to_classes(labels: &Tensor) -> Result<Vec<usize>> {
    labels
        .data()
        .iter()
        .map(|&v| match v {
            v if v == 0.0 => Ok(0),
            v if v == 1.0 => Ok(1),
            other => Err(Error::contract(format!("labels must be 0 or 1, got {other}"))),
        })
        .collect()
}

impl FrozenBackbone {
    /// Train a probe on clean observations of `modality`.
    pub fn train(modality: usize, x: &Tensor, labels: &Tensor, cfg: &ProbeConfig, seed: u64) -> Result<Self> {
        let classes = labels_to_classes(labels)?;
        if x.rows() != classes.len() || x.rows() == 0 {
            return Err(Error::contract("probe needs one label per row"));
        }
        let mut widths = vec![x.cols()];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.layers.saturating_sub(1)));
        widths.push(2);
        let mlp = Mlp::new(format!("probe{}", modality + 1), widths);
        let mut params = ParamSet::new();
        mlp.init(&mut params, &mut KeyedRng::new(seed, &format!("probe/init/{modality}")));
        let mut opt = OptState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        let n = x.rows();
        let take = cfg.batch.min(n);
        let per_epoch = (n / take).max(1);
        for step in 0..cfg.steps {
            let (epoch, b) = (step / per_epoch, step % per_epoch);
            let perm = KeyedRng::new(seed, &format!("probe/shuffle/{modality}/{epoch}")).permutation(n);
            let rows = &perm[b * take..(b + 1) * take];
            let xb = x.select_rows(rows);
            let yb: Vec<usize> = rows.iter().map(|&r| classes[r]).collect();
            let mut g = Graph::with_params(&params);
            let xv = g.constant(xb);
            let logits = mlp.forward(&mut g, xv)?;
            let loss = g.softmax_xent(logits, &yb)?;
            let grads = g.param_grads(loss)?;
            drop(g);
            opt.update(&mut params, &grads)?;
        }
        Ok(Self::from_parts(modality, mlp, params))
    }

    pub fn from_parts(modality: usize, mlp: Mlp, params: ParamSet) -> Self {
        let hash = param_hash(&params);
        Self { modality, mlp, params, hash }
    }

    pub fn modality(&self) -> usize {
        self.modality
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Hash recorded at construction.
    pub fn recorded_hash(&self) -> &str {
        &self.hash
    }

    /// Hash of the parameters as they are now.
    pub fn content_hash(&self) -> String {
        param_hash(&self.params)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.mlp.apply(&self.params, x)
    }

    pub fn logits_on(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.mlp.forward(g, x)
    }

    /// Percent of rows whose arg-max logit equals the label.
    pub fn accuracy(&self, x: &Tensor, labels: &Tensor) -> Result<f64> {
        accuracy(&self.logits(x)?, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).expect("backbone serializes");
        crate::experiment::report::write_atomic(path, text.as_bytes())
    }

    /// Load and check that the stored parameters match the stored hash.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let b: Self = serde_json::from_str(&text).map_err(|e| Error::format(path, "backbone", e.to_string()))?;
        if b.content_hash() != b.hash {
            return Err(Error::format(path, "hash", "parameters do not match the recorded hash"));
        }
        Ok(b)
    }
}

pub fn accuracy(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let classes = labels_to_classes(labels)?;
    if logits.rows() != classes.len() || classes.is_empty() {
        return Err(Error::contract("one label per logit row required"));
    }
    let hits = (0..logits.rows())
        .filter(|&r| {
            let row = logits.row(r);
            let pred = if row[1] > row[0] { 1 } else { 0 };
            pred == classes[r]
        })
        .count();
    Ok(100.0 * hits as f64 / classes.len() as f64)
}

/// Percent accuracy of always predicting the more frequent label.
pub fn majority_baseline(labels: &Tensor) -> f64 {
    let ones = labels.data().iter().filter(|&&v| v == 1.0).count();
    100.0 * ones.max(labels.len() - ones) as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrozenVerdict {
    Pass,
    Fail,
}

pub fn verify_frozen(backbone: &FrozenBackbone, hash_before: &str) -> FrozenVerdict {
    if backbone.content_hash() == hash_before {
        FrozenVerdict::Pass
    } else {
        FrozenVerdict::Fail
    }
}

/// `x̃_i = Dec_i(route(m ⊙ Enc_j(x_j)))` on the tape.
pub fn cross_modal_transfer_on(g: &mut Graph, bank: &ModelBank, mask: &AlignmentMask, xj: Var) -> Result<Var> {
    let (zc, _) = bank.encode_on(g, mask.source, xj)?;
    let code = routed_code_on(g, zc, mask, bank.dims(mask.target).d_s)?;
    bank.decode_on(g, mask.target, code)
}

pub fn cross_modal_transfer(bank: &ModelBank, mask: &AlignmentMask, xj: &Tensor) -> Result<Tensor> {
    let mut g = Graph::with_params(bank.params());
    let x = g.constant(xj.clone());
    let out = cross_modal_transfer_on(&mut g, bank, mask, x)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Surrogates side by side, in ascending target-modality order.
    Concat,
    /// Weighted elementwise mean of equally wide surrogates.
    Average,
}

/// Combine surrogate inputs. Concatenation follows the order given;
/// averaging normalizes `weights` to sum to one.
pub fn aggregate_contexts(transfers: &[Tensor], weights: &[f64], mode: Aggregation) -> Result<Tensor> {
    let Some(first) = transfers.first() else {
        return Err(Error::contract("no transfers to aggregate"));
    };
    if transfers.len() == 1 {
        return Ok(first.clone());
    }
    match mode {
        Aggregation::Concat => Tensor::hcat(&transfers.iter().collect::<Vec<_>>()),
        Aggregation::Average => {
            if weights.len() != transfers.len() {
                return Err(Error::contract(format!("{} weights for {} transfers", weights.len(), transfers.len())));
            }
            if transfers.iter().any(|t| t.shape() != first.shape()) {
                return Err(Error::contract("averaging needs equally shaped transfers"));
            }
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(Error::contract("aggregation weights must have a positive sum"));
            }
            let mut out = vec![0.0; first.len()];
            for (t, w) in transfers.iter().zip(weights) {
                for (o, v) in out.iter_mut().zip(t.data()) {
                    *o += w / total * v;
                }
            }
            Tensor::new(first.shape().to_vec(), out)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    /// 1-based source modality.
    pub source: usize,
    /// 1-based target modalities, each with its own backbone.
    pub targets: Vec<usize>,
    pub aggregation: Aggregation,
    /// Averaging weights, one per target; empty means equal.
    pub weights: Vec<f64>,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    /// Fault injection: let the optimizer update the backbone too.
    pub unfreeze_backbone: bool,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            source: 2,
            targets: vec![3],
            aggregation: Aggregation::Concat,
            weights: Vec::new(),
            lr: 1e-3,
            batch: 128,
            steps: 300,
            unfreeze_backbone: false,
        }
    }
}

impl Stage2Config {
    pub fn source0(&self) -> Result<usize> {
        self.source.checked_sub(1).ok_or_else(|| Error::Config("stage2.source is 1-based".into()))
    }

    pub fn targets0(&self) -> Result<Vec<usize>> {
        if self.targets.is_empty() {
            return Err(Error::Config("stage2.targets is empty".into()));
        }
        if self.targets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("stage2.targets must be strictly ascending".into()));
        }
        self.targets
            .iter()
            .map(|t| t.checked_sub(1).ok_or_else(|| Error::Config("stage2.targets are 1-based".into())))
            .collect()
    }

    fn weights_or_equal(&self) -> Vec<f64> {
        if self.weights.is_empty() {
            vec![1.0; self.targets.len()]
        } else {
            self.weights.clone()
        }
    }
}

/// Backbone logits on the aggregated surrogate. Concatenation applies each
/// target's probe to its own segment and averages the logits; averaging
/// feeds the mean surrogate to the first target's probe.
fn context_logits_on(
    g: &mut Graph,
    bank: &ModelBank,
    backbones: &[&FrozenBackbone],
    masks: &[&AlignmentMask],
    cfg: &Stage2Config,
    xj: Var,
) -> Result<Var> {
    let surrogates: Vec<Var> =
        masks.iter().map(|m| cross_modal_transfer_on(g, bank, m, xj)).collect::<Result<_>>()?;
    if surrogates.len() == 1 {
        return backbones[0].logits_on(g, surrogates[0]);
    }
    match cfg.aggregation {
        Aggregation::Concat => {
            let ctx = g.concat_cols(&surrogates)?;
            let mut start = 0;
            let mut sum: Option<Var> = None;
            for b in backbones {
                let seg = g.slice_cols(ctx, start, start + b.input_dim())?;
                start += b.input_dim();
                let l = b.logits_on(g, seg)?;
                sum = Some(match sum {
                    None => l,
                    Some(s) => g.add(s, l)?,
                });
            }
            g.scale(sum.expect("at least one target"), 1.0 / backbones.len() as f64)
        }
        Aggregation::Average => {
            let w = cfg.weights_or_equal();
            if w.len() != surrogates.len() {
                return Err(Error::Config(format!("{} weights for {} targets", w.len(), surrogates.len())));
            }
            let total: f64 = w.iter().sum();
            let mut acc: Option<Var> = None;
            for (s, wk) in surrogates.iter().zip(&w) {
                let t = g.scale(*s, wk / total)?;
                acc = Some(match acc {
                    None => t,
                    Some(a) => g.add(a, t)?,
                });
            }
            backbones[0].logits_on(g, acc.expect("at least one target"))
        }
    }
}

fn resolve<'a>(
    backbones: &'a [FrozenBackbone],
    masks: &'a MaskSet,
    cfg: &Stage2Config,
) -> Result<(Vec<&'a FrozenBackbone>, Vec<&'a AlignmentMask>)> {
    let j = cfg.source0()?;
    let mut bs = Vec::new();
    let mut ms = Vec::new();
    for t in cfg.targets0()? {
        bs.push(
            backbones
                .iter()
                .find(|b| b.modality == t)
                .ok_or_else(|| Error::Config(format!("no backbone for target modality {}", t + 1)))?,
        );
        ms.push(
            masks
                .get(&(j, t))
                .ok_or_else(|| Error::Config(format!("no alignment mask for direction {} → {}", j + 1, t + 1)))?,
        );
    }
    Ok((bs, ms))
}

/// Backbone logits on the aggregated surrogate built from `xj`.
pub fn transfer_logits(
    bank: &ModelBank,
    backbones: &[FrozenBackbone],
    masks: &MaskSet,
    cfg: &Stage2Config,
    xj: &Tensor,
) -> Result<Tensor> {
    let (bs, ms) = resolve(backbones, masks, cfg)?;
    let mut g = Graph::with_params(bank.params());
    for b in &bs {
        b.register_into(&mut g);
    }
    let x = g.constant(xj.clone());
    let l = context_logits_on(&mut g, bank, &bs, &ms, cfg, x)?;
    Ok(g.value(l).clone())
}

impl FrozenBackbone {
    fn register_into(&self, g: &mut Graph) {
        g.add_params(&self.params);
    }
}

/// Mean cross-entropy of the backbone on the surrogate, as a tape builder.
pub fn task_loss_on(
    g: &mut Graph,
    bank: &ModelBank,
    backbones: &[&FrozenBackbone],
    masks: &[&AlignmentMask],
    cfg: &Stage2Config,
    xj: Var,
    classes: &[usize],
) -> Result<Var> {
    let logits = context_logits_on(g, bank, backbones, masks, cfg, xj)?;
    g.softmax_xent(logits, classes)
}

#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub bank: ModelBank,
    /// Per-step task loss.
    pub trace: Vec<f64>,
    pub hashes_before: Vec<String>,
    pub hashes_after: Vec<String>,
}

/// Tune the modality encoders/decoders so the frozen backbones classify
/// surrogates built from `x_source`. Every backbone's hash is checked after
/// training; a change is a [`Error::FrozenViolation`].
pub fn train_stage2(
    mut bank: ModelBank,
    backbones: &[FrozenBackbone],
    masks: &MaskSet,
    x_source: &Tensor,
    labels: &Tensor,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<Stage2Outcome> {
    let classes = labels_to_classes(labels)?;
    if x_source.rows() != classes.len() || classes.is_empty() {
        return Err(Error::contract("Stage II needs one label per source row"));
    }
    if !(cfg.lr > 0.0) || cfg.batch == 0 {
        return Err(Error::Config("stage2.lr and stage2.batch must be positive".into()));
    }
    let (bs, ms) = resolve(backbones, masks, cfg)?;
    let hashes_before: Vec<String> = bs.iter().map(|b| b.content_hash()).collect();
    // The unfreeze path trains working copies; the normal path never holds
    // a mutable backbone.
    let mut live: Vec<FrozenBackbone> = bs.iter().map(|b| (*b).clone()).collect();
    let mut opt = OptState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let n = x_source.rows();
    let take = cfg.batch.min(n);
    let per_epoch = (n / take).max(1);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (epoch, b) = (step / per_epoch, step % per_epoch);
        let perm = KeyedRng::new(seed, &format!("stage2/shuffle/{epoch}")).permutation(n);
        let rows = &perm[b * take..(b + 1) * take];
        let xb = x_source.select_rows(rows);
        let yb: Vec<usize> = rows.iter().map(|&r| classes[r]).collect();
        let used: Vec<&FrozenBackbone> = if cfg.unfreeze_backbone { live.iter().collect() } else { bs.clone() };
        let mut g = Graph::with_params(bank.params());
        for u in &used {
            u.register_into(&mut g);
        }
        let x = g.constant(xb);
        let loss = task_loss_on(&mut g, &bank, &used, &ms, cfg, x, &yb)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged { step, term: "task".into(), value });
        }
        let grads = g.param_grads(loss)?;
        drop(g);
        let mut modality_grads = ParamSet::new();
        let mut backbone_grads = ParamSet::new();
        for (name, t) in grads.iter() {
            if bank.params().contains(name) {
                modality_grads.insert(name.clone(), t.clone());
            } else {
                backbone_grads.insert(name.clone(), t.clone());
            }
        }
        opt.update(bank.params_mut(), &modality_grads)?;
        if cfg.unfreeze_backbone {
            for l in &mut live {
                let own: ParamSet = backbone_grads
                    .iter()
                    .filter(|(k, _)| l.params.contains(k))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                opt.update(&mut l.params, &own)?;
            }
        }
        trace.push(value);
    }
    let checked: Vec<&FrozenBackbone> = if cfg.unfreeze_backbone { live.iter().collect() } else { bs.clone() };
    let hashes_after: Vec<String> = checked.iter().map(|b| b.content_hash()).collect();
    for (before, b) in hashes_before.iter().zip(&checked) {
        if verify_frozen(b, before) == FrozenVerdict::Fail {
            return Err(Error::FrozenViolation { before: before.clone(), after: b.content_hash() });
        }
    }
    Ok(Stage2Outcome { bank, trace, hashes_before, hashes_after })
}
