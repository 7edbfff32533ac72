//! Binary alignment masks and the slot routing they induce.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::scm::{Edge, LatentSpec};

/// How masks are chosen for each direction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Indicator of the true overlap, routed by the declared correspondence.
    Oracle,
    /// `k` uniformly chosen source entries routed positionally onto the
    /// first `k` target slots.
    RandomK { k: usize },
    /// Every source entry, routed positionally.
    Full,
}

/// Mask `m^(source←target)` over the source modality's shared code, plus the
/// target slot each active entry is compared with and decoded into.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMask {
    pub source: usize,
    pub target: usize,
    bits: Vec<u8>,
    /// For each target shared slot, the source entry routed into it.
    route: Vec<Option<usize>>,
}

impl AlignmentMask {
    /// `route[t] = Some(s)` requires `bits[s] == 1`; each active entry is
    /// routed to at most one slot.
    pub fn new(source: usize, target: usize, bits: Vec<u8>, route: Vec<Option<usize>>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::contract("mask entries must be 0 or 1"));
        }
        let mut used = vec![false; bits.len()];
        for s in route.iter().flatten() {
            if *s >= bits.len() || bits[*s] == 0 {
                return Err(Error::contract(format!("slot routed from inactive source entry {s}")));
            }
            if std::mem::replace(&mut used[*s], true) {
                return Err(Error::contract(format!("source entry {s} routed twice")));
            }
        }
        Ok(Self { source, target, bits, route })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn active(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn route(&self) -> &[Option<usize>] {
        &self.route
    }

    pub fn source_dim(&self) -> usize {
        self.bits.len()
    }

    pub fn target_dim(&self) -> usize {
        self.route.len()
    }

    /// Matched (target slot, source entry) pairs in target order.
    pub fn matched(&self) -> Vec<(usize, usize)> {
        self.route.iter().enumerate().filter_map(|(t, s)| s.map(|s| (t, s))).collect()
    }

    /// Oracle mask for `source → target` given the edge's correspondence as
    /// local `(lo-side, hi-side)` shared-coordinate pairs.
    pub fn oracle(spec: &LatentSpec, source: usize, target: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let edge = Edge::new(source, target);
        let (ds, dt) = (spec.shared_dim(source), spec.shared_dim(target));
        let mut bits = vec![0u8; ds];
        let mut route = vec![None; dt];
        for &(a, b) in pairs {
            let (s, t) = if source == edge.lo() { (a, b) } else { (b, a) };
            if s >= ds || t >= dt {
                return Err(Error::spec(
                    format!("correspondence on edge {edge}"),
                    format!("local pair ({a}, {b}) is out of range"),
                ));
            }
            bits[s] = 1;
            route[t] = Some(s);
        }
        Self::new(source, target, bits, route)
    }

    pub fn full(source_dim: usize, target_dim: usize, source: usize, target: usize) -> Self {
        let route = (0..target_dim).map(|t| (t < source_dim).then_some(t)).collect();
        Self::new(source, target, vec![1; source_dim], route).expect("positional routing is valid")
    }

    pub fn random_k(
        source_dim: usize,
        target_dim: usize,
        source: usize,
        target: usize,
        k: usize,
        rng: &mut KeyedRng,
    ) -> Result<Self> {
        if k == 0 || k > source_dim {
            return Err(Error::Config(format!(
                "mask k = {k} must lie in 1..={source_dim} for modality {} → {}",
                source + 1,
                target + 1
            )));
        }
        let mut chosen: Vec<usize> = rng.permutation(source_dim)[..k].to_vec();
        chosen.sort_unstable();
        let mut bits = vec![0; source_dim];
        chosen.iter().for_each(|&s| bits[s] = 1);
        let route = (0..target_dim).map(|t| chosen.get(t).copied()).collect();
        Self::new(source, target, bits, route)
    }
}

/// Masks for both directions of every edge, keyed `(source, target)`.
pub fn build_masks(
    spec: &LatentSpec,
    edges: &[Edge],
    correspondences: &BTreeMap<Edge, Vec<(usize, usize)>>,
    mode: MaskMode,
    seed: u64,
) -> Result<BTreeMap<(usize, usize), AlignmentMask>> {
    let mut out = BTreeMap::new();
    for e in edges {
        for (s, t) in [(e.lo(), e.hi()), (e.hi(), e.lo())] {
            let (ds, dt) = (spec.shared_dim(s), spec.shared_dim(t));
            let mask = match mode {
                MaskMode::Oracle => {
                    let pairs = correspondences
                        .get(e)
                        .ok_or_else(|| Error::Config(format!("no correspondence for edge {e}")))?;
                    AlignmentMask::oracle(spec, s, t, pairs)?
                }
                MaskMode::Full => AlignmentMask::full(ds, dt, s, t),
                MaskMode::RandomK { k } => {
                    let mut rng = KeyedRng::new(seed, &format!("stage1/mask/{}-{}", s + 1, t + 1));
                    AlignmentMask::random_k(ds, dt, s, t, k, &mut rng)?
                }
            };
            out.insert((s, t), mask);
        }
    }
    Ok(out)
}
