//! World configuration and the ground-truth generator built from it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mechanism::ScmNode;
use super::{Edge, LatentSpec, Mixing, ModalityGraph, PairDataset, ScmSpec};
use crate::error::{Error, Result};
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

fn default_depth() -> usize {
    3
}
fn default_bias() -> f64 {
    0.1
}
fn default_noise() -> f64 {
    0.3
}
fn default_root() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmEdgeConfig {
    pub from: String,
    pub to: String,
    pub weight: f64,
}

/// Declared coordinate correspondence for one edge: each pair names a
/// factor of `edge[0]` and the factor of `edge[1]` it is matched with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrespondenceConfig {
    pub edge: [usize; 2],
    pub pairs: Vec<[String; 2]>,
}

/// Everything needed to build a [`GroundTruthGenerator`]. Modality and
/// factor numbers are 1-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub modalities: usize,
    pub edges: Vec<[usize; 2]>,
    /// d_c, the number of global shared factors.
    pub shared: usize,
    /// π_m as lists of 1-based global factor numbers.
    pub pi: Vec<Vec<usize>>,
    /// d_s^(m).
    pub specific: Vec<usize>,
    #[serde(default = "default_depth")]
    pub mixing_depth: usize,
    #[serde(default = "default_bias")]
    pub mixing_bias: f64,
    /// σ for nodes with parents.
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    /// σ for root nodes.
    #[serde(default = "default_root")]
    pub root_scale: f64,
    #[serde(default)]
    pub scm: Vec<ScmEdgeConfig>,
    #[serde(default)]
    pub correspondence: Vec<CorrespondenceConfig>,
    /// Shared factor whose sign is the downstream task label, e.g. `"c3"`.
    #[serde(default)]
    pub label_factor: Option<String>,
}

fn zero_based(v: usize, what: &str) -> Result<usize> {
    v.checked_sub(1)
        .ok_or_else(|| Error::Config(format!("{what} numbers are 1-based, got 0")))
}

impl WorldConfig {
    pub fn graph(&self) -> Result<ModalityGraph> {
        let edges = self
            .edges
            .iter()
            .map(|[a, b]| Ok((zero_based(*a, "modality")?, zero_based(*b, "modality")?)))
            .collect::<Result<Vec<_>>>()?;
        ModalityGraph::new(self.modalities, &edges)
    }

    pub fn latent_spec(&self) -> Result<LatentSpec> {
        let pi = self
            .pi
            .iter()
            .map(|m| m.iter().map(|&r| zero_based(r, "factor")).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        LatentSpec::new(self.graph()?, self.shared, pi, self.specific.clone())
    }

    pub fn scm_spec(&self, spec: &LatentSpec) -> Result<ScmSpec> {
        let mut parents: Vec<Vec<(usize, f64)>> = vec![Vec::new(); spec.latent_dim()];
        for e in &self.scm {
            let from = spec.parse_column(&e.from)?;
            let to = spec.parse_column(&e.to)?;
            parents[to].push((from, e.weight));
        }
        let nodes = parents
            .into_iter()
            .map(|p| {
                let noise_scale = if p.is_empty() { self.root_scale } else { self.noise_scale };
                ScmNode { parents: p, noise_scale }
            })
            .collect();
        ScmSpec::new(spec, nodes)
    }

    /// Local coordinate pairs `(k_lo, k_hi)` per edge, matching modality
    /// `edge.lo()`'s shared coordinate `k_lo` with `edge.hi()`'s `k_hi`.
    /// Edges without a declaration use the identical-factor overlap.
    pub fn correspondences(&self, spec: &LatentSpec) -> Result<BTreeMap<Edge, Vec<(usize, usize)>>> {
        let mut out = BTreeMap::new();
        for &e in spec.graph().edges() {
            let (lo, hi) = (e.lo(), e.hi());
            let pairs = spec
                .overlap_local(lo, hi)?
                .into_iter()
                .map(|k| {
                    let r = spec.pi(lo)[k];
                    (k, spec.pi(hi).iter().position(|&x| x == r).expect("overlap"))
                })
                .collect::<Vec<_>>();
            out.insert(e, pairs);
        }
        for decl in &self.correspondence {
            let a = zero_based(decl.edge[0], "modality")?;
            let b = zero_based(decl.edge[1], "modality")?;
            let e = Edge::new(a, b);
            spec.graph().require_edge(e)?;
            let local = |m: usize, name: &str| -> Result<usize> {
                let col = spec.parse_column(name)?;
                spec.pi(m).iter().position(|&r| r == col).ok_or_else(|| {
                    Error::Config(format!("correspondence on {e}: `{name}` is not a shared factor of modality {}", m + 1))
                })
            };
            let mut pairs = Vec::new();
            for [fa, fb] in &decl.pairs {
                let (ka, kb) = (local(a, fa)?, local(b, fb)?);
                pairs.push(if a < b { (ka, kb) } else { (kb, ka) });
            }
            let mut lo: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let mut hi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            lo.sort();
            hi.sort();
            if lo.windows(2).any(|w| w[0] == w[1]) || hi.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Config(format!("correspondence on {e} matches a coordinate twice")));
            }
            out.insert(e, pairs);
        }
        Ok(out)
    }

    pub fn label_column(&self, spec: &LatentSpec) -> Result<Option<usize>> {
        match &self.label_factor {
            None => Ok(None),
            Some(name) => {
                let col = spec.parse_column(name)?;
                if col >= spec.d_c() {
                    return Err(Error::Config(format!("label factor `{name}` must be a shared factor")));
                }
                Ok(Some(col))
            }
        }
    }
}

/// The SCM plus one invertible mixing per modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthGenerator {
    spec: LatentSpec,
    scm: ScmSpec,
    mixings: Vec<Mixing>,
    label_column: Option<usize>,
}

impl GroundTruthGenerator {
    pub fn new(spec: LatentSpec, scm: ScmSpec, mixings: Vec<Mixing>, label_column: Option<usize>) -> Result<Self> {
        if mixings.len() != spec.modalities() {
            return Err(Error::spec("generator", format!("{} mixings for {} modalities", mixings.len(), spec.modalities())));
        }
        for (m, g) in mixings.iter().enumerate() {
            if g.dim() != spec.observed_dim(m) {
                return Err(Error::spec(
                    format!("modality {}", m + 1),
                    format!("mixing width {} but d_c + d_s = {}", g.dim(), spec.observed_dim(m)),
                ));
            }
        }
        if scm.dim() != spec.latent_dim() {
            return Err(Error::spec("generator", "SCM does not cover the latent layout"));
        }
        Ok(Self { spec, scm, mixings, label_column })
    }

    /// Build from a world config; mixing weights are keyed by `seed`.
    pub fn from_config(cfg: &WorldConfig, seed: u64) -> Result<Self> {
        let spec = cfg.latent_spec()?;
        let scm = cfg.scm_spec(&spec)?;
        let mixings = (0..spec.modalities())
            .map(|m| {
                let mut rng = KeyedRng::new(seed, &format!("mixing/{m}"));
                Mixing::random(spec.observed_dim(m), cfg.mixing_depth, cfg.mixing_bias, &mut rng)
            })
            .collect();
        let label = cfg.label_column(&spec)?;
        Self::new(spec, scm, mixings, label)
    }

    pub fn spec(&self) -> &LatentSpec {
        &self.spec
    }

    pub fn scm(&self) -> &ScmSpec {
        &self.scm
    }

    pub fn mixing(&self, m: usize) -> &Mixing {
        &self.mixings[m]
    }

    pub fn label_column(&self) -> Option<usize> {
        self.label_column
    }

    /// Same world seen through a different modality graph (for dropping edges).
    pub fn with_graph(&self, graph: ModalityGraph) -> Result<Self> {
        Ok(Self {
            spec: self.spec.with_graph(graph)?,
            ..self.clone()
        })
    }

    pub fn sample_latents(&self, n: usize, seed: u64, tag: &str) -> Tensor {
        self.scm.sample(n, seed, tag)
    }

    /// x^(m) = g_m(z_c^(m), z_s^(m)) for every row of a full latent matrix.
    pub fn generate_observation(&self, m: usize, latents: &Tensor) -> Result<Tensor> {
        if m >= self.spec.modalities() {
            return Err(Error::spec(format!("modality {}", m + 1), "no such modality"));
        }
        if latents.cols() != self.spec.latent_dim() {
            return Err(Error::spec(
                format!("modality {}", m + 1),
                format!("latents have {} columns, the layout needs {}", latents.cols(), self.spec.latent_dim()),
            ));
        }
        self.mixings[m].forward(&latents.select_cols(&self.spec.modality_columns(m)))
    }

    /// x^(m) for a single latent row.
    pub fn render_row(&self, m: usize, z: &[f64]) -> Vec<f64> {
        let cols = self.spec.modality_columns(m);
        let u = Tensor::matrix(1, cols.len(), cols.iter().map(|&c| z[c]).collect()).expect("row");
        self.mixings[m].forward(&u).expect("width matches").into_data()
    }

    /// 0/1 labels from the sign of the label factor, if one is configured.
    pub fn labels(&self, latents: &Tensor) -> Option<Tensor> {
        self.label_column.map(|c| {
            Tensor::vector((0..latents.rows()).map(|r| if latents.at(r, c) > 0.0 { 1.0 } else { 0.0 }).collect())
        })
    }

    /// Draw `n` joint latent rows once and render both endpoints of `edge`.
    pub fn sample_pair_dataset(&self, edge: Edge, n: usize, seed: u64) -> Result<PairDataset> {
        self.spec.graph().require_edge(edge)?;
        let z = self.sample_latents(n, seed, &format!("pair/{}-{}", edge.lo(), edge.hi()));
        let x_lo = self.generate_observation(edge.lo(), &z)?;
        let x_hi = self.generate_observation(edge.hi(), &z)?;
        let labels = self.labels(&z);
        PairDataset::new(edge, x_lo, x_hi, labels, Some(z), self.fingerprint())
    }

    /// sha256 over the canonical JSON of the generator.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("generator serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_world() -> GroundTruthGenerator {
        let cfg = WorldConfig {
            modalities: 3,
            edges: vec![[1, 2], [1, 3], [2, 3]],
            shared: 4,
            pi: vec![vec![1], vec![2, 3], vec![3, 4]],
            specific: vec![1, 1, 1],
            mixing_depth: 0,
            mixing_bias: 0.0,
            noise_scale: 0.3,
            root_scale: 1.0,
            scm: vec![
                ScmEdgeConfig { from: "c2".into(), to: "c1".into(), weight: 1.0 },
                ScmEdgeConfig { from: "c1".into(), to: "c3".into(), weight: 1.0 },
            ],
            correspondence: vec![],
            label_factor: Some("c3".into()),
        };
        GroundTruthGenerator::from_config(&cfg, 1).unwrap()
    }

    #[test]
    fn shared_factor_renders_identically_in_both_modalities() {
        let g = identity_world();
        let ds = g.sample_pair_dataset(Edge::new(1, 2), 500, 3).unwrap();
        // c3 is column 1 of x2 (after c2) and column 0 of x3.
        let t = ds.training_view();
        for r in 0..500 {
            assert_eq!(t.x_lo().at(r, 1).to_bits(), t.x_hi().at(r, 0).to_bits());
        }
        let z = ds.eval_latents().unwrap();
        let corr_src: Vec<f64> = (0..500).map(|r| t.x_lo().at(r, 1)).collect();
        assert_eq!(corr_src, z.column(2));
    }

    #[test]
    fn missing_edge_is_a_graph_error() {
        let g = identity_world();
        let dropped = g.with_graph(g.spec().graph().without_edge(Edge::new(0, 2))).unwrap();
        assert!(matches!(dropped.sample_pair_dataset(Edge::new(0, 2), 5, 1), Err(Error::Graph(_))));
    }

    #[test]
    fn empty_dataset_keeps_metadata() {
        let ds = identity_world().sample_pair_dataset(Edge::new(0, 1), 0, 1).unwrap();
        assert_eq!(ds.len(), 0);
        assert_eq!(ds.edge(), Edge::new(0, 1));
        assert_eq!(ds.training_view().x_hi().shape(), &[0, 3]);
    }

    #[test]
    fn missing_latent_columns_are_a_spec_error() {
        let g = identity_world();
        let z = Tensor::zeros(&[3, 4]);
        assert!(matches!(g.generate_observation(0, &z), Err(Error::Spec { .. })));
    }

    #[test]
    fn default_correspondence_is_the_overlap() {
        let g = identity_world();
        let cfg = WorldConfig {
            correspondence: vec![CorrespondenceConfig { edge: [3, 1], pairs: vec![["c4".into(), "c1".into()]] }],
            ..serde_json::from_value(serde_json::json!({
                "modalities": 3, "edges": [[1,2],[1,3],[2,3]], "shared": 4,
                "pi": [[1],[2,3],[3,4]], "specific": [1,1,1]
            }))
            .unwrap()
        };
        let c = cfg.correspondences(g.spec()).unwrap();
        assert_eq!(c[&Edge::new(1, 2)], vec![(1, 0)]);
        assert_eq!(c[&Edge::new(0, 1)], vec![]);
        assert_eq!(c[&Edge::new(0, 2)], vec![(0, 1)]);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let a = identity_world();
        assert_eq!(a.fingerprint(), identity_world().fingerprint());
        let b = a.with_graph(a.spec().graph().without_edge(Edge::new(0, 1))).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
