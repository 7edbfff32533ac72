//! The ground-truth generative world: which modalities are paired, how the
//! global latent factors are laid out across modalities, the structural
//! causal model over those factors, and the invertible mixings that render
//! them into observations.
//!
//! Modalities and global shared factors are 0-based inside the crate. Config
//! files and reports use 1-based numbering (`c1`, modality 1, edge {1,2}).

mod dataset;
mod mechanism;
mod mixing;
mod world;

pub use dataset::{read_dataset, write_dataset, PairDataset, TrainingPairs, DATASET_SCHEMA_VERSION};
pub use mechanism::{ScmNode, ScmSpec};
pub use mixing::{MixLayer, Mixing};
pub use world::{CorrespondenceConfig, GroundTruthGenerator, ScmEdgeConfig, WorldConfig};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An unordered modality pair, stored with the smaller index first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge(usize, usize);

impl Edge {
    pub fn new(a: usize, b: usize) -> Self {
        if a <= b {
            Edge(a, b)
        } else {
            Edge(b, a)
        }
    }

    pub fn lo(&self) -> usize {
        self.0
    }

    pub fn hi(&self) -> usize {
        self.1
    }

    pub fn contains(&self, m: usize) -> bool {
        self.0 == m || self.1 == m
    }

    pub fn other(&self, m: usize) -> Option<usize> {
        if m == self.0 {
            Some(self.1)
        } else if m == self.1 {
            Some(self.0)
        } else {
            None
        }
    }

    /// `"{a,b}"` with 1-based modality numbers.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{},{}}}", self.0 + 1, self.1 + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalityGraph {
    modalities: usize,
    edges: Vec<Edge>,
}

impl ModalityGraph {
    /// `edges` hold 0-based modality indices; duplicates are merged.
    pub fn new(modalities: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if modalities == 0 {
            return Err(Error::Graph("a modality graph needs at least one modality".into()));
        }
        let mut out: Vec<Edge> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Graph(format!("self-loop on modality {}", a + 1)));
            }
            if a >= modalities || b >= modalities {
                return Err(Error::Graph(format!(
                    "edge {{{},{}}} outside modalities 1..={modalities}",
                    a + 1,
                    b + 1
                )));
            }
            out.push(Edge::new(a, b));
        }
        out.sort();
        out.dedup();
        Ok(Self { modalities, edges: out })
    }

    pub fn modalities(&self) -> usize {
        self.modalities
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn has_edge(&self, e: Edge) -> bool {
        self.edges.binary_search(&e).is_ok()
    }

    /// 𝒩(i) in increasing order.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        self.edges.iter().filter_map(|e| e.other(i)).collect()
    }

    pub fn require_edge(&self, e: Edge) -> Result<()> {
        if self.has_edge(e) {
            Ok(())
        } else {
            Err(Error::Graph(format!("edge {e} is not in the modality graph")))
        }
    }

    pub fn without_edge(&self, e: Edge) -> Self {
        Self {
            modalities: self.modalities,
            edges: self.edges.iter().copied().filter(|&x| x != e).collect(),
        }
    }
}

/// Layout of the global shared factors c and per-modality specific factors
/// s, plus the derived extended-vector index sets.
///
/// Latent matrix columns are `[c_0 .. c_{d_c-1}, s^(0), s^(1), ...]`. The
/// extended shared vector concatenates every modality's shared block, so a
/// global factor shared by two modalities appears twice in it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSpec {
    graph: ModalityGraph,
    d_c: usize,
    pi: Vec<Vec<usize>>,
    d_s: Vec<usize>,
}

impl LatentSpec {
    pub fn new(graph: ModalityGraph, d_c: usize, pi: Vec<Vec<usize>>, d_s: Vec<usize>) -> Result<Self> {
        let m = graph.modalities();
        if pi.len() != m || d_s.len() != m {
            return Err(Error::spec(
                "latent layout",
                format!(
                    "{m} modalities but {} index maps and {} specific dims",
                    pi.len(),
                    d_s.len()
                ),
            ));
        }
        if d_c == 0 {
            return Err(Error::spec("latent layout", "no global shared factors"));
        }
        let mut covered = vec![false; d_c];
        for (mi, map) in pi.iter().enumerate() {
            let ctx = format!("modality {}", mi + 1);
            if map.is_empty() {
                return Err(Error::spec(ctx, "empty shared block"));
            }
            let mut seen = vec![false; d_c];
            for &r in map {
                if r >= d_c {
                    return Err(Error::spec(ctx, format!("index c{} out of range 1..={d_c}", r + 1)));
                }
                if seen[r] {
                    return Err(Error::spec(ctx, format!("index map is not injective (c{} repeated)", r + 1)));
                }
                seen[r] = true;
                covered[r] = true;
            }
        }
        if let Some(r) = covered.iter().position(|&c| !c) {
            return Err(Error::spec(
                "latent layout",
                format!("global factor c{} is used by no modality", r + 1),
            ));
        }
        Ok(Self { graph, d_c, pi, d_s })
    }

    pub fn graph(&self) -> &ModalityGraph {
        &self.graph
    }

    pub fn modalities(&self) -> usize {
        self.graph.modalities()
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn shared_dim(&self, m: usize) -> usize {
        self.pi[m].len()
    }

    pub fn specific_dim(&self, m: usize) -> usize {
        self.d_s[m]
    }

    pub fn observed_dim(&self, m: usize) -> usize {
        self.shared_dim(m) + self.specific_dim(m)
    }

    /// π_m: local shared coordinate → global factor.
    pub fn pi(&self, m: usize) -> &[usize] {
        &self.pi[m]
    }

    /// Offset o_m of modality m's block in the extended vector.
    pub fn offset(&self, m: usize) -> usize {
        self.pi[..m].iter().map(Vec::len).sum()
    }

    /// d_e = Σ d_c^(m).
    pub fn extended_dim(&self) -> usize {
        self.pi.iter().map(Vec::len).sum()
    }

    /// Global factor behind extended coordinate `u`.
    pub fn extended_factor(&self, u: usize) -> usize {
        let (m, k) = self.extended_owner(u);
        self.pi[m][k]
    }

    /// (modality, local coordinate) owning extended coordinate `u`.
    pub fn extended_owner(&self, u: usize) -> (usize, usize) {
        let mut rest = u;
        for (m, map) in self.pi.iter().enumerate() {
            if rest < map.len() {
                return (m, rest);
            }
            rest -= map.len();
        }
        panic!("extended coordinate {u} out of range {}", self.extended_dim());
    }

    /// I_m as extended coordinates.
    pub fn index_set(&self, m: usize) -> Vec<usize> {
        let o = self.offset(m);
        (o..o + self.shared_dim(m)).collect()
    }

    fn check_pair(&self, m: usize, n: usize) -> Result<()> {
        let count = self.modalities();
        if m >= count || n >= count || m == n {
            return Err(Error::spec(
                format!("modality {}", m + 1),
                format!("overlap with modality {} is undefined", n + 1),
            ));
        }
        Ok(())
    }

    /// Local coordinates k of modality m whose factor π_m(k) is also in n,
    /// in m's order.
    pub fn overlap_local(&self, m: usize, n: usize) -> Result<Vec<usize>> {
        self.check_pair(m, n)?;
        Ok((0..self.shared_dim(m))
            .filter(|&k| self.pi[n].contains(&self.pi[m][k]))
            .collect())
    }

    /// I_{m,n} as extended coordinates.
    pub fn overlap(&self, m: usize, n: usize) -> Result<Vec<usize>> {
        let o = self.offset(m);
        Ok(self.overlap_local(m, n)?.into_iter().map(|k| o + k).collect())
    }

    /// I_{m|n} = I_m \ I_{m,n} as extended coordinates.
    pub fn nonoverlap(&self, m: usize, n: usize) -> Result<Vec<usize>> {
        let o = self.offset(m);
        let shared = self.overlap_local(m, n)?;
        Ok((0..self.shared_dim(m))
            .filter(|k| !shared.contains(k))
            .map(|k| o + k)
            .collect())
    }

    /// Width of the latent matrix: d_c + Σ d_s.
    pub fn latent_dim(&self) -> usize {
        self.d_c + self.d_s.iter().sum::<usize>()
    }

    /// Latent column of modality m's first specific factor.
    pub fn specific_offset(&self, m: usize) -> usize {
        self.d_c + self.d_s[..m].iter().sum::<usize>()
    }

    /// Latent columns feeding g_m, in the order [z_c^(m), z_s^(m)].
    pub fn modality_columns(&self, m: usize) -> Vec<usize> {
        let s = self.specific_offset(m);
        self.pi[m].iter().copied().chain(s..s + self.d_s[m]).collect()
    }

    /// The modality owning a latent column, or `None` for a shared factor.
    pub fn column_owner(&self, col: usize) -> Option<usize> {
        if col < self.d_c {
            return None;
        }
        (0..self.modalities()).find(|&m| {
            let s = self.specific_offset(m);
            (s..s + self.d_s[m]).contains(&col)
        })
    }

    /// Human-readable name of a latent column: `c3`, `s2_1`.
    pub fn column_name(&self, col: usize) -> String {
        match self.column_owner(col) {
            None => format!("c{}", col + 1),
            Some(m) => format!("s{}_{}", m + 1, col - self.specific_offset(m) + 1),
        }
    }

    /// Inverse of [`LatentSpec::column_name`].
    pub fn parse_column(&self, name: &str) -> Result<usize> {
        let bad = || Error::Config(format!("unknown latent `{name}` (expected c<k> or s<m>_<l>)"));
        if let Some(k) = name.strip_prefix('c') {
            let k: usize = k.parse().map_err(|_| bad())?;
            if k == 0 || k > self.d_c {
                return Err(bad());
            }
            return Ok(k - 1);
        }
        if let Some(rest) = name.strip_prefix('s') {
            let (m, l) = rest.split_once('_').ok_or_else(bad)?;
            let m: usize = m.parse().map_err(|_| bad())?;
            let l: usize = l.parse().map_err(|_| bad())?;
            if m == 0 || m > self.modalities() || l == 0 || l > self.d_s[m - 1] {
                return Err(bad());
            }
            return Ok(self.specific_offset(m - 1) + l - 1);
        }
        Err(bad())
    }

    pub fn with_graph(&self, graph: ModalityGraph) -> Result<Self> {
        Self::new(graph, self.d_c, self.pi.clone(), self.d_s.clone())
    }
}
