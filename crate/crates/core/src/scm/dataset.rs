//! Paired observations for one edge, and their on-disk format.
//!
//! A dataset directory holds `manifest.json` plus one raw little-endian f64
//! file per matrix, rows contiguous.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Edge;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const DTYPE: &str = "f64-le";

/// Aligned rows of x^(lo) and x^(hi) for one edge. Ground-truth latents,
/// when attached, are only reachable through [`PairDataset::eval_latents`];
/// training code receives a [`TrainingPairs`] view instead.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    edge: Edge,
    x_lo: Tensor,
    x_hi: Tensor,
    labels: Option<Tensor>,
    latents: Option<Tensor>,
    generator_fingerprint: String,
}

/// The part of a [`PairDataset`] training code may read. There is no path
/// from here to the ground-truth latents:
///
/// ```compile_fail
/// fn peek(ds: &pairlat::scm::PairDataset) {
///     let _ = ds.training_view().eval_latents();
/// }
/// ```
#[derive(Clone, Copy, Debug)]
pub struct TrainingPairs<'a> {
    edge: Edge,
    x_lo: &'a Tensor,
    x_hi: &'a Tensor,
    labels: Option<&'a Tensor>,
}

impl<'a> TrainingPairs<'a> {
    pub fn edge(&self) -> Edge {
        self.edge
    }

    pub fn len(&self) -> usize {
        self.x_lo.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_lo(&self) -> &'a Tensor {
        self.x_lo
    }

    pub fn x_hi(&self) -> &'a Tensor {
        self.x_hi
    }

    /// Observations of modality `m`, one of the edge's endpoints.
    pub fn x_of(&self, m: usize) -> Result<&'a Tensor> {
        if m == self.edge.lo() {
            Ok(self.x_lo)
        } else if m == self.edge.hi() {
            Ok(self.x_hi)
        } else {
            Err(Error::contract(format!("modality {} is not an endpoint of {}", m + 1, self.edge)))
        }
    }

    pub fn labels(&self) -> Option<&'a Tensor> {
        self.labels
    }
}

impl PairDataset {
    pub fn new(
        edge: Edge,
        x_lo: Tensor,
        x_hi: Tensor,
        labels: Option<Tensor>,
        latents: Option<Tensor>,
        generator_fingerprint: String,
    ) -> Result<Self> {
        let n = x_lo.rows();
        let rows_ok = x_hi.rows() == n
            && labels.as_ref().is_none_or(|l| l.len() == n)
            && latents.as_ref().is_none_or(|z| z.rows() == n);
        if !rows_ok || !x_lo.is_matrix() || !x_hi.is_matrix() {
            return Err(Error::contract(format!("dataset for {edge} has mismatched row counts")));
        }
        Ok(Self { edge, x_lo, x_hi, labels, latents, generator_fingerprint })
    }

    pub fn edge(&self) -> Edge {
        self.edge
    }

    pub fn len(&self) -> usize {
        self.x_lo.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generator_fingerprint(&self) -> &str {
        &self.generator_fingerprint
    }

    pub fn training_view(&self) -> TrainingPairs<'_> {
        TrainingPairs {
            edge: self.edge,
            x_lo: &self.x_lo,
            x_hi: &self.x_hi,
            labels: self.labels.as_ref(),
        }
    }

    /// Ground-truth latents, for evaluation code only.
    pub fn eval_latents(&self) -> Option<&Tensor> {
        self.latents.as_ref()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self {
            edge: self.edge,
            x_lo: self.x_lo.select_rows(idx),
            x_hi: self.x_hi.select_rows(idx),
            labels: self.labels.as_ref().map(|l| {
                Tensor::vector(idx.iter().map(|&i| l.data()[i]).collect())
            }),
            latents: self.latents.as_ref().map(|z| z.select_rows(idx)),
            generator_fingerprint: self.generator_fingerprint.clone(),
        }
    }

    /// Contiguous row ranges with the given fractions (the last part takes
    /// the remainder).
    pub fn split(&self, fractions: &[f64]) -> Vec<Self> {
        let n = self.len();
        let mut out = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (k, f) in fractions.iter().enumerate() {
            let end = if k + 1 == fractions.len() {
                n
            } else {
                (start + (f * n as f64).round() as usize).min(n)
            };
            out.push(self.select_rows(&(start..end).collect::<Vec<_>>()));
            start = end;
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    schema_version: u32,
    edge: [usize; 2],
    n: usize,
    dims: BTreeMap<String, usize>,
    dtype: String,
    row_major: bool,
    files: BTreeMap<String, String>,
    #[serde(default)]
    latent_file: Option<String>,
    #[serde(default)]
    latent_dim: Option<usize>,
    #[serde(default)]
    label_file: Option<String>,
    generator_fingerprint: String,
}

fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_matrix(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 8;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            "dims",
            format!("expected {expected} bytes for {rows}×{cols} f64 values, found {}", bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(vec![rows, cols], data)
}

fn modality_key(m: usize) -> String {
    (m + 1).to_string()
}

/// Write `ds` into `dir` (created if needed).
pub fn write_dataset(dir: &Path, ds: &PairDataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (lo, hi) = (ds.edge.lo(), ds.edge.hi());
    let mut files = BTreeMap::new();
    let mut dims = BTreeMap::new();
    for (m, x) in [(lo, &ds.x_lo), (hi, &ds.x_hi)] {
        let name = format!("x_{}.bin", m + 1);
        write_matrix(&dir.join(&name), x)?;
        files.insert(modality_key(m), name);
        dims.insert(modality_key(m), x.cols());
    }
    let latent_file = match &ds.latents {
        Some(z) => {
            write_matrix(&dir.join("latents.bin"), z)?;
            Some("latents.bin".to_string())
        }
        None => None,
    };
    let label_file = match &ds.labels {
        Some(l) => {
            write_matrix(&dir.join("labels.bin"), l)?;
            Some("labels.bin".to_string())
        }
        None => None,
    };
    let manifest = Manifest {
        schema_version: DATASET_SCHEMA_VERSION,
        edge: [lo + 1, hi + 1],
        n: ds.len(),
        dims,
        dtype: DTYPE.into(),
        row_major: true,
        files,
        latent_file,
        latent_dim: ds.latents.as_ref().map(Tensor::cols),
        label_file,
        generator_fingerprint: ds.generator_fingerprint.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<PairDataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, "manifest", e.to_string()))?;
    if m.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::format(&mpath, "schema_version", format!("unsupported version {}", m.schema_version)));
    }
    if m.dtype != DTYPE {
        return Err(Error::format(&mpath, "dtype", format!("expected \"{DTYPE}\", found \"{}\"", m.dtype)));
    }
    if !m.row_major {
        return Err(Error::format(&mpath, "row_major", "only row-major storage is supported"));
    }
    if m.edge[0] == 0 || m.edge[1] == 0 || m.edge[0] == m.edge[1] {
        return Err(Error::format(&mpath, "edge", format!("invalid edge {:?}", m.edge)));
    }
    let edge = Edge::new(m.edge[0] - 1, m.edge[1] - 1);
    let keys: Vec<String> = vec![modality_key(edge.lo()), modality_key(edge.hi())];
    let file_keys: Vec<&String> = m.files.keys().collect();
    if m.files.len() != 2 || keys.iter().any(|k| !m.files.contains_key(k)) {
        return Err(Error::format(
            &mpath,
            "files",
            format!("edge {edge} but files are declared for modalities {file_keys:?}"),
        ));
    }
    if m.dims.len() != 2 || keys.iter().any(|k| !m.dims.contains_key(k)) {
        return Err(Error::format(&mpath, "dims", format!("edge {edge} but dims are declared for {:?}", m.dims.keys())));
    }
    let file = |name: &str| -> PathBuf { dir.join(name) };
    let x_lo = read_matrix(&file(&m.files[&keys[0]]), m.n, m.dims[&keys[0]])?;
    let x_hi = read_matrix(&file(&m.files[&keys[1]]), m.n, m.dims[&keys[1]])?;
    let latents = match (&m.latent_file, m.latent_dim) {
        (Some(f), Some(d)) => Some(read_matrix(&file(f), m.n, d)?),
        (None, None) => None,
        _ => return Err(Error::format(&mpath, "latent_dim", "latent file and dimension must be given together")),
    };
    let labels = match &m.label_file {
        Some(f) => Some(read_matrix(&file(f), m.n, 1)?.reshape(vec![m.n])?),
        None => None,
    };
    PairDataset::new(edge, x_lo, x_hi, labels, latents, m.generator_fingerprint)
}
