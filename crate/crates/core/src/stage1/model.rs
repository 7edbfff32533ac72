//! Per-modality encoders and decoders.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::linalg::orthogonal_from;
use crate::rng::KeyedRng;
use crate::scm::LatentSpec;
use crate::tensor::{matmul_into, ParamSet, Tensor};

/// A perceptron whose parameters live in a shared [`ParamSet`] under
/// `{prefix}.l{k}.w` (in × out) and `{prefix}.l{k}.b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub prefix: String,
    /// Layer widths including input and output.
    pub widths: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        Self { prefix: prefix.into(), widths }
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("nonempty")
    }

    pub fn weight_name(&self, k: usize) -> String {
        format!("{}.l{k}.w", self.prefix)
    }

    pub fn bias_name(&self, k: usize) -> String {
        format!("{}.l{k}.b", self.prefix)
    }

    /// Orthogonal weights (He gain on hidden layers), zero biases.
    pub fn init(&self, params: &mut ParamSet, rng: &mut KeyedRng) {
        let gain = (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt();
        for k in 0..self.layers() {
            let (i, o) = (self.widths[k], self.widths[k + 1]);
            let g = if k + 1 < self.layers() { gain } else { 1.0 };
            params.insert(self.weight_name(k), orthogonal_from(i, o, rng).map(|v| v * g));
            params.insert(self.bias_name(k), Tensor::zeros(&[o]));
        }
    }

    /// Forward pass on the tape.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for k in 0..self.layers() {
            let w = g.param(&self.weight_name(k))?;
            let b = g.param(&self.bias_name(k))?;
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if k + 1 < self.layers() {
                h = g.leaky_relu(h, LEAKY_SLOPE)?;
            }
        }
        Ok(h)
    }

    /// Forward pass without recording.
    pub fn apply(&self, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::contract(format!(
                "`{}` expects {} columns, got {}",
                self.prefix,
                self.input_dim(),
                x.cols()
            )));
        }
        let n = x.rows();
        let mut h = x.data().to_vec();
        for k in 0..self.layers() {
            let (i, o) = (self.widths[k], self.widths[k + 1]);
            let w = params.require(&self.weight_name(k))?;
            let b = params.require(&self.bias_name(k))?;
            let mut out = vec![0.0; n * o];
            for r in 0..n {
                out[r * o..(r + 1) * o].copy_from_slice(b.data());
            }
            matmul_into(&h, w.data(), &mut out, n, i, o);
            if k + 1 < self.layers() {
                out.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v *= LEAKY_SLOPE;
                    }
                });
            }
            h = out;
        }
        let out = Tensor::matrix(n, self.output_dim(), h)?;
        if !out.is_finite() {
            return Err(Error::NumericOverflow {
                primitive: "mlp",
                detail: format!("non-finite output from `{}`", self.prefix),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityDims {
    pub d_c: usize,
    pub d_s: usize,
    pub d_x: usize,
}

/// Encoder/decoder body shape shared by every modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BodyShape {
    pub hidden: usize,
    /// Affine layers per body (3 = two hidden layers).
    pub layers: usize,
}

impl Default for BodyShape {
    fn default() -> Self {
        Self { hidden: 32, layers: 3 }
    }
}

/// Encoders and decoders for every modality, with all parameters in one
/// [`ParamSet`] (`m{k}.enc.*`, `m{k}.dec.*`, 1-based k).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBank {
    dims: Vec<ModalityDims>,
    shape: BodyShape,
    params: ParamSet,
}

impl ModelBank {
    pub fn dims_from_spec(spec: &LatentSpec) -> Vec<ModalityDims> {
        (0..spec.modalities())
            .map(|m| ModalityDims {
                d_c: spec.shared_dim(m),
                d_s: spec.specific_dim(m),
                d_x: spec.observed_dim(m),
            })
            .collect()
    }

    /// Fresh bank with every body initialized from `(seed, modality)`.
    pub fn new(dims: Vec<ModalityDims>, shape: BodyShape, seed: u64) -> Result<Self> {
        if shape.layers == 0 || shape.hidden == 0 {
            return Err(Error::contract("encoder/decoder bodies need at least one layer and width"));
        }
        let mut bank = Self { dims, shape, params: ParamSet::new() };
        for m in 0..bank.dims.len() {
            let mut rng = KeyedRng::new(seed, &format!("stage1/init/{m}"));
            bank.encoder(m).init(&mut bank.params, &mut rng);
            bank.decoder(m).init(&mut bank.params, &mut rng);
        }
        Ok(bank)
    }

    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self, m: usize) -> ModalityDims {
        self.dims[m]
    }

    pub fn shape(&self) -> BodyShape {
        self.shape
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn widths(&self, i: usize, o: usize) -> Vec<usize> {
        let mut w = vec![i];
        w.extend(std::iter::repeat_n(self.shape.hidden, self.shape.layers - 1));
        w.push(o);
        w
    }

    pub fn encoder_prefix(m: usize) -> String {
        format!("m{}.enc", m + 1)
    }

    pub fn decoder_prefix(m: usize) -> String {
        format!("m{}.dec", m + 1)
    }

    pub fn encoder(&self, m: usize) -> Mlp {
        let d = self.dims[m];
        Mlp::new(Self::encoder_prefix(m), self.widths(d.d_x, d.d_c + d.d_s))
    }

    pub fn decoder(&self, m: usize) -> Mlp {
        let d = self.dims[m];
        Mlp::new(Self::decoder_prefix(m), self.widths(d.d_c + d.d_s, d.d_x))
    }

    /// Names of modality m's parameters.
    pub fn modality_param_names(&self, m: usize) -> Vec<String> {
        let (e, d) = (Self::encoder_prefix(m) + ".", Self::decoder_prefix(m) + ".");
        self.params
            .names()
            .filter(|n| n.starts_with(&e) || n.starts_with(&d))
            .cloned()
            .collect()
    }

    /// (ẑ_c, ẑ_s): the encoder output split at d_c.
    pub fn encode(&self, m: usize, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = self.dims[m];
        if x.cols() != d.d_x {
            return Err(Error::contract(format!(
                "modality {} encoder expects {} columns, got {}",
                m + 1,
                d.d_x,
                x.cols()
            )));
        }
        let z = self.encoder(m).apply(&self.params, x)?;
        let zc = z.select_cols(&(0..d.d_c).collect::<Vec<_>>());
        let zs = z.select_cols(&(d.d_c..d.d_c + d.d_s).collect::<Vec<_>>());
        Ok((zc, zs))
    }

    pub fn decode(&self, m: usize, z: &Tensor) -> Result<Tensor> {
        self.decoder(m).apply(&self.params, z)
    }

    /// On-tape encoder returning (ẑ_c, ẑ_s).
    pub fn encode_on(&self, g: &mut Graph, m: usize, x: Var) -> Result<(Var, Var)> {
        let d = self.dims[m];
        let z = self.encoder(m).forward(g, x)?;
        let zc = g.slice_cols(z, 0, d.d_c)?;
        let zs = g.slice_cols(z, d.d_c, d.d_c + d.d_s)?;
        Ok((zc, zs))
    }

    pub fn decode_on(&self, g: &mut Graph, m: usize, z: Var) -> Result<Var> {
        self.decoder(m).forward(g, z)
    }

    /// sha256 over parameter names, shapes and value bits.
    pub fn content_hash(&self) -> String {
        param_hash(&self.params)
    }
}

/// sha256 over names, shapes and the exact bits of every value.
pub fn param_hash(params: &ParamSet) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update((t.shape().len() as u64).to_le_bytes());
        for &s in t.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    config_fingerprint: String,
    content_hash: String,
    bank: ModelBank,
}

const CHECKPOINT_FORMAT: &str = "pairlat-checkpoint-v1";

pub fn save_checkpoint(path: &Path, bank: &ModelBank, config_fingerprint: &str) -> Result<()> {
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        config_fingerprint: config_fingerprint.into(),
        content_hash: bank.content_hash(),
        bank: bank.clone(),
    };
    let text = serde_json::to_string(&ck).expect("checkpoint serializes");
    crate::experiment::report::write_atomic(path, text.as_bytes())
}

/// Returns the bank and the config fingerprint it was saved with.
pub fn load_checkpoint(path: &Path) -> Result<(ModelBank, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(path, "checkpoint", e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(Error::format(path, "format", format!("unknown format `{}`", ck.format)));
    }
    if ck.bank.content_hash() != ck.content_hash {
        return Err(Error::format(path, "content_hash", "parameters do not match the recorded hash"));
    }
    Ok((ck.bank, ck.config_fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank(layers: usize) -> ModelBank {
        let dims = vec![ModalityDims { d_c: 2, d_s: 1, d_x: 3 }, ModalityDims { d_c: 3, d_s: 0, d_x: 3 }];
        ModelBank::new(dims, BodyShape { hidden: 8, layers }, 1).unwrap()
    }

    #[test]
    fn identity_encoder_passes_shared_code_through() {
        let mut b = bank(1);
        *b.params_mut().get_mut("m2.enc.l0.w").unwrap() = Tensor::identity(3);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let (zc, zs) = b.encode(1, &x).unwrap();
        assert!(zc.bits_eq(&x));
        assert_eq!(zs.shape(), &[2, 0]);
    }

    #[test]
    fn split_widths_follow_the_layout() {
        let b = bank(3);
        let x = Tensor::matrix(4, 3, (0..12).map(|v| v as f64 * 0.1).collect()).unwrap();
        let (zc, zs) = b.encode(0, &x).unwrap();
        assert_eq!((zc.cols(), zs.cols()), (2, 1));
        let full = b.encoder(0).apply(b.params(), &x).unwrap();
        assert!(Tensor::hcat(&[&zc, &zs]).unwrap().bits_eq(&full));
    }

    #[test]
    fn zero_encoder_gives_zero_codes() {
        let mut b = bank(3);
        for (_, t) in b.params_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let (zc, zs) = b.encode(0, &x).unwrap();
        assert!(zc.data().iter().chain(zs.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn tape_and_direct_forward_agree() {
        let b = bank(3);
        let x = Tensor::matrix(5, 3, KeyedRng::new(2, "x").normals(15)).unwrap();
        let direct = b.decode(0, &b.encoder(0).apply(b.params(), &x).unwrap()).unwrap();
        let mut g = Graph::with_params(b.params());
        let xv = g.constant(x);
        let z = b.encoder(0).forward(&mut g, xv).unwrap();
        let out = b.decode_on(&mut g, 0, z).unwrap();
        assert!(g.value(out).max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn wrong_width_is_a_contract_error() {
        let b = bank(3);
        assert!(matches!(b.encode(0, &Tensor::zeros(&[2, 4])), Err(Error::Contract(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let b = bank(3);
        save_checkpoint(&path, &b, "fp").unwrap();
        let (back, fp) = load_checkpoint(&path).unwrap();
        assert_eq!(fp, "fp");
        assert!(back.params().bits_eq(b.params()));
    }
}
