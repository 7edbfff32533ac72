//! Invertible mixing g_m: square orthogonal affine layers with leaky-ReLU
//! between them (none after the last layer).

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::autodiff::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::linalg::{condition_number, orthogonal_from, to_dmatrix};
use crate::rng::KeyedRng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixLayer {
    /// Row-major `dim × dim`; the layer maps `u ↦ W·u + b`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixing {
    dim: usize,
    layers: Vec<MixLayer>,
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

fn leaky_inv(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v / LEAKY_SLOPE
    }
}

impl Mixing {
    pub fn identity(dim: usize) -> Self {
        Self { dim, layers: vec![] }
    }

    /// `depth` orthogonal layers with Gaussian biases of scale `bias_scale`.
    pub fn random(dim: usize, depth: usize, bias_scale: f64, rng: &mut KeyedRng) -> Self {
        let layers = (0..depth)
            .map(|_| MixLayer {
                weight: orthogonal_from(dim, dim, rng),
                bias: rng.normals(dim).into_iter().map(|b| b * bias_scale).collect(),
            })
            .collect();
        Self { dim, layers }
    }

    /// Layers given explicitly; each must be square and well conditioned.
    pub fn from_layers(dim: usize, layers: Vec<MixLayer>) -> Result<Self> {
        for (l, layer) in layers.iter().enumerate() {
            if layer.weight.shape() != [dim, dim] || layer.bias.len() != dim {
                return Err(Error::spec(format!("mixing layer {l}"), format!("expected {dim}×{dim} weight")));
            }
            let cond = condition_number(&to_dmatrix(&layer.weight));
            if !(cond < 1e6) {
                return Err(Error::spec(format!("mixing layer {l}"), format!("condition number {cond:.3e}")));
            }
        }
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[MixLayer] {
        &self.layers
    }

    fn forward_row(&self, u: &[f64], out: &mut [f64]) {
        let d = self.dim;
        let mut h = u.to_vec();
        let mut next = vec![0.0; d];
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.weight.data();
            for r in 0..d {
                next[r] = layer.bias[r] + (0..d).map(|c| w[r * d + c] * h[c]).sum::<f64>();
            }
            if l + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = leaky(*v));
            }
            std::mem::swap(&mut h, &mut next);
        }
        out.copy_from_slice(&h);
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        self.check_width(u)?;
        let mut out = vec![0.0; u.len()];
        for r in 0..u.rows() {
            self.forward_row(u.row(r), &mut out[r * self.dim..(r + 1) * self.dim]);
        }
        Tensor::matrix(u.rows(), self.dim, out)
    }

    /// Exact layerwise inverse: undo the nonlinearity, then apply Wᵀ
    /// (the weights are orthogonal) after removing the bias.
    pub fn inverse(&self, x: &Tensor) -> Result<Tensor> {
        self.check_width(x)?;
        let d = self.dim;
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = &mut out.data_mut()[r * d..(r + 1) * d];
            let mut h = row.to_vec();
            for (l, layer) in self.layers.iter().enumerate().rev() {
                if l + 1 < self.layers.len() {
                    h.iter_mut().for_each(|v| *v = leaky_inv(*v));
                }
                let w = layer.weight.data();
                let centered: Vec<f64> = h.iter().zip(&layer.bias).map(|(v, b)| v - b).collect();
                for c in 0..d {
                    h[c] = (0..d).map(|r| w[r * d + c] * centered[r]).sum();
                }
            }
            row.copy_from_slice(&h);
        }
        Ok(out)
    }

    /// ∂g/∂u at `u` by the chain rule through the layers.
    pub fn jacobian(&self, u: &[f64]) -> DMatrix<f64> {
        let d = self.dim;
        let mut jac = DMatrix::identity(d, d);
        let mut h = u.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = to_dmatrix(&layer.weight);
            let pre: Vec<f64> = (0..d)
                .map(|r| layer.bias[r] + (0..d).map(|c| w[(r, c)] * h[c]).sum::<f64>())
                .collect();
            jac = &w * jac;
            if l + 1 < self.layers.len() {
                for r in 0..d {
                    if pre[r] <= 0.0 {
                        jac.row_mut(r).scale_mut(LEAKY_SLOPE);
                    }
                }
                h = pre.into_iter().map(leaky).collect();
            } else {
                h = pre;
            }
        }
        jac
    }

    fn check_width(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.dim {
            return Err(Error::contract(format!("mixing of width {} applied to {} columns", self.dim, t.cols())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn points(n: usize, d: usize, seed: u64) -> Tensor {
        Tensor::matrix(n, d, KeyedRng::new(seed, "pts").normals(n * d)).unwrap()
    }

    #[test]
    fn depth_zero_is_identity() {
        let u = points(5, 3, 1);
        assert!(Mixing::identity(3).forward(&u).unwrap().bits_eq(&u));
    }

    #[test]
    fn single_affine_layer_inverts_by_transpose() {
        let mut rng = KeyedRng::new(2, "mix");
        let g = Mixing::random(4, 1, 0.5, &mut rng);
        let u = points(100, 4, 3);
        let back = g.inverse(&g.forward(&u).unwrap()).unwrap();
        assert!(back.max_abs_diff(&u) < 1e-10);
    }

    #[test]
    fn deep_leaky_mixing_round_trips() {
        let mut rng = KeyedRng::new(5, "mix");
        let g = Mixing::random(3, 3, 0.5, &mut rng);
        let u = points(1000, 3, 6);
        let back = g.inverse(&g.forward(&u).unwrap()).unwrap();
        assert!(back.max_abs_diff(&u) < 1e-8);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = KeyedRng::new(8, "mix");
        let g = Mixing::random(3, 3, 0.5, &mut rng);
        let u = points(20, 3, 9);
        let h = 1e-6;
        for r in 0..u.rows() {
            let jac = g.jacobian(u.row(r));
            for c in 0..3 {
                let mut up = u.row(r).to_vec();
                let mut dn = up.clone();
                up[c] += h;
                dn[c] -= h;
                let fu = g.forward(&Tensor::matrix(1, 3, up).unwrap()).unwrap();
                let fd = g.forward(&Tensor::matrix(1, 3, dn).unwrap()).unwrap();
                for o in 0..3 {
                    let est = (fu.at(0, o) - fd.at(0, o)) / (2.0 * h);
                    assert!((est - jac[(o, c)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn ill_conditioned_layers_are_rejected() {
        let layer = MixLayer {
            weight: Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1e-9]).unwrap(),
            bias: vec![0.0, 0.0],
        };
        assert!(Mixing::from_layers(2, vec![layer]).is_err());
    }
}
