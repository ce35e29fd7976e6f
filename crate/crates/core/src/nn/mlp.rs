use rand::Rng;
use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::layer::{Activation, DenseLayer, LayerCache, LayerGrads};
use super::matrix::Matrix;
use crate::error::{check_dim, Error, Result};

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

pub type MlpCache = Vec<LayerCache>;

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("mlp layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Dimension {
                    context: "mlp layer chaining",
                    expected: pair[0].out_dim(),
                    actual: pair[1].in_dim(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Kaiming-initialized stack with widths `dims[0] → dims[1] → …`; the last
    /// layer uses `output`, the rest `hidden`.
    pub fn kaiming<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid(
                "mlp dims",
                "need at least input and output widths",
            ));
        }
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == last { output } else { hidden };
                DenseLayer::kaiming(w[0], w[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, MlpCache)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward_batch(&x)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches))
    }

    pub fn infer_batch(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = self.layers[0].infer_batch(input)?;
        for layer in &self.layers[1..] {
            x = layer.infer_batch(&x)?;
        }
        Ok(x)
    }

    pub fn zero_grads(&self) -> Vec<LayerGrads> {
        self.layers.iter().map(LayerGrads::zeros_like).collect()
    }

    /// Backpropagates `upstream` (gradient on the output batch), accumulating
    /// parameter gradients into `grads` when given.
    pub fn backward_batch(
        &self,
        caches: &MlpCache,
        upstream: &Matrix,
        mut grads: Option<&mut [LayerGrads]>,
        want_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        if caches.len() != self.layers.len() {
            return Err(Error::Dimension {
                context: "mlp cache depth",
                expected: self.layers.len(),
                actual: caches.len(),
            });
        }
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let need_dx = i > 0 || want_input_grad;
            let slot = grads.as_deref_mut().map(|gs| &mut gs[i]);
            match layer.backward_batch(&caches[i], &g, slot, need_dx)? {
                Some(dx) => g = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(g))
    }

    /// `self ← keep · self + (1 − keep) · other`, layer by layer.
    pub fn blend_from(&mut self, other: &Mlp, keep: f64) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Dimension {
                context: "blend depth",
                expected: self.layers.len(),
                actual: other.layers.len(),
            });
        }
        for (t, c) in self.layers.iter_mut().zip(&other.layers) {
            t.blend_from(c, keep)?;
        }
        Ok(())
    }

    pub(crate) fn params_iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(DenseLayer::params_iter)
    }

    /// Weights then bias, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params_iter().copied().collect()
    }

    /// Inverse of [`Mlp::flat_params`].
    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("mlp params", self.param_count(), params.len())?;
        let mut rest = params;
        for layer in &mut self.layers {
            let nw = layer.weights().data().len();
            let nb = layer.bias().len();
            layer.weights_mut().data_mut().copy_from_slice(&rest[..nw]);
            layer.bias_mut().copy_from_slice(&rest[nw..nw + nb]);
            rest = &rest[nw + nb..];
        }
        Ok(())
    }
}

/// Gradients in [`Mlp::flat_params`] order.
pub fn flatten_grads(grads: &[LayerGrads]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.weights.data().iter().chain(&g.bias))
        .copied()
        .collect()
}

/// Adam states for every weight and bias block of an [`Mlp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpOptimizer {
    blocks: Vec<(AdamState, AdamState)>,
}

impl MlpOptimizer {
    pub fn new(mlp: &Mlp, config: AdamConfig) -> Self {
        Self {
            blocks: mlp
                .layers()
                .iter()
                .map(|l| {
                    (
                        AdamState::new(l.weights().data().len(), config),
                        AdamState::new(l.bias().len(), config),
                    )
                })
                .collect(),
        }
    }

    pub fn step(&mut self, mlp: &mut Mlp, grads: &[LayerGrads]) -> Result<()> {
        if grads.len() != self.blocks.len() || mlp.layers.len() != self.blocks.len() {
            return Err(Error::Dimension {
                context: "optimizer depth",
                expected: self.blocks.len(),
                actual: grads.len(),
            });
        }
        for ((layer, g), (sw, sb)) in mlp.layers.iter_mut().zip(grads).zip(&mut self.blocks) {
            sw.step(layer.weights_mut().data_mut(), g.weights.data())?;
            sb.step(layer.bias_mut(), &g.bias)?;
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[(AdamState, AdamState)] {
        &self.blocks
    }

    pub(crate) fn from_blocks(blocks: Vec<(AdamState, AdamState)>) -> Self {
        Self { blocks }
    }
}
