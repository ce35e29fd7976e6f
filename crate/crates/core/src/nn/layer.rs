use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::kaiming_matrix;
use super::matrix::{gemm, Matrix};
use crate::error::{check_dim, Error, Result};

/// Negative-side slope of the leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::LeakyRelu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::LeakyRelu),
            2 => Ok(Activation::Identity),
            other => Err(Error::Checkpoint(format!("unknown activation tag {other}"))),
        }
    }
}

/// Affine map followed by an elementwise activation: `y = act(W x + b)`.
///
/// `weights` has shape `(out, in)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    weights: Matrix,
    bias: Vec<f64>,
    activation: Activation,
}

/// Values retained by a forward pass for the matching backward pass.
///
/// Rows are batch samples.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    pre_activation: Matrix,
}

impl LayerCache {
    pub fn pre_activation(&self) -> &Matrix {
        &self.pre_activation
    }

    pub fn input(&self) -> &Matrix {
        &self.input
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Matrix::zeros(layer.out_dim(), layer.in_dim()),
            bias: vec![0.0; layer.out_dim()],
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.weights
            .data_mut()
            .iter_mut()
            .for_each(|g| *g *= factor);
        self.bias.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .data()
            .iter()
            .chain(&self.bias)
            .all(|g| *g == 0.0)
    }
}

impl DenseLayer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_dim("layer bias length", weights.rows(), bias.len())?;
        if !weights.is_finite() || bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("layer parameters"));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weights: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    /// Kaiming-normal weights, zero bias.
    pub fn kaiming<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            weights: kaiming_matrix(out_dim, in_dim, rng)?,
            bias: vec![0.0; out_dim],
            activation,
        })
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Matrix {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    /// Single-sample forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, LayerCache)> {
        let x = Matrix::new(1, input.len(), input.to_vec())
            .map_err(|_| Error::NonFinite("layer input"))?;
        let (y, cache) = self.forward_batch(&x)?;
        Ok((y.into_data(), cache))
    }

    /// Single-sample backward pass; returns `(grad_weights, grad_bias, grad_input)`.
    pub fn backward(
        &self,
        cache: &LayerCache,
        upstream: &[f64],
    ) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
        check_dim("layer upstream gradient", self.out_dim(), upstream.len())?;
        let g = Matrix::new(1, upstream.len(), upstream.to_vec())?;
        let mut grads = LayerGrads::zeros_like(self);
        let dx = self.backward_batch(cache, &g, Some(&mut grads), true)?;
        let dx = dx.expect("input gradient requested");
        Ok((grads.weights, grads.bias, dx.into_data()))
    }

    /// Forward pass over a batch whose rows are samples.
    pub fn forward_batch(&self, input: &Matrix) -> Result<(Matrix, LayerCache)> {
        let pre = self.pre_activation(input)?;
        let mut out = pre.clone();
        if self.activation != Activation::Identity {
            out.data_mut()
                .iter_mut()
                .for_each(|z| *z = self.activation.apply(*z));
        }
        Ok((
            out,
            LayerCache {
                input: input.clone(),
                pre_activation: pre,
            },
        ))
    }

    /// Forward pass without retaining a cache.
    pub fn infer_batch(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = self.pre_activation(input)?;
        if self.activation != Activation::Identity {
            out.data_mut()
                .iter_mut()
                .for_each(|z| *z = self.activation.apply(*z));
        }
        Ok(out)
    }

    fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        check_dim("layer input width", self.in_dim(), input.cols())?;
        let mut pre = Matrix::zeros(input.rows(), self.out_dim());
        gemm(1.0, input, false, &self.weights, true, 0.0, &mut pre)?;
        for r in 0..pre.rows() {
            for (z, b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *z += b;
            }
        }
        Ok(pre)
    }

    /// Accumulates parameter gradients into `grads` (when given) and optionally
    /// returns the gradient with respect to the batch input.
    pub fn backward_batch(
        &self,
        cache: &LayerCache,
        upstream: &Matrix,
        grads: Option<&mut LayerGrads>,
        want_input_grad: bool,
    ) -> Result<Option<Matrix>> {
        check_dim("layer upstream width", self.out_dim(), upstream.cols())?;
        check_dim(
            "layer upstream rows",
            cache.pre_activation.rows(),
            upstream.rows(),
        )?;
        let mut dz = upstream.clone();
        if self.activation != Activation::Identity {
            for (g, z) in dz.data_mut().iter_mut().zip(cache.pre_activation.data()) {
                *g *= self.activation.derivative(*z);
            }
        }
        if let Some(grads) = grads {
            check_dim("layer grad shape", self.out_dim(), grads.bias.len())?;
            gemm(1.0, &dz, true, &cache.input, false, 1.0, &mut grads.weights)?;
            for r in 0..dz.rows() {
                for (gb, g) in grads.bias.iter_mut().zip(dz.row(r)) {
                    *gb += g;
                }
            }
        }
        if !want_input_grad {
            return Ok(None);
        }
        let mut dx = Matrix::zeros(dz.rows(), self.in_dim());
        gemm(1.0, &dz, false, &self.weights, false, 0.0, &mut dx)?;
        Ok(Some(dx))
    }

    /// `self ← keep · self + (1 − keep) · other`.
    pub fn blend_from(&mut self, other: &DenseLayer, keep: f64) -> Result<()> {
        check_dim(
            "blend weights",
            self.weights.data().len(),
            other.weights.data().len(),
        )?;
        check_dim("blend bias", self.bias.len(), other.bias.len())?;
        let mix = 1.0 - keep;
        for (t, c) in self
            .weights
            .data_mut()
            .iter_mut()
            .chain(self.bias.iter_mut())
            .zip(other.weights.data().iter().chain(&other.bias))
        {
            *t = keep * *t + mix * c;
        }
        Ok(())
    }

    pub(crate) fn params_iter(&self) -> impl Iterator<Item = &f64> {
        self.weights.data().iter().chain(&self.bias)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::gradcheck::{numeric_gradient, relative_error};

    fn random_layer(in_dim: usize, out_dim: usize, act: Activation, seed: u64) -> DenseLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = DenseLayer::kaiming(in_dim, out_dim, act, &mut rng).unwrap();
        for b in layer.bias_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        layer
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer =
            DenseLayer::new(Matrix::identity(2), vec![0.0; 2], Activation::Identity).unwrap();
        let (y, _) = layer.forward(&[3.0, -1.0]).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
    }

    #[test]
    fn tanh_of_zero_pre_activation_is_zero() {
        let layer = DenseLayer::zeros(3, 2, Activation::Tanh);
        let (y, cache) = layer.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
        assert_eq!(cache.pre_activation().data(), &[0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_reports_sizes() {
        let layer = DenseLayer::zeros(3, 2, Activation::Tanh);
        match layer.forward(&[1.0]) {
            Err(Error::Dimension {
                expected, actual, ..
            }) => assert_eq!((expected, actual), (3, 1)),
            other => panic!("unexpected {other:?}"),
        }
        let (_, cache) = layer.forward(&[1.0, 2.0, 3.0]).unwrap();
        assert!(layer.backward(&cache, &[1.0]).is_err());
        assert!(DenseLayer::new(Matrix::zeros(2, 2), vec![0.0], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = random_layer(3, 4, Activation::LeakyRelu, 1);
        let (_, cache) = layer.forward(&[0.3, -0.2, 0.9]).unwrap();
        let (gw, gb, gx) = layer.backward(&cache, &[0.0; 4]).unwrap();
        assert!(gw.data().iter().chain(&gb).chain(&gx).all(|g| *g == 0.0));
    }

    #[test]
    fn identity_weight_gradient_is_outer_product() {
        let layer = random_layer(3, 2, Activation::Identity, 2);
        let x = [0.5, -1.5, 2.0];
        let g = [0.25, -4.0];
        let (_, cache) = layer.forward(&x).unwrap();
        let (gw, gb, _) = layer.backward(&cache, &g).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(gw.get(r, c), g[r] * x[c]);
            }
        }
        assert_eq!(gb, g.to_vec());
    }

    fn check_layer_against_finite_differences(act: Activation, seed: u64) {
        let layer = random_layer(3, 4, act, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |l: &DenseLayer, x: &[f64]| -> f64 {
            let (y, _) = l.forward(x).unwrap();
            y.iter().zip(&g).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = layer.forward(&x).unwrap();
        let (gw, gb, gx) = layer.backward(&cache, &g).unwrap();

        let num_x = numeric_gradient(|xs| loss(&layer, xs), &x, 1e-5);
        assert!(relative_error(&gx, &num_x) < 1e-4);

        let w0 = layer.weights().data().to_vec();
        let num_w = numeric_gradient(
            |ws| {
                let mut l = layer.clone();
                l.weights_mut().data_mut().copy_from_slice(ws);
                loss(&l, &x)
            },
            &w0,
            1e-5,
        );
        assert!(relative_error(gw.data(), &num_w) < 1e-4);

        let num_b = numeric_gradient(
            |bs| {
                let mut l = layer.clone();
                l.bias_mut().copy_from_slice(bs);
                loss(&l, &x)
            },
            layer.bias(),
            1e-5,
        );
        assert!(relative_error(&gb, &num_b) < 1e-4);
    }

    #[test]
    fn tanh_layer_matches_finite_differences() {
        check_layer_against_finite_differences(Activation::Tanh, 7);
    }

    #[test]
    fn leaky_relu_layer_matches_finite_differences() {
        check_layer_against_finite_differences(Activation::LeakyRelu, 8);
    }

    #[test]
    fn blend_endpoints() {
        let a = random_layer(2, 2, Activation::Tanh, 3);
        let b = random_layer(2, 2, Activation::Tanh, 4);
        let mut keep_all = a.clone();
        keep_all.blend_from(&b, 1.0).unwrap();
        assert_eq!(keep_all, a);
        let mut copy = a.clone();
        copy.blend_from(&b, 0.0).unwrap();
        assert_eq!(copy, b);
    }
}
