//! Action-value critic with a soft-updated target copy.
//!
//! The network is an identity input block that embeds the concatenated
//! `[state features ; action]` into 128 dimensions, a 128→512→256 bottom and
//! a 256→128→64→1 tower, all hidden layers leaky ReLU.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Reader, Writer};
use crate::error::{check_dim, Error, Result};
use crate::nn::{Activation, AdamConfig, DenseLayer, LayerGrads, Matrix, Mlp, MlpOptimizer};

pub const ACTION_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub bottom: Vec<usize>,
    pub tower: Vec<usize>,
    pub gamma: f64,
    pub adam: AdamConfig,
}

impl CriticConfig {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            embed_dim: 128,
            bottom: vec![512, 256],
            tower: vec![128, 64],
            gamma: 0.95,
            adam: AdamConfig::with_lr(1e-4),
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.feature_dim + ACTION_DIM, self.embed_dim];
        dims.extend(&self.bottom);
        dims.extend(&self.tower);
        dims.push(1);
        dims
    }
}

/// One `(s, a, R, s′, a′)` sample for TD learning.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticTransition {
    pub features: Vec<f64>,
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_features: Vec<f64>,
    pub next_action: [f64; ACTION_DIM],
    /// Drops the bootstrap term when set.
    pub terminal: bool,
}

/// Column-stacked transitions, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionBatch {
    pub features: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub next_features: Matrix,
    pub next_actions: Matrix,
    pub terminal: Vec<bool>,
}

impl TransitionBatch {
    pub fn from_transitions(batch: &[CriticTransition]) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        let fd = batch[0].features.len();
        let rows = |f: &dyn Fn(&CriticTransition) -> &[f64], width: usize| -> Result<Matrix> {
            let mut data = Vec::with_capacity(batch.len() * width);
            for t in batch {
                let r = f(t);
                check_dim("transition width", width, r.len())?;
                data.extend_from_slice(r);
            }
            Matrix::new(batch.len(), width, data)
        };
        Ok(Self {
            features: rows(&|t| &t.features, fd)?,
            actions: rows(&|t| &t.action, ACTION_DIM)?,
            rewards: batch.iter().map(|t| t.reward).collect(),
            next_features: rows(&|t| &t.next_features, fd)?,
            next_actions: rows(&|t| &t.next_action, ACTION_DIM)?,
            terminal: batch.iter().map(|t| t.terminal).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Critic {
    net: Mlp,
    opt: MlpOptimizer,
    feature_dim: usize,
    gamma: f64,
}

impl Critic {
    pub fn new<R: Rng + ?Sized>(config: &CriticConfig, rng: &mut R) -> Result<Self> {
        if !(0.0..1.0).contains(&config.gamma) {
            return Err(Error::invalid(
                "gamma",
                format!("must lie in [0, 1), got {}", config.gamma),
            ));
        }
        config.adam.validate()?;
        let dims = config.dims();
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i == 0 || i == last {
                    Activation::Identity
                } else {
                    Activation::LeakyRelu
                };
                DenseLayer::kaiming(w[0], w[1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Mlp::new(layers)?;
        let opt = MlpOptimizer::new(&net, config.adam);
        Ok(Self {
            net,
            opt,
            feature_dim: config.feature_dim,
            gamma: config.gamma,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        let mut w = vec![self.net.in_dim()];
        w.extend(self.net.layers().iter().map(DenseLayer::out_dim));
        w
    }

    fn stack(&self, features: &Matrix, actions: &Matrix) -> Result<Matrix> {
        check_dim("critic features", self.feature_dim, features.cols())?;
        check_dim("critic action", ACTION_DIM, actions.cols())?;
        check_dim("critic batch rows", features.rows(), actions.rows())?;
        let width = self.feature_dim + ACTION_DIM;
        let mut x = Matrix::zeros(features.rows(), width);
        for r in 0..features.rows() {
            let row = x.row_mut(r);
            row[..self.feature_dim].copy_from_slice(features.row(r));
            row[self.feature_dim..].copy_from_slice(actions.row(r));
        }
        Ok(x)
    }

    pub fn q_value(&self, features: &[f64], action: &[f64]) -> Result<f64> {
        let f = Matrix::new(1, features.len(), features.to_vec())?;
        let a = Matrix::new(1, action.len(), action.to_vec())?;
        Ok(self.q_batch(&f, &a)?[0])
    }

    pub fn q_batch(&self, features: &Matrix, actions: &Matrix) -> Result<Vec<f64>> {
        let x = self.stack(features, actions)?;
        Ok(self.net.infer_batch(&x)?.into_data())
    }

    /// Q values and `∂Q/∂a` for each row; parameters are left untouched.
    pub fn action_gradient(
        &self,
        features: &Matrix,
        actions: &Matrix,
    ) -> Result<(Vec<f64>, Matrix)> {
        let x = self.stack(features, actions)?;
        let (q, caches) = self.net.forward_batch(&x)?;
        let ones = Matrix::new(q.rows(), 1, vec![1.0; q.rows()])?;
        let dx = self
            .net
            .backward_batch(&caches, &ones, None, true)?
            .expect("input gradient requested");
        let mut da = Matrix::zeros(x.rows(), ACTION_DIM);
        for r in 0..x.rows() {
            da.row_mut(r)
                .copy_from_slice(&dx.row(r)[self.feature_dim..]);
        }
        Ok((q.into_data(), da))
    }

    /// Q values and the parameter gradient of `mean(Q)` scaled by `scale`.
    pub fn scaled_mean_q_gradient(
        &self,
        features: &Matrix,
        actions: &Matrix,
        scale: f64,
    ) -> Result<(Vec<f64>, Vec<LayerGrads>)> {
        let x = self.stack(features, actions)?;
        let (q, caches) = self.net.forward_batch(&x)?;
        let n = q.rows() as f64;
        let upstream = Matrix::new(q.rows(), 1, vec![scale / n; q.rows()])?;
        let mut grads = self.net.zero_grads();
        self.net
            .backward_batch(&caches, &upstream, Some(&mut grads), false)?;
        Ok((q.into_data(), grads))
    }

    /// Bootstrap targets `R + γ·Q(s′, a′; target)`, with the bootstrap dropped
    /// on terminal rows.
    pub fn td_targets(&self, target: &TargetCritic, batch: &TransitionBatch) -> Result<Vec<f64>> {
        let next_q = target
            .critic
            .q_batch(&batch.next_features, &batch.next_actions)?;
        Ok(batch
            .rewards
            .iter()
            .zip(&next_q)
            .zip(&batch.terminal)
            .map(|((r, q), term)| if *term { *r } else { r + self.gamma * q })
            .collect())
    }

    /// Batch-mean TD error `δ = mean(R + γ·Q(s′,a′; target) − Q(s,a))`.
    pub fn td_error(&self, target: &TargetCritic, batch: &TransitionBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        let targets = self.td_targets(target, batch)?;
        let q = self.q_batch(&batch.features, &batch.actions)?;
        let sum: f64 = targets.iter().zip(&q).map(|(t, q)| t - q).sum();
        check_finite(sum / batch.len() as f64)
    }

    /// Semi-gradient step: Adam descends `−δ·∇ mean Q(s,a)`, moving Q toward the
    /// held-fixed targets.
    pub fn critic_update(&mut self, delta: f64, batch: &TransitionBatch) -> Result<()> {
        if !delta.is_finite() {
            return Err(Error::NonFinite("TD error"));
        }
        if batch.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        let (_, grads) = self.scaled_mean_q_gradient(&batch.features, &batch.actions, -delta)?;
        self.opt.step(&mut self.net, &grads)
    }

    /// [`Critic::td_error`] followed by [`Critic::critic_update`] with a single
    /// forward pass; returns δ.
    pub fn td_update(&mut self, target: &TargetCritic, batch: &TransitionBatch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("critic batch"));
        }
        let targets = self.td_targets(target, batch)?;
        let x = self.stack(&batch.features, &batch.actions)?;
        let (q, caches) = self.net.forward_batch(&x)?;
        let n = batch.len() as f64;
        let delta = check_finite(
            targets
                .iter()
                .zip(q.data())
                .map(|(t, q)| t - q)
                .sum::<f64>()
                / n,
        )?;
        let upstream = Matrix::new(q.rows(), 1, vec![-delta / n; q.rows()])?;
        let mut grads = self.net.zero_grads();
        self.net
            .backward_batch(&caches, &upstream, Some(&mut grads), false)?;
        self.opt.step(&mut self.net, &grads)?;
        Ok(delta)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.usize(self.feature_dim);
        w.f64(self.gamma);
        crate::checkpoint::write_mlp(w, &self.net);
        crate::checkpoint::write_optimizer(w, &self.opt);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let feature_dim = r.usize()?;
        let gamma = r.f64()?;
        let net = crate::checkpoint::read_mlp(r)?;
        let opt = crate::checkpoint::read_optimizer(r)?;
        Ok(Self {
            net,
            opt,
            feature_dim,
            gamma,
        })
    }
}

fn check_finite(x: f64) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite("TD error"))
    }
}

/// Rolling mean of the last `capacity` TD-error magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaWindow {
    capacity: usize,
    values: VecDeque<f64>,
}

impl DeltaWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("delta window", "capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
        })
    }

    /// Restores a window from its retained magnitudes, oldest first.
    pub fn from_values(capacity: usize, values: Vec<f64>) -> Result<Self> {
        let mut w = Self::new(capacity)?;
        if values.len() > capacity || values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("delta window", "bad retained values"));
        }
        w.values = values.into();
        Ok(w)
    }

    /// Records `|delta|` and returns the updated mean.
    pub fn push(&mut self, delta: f64) -> f64 {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(delta.abs());
        self.mean().expect("non-empty after push")
    }

    pub fn mean(&self) -> Option<f64> {
        if self.values.is_empty() {
            None
        } else {
            Some(self.values.iter().sum::<f64>() / self.values.len() as f64)
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

/// Lagging copy of a critic.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCritic {
    critic: Critic,
    beta: f64,
}

impl TargetCritic {
    pub fn new(current: &Critic, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::invalid(
                "beta",
                format!("must lie in [0, 1], got {beta}"),
            ));
        }
        Ok(Self {
            critic: current.clone(),
            beta,
        })
    }

    pub fn critic(&self) -> &Critic {
        &self.critic
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `φ̃ ← β·φ̃ + (1 − β)·φ`.
    pub fn soft_update(&mut self, current: &Critic) -> Result<()> {
        self.critic.net.blend_from(&current.net, self.beta)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.f64(self.beta);
        self.critic.write(w);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        let beta = r.f64()?;
        Ok(Self {
            critic: Critic::read(r)?,
            beta,
        })
    }
}
