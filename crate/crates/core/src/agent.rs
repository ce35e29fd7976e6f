//! Identity agent: a policy over {Ascend, Unchanged, Descend} conditioned on
//! an id's frequency and current position.
//!
//! The frequency enters through a learned embedding of `⌊log2 F⌋` (clamped to
//! the last bucket), concatenated with a one-hot of the position in
//! `[1, k+1]`, then a tanh MLP and a softmax head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{
    read_matrix, read_mlp, read_optimizer, write_matrix, write_mlp, write_optimizer, Reader, Writer,
};
use crate::critic::{Critic, ACTION_DIM};
use crate::embedding::{read_adam_state, write_adam_state, Action};
use crate::error::{check_dim, Error, Result};
use crate::nn::init::kaiming_matrix;
use crate::nn::loss::softmax_unchecked;
use crate::nn::{
    softmax_backward, Activation, AdamConfig, AdamState, LayerGrads, Matrix, Mlp, MlpCache,
    MlpOptimizer,
};

pub const FREQ_BUCKETS: usize = 32;
pub const FREQ_EMBED_DIM: usize = 32;

/// `⌊log2 frequency⌋`, clamped into `[0, buckets)`.
pub fn frequency_bucket(frequency: u64, buckets: usize) -> usize {
    let b = if frequency <= 1 {
        0
    } else {
        frequency.ilog2() as usize
    };
    b.min(buckets.saturating_sub(1))
}

/// What an agent observes about one id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentState {
    pub frequency: u64,
    pub position: usize,
}

impl AgentState {
    pub fn new(frequency: u64, position: usize) -> Self {
        Self {
            frequency,
            position,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorConfig {
    /// Shared levels of the field this agent serves.
    pub k: usize,
    pub freq_dim: usize,
    pub buckets: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamConfig,
    /// Removes Descend from the action set.
    pub mask_descend: bool,
}

impl ActorConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            freq_dim: FREQ_EMBED_DIM,
            buckets: FREQ_BUCKETS,
            hidden: vec![512],
            adam: AdamConfig::with_lr(1e-4),
            mask_descend: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMode {
    Sample,
    Argmax,
}

/// Picks an action from a probability vector ordered (Ascend, Unchanged, Descend).
///
/// `Argmax` breaks ties toward the earlier action.
pub fn select_action<R: Rng + ?Sized>(
    probs: &[f64],
    mode: SelectMode,
    rng: &mut R,
) -> Result<Action> {
    check_dim("action probabilities", ACTION_DIM, probs.len())?;
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::invalid(
            "probs",
            format!("not a distribution: {probs:?}"),
        ));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("probs", format!("sum to {total}, not 1")));
    }
    let index = match mode {
        SelectMode::Argmax => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave u just above the running sum; fall back to the
            // last action with positive mass.
            chosen.unwrap_or_else(|| probs.iter().rposition(|p| *p > 0.0).unwrap_or(0))
        }
    };
    Ok(Action::from_index(index).expect("index below ACTION_DIM"))
}

/// One REINFORCE sample. `weight` scales the sample's contribution and stays
/// at 1 for on-policy data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub state: AgentState,
    pub action: Action,
    pub reward: f64,
    pub weight: f64,
}

impl PolicySample {
    pub fn new(state: AgentState, action: Action, reward: f64) -> Self {
        Self {
            state,
            action,
            reward,
            weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorGrads {
    pub freq_embedding: Matrix,
    pub layers: Vec<LayerGrads>,
}

impl ActorGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.freq_embedding.data().to_vec();
        for l in &self.layers {
            out.extend_from_slice(l.weights.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.flatten().iter().all(|g| *g == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    k: usize,
    mask_descend: bool,
    freq_embedding: Matrix,
    mlp: Mlp,
    emb_opt: AdamState,
    mlp_opt: MlpOptimizer,
}

struct ForwardPass {
    caches: MlpCache,
    probs: Matrix,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(config: &ActorConfig, rng: &mut R) -> Result<Self> {
        if config.freq_dim == 0 || config.buckets == 0 {
            return Err(Error::invalid(
                "actor",
                "frequency embedding must be non-empty",
            ));
        }
        config.adam.validate()?;
        let freq_embedding = kaiming_matrix(config.buckets, config.freq_dim, rng)?;
        let mut dims = vec![config.freq_dim + config.k + 1];
        dims.extend(&config.hidden);
        dims.push(ACTION_DIM);
        let mlp = Mlp::kaiming(&dims, Activation::Tanh, Activation::Identity, rng)?;
        let emb_opt = AdamState::new(freq_embedding.data().len(), config.adam);
        let mlp_opt = MlpOptimizer::new(&mlp, config.adam);
        Ok(Self {
            k: config.k,
            mask_descend: config.mask_descend,
            freq_embedding,
            mlp,
            emb_opt,
            mlp_opt,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn masks_descend(&self) -> bool {
        self.mask_descend
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn buckets(&self) -> usize {
        self.freq_embedding.rows()
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.mlp
    }

    pub fn freq_embedding(&self) -> &Matrix {
        &self.freq_embedding
    }

    pub fn freq_embedding_mut(&mut self) -> &mut Matrix {
        &mut self.freq_embedding
    }

    fn inputs(&self, states: &[AgentState]) -> Result<Matrix> {
        let fd = self.freq_embedding.cols();
        let mut x = Matrix::zeros(states.len(), self.input_dim());
        for (r, s) in states.iter().enumerate() {
            if s.position == 0 || s.position > self.k + 1 {
                return Err(Error::Position {
                    position: s.position,
                    max: self.k + 1,
                });
            }
            if s.frequency == 0 {
                return Err(Error::invalid("frequency", "must be >= 1"));
            }
            let bucket = frequency_bucket(s.frequency, self.buckets());
            let row = x.row_mut(r);
            row[..fd].copy_from_slice(self.freq_embedding.row(bucket));
            row[fd + s.position - 1] = 1.0;
        }
        Ok(x)
    }

    fn probs_from_logits(&self, logits: &Matrix) -> Matrix {
        let mut probs = Matrix::zeros(logits.rows(), ACTION_DIM);
        for r in 0..logits.rows() {
            let mut z = [0.0; ACTION_DIM];
            z.copy_from_slice(logits.row(r));
            if self.mask_descend {
                z[Action::Descend.index()] = f64::NEG_INFINITY;
            }
            probs.row_mut(r).copy_from_slice(&softmax_unchecked(&z));
        }
        probs
    }

    /// Action probabilities for one state, ordered (Ascend, Unchanged, Descend).
    pub fn probs(&self, state: AgentState) -> Result<[f64; ACTION_DIM]> {
        Ok(self.probs_batch(&[state])?[0])
    }

    pub fn probs_batch(&self, states: &[AgentState]) -> Result<Vec<[f64; ACTION_DIM]>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let x = self.inputs(states)?;
        let logits = self.mlp.infer_batch(&x)?;
        let probs = self.probs_from_logits(&logits);
        Ok((0..probs.rows())
            .map(|r| {
                let mut p = [0.0; ACTION_DIM];
                p.copy_from_slice(probs.row(r));
                p
            })
            .collect())
    }

    fn forward(&self, states: &[AgentState]) -> Result<ForwardPass> {
        let x = self.inputs(states)?;
        let (logits, caches) = self.mlp.forward_batch(&x)?;
        let probs = self.probs_from_logits(&logits);
        Ok(ForwardPass { caches, probs })
    }

    /// Gradients of a loss whose derivative with respect to the logits is `dlogits`.
    fn backprop(
        &self,
        states: &[AgentState],
        pass: &ForwardPass,
        dlogits: &Matrix,
    ) -> Result<ActorGrads> {
        let mut layers = self.mlp.zero_grads();
        let dx = self
            .mlp
            .backward_batch(&pass.caches, dlogits, Some(&mut layers), true)?
            .expect("input gradient requested");
        let fd = self.freq_embedding.cols();
        let mut freq_embedding = Matrix::zeros(self.freq_embedding.rows(), fd);
        for (r, s) in states.iter().enumerate() {
            let bucket = frequency_bucket(s.frequency, self.buckets());
            for (g, d) in freq_embedding
                .row_mut(bucket)
                .iter_mut()
                .zip(&dx.row(r)[..fd])
            {
                *g += d;
            }
        }
        Ok(ActorGrads {
            freq_embedding,
            layers,
        })
    }

    fn probs_to_logit_grads(&self, probs: &Matrix, dprobs: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(probs.rows(), ACTION_DIM);
        for r in 0..probs.rows() {
            out.row_mut(r)
                .copy_from_slice(&softmax_backward(probs.row(r), dprobs.row(r)));
        }
        out
    }

    /// Gradient of the REINFORCE surrogate loss `−(1/N)·Σ w·R·log π(a|s)`;
    /// descending it ascends the estimated expected reward.
    pub fn reinforce_gradient(&self, batch: &[PolicySample]) -> Result<ActorGrads> {
        if batch.is_empty() {
            return Err(Error::Empty("reinforce batch"));
        }
        if batch
            .iter()
            .any(|s| !s.reward.is_finite() || !s.weight.is_finite())
        {
            return Err(Error::NonFinite("reinforce reward"));
        }
        let states: Vec<AgentState> = batch.iter().map(|s| s.state).collect();
        let pass = self.forward(&states)?;
        let n = batch.len() as f64;
        // ∂ log π(a) / ∂z = onehot(a) − π
        let mut dlogits = Matrix::zeros(batch.len(), ACTION_DIM);
        for (r, s) in batch.iter().enumerate() {
            let scale = -s.weight * s.reward / n;
            let p = pass.probs.row(r);
            if p[s.action.index()] == 0.0 {
                return Err(Error::invalid(
                    "action",
                    format!("{:?} has zero probability", s.action),
                ));
            }
            for (i, (g, pi)) in dlogits.row_mut(r).iter_mut().zip(p).enumerate() {
                let onehot = if i == s.action.index() { 1.0 } else { 0.0 };
                *g = scale * (onehot - pi);
            }
        }
        self.backprop(&states, &pass, &dlogits)
    }

    /// One Adam step along the REINFORCE gradient estimate.
    pub fn reinforce_update(&mut self, batch: &[PolicySample]) -> Result<()> {
        let grads = self.reinforce_gradient(batch)?;
        self.apply(&grads)
    }

    /// `J = −(1/b)·Σ Q(s, π(s))` and its gradient with the critic held fixed.
    pub fn critic_guided_gradient(
        &self,
        states: &[AgentState],
        critic_features: &Matrix,
        critic: &Critic,
    ) -> Result<(f64, ActorGrads)> {
        if states.is_empty() {
            return Err(Error::Empty("critic-guided batch"));
        }
        check_dim("critic-guided rows", states.len(), critic_features.rows())?;
        let pass = self.forward(states)?;
        let (q, dq_da) = critic.action_gradient(critic_features, &pass.probs)?;
        let n = states.len() as f64;
        let objective = -q.iter().sum::<f64>() / n;
        let mut dprobs = dq_da;
        dprobs.data_mut().iter_mut().for_each(|g| *g *= -1.0 / n);
        let dlogits = self.probs_to_logit_grads(&pass.probs, &dprobs);
        Ok((objective, self.backprop(states, &pass, &dlogits)?))
    }

    /// One Adam step descending `J`; returns `J` before the step.
    pub fn critic_guided_update(
        &mut self,
        states: &[AgentState],
        critic_features: &Matrix,
        critic: &Critic,
    ) -> Result<f64> {
        let (objective, grads) = self.critic_guided_gradient(states, critic_features, critic)?;
        self.apply(&grads)?;
        Ok(objective)
    }

    pub fn apply(&mut self, grads: &ActorGrads) -> Result<()> {
        self.emb_opt
            .step(self.freq_embedding.data_mut(), grads.freq_embedding.data())?;
        self.mlp_opt.step(&mut self.mlp, &grads.layers)
    }

    /// `self ← keep · self + (1 − keep) · other`.
    pub fn blend_from(&mut self, other: &Actor, keep: f64) -> Result<()> {
        check_dim(
            "blend embedding",
            self.freq_embedding.data().len(),
            other.freq_embedding.data().len(),
        )?;
        let mix = 1.0 - keep;
        for (t, c) in self
            .freq_embedding
            .data_mut()
            .iter_mut()
            .zip(other.freq_embedding.data())
        {
            *t = keep * *t + mix * c;
        }
        self.mlp.blend_from(&other.mlp, keep)
    }

    /// All trainable parameters in the order used by [`ActorGrads::flatten`].
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = self.freq_embedding.data().to_vec();
        out.extend(self.mlp.params_iter());
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("actor params", self.flat_params().len(), params.len())?;
        let (emb, rest) = params.split_at(self.freq_embedding.data().len());
        self.freq_embedding.data_mut().copy_from_slice(emb);
        self.mlp.set_flat_params(rest)
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.usize(self.k);
        w.bool(self.mask_descend);
        write_matrix(w, &self.freq_embedding);
        write_mlp(w, &self.mlp);
        write_adam_state(w, &self.emb_opt);
        write_optimizer(w, &self.mlp_opt);
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self> {
        Ok(Self {
            k: r.usize()?,
            mask_descend: r.bool()?,
            freq_embedding: read_matrix(r)?,
            mlp: read_mlp(r)?,
            emb_opt: read_adam_state(r)?,
            mlp_opt: read_optimizer(r)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::critic::CriticConfig;
    use crate::nn::gradcheck::{numeric_gradient, relative_error};

    fn small_config(k: usize) -> ActorConfig {
        ActorConfig {
            k,
            freq_dim: 4,
            buckets: 8,
            hidden: vec![6],
            adam: AdamConfig::with_lr(1e-3),
            mask_descend: false,
        }
    }

    fn actor(seed: u64, k: usize) -> Actor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Actor::new(&small_config(k), &mut rng).unwrap()
    }

    #[test]
    fn bucketization() {
        assert_eq!(frequency_bucket(1, 32), 0);
        assert_eq!(frequency_bucket(7, 32), 2);
        assert_eq!(frequency_bucket(8, 32), 3);
        assert_eq!(frequency_bucket(9, 32), 3);
        assert_eq!(frequency_bucket(u64::MAX, 32), 31);
    }

    #[test]
    fn default_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Actor::new(&ActorConfig::new(2), &mut rng).unwrap();
        assert_eq!(a.input_dim(), 32 + 3);
        assert_eq!(a.mlp().layers()[0].out_dim(), 512);
        assert_eq!(a.mlp().out_dim(), 3);
        assert_eq!(a.freq_embedding().rows(), 32);
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let mut a = actor(1, 2);
        a.set_flat_params(&vec![0.0; a.flat_params().len()])
            .unwrap();
        for s in [AgentState::new(1, 1), AgentState::new(100, 3)] {
            for p in a.probs(s).unwrap() {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn probabilities_sum_to_one_and_positions_are_checked() {
        let a = actor(2, 2);
        for f in [1, 5, 40, 1000] {
            for p in 1..=3 {
                let probs = a.probs(AgentState::new(f, p)).unwrap();
                assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(matches!(
            a.probs(AgentState::new(3, 4)),
            Err(Error::Position { .. })
        ));
        assert!(a.probs(AgentState::new(3, 0)).is_err());
    }

    #[test]
    fn same_bucket_frequencies_share_probabilities() {
        let a = actor(3, 2);
        let p8 = a.probs(AgentState::new(8, 2)).unwrap();
        let p9 = a.probs(AgentState::new(9, 2)).unwrap();
        let p7 = a.probs(AgentState::new(7, 2)).unwrap();
        assert_eq!(p8, p9);
        assert_ne!(p7, p9);
    }

    #[test]
    fn masked_descend_has_zero_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cfg = small_config(2);
        cfg.mask_descend = true;
        let a = Actor::new(&cfg, &mut rng).unwrap();
        let p = a.probs(AgentState::new(4, 3)).unwrap();
        assert_eq!(p[2], 0.0);
        assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn select_action_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for mode in [SelectMode::Sample, SelectMode::Argmax] {
            assert_eq!(
                select_action(&[1.0, 0.0, 0.0], mode, &mut rng).unwrap(),
                Action::Ascend
            );
        }
        let third = 1.0 / 3.0;
        assert_eq!(
            select_action(&[third, third, third], SelectMode::Argmax, &mut rng).unwrap(),
            Action::Ascend
        );
        assert!(select_action(&[0.5, 0.2, 0.2], SelectMode::Sample, &mut rng).is_err());
        assert!(select_action(&[0.5, 0.5], SelectMode::Sample, &mut rng).is_err());
        assert!(select_action(&[1.5, -0.5, 0.0], SelectMode::Sample, &mut rng).is_err());
    }

    #[test]
    fn sampling_frequencies_match_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let probs = [0.2, 0.5, 0.3];
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[select_action(&probs, SelectMode::Sample, &mut rng)
                .unwrap()
                .index()] += 1;
        }
        for (c, p) in counts.iter().zip(probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.01);
        }
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let a = actor(7, 2);
        let p = a.probs(AgentState::new(12, 2)).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| select_action(&p, SelectMode::Sample, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn zero_rewards_leave_parameters_unchanged() {
        let mut a = actor(8, 2);
        let before = a.flat_params();
        let batch: Vec<_> = (1..6)
            .map(|f| PolicySample::new(AgentState::new(f, 1), Action::Ascend, 0.0))
            .collect();
        a.reinforce_update(&batch).unwrap();
        assert_eq!(a.flat_params(), before);
        assert!(a.reinforce_update(&[]).is_err());
    }

    #[test]
    fn opposite_rewards_give_opposite_deltas() {
        let base = actor(9, 2);
        let s = AgentState::new(5, 2);
        let delta = |reward: f64| {
            let mut a = base.clone();
            a.reinforce_update(&[PolicySample::new(s, Action::Unchanged, reward)])
                .unwrap();
            a.flat_params()
                .iter()
                .zip(base.flat_params())
                .map(|(x, y)| x - y)
                .collect::<Vec<_>>()
        };
        let grad = |reward: f64| {
            base.reinforce_gradient(&[PolicySample::new(s, Action::Unchanged, reward)])
                .unwrap()
                .flatten()
        };
        for (u, d) in grad(1.0).iter().zip(grad(-1.0)) {
            assert_eq!(*u, -d);
        }
        let up = delta(1.0);
        let down = delta(-1.0);
        assert!(up.iter().any(|d| *d != 0.0));
        for (u, d) in up.iter().zip(&down) {
            // Parameter differences carry one rounding of the base value.
            assert!((u + d).abs() <= 1e-15 * (1.0 + u.abs()) + 1e-17);
        }
    }

    #[test]
    fn rewarded_action_gains_probability() {
        let mut a = actor(10, 2);
        let s = AgentState::new(20, 2);
        let mut last = a.probs(s).unwrap()[0];
        for _ in 0..200 {
            a.reinforce_update(&[PolicySample::new(s, Action::Ascend, 1.0)])
                .unwrap();
            let p = a.probs(s).unwrap()[0];
            assert!(p > last, "P(Ascend) fell from {last} to {p}");
            last = p;
        }
    }

    #[test]
    fn reinforce_gradient_matches_finite_differences() {
        let a = actor(11, 2);
        let batch = vec![
            PolicySample::new(AgentState::new(3, 1), Action::Ascend, 0.7),
            PolicySample::new(AgentState::new(17, 3), Action::Descend, -0.4),
            PolicySample::new(AgentState::new(2, 2), Action::Unchanged, 1.3),
        ];
        let analytic = a.reinforce_gradient(&batch).unwrap().flatten();
        let numeric = numeric_gradient(
            |p| {
                let mut b = a.clone();
                b.set_flat_params(p).unwrap();
                -batch
                    .iter()
                    .map(|s| s.reward * b.probs(s.state).unwrap()[s.action.index()].ln())
                    .sum::<f64>()
                    / batch.len() as f64
            },
            &a.flat_params(),
            1e-5,
        );
        assert!(relative_error(&analytic, &numeric) < 1e-4);
    }

    fn small_critic(seed: u64, feature_dim: usize) -> Critic {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CriticConfig {
            feature_dim,
            embed_dim: 6,
            bottom: vec![8, 6],
            tower: vec![5, 4],
            gamma: 0.95,
            adam: AdamConfig::with_lr(1e-3),
        };
        Critic::new(&cfg, &mut rng).unwrap()
    }

    #[test]
    fn critic_guided_gradient_matches_finite_differences() {
        let a = actor(12, 2);
        let critic = small_critic(13, 3);
        let states = [
            AgentState::new(4, 1),
            AgentState::new(33, 3),
            AgentState::new(1, 2),
        ];
        let feats = Matrix::new(3, 3, vec![0.2, -0.1, 0.5, 1.0, 0.0, -0.3, 0.4, 0.4, 0.1]).unwrap();
        let (_, grads) = a.critic_guided_gradient(&states, &feats, &critic).unwrap();
        let numeric = numeric_gradient(
            |p| {
                let mut b = a.clone();
                b.set_flat_params(p).unwrap();
                b.critic_guided_gradient(&states, &feats, &critic)
                    .unwrap()
                    .0
            },
            &a.flat_params(),
            1e-5,
        );
        assert!(relative_error(&grads.flatten(), &numeric) < 1e-4);
    }

    /// A critic whose output is exactly `P(Ascend)`: identity layers with the
    /// action's first coordinate routed straight through.
    fn ascend_probe_critic(feature_dim: usize) -> Critic {
        let mut c = small_critic(14, feature_dim);
        let net = c.net_mut();
        for (i, layer) in net.layers_mut().iter_mut().enumerate() {
            layer.weights_mut().fill(0.0);
            layer.bias_mut().iter_mut().for_each(|b| *b = 0.0);
            if i == 0 {
                layer.weights_mut().set(0, feature_dim, 1.0);
            } else {
                layer.weights_mut().set(0, 0, 1.0);
            }
        }
        c
    }

    #[test]
    fn critic_guided_step_follows_linear_probe() {
        let mut a = actor(15, 2);
        let critic = ascend_probe_critic(2);
        let states = [AgentState::new(6, 2)];
        let feats = Matrix::new(1, 2, vec![0.3, 0.7]).unwrap();
        let q = critic
            .q_value(feats.row(0), &a.probs(states[0]).unwrap())
            .unwrap();
        assert!((q - a.probs(states[0]).unwrap()[0]).abs() < 1e-12);
        let before = a.probs(states[0]).unwrap()[0];
        a.critic_guided_update(&states, &feats, &critic).unwrap();
        assert!(a.probs(states[0]).unwrap()[0] > before);
    }

    #[test]
    fn action_independent_critic_gives_zero_gradient() {
        let a = actor(16, 2);
        let mut critic = ascend_probe_critic(2);
        // Route a feature instead of the action: Q no longer depends on a.
        let first = &mut critic.net_mut().layers_mut()[0];
        first.weights_mut().fill(0.0);
        first.weights_mut().set(0, 0, 1.0);
        let states = [AgentState::new(6, 2), AgentState::new(2, 1)];
        let feats = Matrix::new(2, 2, vec![0.3, 0.7, 0.1, 0.2]).unwrap();
        let (_, g) = a.critic_guided_gradient(&states, &feats, &critic).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn empirical_reinforce_mean_matches_exact_expectation() {
        let a = actor(17, 1);
        let s = AgentState::new(10, 1);
        let probs = a.probs(s).unwrap();
        let rewards = [0.8, -0.3, 0.5];
        let exact: Vec<f64> = {
            let mut acc = vec![0.0; a.flat_params().len()];
            for action in Action::ALL {
                let g = a
                    .reinforce_gradient(&[PolicySample::new(s, action, rewards[action.index()])])
                    .unwrap()
                    .flatten();
                for (x, gi) in acc.iter_mut().zip(g) {
                    *x += probs[action.index()] * gi;
                }
            }
            acc
        };
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let n = 10_000;
        let batch: Vec<_> = (0..n)
            .map(|_| {
                let act = select_action(&probs, SelectMode::Sample, &mut rng).unwrap();
                PolicySample::new(s, act, rewards[act.index()])
            })
            .collect();
        let empirical = a.reinforce_gradient(&batch).unwrap().flatten();
        assert!(relative_error(&empirical, &exact) < 0.05);
    }

    #[test]
    fn argmax_is_invariant_to_logit_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = rng.gen_range(0.01..50.0);
            let p = crate::nn::softmax(&z).unwrap();
            let zs: Vec<f64> = z.iter().map(|x| x * c).collect();
            let ps = crate::nn::softmax(&zs).unwrap();
            assert_eq!(
                select_action(&p, SelectMode::Argmax, &mut rng).unwrap(),
                select_action(&ps, SelectMode::Argmax, &mut rng).unwrap()
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let a = actor(20, 2);
        let mut w = Writer::new();
        a.write(&mut w);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes).unwrap();
        assert_eq!(Actor::read(&mut r).unwrap(), a);
        r.finish().unwrap();
    }
}
