//! The streaming training loop.
//!
//! Each iteration takes one chronological batch. When a previous batch is
//! buffered it serves as the validation batch: every distinct id in it samples
//! an action, the resulting positions are evaluated without being committed,
//! and the per-sample losses feed the rewards, the critics' TD updates and
//! one actor update. The new batch then has its positions set by argmax
//! actions and trains the recommendation model. Targets are soft-updated last.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{frequency_bucket, select_action, Actor, ActorConfig, AgentState, PolicySample, SelectMode};
use crate::baselines::LffPolicy;
use crate::checkpoint::{read_rng, write_rng, Reader, Writer};
use crate::critic::{Critic, CriticConfig, DeltaWindow, TargetCritic, TransitionBatch, ACTION_DIM};
use crate::data::{split_stream, Interaction};
use crate::embedding::{Action, EmbeddingStore, Field, IdKey, ParamReport, Slot, StoreConfig};
use crate::error::{Error, Result};
use crate::metrics::{FrequencyRecord, MetricAccumulator, Metrics};
use crate::model::{predicted_class, RecModel, RecModelConfig};
use crate::nn::{AdamConfig, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// Actor-critic agent with the two-phase update.
    #[serde(rename = "autoassign+")]
    AutoAssignPlus,
    /// Agent trained by REINFORCE only.
    #[serde(rename = "autoassign")]
    AutoAssign,
    /// Every id owns a unique embedding from its first sighting.
    #[serde(rename = "origin")]
    Origin,
    /// One shared embedding per field until the frequency exceeds a threshold.
    #[serde(rename = "lff")]
    Lff,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::AutoAssignPlus, Mode::AutoAssign, Mode::Origin, Mode::Lff];

    pub fn name(self) -> &'static str {
        match self {
            Mode::AutoAssignPlus => "autoassign+",
            Mode::AutoAssign => "autoassign",
            Mode::Origin => "origin",
            Mode::Lff => "lff",
        }
    }

    pub fn uses_agent(self) -> bool {
        matches!(self, Mode::AutoAssignPlus | Mode::AutoAssign)
    }

    pub fn uses_critic(self) -> bool {
        self == Mode::AutoAssignPlus
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "autoassign+" | "autoassign-plus" | "autoassignplus" => Ok(Mode::AutoAssignPlus),
            "autoassign" => Ok(Mode::AutoAssign),
            "origin" => Ok(Mode::Origin),
            "lff" => Ok(Mode::Lff),
            other => Err(Error::invalid(
                "mode",
                format!("unknown mode {other:?}; expected autoassign+, autoassign, origin or lff"),
            )),
        }
    }
}

/// Every knob of one experiment. Serialized field-for-field as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub mode: Mode,
    pub batch_size: usize,
    /// Loss-history length T used by the reward.
    pub history: usize,
    pub gamma: f64,
    /// Soft-update keep rate for the target critic and target actor.
    pub beta: f64,
    /// Phase switch threshold on the smoothed |δ|.
    pub epsilon: f64,
    /// Batches averaged into the smoothed |δ|.
    pub delta_window: usize,
    /// Initial batches trained with every id pinned to shared level 1.
    pub warmup_batches: usize,
    pub k_user: usize,
    pub k_item: usize,
    pub dim: usize,
    pub rec_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub freq_dim: usize,
    pub critic_embed: usize,
    pub critic_bottom: Vec<usize>,
    pub critic_tower: Vec<usize>,
    pub agent_lr: f64,
    pub critic_lr: f64,
    pub rec_lr: f64,
    pub seed: u64,
    /// Ablation: Descend is masked out of the action set.
    pub no_descend: bool,
    /// Ablation: one shared level per field.
    pub single_shared: bool,
    pub lff: LffPolicy,
    pub train_fraction: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            mode: Mode::AutoAssignPlus,
            batch_size: 500,
            history: 30,
            gamma: 0.95,
            beta: 0.2,
            epsilon: 0.01,
            delta_window: 10,
            warmup_batches: 50,
            k_user: 1,
            k_item: 2,
            dim: 128,
            rec_hidden: vec![512, 512],
            actor_hidden: vec![512],
            freq_dim: 32,
            critic_embed: 128,
            critic_bottom: vec![512, 256],
            critic_tower: vec![128, 64],
            agent_lr: 1e-4,
            critic_lr: 1e-4,
            rec_lr: 1e-3,
            seed: 0,
            no_descend: false,
            single_shared: false,
            lff: LffPolicy::default(),
            train_fraction: 0.8,
        }
    }
}

impl TrainerConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                problems.push(msg);
            }
        };
        let positive = |x: f64| x > 0.0 && x.is_finite();
        check(self.batch_size >= 1, "batch_size: must be >= 1".into());
        check(self.history >= 1, "history: must be >= 1".into());
        check((0.0..1.0).contains(&self.gamma), format!("gamma: {} not in [0, 1)", self.gamma));
        check((0.0..=1.0).contains(&self.beta), format!("beta: {} not in [0, 1]", self.beta));
        check(positive(self.epsilon), format!("epsilon: {} must be > 0", self.epsilon));
        check(self.delta_window >= 1, "delta_window: must be >= 1".into());
        check(self.dim >= 1, "dim: must be >= 1".into());
        check(self.freq_dim >= 1, "freq_dim: must be >= 1".into());
        check(self.critic_embed >= 1, "critic_embed: must be >= 1".into());
        for (name, lr) in [("agent_lr", self.agent_lr), ("critic_lr", self.critic_lr), ("rec_lr", self.rec_lr)] {
            check(positive(lr), format!("{name}: {lr} must be > 0"));
        }
        for (name, widths) in [
            ("rec_hidden", &self.rec_hidden),
            ("actor_hidden", &self.actor_hidden),
            ("critic_bottom", &self.critic_bottom),
            ("critic_tower", &self.critic_tower),
        ] {
            check(widths.iter().all(|&w| w >= 1), format!("{name}: widths must be >= 1"));
        }
        check(
            self.train_fraction > 0.0 && self.train_fraction < 1.0,
            format!("train_fraction: {} not in (0, 1)", self.train_fraction),
        );
        if self.mode.uses_agent() {
            check(self.k_user >= 1, "k_user: must be >= 1 when an agent assigns positions".into());
            check(self.k_item >= 1, "k_item: must be >= 1 when an agent assigns positions".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Shared levels actually used for `field` under the mode and ablations.
    pub fn effective_k(&self, field: Field) -> usize {
        match self.mode {
            Mode::Origin => 0,
            Mode::Lff => 1,
            _ if self.single_shared => 1,
            _ => match field {
                Field::User => self.k_user,
                Field::Item => self.k_item,
            },
        }
    }

    fn critic_feature_dim(&self) -> usize {
        2 * crate::agent::FREQ_BUCKETS + self.effective_k(Field::User) + self.effective_k(Field::Item) + 2
    }
}

/// Which agent update an iteration performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentPhase {
    /// The mode has no agent.
    Inactive,
    /// Still inside the shared-embedding warmup.
    Warmup,
    /// No validation batch buffered yet.
    NoValidation,
    CriticGuided,
    Reinforce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamPhase {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchEval {
    pub count: usize,
    pub mse: f64,
    pub accuracy: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub iteration: u64,
    pub phase: StreamPhase,
    pub agent_phase: AgentPhase,
    pub delta_user: Option<f64>,
    pub delta_item: Option<f64>,
    pub smoothed_delta: Option<f64>,
    pub train_loss: f64,
    pub eval: Option<BatchEval>,
    pub live_unique_user: usize,
    pub live_unique_item: usize,
    pub ascended: usize,
    pub descended: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<BatchRecord>,
}

impl TrainingLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { records })
    }

    pub fn count_phase(&self, phase: AgentPhase) -> usize {
        self.records.iter().filter(|r| r.agent_phase == phase).count()
    }

    /// Iteration of the first REINFORCE update that follows a critic-guided one.
    pub fn first_switch_to_reinforce(&self) -> Option<u64> {
        self.records
            .windows(2)
            .find(|w| w[0].agent_phase == AgentPhase::CriticGuided && w[1].agent_phase == AgentPhase::Reinforce)
            .map(|w| w[1].iteration)
    }
}

/// One prequential prediction with the frequencies its ids had beforehand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub user: u64,
    pub item: u64,
    pub label: u8,
    pub prediction: f64,
    pub user_frequency: u64,
    pub item_frequency: u64,
}

impl PredictionRow {
    pub fn frequency_record(&self) -> FrequencyRecord {
        FrequencyRecord {
            user_frequency: self.user_frequency,
            item_frequency: self.item_frequency,
            correct: predicted_class(self.prediction) == f64::from(self.label),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestOutcome {
    pub log: TrainingLog,
    pub metrics: Metrics,
    pub predictions: Vec<PredictionRow>,
}

#[derive(Debug, Clone, PartialEq)]
struct FieldAgent {
    actor: Actor,
    target_actor: Actor,
    critic: Option<(Critic, TargetCritic)>,
    deltas: DeltaWindow,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn key(x: &Interaction, field: Field) -> IdKey {
    match field {
        Field::User => x.user_key(),
        Field::Item => x.item_key(),
    }
}

fn distinct_ids(batch: &[Interaction], field: Field) -> Vec<IdKey> {
    let mut seen = HashSet::new();
    batch
        .iter()
        .map(|x| key(x, field))
        .filter(|id| seen.insert(*id))
        .collect()
}

/// What the agent phase of one iteration did.
struct AgentOutcome {
    phase: AgentPhase,
    deltas: [Option<f64>; 2],
    smoothed: Option<f64>,
}

/// The full training state: store, model, agents and loop bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    config: TrainerConfig,
    store: EmbeddingStore,
    model: RecModel,
    agents: Option<Vec<FieldAgent>>,
    rng: ChaCha8Rng,
    iteration: u64,
    trained_batches: u64,
    interactions_seen: u64,
    last_timestamp: Option<i64>,
    validation: Option<Vec<Interaction>>,
}

impl Engine {
    pub fn new(config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let store = EmbeddingStore::new(StoreConfig {
            dim: config.dim,
            k_user: config.effective_k(Field::User),
            k_item: config.effective_k(Field::Item),
            history_capacity: config.history,
            adam: AdamConfig::with_lr(config.rec_lr),
            seed: config.seed,
        })?;
        let model = RecModel::new(
            &RecModelConfig {
                hidden: config.rec_hidden.clone(),
                adam: AdamConfig::with_lr(config.rec_lr),
            },
            config.dim,
            &mut stream_rng(config.seed, 1),
        )?;
        let agents = if config.mode.uses_agent() {
            let mut rng = stream_rng(config.seed, 2);
            let mut agents = Vec::with_capacity(2);
            for field in Field::ALL {
                let actor = Actor::new(
                    &ActorConfig {
                        k: config.effective_k(field),
                        freq_dim: config.freq_dim,
                        buckets: crate::agent::FREQ_BUCKETS,
                        hidden: config.actor_hidden.clone(),
                        adam: AdamConfig::with_lr(config.agent_lr),
                        mask_descend: config.no_descend,
                    },
                    &mut rng,
                )?;
                let critic = if config.mode.uses_critic() {
                    let critic = Critic::new(
                        &CriticConfig {
                            feature_dim: config.critic_feature_dim(),
                            embed_dim: config.critic_embed,
                            bottom: config.critic_bottom.clone(),
                            tower: config.critic_tower.clone(),
                            gamma: config.gamma,
                            adam: AdamConfig::with_lr(config.critic_lr),
                        },
                        &mut rng,
                    )?;
                    let target = TargetCritic::new(&critic, config.beta)?;
                    Some((critic, target))
                } else {
                    None
                };
                agents.push(FieldAgent {
                    target_actor: actor.clone(),
                    actor,
                    critic,
                    deltas: DeltaWindow::new(config.delta_window)?,
                });
            }
            Some(agents)
        } else {
            None
        };
        Ok(Self {
            rng: stream_rng(config.seed, 3),
            config,
            store,
            model,
            agents,
            iteration: 0,
            trained_batches: 0,
            interactions_seen: 0,
            last_timestamp: None,
            validation: None,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    pub fn model(&self) -> &RecModel {
        &self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn has_agents(&self) -> bool {
        self.agents.is_some()
    }

    pub fn actor(&self, field: Field) -> Option<&Actor> {
        self.agents.as_ref().map(|a| &a[field.index()].actor)
    }

    pub fn critic(&self, field: Field) -> Option<&Critic> {
        self.agents
            .as_ref()
            .and_then(|a| a[field.index()].critic.as_ref().map(|(c, _)| c))
    }

    pub fn param_report(&self) -> ParamReport {
        self.store.param_report()
    }

    fn agent_active(&self) -> bool {
        self.trained_batches >= self.config.warmup_batches as u64
    }

    fn agent_state(&self, id: IdKey) -> Result<AgentState> {
        let s = self.store.state(id).ok_or(Error::UnknownId(id))?;
        Ok(AgentState::new(s.frequency, s.position))
    }

    /// One-hot user bucket and position, then one-hot item bucket and position.
    fn critic_features(&self, user: AgentState, item: AgentState) -> Vec<f64> {
        let b = crate::agent::FREQ_BUCKETS;
        let ku = self.store.k(Field::User);
        let mut v = vec![0.0; self.config.critic_feature_dim()];
        v[frequency_bucket(user.frequency, b)] = 1.0;
        v[b + user.position - 1] = 1.0;
        let off = b + ku + 1;
        v[off + frequency_bucket(item.frequency, b)] = 1.0;
        v[off + b + item.position - 1] = 1.0;
        v
    }

    fn check_batch(&self, batch: &[Interaction]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut previous = self.last_timestamp;
        for (i, x) in batch.iter().enumerate() {
            if let Some(p) = previous {
                if x.timestamp < p {
                    return Err(Error::NonChronological {
                        index: self.interactions_seen as usize + i,
                        previous: p,
                        timestamp: x.timestamp,
                    });
                }
            }
            if x.label > 1 {
                return Err(Error::invalid("label", format!("{} not in {{0, 1}}", x.label)));
            }
            previous = Some(x.timestamp);
        }
        Ok(())
    }

    /// Runs one iteration on `batch`. With `evaluate`, predictions are made
    /// and returned before anything is updated.
    pub fn step(&mut self, batch: &[Interaction], evaluate: bool) -> Result<(BatchRecord, Vec<PredictionRow>)> {
        self.check_batch(batch)?;
        let prior: Vec<(u64, u64)> = batch
            .iter()
            .map(|x| {
                let f = |id| self.store.state(id).map_or(0, |s| s.frequency);
                (f(x.user_key()), f(x.item_key()))
            })
            .collect();
        for x in batch {
            self.store.observe(x.user_key());
            self.store.observe(x.item_key());
        }
        let mut predictions = Vec::new();
        let mut eval = None;
        if evaluate {
            let e = self.model.evaluate_batch(&self.store, batch)?;
            eval = Some(BatchEval {
                count: batch.len(),
                mse: e.mse(),
                accuracy: e.accuracy(),
            });
            predictions = batch
                .iter()
                .zip(&prior)
                .zip(&e.predictions)
                .map(|((x, &(uf, itf)), &p)| PredictionRow {
                    user: x.user,
                    item: x.item,
                    label: x.label,
                    prediction: p,
                    user_frequency: uf,
                    item_frequency: itf,
                })
                .collect();
        }

        let outcome = match self.validation.take() {
            _ if self.agents.is_none() => AgentOutcome {
                phase: AgentPhase::Inactive,
                deltas: [None; 2],
                smoothed: None,
            },
            _ if !self.agent_active() => AgentOutcome {
                phase: AgentPhase::Warmup,
                deltas: [None; 2],
                smoothed: None,
            },
            None => AgentOutcome {
                phase: AgentPhase::NoValidation,
                deltas: [None; 2],
                smoothed: None,
            },
            Some(v) => self.agent_phase(&v)?,
        };

        let (ascended, descended) = self.adjust_positions(batch)?;
        let loss = self.model.train_batch(&mut self.store, batch)?;
        for (x, &l) in batch.iter().zip(&loss.per_sample) {
            self.store.record_loss(x.user_key(), l)?;
            self.store.record_loss(x.item_key(), l)?;
        }
        if let Some(agents) = self.agents.as_mut() {
            if matches!(outcome.phase, AgentPhase::CriticGuided | AgentPhase::Reinforce) {
                for a in agents.iter_mut() {
                    a.target_actor.blend_from(&a.actor, self.config.beta)?;
                    if let Some((critic, target)) = a.critic.as_mut() {
                        target.soft_update(critic)?;
                    }
                }
            }
        }
        self.trained_batches += 1;
        if self.agents.is_some() && self.trained_batches == self.config.warmup_batches as u64 {
            for field in Field::ALL {
                self.store.broadcast_first_shared(field);
            }
        }
        self.interactions_seen += batch.len() as u64;
        self.last_timestamp = batch.last().map(|x| x.timestamp);
        self.validation = Some(batch.to_vec());
        let record = BatchRecord {
            iteration: self.iteration,
            phase: if evaluate { StreamPhase::Test } else { StreamPhase::Train },
            agent_phase: outcome.phase,
            delta_user: outcome.deltas[0],
            delta_item: outcome.deltas[1],
            smoothed_delta: outcome.smoothed,
            train_loss: loss.mean,
            eval,
            live_unique_user: self.store.live_unique(Field::User),
            live_unique_item: self.store.live_unique(Field::Item),
            ascended,
            descended,
        };
        self.iteration += 1;
        Ok((record, predictions))
    }

    /// Sets positions for a training batch: argmax actions for agent modes,
    /// the threshold rule for LFF. Returns `(ascended, descended)` counts.
    fn adjust_positions(&mut self, batch: &[Interaction]) -> Result<(usize, usize)> {
        let mut moves = (0, 0);
        let mut tally = |from: usize, to: usize| {
            if to > from {
                moves.0 += 1;
            } else if to < from {
                moves.1 += 1;
            }
        };
        match self.config.mode {
            Mode::Origin => {}
            Mode::Lff => {
                for field in Field::ALL {
                    for id in distinct_ids(batch, field) {
                        let s = self.agent_state(id)?;
                        if crate::baselines::lff_assign(&self.config.lff, id, s.frequency) == crate::baselines::Assignment::Unique
                            && !matches!(self.store.slot(id), Some(Slot::Unique(_)))
                        {
                            let c = self.store.apply_action(id, Action::Ascend)?;
                            tally(c.from, c.to);
                        }
                    }
                }
            }
            Mode::AutoAssign | Mode::AutoAssignPlus => {
                if !self.agent_active() {
                    return Ok(moves);
                }
                for field in Field::ALL {
                    let ids = distinct_ids(batch, field);
                    let states = ids.iter().map(|id| self.agent_state(*id)).collect::<Result<Vec<_>>>()?;
                    let actor = &self.agents.as_ref().expect("agent mode")[field.index()].actor;
                    let probs = actor.probs_batch(&states)?;
                    for (id, p) in ids.iter().zip(&probs) {
                        let action = select_action(p, SelectMode::Argmax, &mut self.rng)?;
                        let c = self.store.apply_action(*id, action)?;
                        tally(c.from, c.to);
                    }
                }
            }
        }
        Ok(moves)
    }

    fn agent_phase(&mut self, validation: &[Interaction]) -> Result<AgentOutcome> {
        // Sampled action and resulting position for every distinct id.
        let mut chosen: HashMap<IdKey, (AgentState, Action, usize)> = HashMap::new();
        for field in Field::ALL {
            let ids = distinct_ids(validation, field);
            let states = ids.iter().map(|id| self.agent_state(*id)).collect::<Result<Vec<_>>>()?;
            let actor = &self.agents.as_ref().expect("agent mode")[field.index()].actor;
            let probs = actor.probs_batch(&states)?;
            let k = self.store.k(field);
            for ((id, s), p) in ids.iter().zip(&states).zip(&probs) {
                let action = select_action(p, SelectMode::Sample, &mut self.rng)?;
                chosen.insert(*id, (*s, action, action.target(s.position, k)));
            }
        }
        let losses = self
            .model
            .squared_errors_at(&self.store, validation, |id| chosen[&id].2)?;

        let uses_critic = self.config.mode.uses_critic();
        let n = validation.len();
        let mut samples: [Vec<PolicySample>; 2] = [Vec::with_capacity(n), Vec::with_capacity(n)];
        let mut features = Vec::with_capacity(n * self.config.critic_feature_dim());
        let mut next_features = Vec::with_capacity(features.capacity());
        for (x, &loss) in validation.iter().zip(&losses) {
            let (su, _, pu) = chosen[&x.user_key()];
            let (si, _, pi) = chosen[&x.item_key()];
            for field in Field::ALL {
                let id = key(x, field);
                let (s, a, _) = chosen[&id];
                samples[field.index()].push(PolicySample::new(s, a, self.store.reward(id, loss)?));
            }
            if uses_critic {
                features.extend(self.critic_features(su, si));
                next_features.extend(self.critic_features(
                    AgentState::new(su.frequency, pu),
                    AgentState::new(si.frequency, pi),
                ));
            }
        }

        let mut deltas = [None; 2];
        let mut smoothed = None;
        let phase = if uses_critic {
            let dim = self.config.critic_feature_dim();
            let features = Matrix::new(n, dim, features)?;
            let next_features = Matrix::new(n, dim, next_features)?;
            let agents = self.agents.as_mut().expect("agent mode");
            let mut worst: f64 = 0.0;
            for field in Field::ALL {
                let agent = &mut agents[field.index()];
                let next_states: Vec<AgentState> = samples[field.index()]
                    .iter()
                    .zip(validation)
                    .map(|(s, x)| AgentState::new(s.state.frequency, chosen[&key(x, field)].2))
                    .collect();
                let next_actions = agent.target_actor.probs_batch(&next_states)?;
                let mut actions = Matrix::zeros(n, ACTION_DIM);
                for (r, s) in samples[field.index()].iter().enumerate() {
                    actions.set(r, s.action.index(), 1.0);
                }
                let mut next_action_m = Matrix::zeros(n, ACTION_DIM);
                for (r, p) in next_actions.iter().enumerate() {
                    next_action_m.row_mut(r).copy_from_slice(p);
                }
                let batch = TransitionBatch {
                    features: features.clone(),
                    actions,
                    rewards: samples[field.index()].iter().map(|s| s.reward).collect(),
                    next_features: next_features.clone(),
                    next_actions: next_action_m,
                    terminal: vec![false; n],
                };
                let (critic, target) = agent.critic.as_mut().expect("critic mode");
                let delta = critic.td_update(target, &batch)?;
                deltas[field.index()] = Some(delta);
                let mean = agent.deltas.push(delta);
                worst = worst.max(mean);
            }
            smoothed = Some(worst);
            if worst >= self.config.epsilon {
                for field in Field::ALL {
                    let agent = &mut agents[field.index()];
                    let states: Vec<AgentState> = samples[field.index()].iter().map(|s| s.state).collect();
                    let (critic, _) = agent.critic.as_ref().expect("critic mode");
                    agent.actor.critic_guided_update(&states, &features, critic)?;
                }
                AgentPhase::CriticGuided
            } else {
                for field in Field::ALL {
                    agents[field.index()].actor.reinforce_update(&samples[field.index()])?;
                }
                AgentPhase::Reinforce
            }
        } else {
            let agents = self.agents.as_mut().expect("agent mode");
            for field in Field::ALL {
                agents[field.index()].actor.reinforce_update(&samples[field.index()])?;
            }
            AgentPhase::Reinforce
        };
        Ok(AgentOutcome {
            phase,
            deltas,
            smoothed,
        })
    }

    /// Trains on `stream` in batches, in order.
    pub fn run_stream(&mut self, stream: &[Interaction]) -> Result<TrainingLog> {
        if stream.is_empty() {
            return Err(Error::Empty("training stream"));
        }
        let mut log = TrainingLog::default();
        for batch in stream.chunks(self.config.batch_size) {
            log.records.push(self.step(batch, false)?.0);
        }
        Ok(log)
    }

    /// Prequential evaluation: each batch is predicted, then trained on.
    pub fn test_phase(&mut self, stream: &[Interaction]) -> Result<TestOutcome> {
        if stream.is_empty() {
            return Err(Error::Empty("test stream"));
        }
        let mut log = TrainingLog::default();
        let mut acc = MetricAccumulator::new();
        let mut predictions = Vec::with_capacity(stream.len());
        for batch in stream.chunks(self.config.batch_size) {
            let (record, rows) = self.step(batch, true)?;
            for r in &rows {
                acc.push(r.prediction, f64::from(r.label));
            }
            predictions.extend(rows);
            log.records.push(record);
        }
        Ok(TestOutcome {
            log,
            metrics: acc.metrics()?,
            predictions,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.tag(b"CONF");
        w.str(&serde_json::to_string(&self.config)?);
        self.store.write(&mut w);
        w.tag(b"RECM");
        self.model.write(&mut w);
        w.tag(b"AGNT");
        w.bool(self.agents.is_some());
        for a in self.agents.iter().flatten() {
            a.actor.write(&mut w);
            a.target_actor.write(&mut w);
            w.bool(a.critic.is_some());
            if let Some((c, t)) = &a.critic {
                c.write(&mut w);
                t.write(&mut w);
            }
            w.usize(a.deltas.capacity());
            w.f64s(&a.deltas.values());
        }
        w.tag(b"ENGN");
        write_rng(&mut w, &self.rng);
        w.u64(self.iteration);
        w.u64(self.trained_batches);
        w.u64(self.interactions_seen);
        w.bool(self.last_timestamp.is_some());
        w.u64(self.last_timestamp.unwrap_or(0) as u64);
        w.bool(self.validation.is_some());
        let v = self.validation.as_deref().unwrap_or(&[]);
        w.usize(v.len());
        for x in v {
            w.u64(x.user);
            w.u64(x.item);
            w.u8(x.label);
            w.u64(x.timestamp as u64);
        }
        Ok(w.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes)?;
        r.expect_tag(b"CONF")?;
        let config: TrainerConfig = serde_json::from_str(r.str()?)?;
        config.validate()?;
        let store = EmbeddingStore::read(&mut r)?;
        r.expect_tag(b"RECM")?;
        let model = RecModel::read(&mut r)?;
        r.expect_tag(b"AGNT")?;
        let agents = if r.bool()? {
            let mut agents = Vec::with_capacity(2);
            for _ in Field::ALL {
                let actor = Actor::read(&mut r)?;
                let target_actor = Actor::read(&mut r)?;
                let critic = if r.bool()? {
                    Some((Critic::read(&mut r)?, TargetCritic::read(&mut r)?))
                } else {
                    None
                };
                let capacity = r.usize()?;
                let deltas = DeltaWindow::from_values(capacity, r.f64s()?)?;
                agents.push(FieldAgent {
                    actor,
                    target_actor,
                    critic,
                    deltas,
                });
            }
            Some(agents)
        } else {
            None
        };
        r.expect_tag(b"ENGN")?;
        let rng = read_rng(&mut r)?;
        let iteration = r.u64()?;
        let trained_batches = r.u64()?;
        let interactions_seen = r.u64()?;
        let has_last = r.bool()?;
        let last = r.u64()? as i64;
        let has_validation = r.bool()?;
        let n = r.len(25)?;
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(Interaction {
                user: r.u64()?,
                item: r.u64()?,
                label: r.u8()?,
                timestamp: r.u64()? as i64,
            });
        }
        r.finish()?;
        if agents.is_some() != config.mode.uses_agent() {
            return Err(Error::Checkpoint("agent section does not match the configured mode".into()));
        }
        Ok(Self {
            config,
            store,
            model,
            agents,
            rng,
            iteration,
            trained_batches,
            interactions_seen,
            last_timestamp: has_last.then_some(last),
            validation: has_validation.then_some(v),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Final numbers of one experiment, as written to `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub train_interactions: usize,
    pub test_interactions: usize,
    pub metrics: Metrics,
    pub param_report: ParamReport,
    pub critic_guided_iterations: usize,
    pub reinforce_iterations: usize,
    pub config: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub train_log: TrainingLog,
    pub test: TestOutcome,
    pub summary: Summary,
}

impl ExperimentResult {
    pub fn metrics(&self) -> &Metrics {
        &self.summary.metrics
    }

    pub fn frequency_log(&self) -> Vec<FrequencyRecord> {
        self.test.predictions.iter().map(PredictionRow::frequency_record).collect()
    }

    /// Train and test records in stream order.
    pub fn full_log(&self) -> TrainingLog {
        TrainingLog {
            records: self
                .train_log
                .records
                .iter()
                .chain(&self.test.log.records)
                .cloned()
                .collect(),
        }
    }

    /// Writes `log.jsonl`, `predictions.csv` and `summary.json` into `dir`.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log_path = dir.join("log.jsonl");
        fs::write(&log_path, self.full_log().to_jsonl()?).map_err(|e| Error::io(&log_path, e))?;
        let pred_path = dir.join("predictions.csv");
        let mut csv = Vec::new();
        writeln!(csv, "user,item,label,prediction,user_frequency,item_frequency").expect("vec write");
        for p in &self.test.predictions {
            writeln!(
                csv,
                "{},{},{},{},{},{}",
                p.user, p.item, p.label, p.prediction, p.user_frequency, p.item_frequency
            )
            .expect("vec write");
        }
        fs::write(&pred_path, csv).map_err(|e| Error::io(&pred_path, e))?;
        let summary_path = dir.join("summary.json");
        fs::write(&summary_path, serde_json::to_vec_pretty(&self.summary)?).map_err(|e| Error::io(&summary_path, e))
    }
}

/// Reads a `predictions.csv` written by [`ExperimentResult::write_outputs`].
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::invalid("predictions", format!("{}: line {} is malformed", path.display(), i + 1));
        if f.len() != 6 {
            return Err(bad());
        }
        rows.push(PredictionRow {
            user: f[0].parse().map_err(|_| bad())?,
            item: f[1].parse().map_err(|_| bad())?,
            label: f[2].parse().map_err(|_| bad())?,
            prediction: f[3].parse().map_err(|_| bad())?,
            user_frequency: f[4].parse().map_err(|_| bad())?,
            item_frequency: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Chronological split, one training pass, then prequential testing.
pub fn run_experiment(config: &TrainerConfig, interactions: &[Interaction]) -> Result<ExperimentResult> {
    let (train, test) = split_stream(interactions, config.train_fraction)?;
    let mut engine = Engine::new(config.clone())?;
    let train_log = engine.run_stream(&train)?;
    let test = engine.test_phase(&test)?;
    let full = train_log.records.iter().chain(&test.log.records);
    let count = |phase| full.clone().filter(|r| r.agent_phase == phase).count();
    let summary = Summary {
        mode: config.mode,
        seed: config.seed,
        train_interactions: train.len(),
        test_interactions: test.predictions.len(),
        metrics: test.metrics,
        param_report: engine.param_report(),
        critic_guided_iterations: count(AgentPhase::CriticGuided),
        reinforce_iterations: count(AgentPhase::Reinforce),
        config: config.clone(),
    };
    Ok(ExperimentResult {
        train_log,
        test,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};

    fn small(mode: Mode) -> TrainerConfig {
        TrainerConfig {
            mode,
            batch_size: 50,
            warmup_batches: 3,
            dim: 4,
            rec_hidden: vec![8],
            actor_hidden: vec![8],
            freq_dim: 4,
            critic_embed: 8,
            critic_bottom: vec![8, 8],
            critic_tower: vec![8, 4],
            agent_lr: 1e-2,
            critic_lr: 1e-2,
            rec_lr: 1e-2,
            seed: 5,
            ..TrainerConfig::default()
        }
    }

    fn stream(n: usize, seed: u64) -> Vec<Interaction> {
        generate_synthetic(&SyntheticSpec {
            n_users: 40,
            n_items: 30,
            n_interactions: n,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn default_config_matches_documented_values() {
        let c = TrainerConfig::default();
        assert_eq!((c.batch_size, c.history, c.warmup_batches), (500, 30, 50));
        assert_eq!((c.gamma, c.beta, c.epsilon), (0.95, 0.2, 0.01));
        assert_eq!((c.k_user, c.k_item), (1, 2));
        assert_eq!((c.agent_lr, c.critic_lr, c.rec_lr), (1e-4, 1e-4, 1e-3));
        c.validate().unwrap();
    }

    #[test]
    fn config_round_trips_and_reports_every_bad_field() {
        let c = small(Mode::Lff);
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(TrainerConfig::from_json(&text).unwrap(), c);
        assert_eq!(
            TrainerConfig::from_json(r#"{"mode": "origin", "seed": 3}"#).unwrap().mode,
            Mode::Origin
        );
        let bad = TrainerConfig {
            batch_size: 0,
            gamma: 1.0,
            rec_lr: -1.0,
            ..small(Mode::AutoAssignPlus)
        };
        match bad.validate() {
            Err(Error::Config(problems)) => {
                assert_eq!(problems.len(), 3);
                assert!(problems[0].starts_with("batch_size"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(TrainerConfig::from_json(r#"{"batch_sise": 5}"#).is_err());
    }

    #[test]
    fn mode_names_parse() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
        }
        assert!("nope".parse::<Mode>().is_err());
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let xs = stream(1_200, 1);
        let run = || run_experiment(&small(Mode::AutoAssignPlus), &xs).unwrap().full_log().to_jsonl().unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn origin_gives_every_id_a_unique_slot() {
        let xs = stream(600, 2);
        let mut e = Engine::new(small(Mode::Origin)).unwrap();
        let log = e.run_stream(&xs).unwrap();
        assert!(log.records.iter().all(|r| r.agent_phase == AgentPhase::Inactive));
        for field in Field::ALL {
            assert_eq!(e.store().live_unique(field), e.store().id_count(field));
        }
        assert_eq!(e.param_report().deduction_ratio, 0.0);
        assert!(!e.has_agents());
    }

    #[test]
    fn phases_are_exclusive_and_follow_warmup() {
        let xs = stream(1_500, 3);
        let mut e = Engine::new(small(Mode::AutoAssignPlus)).unwrap();
        let log = e.run_stream(&xs).unwrap();
        let phases: Vec<AgentPhase> = log.records.iter().map(|r| r.agent_phase).collect();
        assert!(phases[..3].iter().all(|p| *p == AgentPhase::Warmup));
        assert!(phases[3..]
            .iter()
            .all(|p| matches!(p, AgentPhase::CriticGuided | AgentPhase::Reinforce)));
        for r in &log.records[3..] {
            assert!(r.delta_user.is_some() && r.delta_item.is_some() && r.smoothed_delta.is_some());
        }
        e.store().check_invariants().unwrap();
    }

    #[test]
    fn autoassign_never_uses_a_critic() {
        let xs = stream(800, 4);
        let mut e = Engine::new(small(Mode::AutoAssign)).unwrap();
        let log = e.run_stream(&xs).unwrap();
        assert!(e.critic(Field::User).is_none());
        assert!(log.records[3..].iter().all(|r| r.agent_phase == AgentPhase::Reinforce));
    }

    #[test]
    fn no_descend_never_lowers_a_position() {
        let xs = stream(1_500, 5);
        let mut e = Engine::new(TrainerConfig {
            no_descend: true,
            ..small(Mode::AutoAssignPlus)
        })
        .unwrap();
        let mut last: HashMap<IdKey, usize> = HashMap::new();
        for batch in xs.chunks(50) {
            let (record, _) = e.step(batch, false).unwrap();
            assert_eq!(record.descended, 0);
            for field in Field::ALL {
                for id in e.store().ids(field) {
                    let p = e.store().state(id).unwrap().position;
                    assert!(p >= *last.get(&id).unwrap_or(&1));
                    last.insert(id, p);
                }
            }
        }
    }

    #[test]
    fn baseline_modes_carry_no_agent_parameters() {
        for mode in [Mode::Origin, Mode::Lff] {
            let e = Engine::new(small(mode)).unwrap();
            assert!(e.actor(Field::User).is_none() && e.critic(Field::Item).is_none());
        }
    }

    #[test]
    fn rejects_non_chronological_input() {
        let mut xs = stream(200, 6);
        xs.swap(10, 20);
        // Position 11 is the first timestamp below its predecessor.
        let mut e = Engine::new(small(Mode::Lff)).unwrap();
        assert!(matches!(
            e.run_stream(&xs),
            Err(Error::NonChronological { index: 11, .. })
        ));
        let mut e = Engine::new(small(Mode::Lff)).unwrap();
        e.step(&stream(100, 6)[50..], false).unwrap();
        assert!(matches!(
            e.step(&stream(100, 6)[..50], false),
            Err(Error::NonChronological { index: 50, .. })
        ));
        assert!(e.run_stream(&[]).is_err());
    }

    #[test]
    fn single_test_batch_is_scored_before_training() {
        let xs = stream(300, 7);
        let mut e = Engine::new(small(Mode::Lff)).unwrap();
        e.run_stream(&xs[..250]).unwrap();
        let mut probe = e.clone();
        for x in &xs[250..] {
            probe.store.observe(x.user_key());
            probe.store.observe(x.item_key());
        }
        let expected = probe.model.evaluate_batch(&probe.store, &xs[250..]).unwrap();
        let out = e.test_phase(&xs[250..]).unwrap();
        let got: Vec<f64> = out.predictions.iter().map(|p| p.prediction).collect();
        assert_eq!(got, expected.predictions);
        assert_ne!(e.model(), probe.model());
    }

    #[test]
    fn prequential_mse_matches_manual_replay() {
        let xs = stream(450, 8);
        let (train, test) = xs.split_at(300);
        let config = TrainerConfig {
            batch_size: 50,
            ..small(Mode::AutoAssignPlus)
        };
        let mut engine = Engine::new(config.clone()).unwrap();
        engine.run_stream(train).unwrap();
        let mut manual = engine.clone();
        let out = engine.test_phase(test).unwrap();
        let mut errors = Vec::new();
        for batch in test.chunks(50) {
            let mut probe = manual.clone();
            for x in batch {
                probe.store.observe(x.user_key());
                probe.store.observe(x.item_key());
            }
            errors.extend(probe.model.evaluate_batch(&probe.store, batch).unwrap().squared_errors());
            manual.step(batch, false).unwrap();
        }
        let mse = errors.iter().sum::<f64>() / errors.len() as f64;
        assert!((mse - out.metrics.mse).abs() < 1e-12);
        assert_eq!(manual, engine);
    }

    #[test]
    fn constant_predictor_scores_chance_on_balanced_labels() {
        let xs: Vec<Interaction> = (0..400)
            .map(|t| Interaction {
                user: t % 7,
                item: t % 5,
                label: (t % 2) as u8,
                timestamp: t as i64,
            })
            .collect();
        let mut e = Engine::new(small(Mode::Origin)).unwrap();
        for l in e.model.mlp_mut().layers_mut() {
            l.weights_mut().fill(0.0);
            l.bias_mut().iter_mut().for_each(|b| *b = 0.0);
        }
        // A zero network has zero gradients for every weight but the output
        // bias, which the balanced labels keep at zero.
        let out = e.test_phase(&xs[..2]).unwrap();
        assert_eq!(out.metrics.accuracy, 0.5);
        assert_eq!(out.metrics.mse, 0.25);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_run() {
        let xs = stream(1_000, 9);
        let config = small(Mode::AutoAssignPlus);
        let mut full = Engine::new(config.clone()).unwrap();
        let full_log = full.run_stream(&xs).unwrap();
        let mut first = Engine::new(config).unwrap();
        let mut log = first.run_stream(&xs[..500]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("engine.ckpt");
        first.save(&path).unwrap();
        let mut resumed = Engine::load(&path).unwrap();
        assert_eq!(resumed, first);
        log.records.extend(resumed.run_stream(&xs[500..]).unwrap().records);
        assert_eq!(log, full_log);
        assert_eq!(resumed, full);
    }

    #[test]
    fn corrupted_checkpoints_are_rejected() {
        let e = Engine::new(small(Mode::Lff)).unwrap();
        let bytes = e.to_bytes().unwrap();
        assert!(Engine::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Engine::from_bytes(&extra).is_err());
        assert!(Engine::from_bytes(b"not a checkpoint").is_err());
    }

    #[test]
    fn experiment_outputs_are_written() {
        let xs = stream(500, 10);
        let result = run_experiment(&small(Mode::Lff), &xs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        result.write_outputs(dir.path()).unwrap();
        let summary: Summary =
            serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary, result.summary);
        let log = TrainingLog::from_jsonl(&fs::read_to_string(dir.path().join("log.jsonl")).unwrap()).unwrap();
        assert_eq!(log, result.full_log());
        let preds = read_predictions(&dir.path().join("predictions.csv")).unwrap();
        assert_eq!(preds, result.test.predictions);
        assert_eq!(result.summary.train_interactions, 400);
        assert_eq!(result.summary.test_interactions, 100);
    }
}
