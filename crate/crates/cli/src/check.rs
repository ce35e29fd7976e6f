//! Fast self-checks: analytic gradients against central differences, AUC
//! against pair counting and rewards against a recomputed loss window.

use autoassign::agent::{Actor, ActorConfig, AgentState, PolicySample};
use autoassign::critic::{Critic, CriticConfig, ACTION_DIM};
use autoassign::metrics::auc;
use autoassign::nn::gradcheck::{numeric_gradient, relative_error};
use autoassign::nn::{Activation, DenseLayer, Matrix};
use autoassign::reward::LossHistory;
use autoassign::Action;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn layer(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for activation in [Activation::Tanh, Activation::LeakyRelu, Activation::Identity] {
        let l = DenseLayer::new(Matrix::new(3, 4, random_vec(rng, 12)).unwrap(), random_vec(rng, 3), activation).unwrap();
        let x = random_vec(rng, 4);
        let up = random_vec(rng, 3);
        let (_, cache) = l.forward(&x).unwrap();
        let (_, _, gx) = l.backward(&cache, &up).unwrap();
        let f = |v: &[f64]| l.forward(v).unwrap().0.iter().zip(&up).map(|(a, b)| a * b).sum();
        worst = worst.max(relative_error(&gx, &numeric_gradient(f, &x, STEP)));
    }
    worst
}

fn actor(rng: &mut ChaCha8Rng) -> f64 {
    let config = ActorConfig {
        freq_dim: 4,
        hidden: vec![6],
        ..ActorConfig::new(2)
    };
    let actor = Actor::new(&config, rng).unwrap();
    let actions = [Action::Ascend, Action::Unchanged, Action::Descend];
    let batch: Vec<PolicySample> = (0..4)
        .map(|_| {
            let state = AgentState::new(rng.gen_range(1..500), rng.gen_range(1..=3));
            PolicySample::new(state, actions[rng.gen_range(0..3)], rng.gen_range(-1.0..1.0))
        })
        .collect();
    let analytic = actor.reinforce_gradient(&batch).unwrap().flatten();
    let objective = |p: &[f64]| {
        let mut a = actor.clone();
        a.set_flat_params(p).unwrap();
        -batch
            .iter()
            .map(|s| s.reward * a.probs(s.state).unwrap()[s.action.index()].ln())
            .sum::<f64>()
            / batch.len() as f64
    };
    relative_error(&analytic, &numeric_gradient(objective, &actor.flat_params(), STEP))
}

fn critic(rng: &mut ChaCha8Rng) -> f64 {
    let config = CriticConfig {
        embed_dim: 4,
        bottom: vec![6, 5],
        tower: vec![4, 3],
        ..CriticConfig::new(5)
    };
    let critic = Critic::new(&config, rng).unwrap();
    let features = Matrix::new(3, 5, random_vec(rng, 15)).unwrap();
    let actions = Matrix::new(3, ACTION_DIM, random_vec(rng, 3 * ACTION_DIM)).unwrap();
    let (_, da) = critic.action_gradient(&features, &actions).unwrap();
    let total = |a: &[f64]| {
        let m = Matrix::new(3, ACTION_DIM, a.to_vec()).unwrap();
        critic.q_batch(&features, &m).unwrap().iter().sum()
    };
    relative_error(da.data(), &numeric_gradient(total, actions.data(), STEP))
}

fn auc_oracle(rng: &mut ChaCha8Rng) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(2..60);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..8u8))).collect();
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect();
        labels[0] = 0.0;
        labels[1] = 1.0;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                if labels[i] == 1.0 && labels[j] == 0.0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        worst = worst.max((auc(&scores, &labels).unwrap() - wins / pairs).abs());
    }
    worst
}

fn reward_oracle(rng: &mut ChaCha8Rng) -> f64 {
    let capacity = 7;
    let mut history = LossHistory::new(capacity);
    let mut log = Vec::new();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let loss = rng.gen_range(0.0..1.0);
        history.record(loss).unwrap();
        log.push(loss);
        let window = &log[log.len().saturating_sub(capacity)..];
        let expected = window.iter().sum::<f64>() / window.len() as f64 - 0.3;
        worst = worst.max((history.reward(0.3).unwrap() - expected).abs());
    }
    worst
}

/// Prints one line per check; true when all pass.
pub fn run_all() -> bool {
    let checks: [(&str, fn(&mut ChaCha8Rng) -> f64, f64); 5] = [
        ("layer gradients", layer, TOLERANCE),
        ("actor gradient", actor, TOLERANCE),
        ("critic action gradient", critic, TOLERANCE),
        ("auc against pair counting", auc_oracle, 1e-9),
        ("reward against loss window", reward_oracle, 0.0),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ok = true;
    for (name, check, tolerance) in checks {
        let err = check(&mut rng);
        let pass = err <= tolerance;
        ok &= pass;
        println!("{} {name}: error {err:.2e}", if pass { "ok  " } else { "FAIL" });
    }
    ok
}
