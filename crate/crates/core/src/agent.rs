//! Double-Q learning on the gridworld, greedy rollouts and evaluation.

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{GridEnv, GridSpec, Transition, NUM_ACTIONS};
use crate::error::{Error, Result};
use crate::linalg;
use crate::net::{Activation, Model, ParamGrads, PolicyNet};
use crate::optim::Adam;
use crate::seed;

/// One-step Q-learning update `Q + α[R + γ·maxQ' − Q]`. Pass `max_next_q = 0`
/// for terminal transitions.
pub fn q_target(q_sa: f64, reward: f64, gamma: f64, max_next_q: f64, alpha: f64) -> f64 {
    q_sa + alpha * (reward + gamma * max_next_q - q_sa)
}

/// Double-Q bootstrap value: the online net picks the action, the target
/// net supplies its value.
pub fn double_q_value(online_next: &[f64], target_next: &[f64]) -> f64 {
    target_next[linalg::argmax(online_next)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    /// Adam learning rate.
    pub lr: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub target_sync_every: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub learning_starts: usize,
    pub total_steps: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub grad_clip: f64,
    pub huber_delta: f64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 1e-3,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 15_000,
            target_sync_every: 500,
            batch_size: 64,
            buffer_capacity: 10_000,
            learning_starts: 500,
            total_steps: 50_000,
            hidden: vec![64],
            activation: Activation::Relu,
            grad_clip: 10.0,
            huber_delta: 1.0,
            eval_every: 5_000,
            eval_episodes: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.lr > 0.0) || !(self.grad_clip > 0.0) || !(self.huber_delta > 0.0) {
            return bad("lr, grad_clip and huber_delta must be positive");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 || self.target_sync_every == 0 {
            return bad("batch_size, buffer_capacity and target_sync_every must be positive");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end)
        {
            return bad("epsilon schedule must lie in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn epsilon_at(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// Fixed-capacity ring of transitions with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            entries: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.entries.len() < self.capacity {
            self.entries.push(t);
        } else {
            self.entries[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Indices drawn uniformly with replacement.
    pub fn sample<'a, R: Rng + ?Sized>(&'a self, n: usize, rng: &mut R) -> Vec<&'a Transition> {
        (0..n)
            .map(|_| &self.entries[rng.random_range(0..self.entries.len())])
            .collect()
    }
}

fn huber_grad(err: f64, delta: f64) -> f64 {
    err.clamp(-delta, delta)
}

fn huber(err: f64, delta: f64) -> f64 {
    if err.abs() <= delta {
        0.5 * err * err
    } else {
        delta * (err.abs() - 0.5 * delta)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub episode_returns: Vec<f64>,
    /// `(step, mean greedy return)` at each evaluation snapshot.
    pub snapshots: Vec<(usize, f64)>,
    pub final_eval: f64,
    pub selected: String,
}

/// Trains a Q-network. Returns the final network unless its greedy return
/// falls below 90% of the best snapshot, in which case that snapshot wins.
pub fn train(spec: &GridSpec, cfg: &TrainConfig) -> Result<(PolicyNet, TrainReport)> {
    spec.validate()?;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dims = vec![spec.obs_dim];
    dims.extend(&cfg.hidden);
    dims.push(NUM_ACTIONS);
    let mut online = PolicyNet::random(&dims, cfg.activation, &mut rng)?;
    let mut report = TrainReport::default();
    if cfg.total_steps == 0 {
        report.final_eval = evaluate(&online, spec, cfg.eval_episodes, seed::derive(cfg.seed, 1))?;
        report.selected = "initial".into();
        return Ok((online, report));
    }
    let mut target = online.clone();
    let mut adam = Adam::new(ParamGrads::zeros_like(&online).tensors().map(<[f64]>::len), cfg.lr);
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);

    let mut episode = 0u64;
    let mut env = GridEnv::reset(spec, seed::derive(cfg.seed, episode))?;
    let mut ep_return = 0.0;
    let mut best: Option<(f64, PolicyNet)> = None;

    for step in 0..cfg.total_steps {
        let action = if rng.random::<f64>() < cfg.epsilon_at(step) {
            rng.random_range(0..NUM_ACTIONS)
        } else {
            online.greedy_action(env.observation())?
        };
        let t = env.step(action)?;
        ep_return += t.reward;
        let done = t.done;
        buffer.push(t);
        if done {
            report.episode_returns.push(ep_return);
            ep_return = 0.0;
            episode += 1;
            env = GridEnv::reset(spec, seed::derive(cfg.seed, episode))?;
        }

        if step >= cfg.learning_starts && buffer.len() >= cfg.batch_size {
            let loss = learn_batch(&mut online, &target, &mut adam, &buffer, cfg, &mut rng)?;
            if !loss.is_finite() || !online.params_finite() {
                return Err(Error::Diverged(step));
            }
        }
        if (step + 1) % cfg.target_sync_every == 0 {
            target = online.clone();
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            let score = evaluate(
                &online,
                spec,
                cfg.eval_episodes,
                seed::derive(cfg.seed ^ 0x5eed, step as u64),
            )?;
            debug!("step {} eval return {score:.3}", step + 1);
            report.snapshots.push((step + 1, score));
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, online.clone()));
            }
        }
    }

    let final_eval = evaluate(&online, spec, cfg.eval_episodes, seed::derive(cfg.seed, 1))?;
    report.final_eval = final_eval;
    let chosen = match best {
        Some((best_score, snap)) if final_eval < 0.9 * best_score => {
            report.selected = format!("snapshot (eval {best_score:.3})");
            snap
        }
        _ => {
            report.selected = "final".into();
            online
        }
    };
    info!(
        "trained {} steps, {} episodes, final eval {final_eval:.3}, using {}",
        cfg.total_steps,
        report.episode_returns.len(),
        report.selected
    );
    Ok((chosen, report))
}

fn learn_batch(
    online: &mut PolicyNet,
    target: &PolicyNet,
    adam: &mut Adam,
    buffer: &ReplayBuffer,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let batch = buffer.sample(cfg.batch_size, rng);
    let mut grads = ParamGrads::zeros_like(online);
    let mut loss = 0.0;
    let inv = 1.0 / batch.len() as f64;
    for t in batch {
        let bootstrap = if t.done {
            0.0
        } else {
            double_q_value(&online.forward(&t.next_obs)?, &target.forward(&t.next_obs)?)
        };
        let cache = online.forward_cached(&t.obs)?;
        let q_sa = cache.logits()[t.action];
        let y = q_target(q_sa, t.reward, cfg.gamma, bootstrap, 1.0);
        let err = q_sa - y;
        loss += huber(err, cfg.huber_delta) * inv;
        let mut dq = vec![0.0; NUM_ACTIONS];
        dq[t.action] = huber_grad(err, cfg.huber_delta) * inv;
        online.backward(&cache, &dq, Some(&mut grads));
    }
    let norm = grads.norm();
    if norm > cfg.grad_clip {
        grads.scale(cfg.grad_clip / norm);
    }
    adam.step(online.tensors_mut(), grads.tensors());
    Ok(loss)
}

/// Mean undiscounted return of greedy play over `episodes` seeded episodes.
pub fn evaluate<M: Model + ?Sized>(
    net: &M,
    spec: &GridSpec,
    episodes: usize,
    seed: u64,
) -> Result<f64> {
    if episodes == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut env = GridEnv::reset(spec, seed::derive(seed, ep as u64))?;
        while !env.is_done() {
            let a = net.greedy_action(env.observation())?;
            total += env.step(a)?.reward;
        }
    }
    Ok(total / episodes as f64)
}

/// Mean return of a uniformly random policy.
pub fn random_policy_return(spec: &GridSpec, episodes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for ep in 0..episodes {
        let mut env = GridEnv::reset(spec, seed::derive(seed, ep as u64))?;
        while !env.is_done() {
            total += env.step(rng.random_range(0..NUM_ACTIONS))?.reward;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// One observation from a rollout, tagged with its position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitedState {
    pub episode: usize,
    pub step: usize,
    pub obs: Vec<f64>,
}

/// Greedy, unperturbed rollouts. Every observation the agent acts on is
/// recorded (terminal observations are not).
pub fn base_rollout<M: Model + ?Sized>(
    net: &M,
    spec: &GridSpec,
    episodes: usize,
    seed: u64,
) -> Result<Vec<VisitedState>> {
    let mut out = Vec::new();
    for ep in 0..episodes {
        let mut env = GridEnv::reset(spec, seed::derive(seed, ep as u64))?;
        let mut step = 0;
        while !env.is_done() {
            let obs = env.observation().to_vec();
            let a = net.greedy_action(&obs)?;
            out.push(VisitedState {
                episode: ep,
                step,
                obs,
            });
            env.step(a)?;
            step += 1;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_target_arithmetic() {
        assert!((q_target(1.0, 1.0, 0.9, 2.0, 0.5) - 1.9).abs() < 1e-12);
        assert_eq!(q_target(0.7, 3.0, 0.9, 2.0, 0.0), 0.7);
        assert_eq!(q_target(0.4, 1.0, 0.99, 0.0, 1.0), 1.0);
    }

    #[test]
    fn double_q_uses_target_value_at_online_argmax() {
        // Online prefers action 2, target's own max is action 0.
        let online = [0.1, 0.2, 0.9, 0.3];
        let target = [5.0, 0.0, -1.0, 0.0];
        assert_eq!(double_q_value(&online, &target), -1.0);
    }

    #[test]
    fn replay_buffer_wraps() {
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Transition {
                obs: vec![i as f64],
                action: 0,
                reward: 0.0,
                next_obs: vec![],
                done: false,
            });
        }
        assert_eq!(buf.len(), 3);
        let mut seen: Vec<f64> = buf.entries.iter().map(|t| t.obs[0]).collect();
        seen.sort_by(f64::total_cmp);
        assert_eq!(seen, vec![2.0, 3.0, 4.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(buf.sample(10, &mut rng).len(), 10);
    }

    #[test]
    fn zero_steps_returns_initial_net() {
        let spec = GridSpec::default();
        let cfg = TrainConfig {
            total_steps: 0,
            seed: 4,
            ..TrainConfig::default()
        };
        let (net, _) = train(&spec, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fresh = PolicyNet::random(&[192, 64, 4], Activation::Relu, &mut rng).unwrap();
        assert_eq!(net, fresh);
    }

    #[test]
    fn rollout_bookkeeping() {
        let spec = GridSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PolicyNet::random(&[192, 8, 4], Activation::Relu, &mut rng).unwrap();
        assert!(base_rollout(&net, &spec, 0, 0).unwrap().is_empty());
        let states = base_rollout(&net, &spec, 3, 5).unwrap();
        let eps: std::collections::BTreeSet<_> = states.iter().map(|s| s.episode).collect();
        assert_eq!(eps.len(), 3);
        for w in states.windows(2) {
            if w[0].episode == w[1].episode {
                assert_eq!(w[1].step, w[0].step + 1);
            } else {
                assert_eq!(w[1].step, 0);
            }
        }
    }

    #[test]
    fn rollout_matches_step_through_oracle() {
        let spec = GridSpec {
            noise_sigma: 0.0,
            ..GridSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = PolicyNet::random(&[192, 16, 4], Activation::Relu, &mut rng).unwrap();
        let states = base_rollout(&net, &spec, 1, 0).unwrap();
        // Oracle: walk the grid by hand using clean renders and the net's argmax.
        let mut cell = spec.start;
        let mut expected = Vec::new();
        for _ in 0..spec.max_steps {
            let obs = spec.clean_render(cell);
            let a = net.greedy_action(&obs).unwrap();
            expected.push(obs);
            cell = spec.moved(cell, crate::env::Action::from_index(a).unwrap());
            if cell == spec.goal || spec.is_hazard(cell) {
                break;
            }
        }
        let got: Vec<_> = states.into_iter().map(|s| s.obs).collect();
        assert_eq!(got, expected);
    }
}
