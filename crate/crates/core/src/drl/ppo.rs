//! Actor-critic agent and the clipped-surrogate update.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::nn::{AdamConfig, AdamState, Mlp};
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub adam_eps: f64,
    pub n_steps: usize,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_range: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            adam_eps: 1e-5,
            n_steps: 2048,
            batch_size: 64,
            n_epochs: 10,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_range: 0.2,
            vf_coef: 0.5,
            ent_coef: 0.0,
            max_grad_norm: 0.5,
            hidden: 64,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.n_steps == 0 || self.batch_size == 0 || self.n_epochs == 0 || self.hidden == 0 {
            return bad("n_steps, batch_size, n_epochs and hidden must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gamma and gae_lambda must lie in [0, 1]");
        }
        if !(self.clip_range > 0.0) || self.vf_coef < 0.0 || self.ent_coef < 0.0 || !(self.max_grad_norm > 0.0) {
            return bad("clip_range and max_grad_norm must be > 0, coefficients >= 0");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, eps: self.adam_eps, ..AdamConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoAgent {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
    /// Optimizer steps taken so far.
    pub n_updates: u64,
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

impl PpoAgent {
    pub fn new(obs_dim: usize, n_actions: usize, hidden: usize, rng: &mut Rng) -> Self {
        let gain = std::f64::consts::SQRT_2;
        let actor = Mlp::new(&[obs_dim, hidden, hidden, n_actions], gain, 0.01, rng);
        let critic = Mlp::new(&[obs_dim, hidden, hidden, 1], gain, 1.0, rng);
        let actor_opt = AdamState::new(&actor);
        let critic_opt = AdamState::new(&critic);
        Self { actor, critic, actor_opt, critic_opt, n_updates: 0 }
    }

    pub fn n_actions(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn log_probs(&self, obs: &[f64]) -> Vec<f64> {
        log_softmax(&self.actor.forward(obs))
    }

    pub fn probs(&self, obs: &[f64]) -> Vec<f64> {
        self.log_probs(obs).into_iter().map(f64::exp).collect()
    }

    pub fn value(&self, obs: &[f64]) -> f64 {
        self.critic.forward(obs)[0]
    }

    /// Sample an action; returns (action, log-probability, value).
    pub fn act(&self, obs: &[f64], rng: &mut Rng) -> (usize, f64, f64) {
        let logp = self.log_probs(obs);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut action = logp.len() - 1;
        for (i, lp) in logp.iter().enumerate() {
            acc += lp.exp();
            if u < acc {
                action = i;
                break;
            }
        }
        (action, logp[action], self.value(obs))
    }

    /// Most probable action, lowest index on ties.
    pub fn greedy(&self, obs: &[f64]) -> usize {
        let logits = self.actor.forward(obs);
        let mut best = 0;
        for (i, z) in logits.iter().enumerate() {
            if *z > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn all_finite(&self) -> bool {
        self.actor.all_finite() && self.critic.all_finite()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// Episode ended with this step.
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub steps: Vec<Transition>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Generalized advantage estimation, bootstrapping the tail from
    /// `last_value` unless the final step ended an episode.
    pub fn compute_gae(&mut self, last_value: f64, gamma: f64, lambda: f64) {
        let n = self.steps.len();
        self.advantages = vec![0.0; n];
        let mut gae = 0.0;
        for t in (0..n).rev() {
            let s = &self.steps[t];
            let next_value = if t + 1 < n { self.steps[t + 1].value } else { last_value };
            let live = if s.done { 0.0 } else { 1.0 };
            let delta = s.reward + gamma * next_value * live - s.value;
            gae = delta + gamma * lambda * live * gae;
            self.advantages[t] = gae;
        }
        self.returns = self.advantages.iter().zip(&self.steps).map(|(a, s)| a + s.value).collect();
    }
}

/// One training example for the surrogate loss.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub obs: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub ret: f64,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub actor_grad: Mlp,
    pub critic_grad: Mlp,
}

/// Per-sample clipped surrogate term `min(r·A, clip(r)·A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

struct Partial {
    policy: f64,
    value: f64,
    entropy: f64,
    kl: f64,
    clipped: usize,
    actor: Mlp,
    critic: Mlp,
}

const CHUNK: usize = 8;

/// Mean clipped-surrogate loss plus weighted value and entropy terms,
/// with gradients for both networks. Chunks are summed in a fixed order
/// so the result does not depend on thread scheduling.
pub fn ppo_loss(agent: &PpoAgent, samples: &[Sample], cfg: &PpoConfig) -> LossOutput {
    let n = samples.len().max(1) as f64;
    let parts: Vec<Partial> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut p = Partial {
                policy: 0.0,
                value: 0.0,
                entropy: 0.0,
                kl: 0.0,
                clipped: 0,
                actor: agent.actor.zeros_like(),
                critic: agent.critic.zeros_like(),
            };
            for s in chunk {
                let (logits, acache) = agent.actor.forward_cached(s.obs);
                let logp = log_softmax(&logits);
                let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
                let entropy: f64 = -probs.iter().zip(&logp).map(|(q, l)| if *q > 0.0 { q * l } else { 0.0 }).sum::<f64>();
                let log_ratio = logp[s.action] - s.old_log_prob;
                let ratio = log_ratio.exp();
                let unclipped = ratio * s.advantage;
                let clipped = ratio.clamp(1.0 - cfg.clip_range, 1.0 + cfg.clip_range) * s.advantage;
                p.policy -= unclipped.min(clipped);
                p.entropy += entropy;
                p.kl += (ratio - 1.0) - log_ratio;
                if (ratio - 1.0).abs() > cfg.clip_range {
                    p.clipped += 1;
                }
                // ∂/∂logp_a of −min(...): only the unclipped branch carries gradient
                let d_logp = if unclipped <= clipped { -unclipped } else { 0.0 };
                let mut g_logits: Vec<f64> = probs.iter().map(|q| -d_logp * q).collect();
                g_logits[s.action] += d_logp;
                if cfg.ent_coef != 0.0 {
                    // ∂(−c·H)/∂z_j = c·p_j·(log p_j + H)
                    for ((g, q), l) in g_logits.iter_mut().zip(&probs).zip(&logp) {
                        *g += cfg.ent_coef * q * (l + entropy);
                    }
                }
                g_logits.iter_mut().for_each(|g| *g /= n);
                agent.actor.backward(&acache, &g_logits, &mut p.actor);

                let (v, ccache) = agent.critic.forward_cached(s.obs);
                let err = v[0] - s.ret;
                p.value += err * err;
                agent.critic.backward(&ccache, &[2.0 * cfg.vf_coef * err / n], &mut p.critic);
            }
            p
        })
        .collect();

    let mut actor_grad = agent.actor.zeros_like();
    let mut critic_grad = agent.critic.zeros_like();
    let (mut policy, mut value, mut entropy, mut kl, mut clipped) = (0.0, 0.0, 0.0, 0.0, 0);
    for p in &parts {
        actor_grad.add_assign(&p.actor);
        critic_grad.add_assign(&p.critic);
        policy += p.policy;
        value += p.value;
        entropy += p.entropy;
        kl += p.kl;
        clipped += p.clipped;
    }
    let (policy_loss, value_loss, entropy) = (policy / n, value / n, entropy / n);
    LossOutput {
        loss: policy_loss + cfg.vf_coef * value_loss - cfg.ent_coef * entropy,
        policy_loss,
        value_loss,
        entropy,
        approx_kl: kl / n,
        clip_fraction: clipped as f64 / n,
        actor_grad,
        critic_grad,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

fn normalize(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    adv.iter_mut().for_each(|a| *a = (*a - mean) / (sd + 1e-8));
}

/// `n_epochs` passes of shuffled minibatches over a rollout whose
/// advantages have already been computed. Advantages are standardized
/// within each minibatch. Returns means over all minibatches.
pub fn ppo_update(agent: &mut PpoAgent, rollout: &Rollout, cfg: &PpoConfig, rng: &mut Rng) -> Result<UpdateStats> {
    if rollout.is_empty() || rollout.advantages.len() != rollout.len() {
        return Err(Error::Config("ppo_update needs a rollout with computed advantages".into()));
    }
    if let Some(t) = rollout.advantages.iter().position(|a| !a.is_finite()) {
        return Err(Error::NonFinite(format!("advantage at step {t}")));
    }
    let adam = cfg.adam();
    let mut idx: Vec<usize> = (0..rollout.len()).collect();
    let mut sums = [0.0; 5];
    let mut batches = 0usize;
    for epoch in 0..cfg.n_epochs {
        idx.shuffle(rng);
        for batch in idx.chunks(cfg.batch_size) {
            let mut adv: Vec<f64> = batch.iter().map(|&i| rollout.advantages[i]).collect();
            normalize(&mut adv);
            let samples: Vec<Sample> = batch
                .iter()
                .zip(&adv)
                .map(|(&i, &a)| {
                    let s = &rollout.steps[i];
                    Sample { obs: &s.obs, action: s.action, old_log_prob: s.log_prob, advantage: a, ret: rollout.returns[i] }
                })
                .collect();
            let mut out = ppo_loss(agent, &samples, cfg);
            if !out.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss {} (policy {}, value {}, entropy {}) at epoch {epoch}, update {}",
                    out.loss, out.policy_loss, out.value_loss, out.entropy, agent.n_updates
                )));
            }
            let norm = (out.actor_grad.sq_norm() + out.critic_grad.sq_norm()).sqrt();
            if norm > cfg.max_grad_norm {
                let k = cfg.max_grad_norm / (norm + 1e-6);
                out.actor_grad.scale(k);
                out.critic_grad.scale(k);
            }
            agent.n_updates += 1;
            agent.actor_opt.step(&mut agent.actor, &out.actor_grad, agent.n_updates, &adam);
            agent.critic_opt.step(&mut agent.critic, &out.critic_grad, agent.n_updates, &adam);
            if !agent.all_finite() {
                return Err(Error::NonFinite(format!("weights after update {}", agent.n_updates)));
            }
            for (s, v) in sums.iter_mut().zip([out.policy_loss, out.value_loss, out.entropy, out.approx_kl, out.clip_fraction]) {
                *s += v;
            }
            batches += 1;
        }
    }
    let m = batches as f64;
    Ok(UpdateStats {
        policy_loss: sums[0] / m,
        value_loss: sums[1] / m,
        entropy: sums[2] / m,
        approx_kl: sums[3] / m,
        clip_fraction: sums[4] / m,
    })
}
