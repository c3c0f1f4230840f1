//! Sequential protocol-construction environment.

use log::warn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::signal::{AcquisitionProtocol, AD_HOC_B_VALUES, B_MAX, PROTOCOL_LEN};
use crate::task::{task_objective, EvalConfig, TaskEnv, TaskKind};

/// Observation width: ten scaled slots, the cursor and the SNR context.
pub const OBS_DIM: usize = PROTOCOL_LEN + 2;
/// One action per integer b-value in `[0, B_MAX]`.
pub const N_ACTIONS: usize = B_MAX as usize + 1;
/// Decisions per episode (slot 0 stays at b=0).
pub const EPISODE_LEN: usize = PROTOCOL_LEN - 1;

const SNR_SCALE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub reward: f64,
    pub done: bool,
}

/// Minimal episodic interface the PPO loop trains against.
pub trait Environment {
    fn obs_dim(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self) -> Vec<f64>;
    fn observe(&self) -> Vec<f64>;
    fn step(&mut self, action: usize) -> Result<Step>;
}

/// Slots being filled plus the write position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolState {
    pub slots: [f64; PROTOCOL_LEN],
    pub cursor: usize,
    pub snr: f64,
}

impl ProtocolState {
    pub fn initial(snr: f64) -> Self {
        Self { slots: AD_HOC_B_VALUES, cursor: 1, snr }
    }

    pub fn done(&self) -> bool {
        self.cursor >= PROTOCOL_LEN
    }

    pub fn observation(&self) -> Vec<f64> {
        let mut obs: Vec<f64> = self.slots.iter().map(|b| b / B_MAX).collect();
        obs.push(self.cursor as f64 / PROTOCOL_LEN as f64);
        obs.push((self.snr / SNR_SCALE).min(1.0));
        obs
    }

    pub fn apply(&mut self, action: usize) -> Result<()> {
        if self.done() {
            return Err(Error::StepAfterDone);
        }
        if action >= N_ACTIONS {
            return Err(Error::InvalidProtocol(format!("action {action} outside [0, {}]", N_ACTIONS - 1)));
        }
        self.slots[self.cursor] = action as f64;
        self.cursor += 1;
        Ok(())
    }

    pub fn protocol(&self) -> Result<AcquisitionProtocol> {
        AcquisitionProtocol::new(&self.slots)
    }
}

/// Everything needed to score a finished protocol.
#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub task: TaskKind,
    pub task_env: TaskEnv,
    pub eval: EvalConfig,
}

/// The terminal-reward MDP. Episode `e` draws its reward cohort from
/// `derive(reward_seed, e)`, so any stored episode can be replayed.
#[derive(Debug, Clone)]
pub struct ProtocolEnv {
    pub config: EnvConfig,
    state: ProtocolState,
    reward_seed: u64,
    episode: u64,
    actions: Vec<usize>,
    last_episode: Option<Episode>,
}

/// A finished episode with the seed its reward was computed under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub actions: Vec<usize>,
    pub seed: u64,
    pub protocol: AcquisitionProtocol,
    pub reward: f64,
}

impl ProtocolEnv {
    pub fn new(config: EnvConfig, reward_seed: u64) -> Self {
        if config.task_env.scanner.snr > SNR_SCALE {
            warn!("snr {} above {SNR_SCALE}: observation entry clipped to 1", config.task_env.scanner.snr);
        }
        let state = ProtocolState::initial(config.task_env.scanner.snr);
        Self { config, state, reward_seed, episode: 0, actions: Vec::new(), last_episode: None }
    }

    pub fn state(&self) -> &ProtocolState {
        &self.state
    }

    /// Episodes completed so far.
    pub fn episodes(&self) -> u64 {
        self.episode
    }

    pub fn last_episode(&self) -> Option<&Episode> {
        self.last_episode.as_ref()
    }

    /// Terminal reward of `protocol` under an explicit cohort seed.
    pub fn score(&self, protocol: &AcquisitionProtocol, seed: u64) -> Result<f64> {
        let mut rng = seed::rng_from(seed);
        let c = &self.config;
        task_objective(protocol, c.task, &c.task_env, &c.eval, c.eval.n_repeats_reward, &mut rng)
    }

    /// Re-run a stored action sequence under a stored seed.
    pub fn replay(&self, actions: &[usize], seed: u64) -> Result<f64> {
        let mut state = ProtocolState::initial(self.state.snr);
        for &a in actions {
            state.apply(a)?;
        }
        self.score(&state.protocol()?, seed)
    }
}

impl Environment for ProtocolEnv {
    fn obs_dim(&self) -> usize {
        OBS_DIM
    }

    fn n_actions(&self) -> usize {
        N_ACTIONS
    }

    fn reset(&mut self) -> Vec<f64> {
        self.state = ProtocolState::initial(self.config.task_env.scanner.snr);
        self.actions.clear();
        self.state.observation()
    }

    fn observe(&self) -> Vec<f64> {
        self.state.observation()
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        self.state.apply(action)?;
        self.actions.push(action);
        if !self.state.done() {
            return Ok(Step { reward: 0.0, done: false });
        }
        let seed = seed::derive(self.reward_seed, self.episode);
        let protocol = self.state.protocol()?;
        let reward = self.score(&protocol, seed)?;
        self.episode += 1;
        self.last_episode = Some(Episode { actions: self.actions.clone(), seed, protocol, reward });
        Ok(Step { reward, done: true })
    }
}

/// Single-step two-armed bandit with Bernoulli payouts.
#[derive(Debug, Clone)]
pub struct Bandit {
    pub payout: [f64; 2],
    rng: Rng,
}

impl Bandit {
    pub fn new(payout: [f64; 2], seed: u64) -> Self {
        Self { payout, rng: seed::rng_from(seed) }
    }

    pub fn best_arm(&self) -> usize {
        usize::from(self.payout[1] > self.payout[0])
    }
}

impl Environment for Bandit {
    fn obs_dim(&self) -> usize {
        1
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self) -> Vec<f64> {
        vec![1.0]
    }

    fn observe(&self) -> Vec<f64> {
        vec![1.0]
    }

    fn step(&mut self, action: usize) -> Result<Step> {
        let p = *self.payout.get(action).ok_or(Error::StepAfterDone)?;
        let reward = if self.rng.random::<f64>() < p { 1.0 } else { 0.0 };
        Ok(Step { reward, done: true })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{CohortSpec, TissueDistributions};
    use crate::fitting::FitConfig;
    use crate::signal::ScannerConfig;

    pub(crate) fn test_env(task: TaskKind, snr: f64) -> ProtocolEnv {
        let dists = TissueDistributions::from_toml_str(include_str!("../../../../configs/tissue_distributions.toml")).unwrap();
        let task_env = TaskEnv {
            distributions: dists,
            cohort: CohortSpec::default(),
            scanner: ScannerConfig::default().with_snr(snr),
            fit: FitConfig::default(),
        };
        ProtocolEnv::new(EnvConfig { task, task_env, eval: EvalConfig::default() }, 99)
    }

    #[test]
    fn reset_encoding() {
        let mut env = test_env(TaskKind::MultiClass, 25.0);
        let a = env.reset();
        let b = env.reset();
        assert_eq!(a, b);
        assert_eq!(a.len(), OBS_DIM);
        assert_eq!(a[0], 0.0);
        assert_eq!(a[9], 0.8);
        assert_eq!(a[10], 0.1);
        assert_eq!(a[11], 0.5);
    }

    #[test]
    fn nine_steps_sparse_reward() {
        let mut env = test_env(TaskKind::MultiClass, 25.0);
        env.reset();
        for i in 0..EPISODE_LEN {
            let s = env.step(100 * (i + 1)).unwrap();
            assert_eq!(s.done, i + 1 == EPISODE_LEN);
            if !s.done {
                assert_eq!(s.reward, 0.0);
            } else {
                assert!(s.reward > 0.0 && s.reward <= 1.0);
            }
        }
        assert!(matches!(env.step(0), Err(Error::StepAfterDone)));
        assert!(env.observe().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn out_of_grid_action_rejected() {
        let mut env = test_env(TaskKind::MultiClass, 25.0);
        env.reset();
        assert!(env.step(N_ACTIONS).is_err());
    }

    #[test]
    fn replay_reproduces_reward() {
        let mut env = test_env(TaskKind::BinaryActiveChronic, 25.0);
        for _ in 0..3 {
            env.reset();
            for a in [5, 900, 17, 300, 0, 1000, 450, 451, 80] {
                env.step(a).unwrap();
            }
            let ep = env.last_episode().unwrap().clone();
            assert_eq!(env.replay(&ep.actions, ep.seed).unwrap().to_bits(), ep.reward.to_bits());
        }
        assert_eq!(env.episodes(), 3);
    }

    #[test]
    fn all_zero_protocol_is_chance() {
        // every b is 0: sentinel fits, all features identical
        let env = test_env(TaskKind::MultiClass, 25.0);
        let r = env.replay(&[0; EPISODE_LEN], 7).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 0.12, "{r}");
    }

    #[test]
    fn high_snr_clips() {
        let env = test_env(TaskKind::MultiClass, 80.0);
        assert_eq!(env.state().observation()[11], 1.0);
    }
}
