//! Return-conditioned rollouts, normalised scoring, reports and sweeps.

mod report;
mod sweep;

pub use report::{Aggregate, Cell, CellStatus, EvalReport, Marker, CSV_HEADER};
pub use sweep::{
    eval_seed, ood_correlation, pearson, score_cell, sweep_beta, sweep_context, sweep_ood, train_policy, BetaVariant,
    SweepOptions, TrainedPolicy, FULL_VARIANT,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::ParamStore;
use crate::data::{gen, DataError, DatasetStats, ToyEnv};
use crate::policy::{BcPolicy, History, Policy, PolicyError};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("degenerate score anchors: expert {expert} must exceed random {random}")]
    DegenerateAnchors { random: f64, expert: f64 },
    #[error("{what}: environment has {env}, policy expects {policy}")]
    Dimension {
        what: &'static str,
        env: usize,
        policy: usize,
    },
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `100 · (score − random) / (expert − random)`, unclamped.
pub fn normalized_score(score: f64, random: f64, expert: f64) -> Result<f64, EvalError> {
    if !(expert > random) {
        return Err(EvalError::DegenerateAnchors { random, expert });
    }
    Ok(100.0 * (score - random) / (expert - random))
}

/// Resolves `max`, `aggressive` or a literal number into a raw target return.
pub fn resolve_target(target: &str, stats: &DatasetStats, aggressive_multiplier: f64) -> Result<f64, EvalError> {
    match target {
        "max" => Ok(stats.max_return),
        "aggressive" => Ok(affine_target(stats, aggressive_multiplier)),
        s => s
            .parse()
            .map_err(|_| EvalError::Config(format!("target `{s}`: expected max, aggressive or a number"))),
    }
}

/// `random + m · (max − random)`: multiplier 1 is the dataset max, 0 the random anchor.
pub fn affine_target(stats: &DatasetStats, m: f64) -> f64 {
    stats.random_score + m * (stats.max_return - stats.random_score)
}

/// Anything that maps a batch of episode histories to actions.
pub trait Actor: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn act(&self, histories: &[&History]) -> Result<Vec<Vec<f64>>, EvalError>;
}

/// The sequence policy conditioned on its trailing context window.
pub struct DmActor<'a> {
    pub policy: &'a Policy,
    pub store: &'a ParamStore,
    pub stats: &'a DatasetStats,
}

impl Actor for DmActor<'_> {
    fn state_dim(&self) -> usize {
        self.policy.config.state_dim
    }

    fn action_dim(&self) -> usize {
        self.policy.config.action_dim
    }

    fn act(&self, histories: &[&History]) -> Result<Vec<Vec<f64>>, EvalError> {
        let input = self.policy.input_from_histories(histories, self.stats)?;
        Ok(self.policy.act_batch(self.store, &input)?)
    }
}

/// The state-only MLP baseline.
pub struct BcActor<'a> {
    pub policy: &'a BcPolicy,
    pub store: &'a ParamStore,
    pub stats: &'a DatasetStats,
}

impl Actor for BcActor<'_> {
    fn state_dim(&self) -> usize {
        self.policy.config.state_dim
    }

    fn action_dim(&self) -> usize {
        self.policy.config.action_dim
    }

    fn act(&self, histories: &[&History]) -> Result<Vec<Vec<f64>>, EvalError> {
        let sd = self.state_dim();
        let mut states = vec![0.0; histories.len() * sd];
        for (h, out) in histories.iter().zip(states.chunks_mut(sd)) {
            let k = h.steps();
            self.stats.normalize_state(&h.states[(k - 1) * sd..k * sd], out);
        }
        Ok(self.policy.act_batch(self.store, states)?)
    }
}

/// One finished episode: its full history and per-step rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeTrace {
    pub history: History,
    pub rewards: Vec<f64>,
}

impl EpisodeTrace {
    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs `n_episodes` episodes in lockstep. Each starts with the return-to-go
/// set to `target_return`; after every step it drops by the reward received.
pub fn rollout(
    actor: &dyn Actor,
    env: &ToyEnv,
    target_return: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeTrace>, EvalError> {
    if env.state_dim() != actor.state_dim() {
        return Err(EvalError::Dimension {
            what: "state_dim",
            env: env.state_dim(),
            policy: actor.state_dim(),
        });
    }
    if env.action_dim() != actor.action_dim() {
        return Err(EvalError::Dimension {
            what: "action_dim",
            env: env.action_dim(),
            policy: actor.action_dim(),
        });
    }
    let mut traces: Vec<EpisodeTrace> = gen::start_states(env, n_episodes, seed)
        .into_iter()
        .map(|s| EpisodeTrace {
            history: History {
                states: s,
                actions: Vec::new(),
                rtgs: vec![target_return],
                timesteps: vec![0],
            },
            rewards: Vec::new(),
        })
        .collect();
    let sd = env.state_dim();
    let mut live: Vec<usize> = (0..n_episodes).collect();
    while !live.is_empty() {
        let histories: Vec<&History> = live.iter().map(|&i| &traces[i].history).collect();
        let actions = actor.act(&histories)?;
        let mut still = Vec::with_capacity(live.len());
        for (&i, mut a) in live.iter().zip(actions) {
            let tr = &mut traces[i];
            let k = tr.history.steps();
            let t = tr.history.timesteps[k - 1];
            env.clip_action(&mut a);
            let state = tr.history.states[(k - 1) * sd..k * sd].to_vec();
            let res = env.step(&state, &a, t)?;
            tr.rewards.push(res.reward);
            tr.history.actions.extend_from_slice(&a);
            if !res.done {
                let rtg = tr.history.rtgs[k - 1] - res.reward;
                tr.history.states.extend_from_slice(&res.next_state);
                tr.history.rtgs.push(rtg);
                tr.history.timesteps.push(t + 1);
                still.push(i);
            }
        }
        live = still;
    }
    Ok(traces)
}

/// Total returns of [`rollout`].
pub fn rollout_returns(
    actor: &dyn Actor,
    env: &ToyEnv,
    target_return: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<f64>, EvalError> {
    Ok(rollout(actor, env, target_return, n_episodes, seed)?
        .iter()
        .map(EpisodeTrace::total_return)
        .collect())
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_anchors() {
        assert_eq!(normalized_score(-10.0, -50.0, -10.0).unwrap(), 100.0);
        assert_eq!(normalized_score(-50.0, -50.0, -10.0).unwrap(), 0.0);
        assert_eq!(normalized_score(-30.0, -50.0, -10.0).unwrap(), 50.0);
        assert!(normalized_score(1.0, 2.0, 2.0).is_err());
        assert!(normalized_score(0.0, 0.0, f64::NAN).is_err());
    }

    #[test]
    fn target_forms() {
        let stats = DatasetStats {
            state_mean: vec![0.0],
            state_std: vec![1.0],
            rtg_scale: 1.0,
            max_return: -10.0,
            expert_score: -5.0,
            random_score: -50.0,
        };
        assert_eq!(resolve_target("max", &stats, 1.5).unwrap(), -10.0);
        assert_eq!(resolve_target("aggressive", &stats, 1.5).unwrap(), 10.0);
        assert_eq!(resolve_target("-7.5", &stats, 1.5).unwrap(), -7.5);
        assert!(resolve_target("most", &stats, 1.5).is_err());
    }
}
