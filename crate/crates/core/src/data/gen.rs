//! Behaviour policies and dataset generation.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, ToyEnv, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Behavior {
    Expert,
    /// Expert plus temporally correlated Gaussian action noise.
    Medium,
    /// Alternating medium and uniform-random episodes.
    ReplayMix,
    Random,
}

impl FromStr for Behavior {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "expert" => Ok(Behavior::Expert),
            "medium" => Ok(Behavior::Medium),
            "replay-mix" => Ok(Behavior::ReplayMix),
            "random" => Ok(Behavior::Random),
            other => Err(DataError::InvalidArgument(format!(
                "unknown behavior `{other}` (expected expert, medium, replay-mix or random)"
            ))),
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Behavior::Expert => "expert",
            Behavior::Medium => "medium",
            Behavior::ReplayMix => "replay-mix",
            Behavior::Random => "random",
        })
    }
}

const START_STREAM: u64 = 0;
const ACTION_STREAM: u64 = 1;
const ANCHOR_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Start states shared by every behaviour generated under `seed`.
pub fn start_states(env: &ToyEnv, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, START_STREAM);
    (0..n).map(|_| env.reset(&mut rng)).collect()
}

/// Runs one episode to the horizon, storing the clipped actions actually applied.
pub fn run_episode(
    env: &ToyEnv,
    start: Vec<f64>,
    mut policy: impl FnMut(&[f64], usize) -> Vec<f64>,
) -> Result<Trajectory, DataError> {
    let (sd, ad) = (env.state_dim(), env.action_dim());
    let mut states = Vec::with_capacity(env.horizon * sd);
    let mut actions = Vec::with_capacity(env.horizon * ad);
    let mut rewards = Vec::with_capacity(env.horizon);
    let mut s = start;
    for t in 0..env.horizon {
        let mut a = policy(&s, t);
        env.clip_action(&mut a);
        let step = env.step(&s, &a, t)?;
        states.extend_from_slice(&s);
        actions.extend_from_slice(&a);
        rewards.push(step.reward);
        s = step.next_state;
        if step.done {
            break;
        }
    }
    Ok(Trajectory::new(sd, ad, states, actions, rewards, true))
}

/// Lag-one correlation of the medium policy's action noise.
pub const MEDIUM_NOISE_CORRELATION: f64 = 0.9;

/// Expert actions plus stationary AR(1) noise with marginal scale `sigma`.
/// The noise persists across steps, so deviations are predictable from history.
struct NoisyExpert<'a> {
    env: &'a ToyEnv,
    sigma: f64,
    noise: Vec<f64>,
}

impl<'a> NoisyExpert<'a> {
    fn new(env: &'a ToyEnv, sigma: f64) -> Self {
        Self {
            env,
            sigma,
            noise: vec![0.0; env.action_dim()],
        }
    }

    fn act(&mut self, s: &[f64], t: usize, rng: &mut impl Rng) -> Vec<f64> {
        let rho = MEDIUM_NOISE_CORRELATION;
        let innovation = (1.0 - rho * rho).sqrt();
        let mut a = self.env.expert_action(s);
        for (v, n) in a.iter_mut().zip(&mut self.noise) {
            let e: f64 = StandardNormal.sample(rng);
            *n = if t == 0 {
                self.sigma * e
            } else {
                rho * *n + innovation * self.sigma * e
            };
            *v += *n;
        }
        a
    }
}

/// Generates `n_episodes` under `behavior`. `medium_sigma` is the Gaussian
/// noise scale of the medium policy.
pub fn gen_dataset(
    env: &ToyEnv,
    behavior: Behavior,
    n_episodes: usize,
    seed: u64,
    medium_sigma: f64,
) -> Result<Dataset, DataError> {
    if !(medium_sigma >= 0.0 && medium_sigma.is_finite()) {
        return Err(DataError::InvalidArgument(format!(
            "medium sigma {medium_sigma} must be finite and >= 0"
        )));
    }
    let mut rng = stream(seed, ACTION_STREAM);
    let mut ds = Dataset::new(env.state_dim(), env.action_dim());
    for (i, start) in start_states(env, n_episodes, seed).into_iter().enumerate() {
        let traj = match behavior {
            Behavior::Expert => run_episode(env, start, |s, _| env.expert_action(s))?,
            Behavior::Medium => {
                let mut p = NoisyExpert::new(env, medium_sigma);
                run_episode(env, start, |s, t| p.act(s, t, &mut rng))?
            }
            Behavior::Random => run_episode(env, start, |_, _| env.random_action(&mut rng))?,
            Behavior::ReplayMix if i % 2 == 0 => {
                let mut p = NoisyExpert::new(env, medium_sigma);
                run_episode(env, start, |s, t| p.act(s, t, &mut rng))?
            }
            Behavior::ReplayMix => run_episode(env, start, |_, _| env.random_action(&mut rng))?,
        };
        ds.trajectories.push(traj);
    }
    Ok(ds)
}

/// Expert and uniform-random mean returns over the start states of `seed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchors {
    pub expert_score: f64,
    pub random_score: f64,
}

pub fn anchors(env: &ToyEnv, n_episodes: usize, seed: u64) -> Result<Anchors, DataError> {
    let expert = gen_dataset(env, Behavior::Expert, n_episodes, seed, 1.0)?;
    let starts = start_states(env, n_episodes, seed);
    let mut rng = stream(seed, ANCHOR_STREAM);
    let mut random = Dataset::new(env.state_dim(), env.action_dim());
    for start in starts {
        random
            .trajectories
            .push(run_episode(env, start, |_, _| env.random_action(&mut rng))?);
    }
    Ok(Anchors {
        expert_score: expert.mean_return(),
        random_score: random.mean_return(),
    })
}
