use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Which steps were corrupted and what their actions were before.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub fraction: f64,
    pub sigma: f64,
    pub seed: u64,
    /// `(episode, t)` in ascending global order.
    pub indices: Vec<(usize, usize)>,
    pub clean_actions: Vec<Vec<f64>>,
}

impl NoiseRecord {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string(self).map_err(|source| DataError::Json {
            path: path.to_owned(),
            source,
        })?;
        std::fs::write(path, text).map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_owned(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.to_owned(),
            source,
        })
    }
}

/// Replaces the actions at exactly `round(p · total_steps)` uniformly chosen
/// steps by `a + U(-σ, σ)` per component, clipped to `±bound`.
pub fn inject_action_noise(
    ds: &Dataset,
    p: f64,
    sigma: f64,
    bound: f64,
    seed: u64,
) -> Result<(Dataset, NoiseRecord), DataError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DataError::InvalidArgument(format!("noise fraction {p} outside [0, 1]")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DataError::InvalidArgument(format!(
            "noise magnitude {sigma} must be finite and >= 0"
        )));
    }
    let total = ds.total_steps();
    let count = (p * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, total, count).into_vec();
    picked.sort_unstable();

    let mut out = ds.clone();
    let mut indices = Vec::with_capacity(count);
    let mut clean_actions = Vec::with_capacity(count);
    let mut episode = 0;
    let mut offset = 0;
    for g in picked {
        while g >= offset + out.trajectories[episode].len() {
            offset += out.trajectories[episode].len();
            episode += 1;
        }
        let t = g - offset;
        let a = out.trajectories[episode].action_mut(t);
        clean_actions.push(a.to_vec());
        if sigma > 0.0 {
            for v in a.iter_mut() {
                *v = (*v + rng.random_range(-sigma..=sigma)).clamp(-bound, bound);
            }
        }
        indices.push((episode, t));
    }
    Ok((
        out,
        NoiseRecord {
            fraction: p,
            sigma,
            seed,
            indices,
            clean_actions,
        },
    ))
}
