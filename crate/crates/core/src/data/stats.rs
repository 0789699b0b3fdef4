use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Lower bound applied to every per-dimension standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Normalisation constants and score anchors. Serialised as the dataset sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    #[serde(rename = "mean")]
    pub state_mean: Vec<f64>,
    #[serde(rename = "std")]
    pub state_std: Vec<f64>,
    pub rtg_scale: f64,
    pub max_return: f64,
    pub expert_score: f64,
    pub random_score: f64,
}

impl DatasetStats {
    /// Per-dimension mean and population std over every step of `ds`.
    pub fn compute(ds: &Dataset, rtg_scale: f64, expert_score: f64, random_score: f64) -> Self {
        let sd = ds.state_dim;
        let n = ds.total_steps().max(1) as f64;
        let mut mean = vec![0.0; sd];
        for tr in &ds.trajectories {
            for row in tr.states.chunks(sd) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; sd];
        for tr in &ds.trajectories {
            for row in tr.states.chunks(sd) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
        Self {
            state_mean: mean,
            state_std: std,
            rtg_scale,
            max_return: if ds.trajectories.is_empty() {
                0.0
            } else {
                ds.max_return()
            },
            expert_score,
            random_score,
        }
    }

    pub fn normalize_state(&self, s: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (s[i] - self.state_mean[i]) / self.state_std[i];
        }
    }

    pub fn denormalize_state(&self, z: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = z[i] * self.state_std[i] + self.state_mean[i];
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| DataError::Json {
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
