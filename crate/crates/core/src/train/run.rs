use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::ParamStore;
use crate::checkpoint::{Checkpoint, DType};
use crate::config::{Resolved, RunConfig};
use crate::data::{Batch, Dataset, DatasetStats};
use crate::policy::Policy;

use super::{MetricsRow, TrainError, TrainRecord, Trainer, CHECKPOINT_KIND};

pub const METRICS_HEADER: &str = "step,beta,loss_total,loss_action,loss_rtg,loss_state,grad_norm";

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: usize,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub last: Option<MetricsRow>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.into(),
        source,
    }
}

/// Metrics rows of an earlier run that precede `step`, header included.
fn retained_metrics(path: &Path, step: usize) -> Result<Vec<String>, TrainError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = vec![METRICS_HEADER.to_owned()];
    for line in text.lines().skip(1) {
        let k: usize = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| TrainError::Mismatch(format!("unreadable metrics line `{line}`")))?;
        if k < step {
            lines.push(line.to_owned());
        }
    }
    Ok(lines)
}

fn dump_batch(path: &Path, step: usize, quantity: &str, batch: &Batch) -> Result<(), TrainError> {
    let i = &batch.input;
    let v = serde_json::json!({
        "step": step,
        "quantity": quantity,
        "index": batch.index,
        "batch": i.batch,
        "len": i.len,
        "states": i.states,
        "actions": i.actions,
        "rtgs": i.rtgs,
        "timesteps": i.timesteps,
        "pad": i.pad,
        "next_rtgs": batch.next_rtgs,
        "next_states": batch.next_states,
    });
    // serde_json writes non-finite floats as null, which keeps the dump loadable
    fs::write(path, serde_json::to_string_pretty(&v).expect("json")).map_err(io_err(path))
}

/// Trains into `out`: resolved config snapshot, `metrics.csv`, periodic
/// `ckpt_<step>.ckpt` files and `final.ckpt`. With `resume`, training
/// continues from that checkpoint and earlier metrics rows are kept.
pub fn train_run(
    resolved: &Resolved,
    data: &Dataset,
    stats: &DatasetStats,
    out: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary, TrainError> {
    let cfg = &resolved.config;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, resolved.to_annotated_toml()).map_err(io_err(&cfg_path))?;

    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg, data, &Checkpoint::load(p)?)?,
        None => Trainer::new(cfg, data, stats)?,
    };
    let metrics_path = out.join("metrics.csv");
    let mut lines = if resume.is_some() && metrics_path.exists() {
        retained_metrics(&metrics_path, trainer.state.step)?
    } else {
        vec![METRICS_HEADER.to_owned()]
    };
    lines.push(String::new());
    fs::write(&metrics_path, lines.join("\n")).map_err(io_err(&metrics_path))?;
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    let mut metrics = BufWriter::new(file);

    let every = cfg.train.checkpoint_every;
    let mut last = None;
    let result = trainer.run_until(cfg.train.steps, |row, t| {
        writeln!(metrics, "{}", row.csv_line()).map_err(io_err(&metrics_path))?;
        last = Some(*row);
        let done = t.state.step;
        if every > 0 && done % every == 0 && done < cfg.train.steps {
            metrics.flush().map_err(io_err(&metrics_path))?;
            t.checkpoint()
                .save(&out.join(format!("ckpt_{done:06}.ckpt")), DType::F64)?;
        }
        Ok(())
    });
    metrics.flush().map_err(io_err(&metrics_path))?;
    match result {
        Err(TrainError::NonFinite { step, quantity, batch }) => {
            let dump = out.join("nonfinite_batch.json");
            dump_batch(&dump, step, quantity, &batch)?;
            return Err(TrainError::NonFiniteDumped { step, quantity, dump });
        }
        other => other?,
    }
    let final_checkpoint = out.join("final.ckpt");
    trainer.checkpoint().save(&final_checkpoint, DType::F64)?;
    Ok(RunSummary {
        steps: trainer.state.step,
        final_checkpoint,
        metrics: metrics_path,
        last,
    })
}

/// A trained policy restored for evaluation.
#[derive(Clone, Debug)]
pub struct LoadedPolicy {
    pub policy: Policy,
    pub store: ParamStore,
    pub stats: DatasetStats,
    pub run: RunConfig,
    pub step: usize,
}

pub fn load_policy(ckpt: &Checkpoint) -> Result<LoadedPolicy, TrainError> {
    let rec: TrainRecord =
        serde_json::from_value(ckpt.config.clone()).map_err(crate::checkpoint::CheckpointError::from)?;
    if rec.kind != CHECKPOINT_KIND {
        return Err(TrainError::Mismatch(format!("checkpoint kind `{}`", rec.kind)));
    }
    let mut store = ParamStore::new();
    let policy = Policy::new(rec.model, &mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
    ckpt.load_store("param", &mut store)?;
    Ok(LoadedPolicy {
        policy,
        store,
        stats: rec.stats,
        run: rec.run,
        step: rec.step,
    })
}
