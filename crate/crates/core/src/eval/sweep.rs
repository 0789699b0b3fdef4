use crate::autodiff::ParamStore;
use crate::config::RunConfig;
use crate::data::{Dataset, DatasetStats, ToyEnv};
use crate::par::Exec;
use crate::policy::Policy;
use crate::train::{train_bc, AdamWConfig, BcTrainConfig, MetricsRow, Trainer};

use super::{
    affine_target, mean, normalized_score, resolve_target, rollout_returns, Actor, BcActor, Cell, CellStatus, DmActor,
    EvalError, EvalReport, Marker,
};

/// Variant label of the full model in a β sweep.
pub const FULL_VARIANT: &str = "full";

/// Evaluation settings shared by every cell of a sweep.
#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    /// `max`, `aggressive` or a raw return.
    pub target: String,
    pub aggressive_multiplier: f64,
    /// How independent cells are scheduled.
    pub exec: Exec,
}

impl SweepOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            episodes: cfg.eval.episodes,
            seeds: (0..cfg.eval.seeds as u64).collect(),
            target: cfg.eval.target.clone(),
            aggressive_multiplier: cfg.eval.aggressive_multiplier,
            exec: Exec::default(),
        }
    }
}

/// Start states of evaluation episodes are drawn from a stream distinct from the training seed.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x9E37_79B9_7F4A_7C15
}

#[derive(Clone, Debug)]
pub struct TrainedPolicy {
    pub policy: Policy,
    pub store: ParamStore,
    pub stats: DatasetStats,
    pub last: Option<MetricsRow>,
}

impl TrainedPolicy {
    pub fn actor(&self) -> DmActor<'_> {
        DmActor {
            policy: &self.policy,
            store: &self.store,
            stats: &self.stats,
        }
    }
}

/// Trains for `cfg.train.steps` steps in memory.
pub fn train_policy(cfg: &RunConfig, data: &Dataset, stats: &DatasetStats) -> Result<TrainedPolicy, EvalError> {
    let mut t = Trainer::new(cfg, data, stats)?;
    let mut last = None;
    t.run_until(cfg.train.steps, |row, _| {
        last = Some(*row);
        Ok(())
    })?;
    Ok(TrainedPolicy {
        policy: t.policy.clone(),
        store: t.state.store.clone(),
        stats: t.stats.clone(),
        last,
    })
}

pub fn score_cell(
    variant: &str,
    axis_value: f64,
    seed: u64,
    returns: Vec<f64>,
    stats: &DatasetStats,
    requested: Option<f64>,
) -> Result<Cell, EvalError> {
    let norm_scores = returns
        .iter()
        .map(|r| normalized_score(*r, stats.random_score, stats.expert_score))
        .collect::<Result<Vec<_>, _>>()?;
    let mean_return = mean(&returns);
    if !mean_return.is_finite() {
        return Err(EvalError::Config("non-finite return".into()));
    }
    Ok(Cell {
        variant: variant.to_owned(),
        axis_value,
        seed,
        norm_score: mean(&norm_scores),
        mean_return,
        returns,
        norm_scores,
        requested,
        status: CellStatus::Ok,
    })
}

fn evaluate(
    actor: &dyn Actor,
    env: &ToyEnv,
    stats: &DatasetStats,
    opts: &SweepOptions,
    seed: u64,
    label: (&str, f64),
) -> Result<Cell, EvalError> {
    let target = resolve_target(&opts.target, stats, opts.aggressive_multiplier)?;
    let returns = rollout_returns(actor, env, target, opts.episodes, eval_seed(seed))?;
    score_cell(label.0, label.1, seed, returns, stats, Some(target))
}

fn or_failed(r: Result<Cell, EvalError>, variant: &str, axis_value: f64, seed: u64) -> Cell {
    r.unwrap_or_else(|e| Cell::failed(variant, axis_value, seed, e.to_string()))
}

fn bc_config(cfg: &RunConfig, seed: u64) -> BcTrainConfig {
    BcTrainConfig {
        hidden: cfg.model.embed_dim,
        steps: cfg.train.steps,
        batch_size: cfg.train.batch_size,
        optim: AdamWConfig::from(&cfg.optim),
        seed,
    }
}

/// One sequence model per `(length, seed)` plus a state-only MLP baseline
/// per seed, which is repeated at every length since it ignores context.
pub fn sweep_context(
    base: &RunConfig,
    data: &Dataset,
    stats: &DatasetStats,
    lengths: &[usize],
    opts: &SweepOptions,
) -> Result<EvalReport, EvalError> {
    let env = ToyEnv::new(base.env_kind());
    let mut report = EvalReport::new("context length", stats.random_score, stats.expert_score);
    let jobs: Vec<(usize, u64)> = lengths
        .iter()
        .flat_map(|&l| opts.seeds.iter().map(move |&s| (l, s)))
        .collect();
    let dm = opts.exec.map(jobs.len(), |i| {
        let (l, seed) = jobs[i];
        let mut cfg = base.clone();
        cfg.model.context_len = l;
        cfg.train.seed = seed;
        let r = train_policy(&cfg, data, stats)
            .and_then(|p| evaluate(&p.actor(), &env, &p.stats, opts, seed, ("DM", l as f64)));
        or_failed(r, "DM", l as f64, seed)
    });
    let bc = opts.exec.map(opts.seeds.len(), |i| {
        let seed = opts.seeds[i];
        let mut stats = stats.clone();
        stats.rtg_scale = base.data.rtg_scale;
        train_bc(&bc_config(base, seed), data, &stats, env.action_bound)
            .map_err(EvalError::from)
            .and_then(|(bc, store)| {
                let actor = BcActor {
                    policy: &bc,
                    store: &store,
                    stats: &stats,
                };
                evaluate(&actor, &env, &stats, opts, seed, ("BC", 0.0))
            })
    });
    report.cells.extend(dm);
    for &l in lengths {
        for (i, r) in bc.iter().enumerate() {
            let seed = opts.seeds[i];
            let cell = match r {
                Ok(c) => Cell {
                    axis_value: l as f64,
                    ..c.clone()
                },
                Err(e) => Cell::failed("BC", l as f64, seed, e.to_string()),
            };
            report.cells.push(cell);
        }
    }
    Ok(report)
}

/// A row of the β sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaVariant {
    /// Linear schedule to `β_K` with the floor removed.
    NoFloor(f64),
    /// The configured schedule, floor included.
    Full,
}

impl BetaVariant {
    pub fn label(&self) -> String {
        match self {
            BetaVariant::NoFloor(b) => format!("beta_k={b}"),
            BetaVariant::Full => FULL_VARIANT.to_owned(),
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        if let BetaVariant::NoFloor(b) = self {
            cfg.pser.beta_k = *b;
            cfg.pser.beta_min = 0.0;
        }
    }
}

/// Trains one model per `(β_K, seed)` without the floor, plus the full
/// configuration, and evaluates each on `data`.
pub fn sweep_beta(
    base: &RunConfig,
    data: &Dataset,
    stats: &DatasetStats,
    beta_ks: &[f64],
    opts: &SweepOptions,
) -> Result<EvalReport, EvalError> {
    let env = ToyEnv::new(base.env_kind());
    let mut report = EvalReport::new("beta_K", stats.random_score, stats.expert_score);
    let variants: Vec<BetaVariant> = beta_ks
        .iter()
        .map(|b| BetaVariant::NoFloor(*b))
        .chain([BetaVariant::Full])
        .collect();
    let jobs: Vec<(BetaVariant, u64)> = variants
        .iter()
        .flat_map(|v| opts.seeds.iter().map(move |&s| (*v, s)))
        .collect();
    report.cells = opts.exec.map(jobs.len(), |i| {
        let (v, seed) = jobs[i];
        let mut cfg = base.clone();
        v.apply(&mut cfg);
        cfg.train.seed = seed;
        let label = v.label();
        let axis = cfg.pser.beta_k;
        let r = train_policy(&cfg, data, stats)
            .and_then(|p| evaluate(&p.actor(), &env, &p.stats, opts, seed, (&label, axis)));
        or_failed(r, &label, axis, seed)
    });
    Ok(report)
}

/// Rolls out one trained policy at affine target multipliers
/// `random + m · (max − random)`; `m = 1` is the dataset max.
pub fn sweep_ood(
    trained: &TrainedPolicy,
    env: &ToyEnv,
    multipliers: &[f64],
    opts: &SweepOptions,
) -> Result<EvalReport, EvalError> {
    let stats = &trained.stats;
    let mut report = EvalReport::new("target multiplier", stats.random_score, stats.expert_score);
    report.markers.push(Marker {
        label: "dataset max".into(),
        axis_value: 1.0,
        value: stats.max_return,
    });
    let jobs: Vec<(f64, u64)> = multipliers
        .iter()
        .flat_map(|&m| opts.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let actor = trained.actor();
    report.cells = opts.exec.map(jobs.len(), |i| {
        let (m, seed) = jobs[i];
        let target = affine_target(stats, m);
        let r = rollout_returns(&actor, env, target, opts.episodes, eval_seed(seed))
            .and_then(|ret| score_cell("DM", m, seed, ret, stats, Some(target)));
        or_failed(r, "DM", m, seed)
    });
    Ok(report)
}

/// Sample Pearson correlation; NaN when either side has no spread.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Correlation between requested and achieved return over cells with
/// multiplier ≤ 1, using the per-target mean over seeds.
pub fn ood_correlation(report: &EvalReport) -> f64 {
    let aggs = report.aggregate();
    let (mut req, mut got) = (Vec::new(), Vec::new());
    for a in aggs.iter().filter(|a| a.axis_value <= 1.0 && a.mean_return.is_finite()) {
        let target = report
            .cells
            .iter()
            .find(|c| c.axis_value == a.axis_value)
            .and_then(|c| c.requested);
        if let Some(t) = target {
            req.push(t);
            got.push(a.mean_return);
        }
    }
    pearson(&req, &got)
}
