use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mgdm::checkpoint::Checkpoint;
use mgdm::config::{ConfigError, Resolved, RunConfig};
use mgdm::data::io::sidecar_path;
use mgdm::data::{
    anchors, gen_dataset, inject_action_noise, load_trajectories, save_trajectories, Behavior, Dataset, DatasetStats,
    EnvKind, ToyEnv,
};
use mgdm::eval::{
    ood_correlation, resolve_target, rollout_returns, sweep_beta, sweep_context, sweep_ood, Cell, EvalReport,
    SweepOptions, TrainedPolicy,
};
use mgdm::train::{load_policy, train_run};

#[derive(Parser)]
#[command(
    name = "mgdm",
    version,
    about = "Multi-grained selective SSM policies for offline RL"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trajectory dataset with its stats sidecar.
    GenData(GenDataArgs),
    /// Train a policy into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint by return-conditioned rollouts.
    Eval(EvalArgs),
    /// Train and evaluate across a sweep axis.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value = "point-mass-2d")]
    env: EnvKind,
    #[arg(long, default_value = "medium")]
    behavior: Behavior,
    #[arg(long, default_value_t = 500, value_parser = positive)]
    episodes: usize,
    /// Fraction of steps whose actions are corrupted after generation.
    #[arg(long, default_value_t = 0.0, value_parser = fraction)]
    noise_frac: f64,
    /// Half-width of the uniform corruption; defaults to the action bound.
    #[arg(long, value_parser = non_negative)]
    noise_sigma: Option<f64>,
    /// Stationary std of the medium policy's action noise.
    #[arg(long, value_parser = non_negative)]
    medium_sigma: Option<f64>,
    /// Episodes simulated per anchor policy; defaults to --episodes.
    #[arg(long, value_parser = positive)]
    anchor_episodes: Option<usize>,
    #[arg(long, default_value_t = 10.0, value_parser = strictly_positive)]
    rtg_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `section.key=value`, applied after the file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--override train.seed=<n>`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint; the resolved config must match the one it was written with.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Must match the environment the checkpoint was trained on.
    #[arg(long)]
    env: Option<EnvKind>,
    /// `max`, `aggressive` or a raw return.
    #[arg(long, default_value = "max")]
    target: String,
    #[arg(long, default_value_t = 20, value_parser = positive)]
    episodes: usize,
    #[arg(long, default_value_t = 4, value_parser = positive)]
    seeds: usize,
    /// Directory for report.csv and report.svg.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Context,
    Beta,
    Ood,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    kind: SweepKind,
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training data for the context and beta sweeps.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trained checkpoint for the OOD sweep.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "4,8,16")]
    lengths: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,0.75,0.5,0.25,0")]
    beta_ks: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1,1.25,1.5,1.75,2")]
    multipliers: Vec<f64>,
    /// Evaluation seeds; overrides eval.seeds.
    #[arg(long, value_parser = positive)]
    seeds: Option<usize>,
    /// Episodes per cell; overrides eval.episodes.
    #[arg(long, value_parser = positive)]
    episodes: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_num<T: std::str::FromStr>(s: &str) -> Result<T, String> {
    s.parse().map_err(|_| format!("`{s}` is not a number"))
}

fn positive(s: &str) -> Result<usize, String> {
    match parse_num::<usize>(s)? {
        0 => Err("must be at least 1".into()),
        n => Ok(n),
    }
}

fn fraction(s: &str) -> Result<f64, String> {
    let v: f64 = parse_num(s)?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = parse_num(s)?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be finite and >= 0"))
    }
}

fn strictly_positive(s: &str) -> Result<f64, String> {
    let v: f64 = parse_num(s)?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be finite and > 0"))
    }
}

/// An error caused by the invocation rather than by the run; exits with 2.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_usage(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.is::<Usage>() || c.is::<ConfigError>())
}

fn resolve_config(args: &ConfigArgs) -> Result<Resolved> {
    let text = match &args.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let mut overrides = args.overrides.clone();
    if let Some(s) = args.seed {
        overrides.push(format!("train.seed={s}"));
    }
    Ok(Resolved::resolve(text.as_deref(), &overrides)?)
}

fn load_data(path: &Path, cfg: &RunConfig) -> Result<(Dataset, DatasetStats)> {
    let data = load_trajectories(path)?;
    let stats_path = sidecar_path(path, "stats");
    let stats = DatasetStats::load(&stats_path)
        .with_context(|| format!("stats sidecar for {} (run gen-data to create it)", path.display()))?;
    let env = ToyEnv::new(cfg.env_kind());
    if (data.state_dim, data.action_dim) != (env.state_dim(), env.action_dim()) {
        return Err(usage(format!(
            "{} has state/action dims ({}, {}) but data.env `{}` expects ({}, {})",
            path.display(),
            data.state_dim,
            data.action_dim,
            cfg.data.env,
            env.state_dim(),
            env.action_dim()
        )));
    }
    Ok((data, stats))
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    report.write_csv(&out.join("report.csv"))?;
    report.write_svg(&out.join("report.svg"))?;
    println!(
        "{:<16} {:>10} {:>6} {:>12} {:>10}",
        "variant", report.axis, "seeds", "mean_norm", "std_norm"
    );
    for a in report.aggregate() {
        let failed = if a.failed > 0 {
            format!("  ({} failed)", a.failed)
        } else {
            String::new()
        };
        println!(
            "{:<16} {:>10} {:>6} {:>12.2} {:>10.2}{failed}",
            a.variant, a.axis_value, a.seeds, a.mean_norm, a.std_norm
        );
    }
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let env = ToyEnv::new(a.env);
    let medium_sigma = a.medium_sigma.unwrap_or_else(|| env.default_medium_sigma());
    let clean = gen_dataset(&env, a.behavior, a.episodes, a.seed, medium_sigma)?;
    let an = anchors(&env, a.anchor_episodes.unwrap_or(a.episodes), a.seed)?;
    let data = if a.noise_frac > 0.0 {
        let sigma = a.noise_sigma.unwrap_or(env.action_bound);
        let (noisy, record) = inject_action_noise(&clean, a.noise_frac, sigma, env.action_bound, a.seed)?;
        record.save(&sidecar_path(&a.out, "noise"))?;
        noisy
    } else {
        clean
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_trajectories(&data, &a.out)?;
    let stats = DatasetStats::compute(&data, a.rtg_scale, an.expert_score, an.random_score);
    stats.save(&sidecar_path(&a.out, "stats"))?;
    println!(
        "{} episodes, {} steps, mean return {:.3}, max {:.3} (expert {:.3}, random {:.3})",
        data.trajectories.len(),
        data.total_steps(),
        data.mean_return(),
        stats.max_return,
        stats.expert_score,
        stats.random_score
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let resolved = resolve_config(&a.cfg)?;
    let (data, stats) = load_data(&a.data, &resolved.config)?;
    let summary = train_run(&resolved, &data, &stats, &a.out, a.resume.as_deref())?;
    if let Some(r) = summary.last {
        println!(
            "step {} loss {:.6} (action {:.6}) beta {:.3}",
            r.step + 1,
            r.loss_total,
            r.loss_action,
            r.beta
        );
    }
    println!("wrote {}", summary.final_checkpoint.display());
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<TrainedPolicy> {
    let ckpt = Checkpoint::load(path)?;
    let p = load_policy(&ckpt).with_context(|| format!("reading {}", path.display()))?;
    Ok(TrainedPolicy {
        policy: p.policy,
        store: p.store,
        stats: p.stats,
        last: None,
    })
}

fn checkpoint_env(path: &Path, requested: Option<EnvKind>) -> Result<ToyEnv> {
    let run = load_policy(&Checkpoint::load(path)?)?.run;
    let trained = run.env_kind();
    match requested {
        Some(e) if e != trained => Err(usage(format!(
            "--env {e} does not match the checkpoint, which was trained on {trained}"
        ))),
        _ => Ok(ToyEnv::new(trained)),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let env = checkpoint_env(&a.ckpt, a.env)?;
    let trained = load_checkpoint(&a.ckpt)?;
    let stats = &trained.stats;
    let target = resolve_target(&a.target, stats, 1.5).map_err(|e| usage(e.to_string()))?;
    let mut report = EvalReport::new("target", stats.random_score, stats.expert_score);
    let actor = trained.actor();
    for seed in 0..a.seeds as u64 {
        let cell = rollout_returns(&actor, &env, target, a.episodes, mgdm::eval::eval_seed(seed))
            .and_then(|r| mgdm::eval::score_cell("DM", target, seed, r, stats, Some(target)))
            .unwrap_or_else(|e| Cell::failed("DM", target, seed, e.to_string()));
        println!(
            "seed {seed}: mean return {:.3}, normalized {:.2}",
            cell.mean_return, cell.norm_score
        );
        report.cells.push(cell);
    }
    if let Some(out) = &a.out {
        write_report(&report, out)?;
    }
    if report.cells.iter().any(|c| !c.is_ok()) {
        bail!("one or more evaluation cells failed");
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let resolved = resolve_config(&a.cfg)?;
    let cfg = &resolved.config;
    let mut opts = SweepOptions::from_config(cfg);
    if let Some(n) = a.seeds {
        opts.seeds = (0..n as u64).collect();
    }
    if let Some(n) = a.episodes {
        opts.episodes = n;
    }
    let need_data = || {
        a.data
            .as_deref()
            .ok_or_else(|| usage("this sweep needs --data"))
            .and_then(|p| load_data(p, cfg))
    };
    let report = match a.kind {
        SweepKind::Context => {
            let (data, stats) = need_data()?;
            sweep_context(cfg, &data, &stats, &a.lengths, &opts)?
        }
        SweepKind::Beta => {
            let (data, stats) = need_data()?;
            sweep_beta(cfg, &data, &stats, &a.beta_ks, &opts)?
        }
        SweepKind::Ood => {
            let path = a.ckpt.as_deref().ok_or_else(|| usage("--kind ood needs --ckpt"))?;
            let env = checkpoint_env(path, None)?;
            let trained = load_checkpoint(path)?;
            let report = sweep_ood(&trained, &env, &a.multipliers, &opts)?;
            println!("in-distribution correlation: {:.3}", ood_correlation(&report));
            report
        }
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, resolved.to_annotated_toml()).with_context(|| format!("writing {}", cfg_path.display()))?;
    write_report(&report, &a.out)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("MGDM_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| usage(format!("MGDM_THREADS=`{v}` must be a positive integer")))?;
        mgdm::par::init_thread_pool(n).map_err(|e| anyhow::anyhow!(e))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
