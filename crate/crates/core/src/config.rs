//! Run configuration: TOML sections over a fully populated default, with
//! per-key provenance and `section.key=value` overrides.
//!
//! ```toml
//! [model]
//! embed_dim = 128
//! [pser]
//! beta_k = 0.85
//! ```

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EnvKind;
use crate::policy::ModelConfig;
use crate::ssm::{BbarRule, ScanKind};

#[derive(Debug, Error)]
#[error("invalid configuration:\n  {}", .0.join("\n  "))]
pub struct ConfigError(pub Vec<String>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub ssm_state: usize,
    pub context_len: usize,
    pub max_timestep: usize,
    pub dropout: f64,
    pub conv_width: usize,
    pub share_gate: bool,
    pub fusion_affine: bool,
    pub multi_grained: bool,
    /// `exact` or `simplified`.
    pub bbar_rule: String,
    /// 0 selects the sequential scan, otherwise the blocked scan chunk length.
    pub scan_chunk: usize,
    pub ssm_skip: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            ssm_state: m.ssm_state,
            context_len: m.context_len,
            max_timestep: m.max_timestep,
            dropout: m.dropout,
            conv_width: m.conv_width,
            share_gate: m.share_gate,
            fusion_affine: m.fusion_affine,
            multi_grained: m.multi_grained,
            bbar_rule: "exact".into(),
            scan_chunk: 0,
            ssm_skip: m.ssm_skip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub env: String,
    pub rtg_scale: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            env: "point-mass-2d".into(),
            rtg_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PserSection {
    pub beta_k: f64,
    pub beta_min: f64,
    /// Teacher refresh interval in steps; 0 means one epoch.
    pub refresh_every: usize,
    /// `snapshot` or `ema`.
    pub teacher: String,
    pub ema_decay: f64,
    /// Run the teacher with dropout active.
    pub teacher_dropout: bool,
}

impl Default for PserSection {
    fn default() -> Self {
        Self {
            beta_k: 0.85,
            beta_min: 0.5,
            refresh_every: 0,
            teacher: "snapshot".into(),
            ema_decay: 0.999,
            teacher_dropout: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub lambda_action: f64,
    pub lambda_rtg: f64,
    pub lambda_state: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            lambda_action: 0.8,
            lambda_rtg: 0.1,
            lambda_state: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-5,
            warmup_steps: 1000,
            grad_clip: 0.25,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            checkpoint_every: 5_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub episodes: usize,
    pub seeds: usize,
    /// `max`, `aggressive`, or a raw return.
    pub target: String,
    /// Affine multiplier of the aggressive target.
    pub aggressive_multiplier: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: 20,
            seeds: 4,
            target: "max".into(),
            aggressive_multiplier: 1.5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub pser: PserSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Default,
    File,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    Snapshot,
    Ema,
}

/// A config plus where each of its keys came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub config: RunConfig,
    pub provenance: BTreeMap<String, Source>,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, toml::Value>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_owned(), other.clone());
        }
    }
}

fn type_name(v: &toml::Value) -> &'static str {
    match v {
        toml::Value::String(_) => "string",
        toml::Value::Integer(_) => "integer",
        toml::Value::Float(_) => "float",
        toml::Value::Boolean(_) => "boolean",
        toml::Value::Datetime(_) => "datetime",
        toml::Value::Array(_) => "array",
        toml::Value::Table(_) => "table",
    }
}

/// Coerces `v` to the type of `default`, allowing integers where floats are expected.
fn coerce(default: &toml::Value, v: toml::Value) -> Result<toml::Value, String> {
    match (default, v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => Ok(toml::Value::Float(i as f64)),
        (toml::Value::Integer(_), toml::Value::Integer(i)) if i < 0 => {
            Err(format!("expected a non-negative integer, got {i}"))
        }
        (d, v) if std::mem::discriminant(d) == std::mem::discriminant(&v) => Ok(v),
        (d, v) => Err(format!("expected {}, got {} `{v}`", type_name(d), type_name(&v))),
    }
}

fn parse_override(s: &str) -> Result<(String, toml::Value), String> {
    let (k, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("override `{s}` is not of the form section.key=value"))?;
    let k = k.trim().to_owned();
    let raw = raw.trim();
    // `key=value` parses as a one-entry TOML document; bare words fall back to strings
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((k, value))
}

impl Resolved {
    /// Layers `file_text` (TOML) and then `overrides` over the defaults.
    /// Every problem found is reported in a single error.
    pub fn resolve(file_text: Option<&str>, overrides: &[String]) -> Result<Self, ConfigError> {
        let defaults = toml::Value::try_from(RunConfig::default()).expect("defaults serialise");
        let mut flat = BTreeMap::new();
        flatten("", &defaults, &mut flat);
        let mut provenance: BTreeMap<String, Source> = flat.keys().map(|k| (k.clone(), Source::Default)).collect();
        let mut errors = Vec::new();

        let mut apply = |key: String,
                         v: toml::Value,
                         src: Source,
                         flat: &mut BTreeMap<String, toml::Value>,
                         errors: &mut Vec<String>| {
            let Some(default) = flat.get(&key) else {
                errors.push(format!("{src}: unknown key `{key}`"));
                return;
            };
            match coerce(default, v) {
                Ok(v) => {
                    flat.insert(key.clone(), v);
                    provenance.insert(key, src);
                }
                Err(e) => errors.push(format!("{src}: `{key}`: {e}")),
            }
        };

        if let Some(text) = file_text {
            match toml::from_str::<toml::Table>(text) {
                Ok(table) => {
                    let mut file_flat = BTreeMap::new();
                    flatten("", &toml::Value::Table(table), &mut file_flat);
                    for (k, v) in file_flat {
                        apply(k, v, Source::File, &mut flat, &mut errors);
                    }
                }
                Err(e) => errors.push(format!("file: {e}")),
            }
        }
        for o in overrides {
            match parse_override(o) {
                Ok((k, v)) => apply(k, v, Source::Flag, &mut flat, &mut errors),
                Err(e) => errors.push(format!("flag: {e}")),
            }
        }

        let mut root = toml::Table::new();
        for (k, v) in &flat {
            let (section, key) = k.split_once('.').expect("sectioned key");
            root.entry(section.to_owned())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("section table")
                .insert(key.to_owned(), v.clone());
        }
        let config: RunConfig = match toml::Value::Table(root).try_into() {
            Ok(c) => c,
            Err(e) => {
                errors.push(e.to_string());
                return Err(ConfigError(errors));
            }
        };
        errors.extend(config.semantic_errors());
        if errors.is_empty() {
            Ok(Self { config, provenance })
        } else {
            Err(ConfigError(errors))
        }
    }

    /// The resolved config as TOML, each key annotated with its source.
    pub fn to_annotated_toml(&self) -> String {
        let value = toml::Value::try_from(&self.config).expect("config serialises");
        let mut out = String::new();
        if let toml::Value::Table(sections) = value {
            for (section, body) in sections {
                out.push_str(&format!("[{section}]\n"));
                if let toml::Value::Table(keys) = body {
                    for (k, v) in keys {
                        let src = self
                            .provenance
                            .get(&format!("{section}.{k}"))
                            .copied()
                            .unwrap_or(Source::Default);
                        out.push_str(&format!("{k} = {v} # {src}\n"));
                    }
                }
                out.push('\n');
            }
        }
        out
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Resolved::resolve(Some(text), &[]).map(|r| r.config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    fn semantic_errors(&self) -> Vec<String> {
        let mut e = Vec::new();
        let m = &self.model;
        for (k, v) in [
            ("model.embed_dim", m.embed_dim),
            ("model.n_layers", m.n_layers),
            ("model.ssm_state", m.ssm_state),
            ("model.context_len", m.context_len),
            ("model.max_timestep", m.max_timestep),
            ("model.conv_width", m.conv_width),
            ("train.steps", self.train.steps),
            ("train.batch_size", self.train.batch_size),
            ("eval.episodes", self.eval.episodes),
            ("eval.seeds", self.eval.seeds),
        ] {
            if v == 0 {
                e.push(format!("`{k}` must be positive"));
            }
        }
        if !(0.0..1.0).contains(&m.dropout) {
            e.push(format!("`model.dropout` = {} outside [0, 1)", m.dropout));
        }
        if !["exact", "simplified"].contains(&m.bbar_rule.as_str()) {
            e.push(format!(
                "`model.bbar_rule` = `{}`: expected exact or simplified",
                m.bbar_rule
            ));
        }
        if self.data.env.parse::<EnvKind>().is_err() {
            e.push(format!(
                "`data.env` = `{}`: expected point-mass-2d or damped-chain",
                self.data.env
            ));
        }
        if !(self.data.rtg_scale > 0.0) {
            e.push("`data.rtg_scale` must be positive".into());
        }
        let p = &self.pser;
        if !(0.0..=1.0).contains(&p.beta_k) {
            e.push(format!("`pser.beta_k` = {} outside [0, 1]", p.beta_k));
        }
        if !(0.0..=1.0).contains(&p.beta_min) {
            e.push(format!("`pser.beta_min` = {} outside [0, 1]", p.beta_min));
        }
        if !["snapshot", "ema"].contains(&p.teacher.as_str()) {
            e.push(format!("`pser.teacher` = `{}`: expected snapshot or ema", p.teacher));
        }
        if !(0.0..1.0).contains(&p.ema_decay) {
            e.push(format!("`pser.ema_decay` = {} outside [0, 1)", p.ema_decay));
        }
        let l = &self.loss;
        let lambdas = [l.lambda_action, l.lambda_rtg, l.lambda_state];
        if lambdas.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || lambdas.iter().sum::<f64>() <= 0.0 {
            e.push("loss weights must be non-negative with a positive sum".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0) {
            e.push("`optim.lr` must be positive".into());
        }
        if !(o.weight_decay >= 0.0) {
            e.push("`optim.weight_decay` must be non-negative".into());
        }
        if !(o.grad_clip > 0.0) {
            e.push("`optim.grad_clip` must be positive".into());
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            e.push("`optim.beta1` and `optim.beta2` must lie in [0, 1)".into());
        }
        if !(o.eps > 0.0) {
            e.push("`optim.eps` must be positive".into());
        }
        let t = self.eval.target.as_str();
        if t != "max" && t != "aggressive" && t.parse::<f64>().is_err() {
            e.push(format!("`eval.target` = `{t}`: expected max, aggressive or a number"));
        }
        e
    }

    pub fn env_kind(&self) -> EnvKind {
        self.data.env.parse().expect("validated env")
    }

    pub fn teacher_kind(&self) -> TeacherKind {
        if self.pser.teacher == "ema" {
            TeacherKind::Ema
        } else {
            TeacherKind::Snapshot
        }
    }

    pub fn model_config(&self, state_dim: usize, action_dim: usize, action_bound: f64) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            state_dim,
            action_dim,
            embed_dim: m.embed_dim,
            n_layers: m.n_layers,
            ssm_state: m.ssm_state,
            context_len: m.context_len,
            max_timestep: m.max_timestep,
            dropout: m.dropout,
            action_bound,
            conv_width: m.conv_width,
            share_gate: m.share_gate,
            fusion_affine: m.fusion_affine,
            multi_grained: m.multi_grained,
            bbar_rule: if m.bbar_rule == "simplified" {
                BbarRule::Simplified
            } else {
                BbarRule::Exact
            },
            scan: if m.scan_chunk == 0 {
                ScanKind::Naive
            } else {
                ScanKind::Blocked { chunk: m.scan_chunk }
            },
            ssm_skip: m.ssm_skip,
        }
    }
}
