//! JSON-lines trajectory files, one episode per line:
//! `{"states": [[...]], "actions": [[...]], "rewards": [...], "terminal": bool}`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use super::{DataError, Dataset, Trajectory};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_owned(),
        source,
    }
}

/// 17 significant digits, enough to round-trip any f64.
fn push_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("write to string");
}

fn push_rows(out: &mut String, data: &[f64], width: usize) {
    out.push('[');
    for (i, row) in data.chunks(width.max(1)).enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_flat(out, row);
    }
    out.push(']');
}

fn push_flat(out: &mut String, data: &[f64]) {
    out.push('[');
    for (i, v) in data.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        push_f64(out, *v);
    }
    out.push(']');
}

pub fn episode_line(tr: &Trajectory) -> String {
    let mut s = String::with_capacity(tr.len() * 24 * (tr.state_dim + tr.action_dim + 1) + 64);
    s.push_str("{\"states\":");
    push_rows(&mut s, &tr.states, tr.state_dim);
    s.push_str(",\"actions\":");
    push_rows(&mut s, &tr.actions, tr.action_dim);
    s.push_str(",\"rewards\":");
    push_flat(&mut s, &tr.rewards);
    s.push_str(",\"terminal\":");
    s.push_str(if tr.terminal { "true" } else { "false" });
    s.push('}');
    s
}

pub fn save_trajectories(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for tr in &ds.trajectories {
        writeln!(w, "{}", episode_line(tr)).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn looks_non_finite(line: &str, err: &serde_json::Error) -> bool {
    err.to_string().contains("out of range") || ["NaN", "Infinity", "inf"].iter().any(|tok| line.contains(tok))
}

fn number(v: &Value, line: usize, field: &'static str) -> Result<f64, DataError> {
    match v {
        Value::Number(n) => {
            let x = n.as_f64().ok_or_else(|| DataError::NonFinite {
                line,
                field: field.into(),
            })?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(DataError::NonFinite {
                    line,
                    field: field.into(),
                })
            }
        }
        Value::String(s) if ["NaN", "Infinity", "-Infinity", "inf", "-inf"].contains(&s.as_str()) => {
            Err(DataError::NonFinite {
                line,
                field: field.into(),
            })
        }
        other => Err(DataError::Malformed {
            line,
            msg: format!("`{field}` holds {other}, expected a number"),
        }),
    }
}

fn field<'a>(obj: &'a Value, name: &'static str, line: usize) -> Result<&'a Vec<Value>, DataError> {
    match obj.get(name) {
        Some(Value::Array(a)) => Ok(a),
        Some(_) => Err(DataError::Malformed {
            line,
            msg: format!("`{name}` must be an array"),
        }),
        None => Err(DataError::Malformed {
            line,
            msg: format!("missing field `{name}`"),
        }),
    }
}

/// Returns the row-major data and the row width.
fn matrix(obj: &Value, name: &'static str, line: usize) -> Result<(Vec<f64>, usize), DataError> {
    let rows = field(obj, name, line)?;
    let mut width = None;
    let mut data = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let Value::Array(cells) = row else {
            return Err(DataError::Ragged {
                line,
                field: name,
                detail: format!("row {i} is not an array"),
            });
        };
        match width {
            None => width = Some(cells.len()),
            Some(w) if w != cells.len() => {
                return Err(DataError::Ragged {
                    line,
                    field: name,
                    detail: format!("row {i} has {} entries, row 0 has {w}", cells.len()),
                })
            }
            _ => {}
        }
        for c in cells {
            data.push(number(c, line, name)?);
        }
    }
    Ok((data, width.unwrap_or(0)))
}

fn parse_line(text: &str, line: usize) -> Result<Trajectory, DataError> {
    let obj: Value = serde_json::from_str(text).map_err(|e| {
        if looks_non_finite(text, &e) {
            DataError::NonFinite {
                line,
                field: "?".into(),
            }
        } else {
            DataError::Malformed {
                line,
                msg: e.to_string(),
            }
        }
    })?;
    if !obj.is_object() {
        return Err(DataError::Malformed {
            line,
            msg: "expected a JSON object".into(),
        });
    }
    let (states, sd) = matrix(&obj, "states", line)?;
    let (actions, ad) = matrix(&obj, "actions", line)?;
    let rewards = field(&obj, "rewards", line)?
        .iter()
        .map(|v| number(v, line, "rewards"))
        .collect::<Result<Vec<_>, _>>()?;
    let t = rewards.len();
    if t == 0 {
        return Err(DataError::Malformed {
            line,
            msg: "episode has no steps".into(),
        });
    }
    for (name, len, width) in [("states", states.len(), sd), ("actions", actions.len(), ad)] {
        if width == 0 || len / width != t {
            return Err(DataError::Ragged {
                line,
                field: if name == "states" { "states" } else { "actions" },
                detail: format!("{} rows for {t} rewards", len.checked_div(width).unwrap_or(0)),
            });
        }
    }
    let terminal = match obj.get("terminal") {
        None => false,
        Some(Value::Bool(b)) => *b,
        Some(other) => {
            return Err(DataError::Malformed {
                line,
                msg: format!("`terminal` holds {other}, expected a boolean"),
            })
        }
    };
    Ok(Trajectory::new(sd, ad, states, actions, rewards, terminal))
}

/// Loads a JSONL trajectory file. Blank lines are skipped; an empty file
/// yields an empty dataset.
pub fn load_trajectories(path: &Path) -> Result<Dataset, DataError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut ds = Dataset::new(0, 0);
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let tr = parse_line(raw, line)?;
        if ds.trajectories.is_empty() {
            ds.state_dim = tr.state_dim;
            ds.action_dim = tr.action_dim;
        } else if tr.state_dim != ds.state_dim || tr.action_dim != ds.action_dim {
            return Err(DataError::Ragged {
                line,
                field: if tr.state_dim != ds.state_dim {
                    "states"
                } else {
                    "actions"
                },
                detail: format!(
                    "width ({}, {}) differs from earlier episodes ({}, {})",
                    tr.state_dim, tr.action_dim, ds.state_dim, ds.action_dim
                ),
            });
        }
        ds.trajectories.push(tr);
    }
    Ok(ds)
}

/// `data/pm.jsonl` -> `data/pm.stats.json`.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}
