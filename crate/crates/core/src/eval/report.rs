use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{mean, std_dev, EvalError};

pub const CSV_HEADER: &str = "axis_value,seed,mean_return,norm_score,variant,status,requested_return";

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Ok,
    Failed(String),
}

/// One `(variant, axis value, seed)` evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub variant: String,
    pub axis_value: f64,
    pub seed: u64,
    /// Per-episode raw returns.
    pub returns: Vec<f64>,
    pub norm_scores: Vec<f64>,
    pub mean_return: f64,
    pub norm_score: f64,
    /// Conditioning target, when the axis varies it.
    pub requested: Option<f64>,
    pub status: CellStatus,
}

impl Cell {
    pub fn failed(variant: &str, axis_value: f64, seed: u64, msg: String) -> Self {
        Self {
            variant: variant.to_owned(),
            axis_value,
            seed,
            returns: Vec::new(),
            norm_scores: Vec::new(),
            mean_return: f64::NAN,
            norm_score: f64::NAN,
            requested: None,
            status: CellStatus::Failed(msg),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == CellStatus::Ok
    }
}

/// A labelled reference position along the sweep axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Marker {
    pub label: String,
    pub axis_value: f64,
    pub value: f64,
}

/// Mean and spread of one `(variant, axis value)` group over its seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub variant: String,
    pub axis_value: f64,
    pub seeds: usize,
    pub failed: usize,
    pub mean_return: f64,
    pub mean_norm: f64,
    pub std_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub axis: String,
    pub cells: Vec<Cell>,
    pub markers: Vec<Marker>,
    pub random_score: f64,
    pub expert_score: f64,
}

fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        "NaN".into()
    }
}

impl EvalReport {
    pub fn new(axis: &str, random_score: f64, expert_score: f64) -> Self {
        Self {
            axis: axis.to_owned(),
            cells: Vec::new(),
            markers: Vec::new(),
            random_score,
            expert_score,
        }
    }

    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = Vec::new();
        for c in &self.cells {
            if !v.contains(&c.variant) {
                v.push(c.variant.clone());
            }
        }
        v
    }

    /// Groups in first-seen variant order, axis values ascending.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut out = Vec::new();
        for variant in self.variants() {
            let mut groups: BTreeMap<u64, Vec<&Cell>> = BTreeMap::new();
            for c in self.cells.iter().filter(|c| c.variant == variant) {
                groups.entry(sortable(c.axis_value)).or_default().push(c);
            }
            for cells in groups.values() {
                let ok: Vec<&&Cell> = cells.iter().filter(|c| c.is_ok()).collect();
                let norms: Vec<f64> = ok.iter().map(|c| c.norm_score).collect();
                let rets: Vec<f64> = ok.iter().map(|c| c.mean_return).collect();
                let (m, s, r) = if ok.is_empty() {
                    (f64::NAN, f64::NAN, f64::NAN)
                } else {
                    (mean(&norms), std_dev(&norms), mean(&rets))
                };
                out.push(Aggregate {
                    variant: variant.clone(),
                    axis_value: cells[0].axis_value,
                    seeds: cells.len(),
                    failed: cells.len() - ok.len(),
                    mean_return: r,
                    mean_norm: m,
                    std_norm: s,
                });
            }
        }
        out
    }

    pub fn find(&self, variant: &str, axis_value: f64) -> Option<Aggregate> {
        self.aggregate()
            .into_iter()
            .find(|a| a.variant == variant && a.axis_value == axis_value)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let status = match &c.status {
                CellStatus::Ok => "ok".to_owned(),
                CellStatus::Failed(m) => format!("failed: {}", m.replace([',', '\n'], ";")),
            };
            let req = c.requested.map(num).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                num(c.axis_value),
                c.seed,
                num(c.mean_return),
                num(c.norm_score),
                c.variant,
                status,
                req
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        write_file(path, &self.to_csv())
    }

    pub fn write_svg(&self, path: &Path) -> Result<(), EvalError> {
        write_file(path, &self.to_svg())
    }

    /// Line chart of mean normalised score per variant with ±1 std bars.
    /// Cells that failed are drawn as red crosses on the x axis.
    pub fn to_svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 420.0;
        const L: f64 = 70.0;
        const R: f64 = 170.0;
        const T: f64 = 30.0;
        const B: f64 = 50.0;
        const COLORS: [&str; 8] = [
            "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        ];
        let aggs = self.aggregate();
        let xs: Vec<f64> = self
            .cells
            .iter()
            .map(|c| c.axis_value)
            .chain(self.markers.iter().map(|m| m.axis_value))
            .filter(|v| v.is_finite())
            .collect();
        let mut ys: Vec<f64> = aggs
            .iter()
            .filter(|a| a.mean_norm.is_finite())
            .flat_map(|a| [a.mean_norm - a.std_norm, a.mean_norm + a.std_norm])
            .collect();
        ys.extend([0.0, 100.0]);
        let (x0, x1) = padded_range(&xs);
        let (y0, y1) = padded_range(&ys);
        let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
        let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{L}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{L}" y1="{T}" x2="{L}" y2="{}" stroke="black"/>"#,
            H - B,
            W - R,
            H - B,
            H - B
        );
        for i in 0..=5 {
            let fx = x0 + (x1 - x0) * i as f64 / 5.0;
            let fy = y0 + (y1 - y0) * i as f64 / 5.0;
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text><text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                px(fx),
                H - B + 18.0,
                tick(fx),
                L - 6.0,
                py(fy) + 4.0,
                tick(fy)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            (L + W - R) / 2.0,
            H - 12.0,
            escape(&self.axis)
        );
        let _ = writeln!(
            s,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">normalised score</text>"#,
            (T + H - B) / 2.0,
            (T + H - B) / 2.0
        );
        for m in &self.markers {
            let x = px(m.axis_value);
            let _ = writeln!(
                s,
                r##"<line x1="{x:.1}" y1="{T}" x2="{x:.1}" y2="{}" stroke="#555" stroke-dasharray="4 3"/><text x="{:.1}" y="{}" fill="#555">{} ({})</text>"##,
                H - B,
                x + 3.0,
                T + 12.0,
                escape(&m.label),
                tick(m.value)
            );
        }
        for (vi, variant) in self.variants().iter().enumerate() {
            let color = COLORS[vi % COLORS.len()];
            let pts: Vec<&Aggregate> = aggs
                .iter()
                .filter(|a| &a.variant == variant && a.mean_norm.is_finite())
                .collect();
            if pts.len() > 1 {
                let path: Vec<String> = pts
                    .iter()
                    .map(|a| format!("{:.1},{:.1}", px(a.axis_value), py(a.mean_norm)))
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                    path.join(" ")
                );
            }
            for a in &pts {
                let (x, y) = (px(a.axis_value), py(a.mean_norm));
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/><circle cx="{x:.1}" cy="{y:.1}" r="3.5" fill="{color}"/>"#,
                    py(a.mean_norm - a.std_norm),
                    py(a.mean_norm + a.std_norm)
                );
            }
            let ly = T + 16.0 * vi as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{:.1}" width="12" height="12" fill="{color}"/><text x="{}" y="{:.1}">{}</text>"#,
                W - R + 14.0,
                ly,
                W - R + 30.0,
                ly + 10.0,
                escape(variant)
            );
        }
        for c in self.cells.iter().filter(|c| !c.is_ok()) {
            let (x, y) = (px(c.axis_value), H - B);
            let _ = writeln!(
                s,
                r#"<g class="failed" stroke="red" stroke-width="2"><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}"/><title>{} failed</title></g>"#,
                x - 5.0,
                y - 5.0,
                x + 5.0,
                y + 5.0,
                x - 5.0,
                y + 5.0,
                x + 5.0,
                y - 5.0,
                escape(&c.variant)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

/// Order-preserving key for finite floats.
fn sortable(v: f64) -> u64 {
    let b = v.to_bits();
    if b >> 63 == 1 {
        !b
    } else {
        b | (1 << 63)
    }
}

fn padded_range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn write_file(path: &Path, text: &str) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.into(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, text).map_err(io)
}
