//! Deterministic SVG rendering of result records.
//!
//! Output depends only on the input records: colors are anchored at the
//! data minimum and maximum, labels use two decimals, and iteration order
//! is fixed by sorted maps.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::experiment::{EvalRecord, MetricRecord, PatchedAttentionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    LayerHeatmap,
    HeadGrid,
    IdentityBars,
    AttentionBars,
}

impl FigureKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::LayerHeatmap => "layer_heatmap",
            Self::HeadGrid => "head_grid",
            Self::IdentityBars => "identity_bars",
            Self::AttentionBars => "attention_bars",
        }
    }
}

impl FromStr for FigureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::LayerHeatmap, Self::HeadGrid, Self::IdentityBars, Self::AttentionBars]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown figure kind `{s}`, expected layer_heatmap, head_grid, identity_bars or attention_bars"
                ))
            })
    }
}

const CELL_W: f64 = 56.0;
const CELL_H: f64 = 28.0;
const LEFT: f64 = 190.0;
const TOP: f64 = 48.0;

fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Blue at the data minimum, near-white mid-range, red at the maximum.
fn color(v: f64, lo: f64, hi: f64) -> String {
    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
    let (a, b, u) = if t < 0.5 {
        ((59.0, 76.0, 192.0), (245.0, 245.0, 245.0), t * 2.0)
    } else {
        ((245.0, 245.0, 245.0), (180.0, 4.0, 38.0), t * 2.0 - 1.0)
    };
    let mix = |x: f64, y: f64| (x + (y - x) * u).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

struct Svg {
    body: String,
    width: f64,
    height: f64,
}

impl Svg {
    fn new(width: f64, height: f64, title: &str) -> Self {
        let mut s = Self { body: String::new(), width, height };
        s.text(width / 2.0, 24.0, "middle", 15, title);
        s
    }

    fn text(&mut self, x: f64, y: f64, anchor: &str, size: u32, t: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.1}" y="{y:.1}" text-anchor="{anchor}" font-size="{size}">{}</text>"#,
            esc(t)
        );
    }

    fn rect(&mut self, class: &str, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r##"<rect class="{class}" x="{x:.1}" y="{y:.1}" width="{w:.1}" height="{h:.1}" fill="{fill}" stroke="#ffffff"/>"##
        );
    }

    fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64) {
        let _ =
            writeln!(self.body, r##"<line x1="{x1:.1}" y1="{y1:.1}" x2="{x2:.1}" y2="{y2:.1}" stroke="#333333"/>"##);
    }

    fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n{}</svg>\n",
            self.body,
            w = self.width,
            h = self.height
        )
    }
}

fn no_data(title: &str) -> String {
    let mut s = Svg::new(420.0, 240.0, title);
    s.line(LEFT - 120.0, 200.0, 380.0, 200.0);
    s.line(LEFT - 120.0, 60.0, LEFT - 120.0, 200.0);
    s.text(230.0, 135.0, "middle", 14, "no data");
    s.finish()
}

/// Rows × columns of values; `None` renders as a grey cell.
fn heatmap(title: &str, rows: &[String], cols: &[String], values: &[Vec<Option<f64>>], x_label: &str) -> String {
    let present: Vec<f64> = values.iter().flatten().flatten().copied().collect();
    if present.is_empty() {
        return no_data(title);
    }
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w = LEFT + cols.len() as f64 * CELL_W + 40.0;
    let h = TOP + rows.len() as f64 * CELL_H + 110.0;
    let mut s = Svg::new(w.max(420.0), h, title);
    for (r, label) in rows.iter().enumerate() {
        let y = TOP + r as f64 * CELL_H;
        s.text(LEFT - 8.0, y + CELL_H * 0.65, "end", 12, label);
        for (c, v) in values[r].iter().enumerate() {
            let x = LEFT + c as f64 * CELL_W;
            match v {
                Some(v) => {
                    s.rect("cell", x, y, CELL_W, CELL_H, &color(*v, lo, hi));
                    s.text(x + CELL_W / 2.0, y + CELL_H * 0.65, "middle", 10, &num(*v));
                }
                None => s.rect("cell", x, y, CELL_W, CELL_H, "#dddddd"),
            }
        }
    }
    let base = TOP + rows.len() as f64 * CELL_H;
    for (c, label) in cols.iter().enumerate() {
        s.text(LEFT + (c as f64 + 0.5) * CELL_W, base + 16.0, "middle", 11, label);
    }
    s.text(LEFT + cols.len() as f64 * CELL_W / 2.0, base + 34.0, "middle", 12, x_label);
    // legend
    let ly = base + 50.0;
    for i in 0..10 {
        let v = lo + (hi - lo) * i as f64 / 9.0;
        s.rect("legend", LEFT + i as f64 * 14.0, ly, 14.0, 12.0, &color(v, lo, hi));
    }
    s.text(LEFT, ly + 28.0, "start", 10, &num(lo));
    s.text(LEFT + 140.0, ly + 28.0, "end", 10, &num(hi));
    s.finish()
}

/// Horizontal bars around a zero axis.
fn bars(title: &str, items: &[(String, f64)], x_label: &str) -> String {
    if items.is_empty() {
        return no_data(title);
    }
    let span = items.iter().map(|i| i.1.abs()).fold(0.0, f64::max);
    let half = 160.0;
    let scale = if span > 0.0 { half / span } else { 0.0 };
    let zero = LEFT + half;
    let w = LEFT + 2.0 * half + 80.0;
    let h = TOP + items.len() as f64 * CELL_H + 60.0;
    let mut s = Svg::new(w, h, title);
    for (i, (label, v)) in items.iter().enumerate() {
        let y = TOP + i as f64 * CELL_H;
        s.text(LEFT - 8.0, y + CELL_H * 0.65, "end", 12, label);
        let len = v.abs() * scale;
        let x = if *v < 0.0 { zero - len } else { zero };
        let fill = if *v < 0.0 { "#3b4cc0" } else { "#b40426" };
        s.rect("bar", x, y + 4.0, len, CELL_H - 8.0, fill);
        let (tx, anchor) = if *v < 0.0 { (x - 4.0, "end") } else { (x + len + 4.0, "start") };
        s.text(tx, y + CELL_H * 0.65, anchor, 10, &num(*v));
    }
    let base = TOP + items.len() as f64 * CELL_H;
    s.line(zero, TOP - 4.0, zero, base);
    s.line(LEFT, base, LEFT + 2.0 * half, base);
    s.text(LEFT, base + 16.0, "middle", 10, &num(-span));
    s.text(zero, base + 16.0, "middle", 10, "0.00");
    s.text(LEFT + 2.0 * half, base + 16.0, "middle", 10, &num(span));
    s.text(zero, base + 34.0, "middle", 12, x_label);
    s.finish()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn by_pair<R>(records: &[R], pair: impl Fn(&R) -> (String, String)) -> BTreeMap<(String, String), Vec<&R>> {
    let mut m: BTreeMap<(String, String), Vec<&R>> = BTreeMap::new();
    for r in records {
        m.entry(pair(r)).or_default().push(r);
    }
    m
}

fn file_name(kind: FigureKind, pair: Option<&(String, String)>) -> String {
    let clean = |s: &str| s.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect::<String>();
    match pair {
        Some((a, b)) => format!("{}__{}__{}.svg", kind.name(), clean(a), clean(b)),
        None => format!("{}.svg", kind.name()),
    }
}

/// Mean Δ_r per (target, layer), one figure per identity pair. Head-level
/// records are left to [`head_grid`].
pub fn layer_heatmaps(records: &[MetricRecord]) -> Vec<(String, String)> {
    let layer_records: Vec<MetricRecord> = records.iter().filter(|r| r.head().is_none()).cloned().collect();
    let groups = by_pair(&layer_records, |r| (r.id1.clone(), r.id2.clone()));
    if groups.is_empty() {
        return vec![(file_name(FigureKind::LayerHeatmap, None), no_data("Mean relative logit difference by layer"))];
    }
    groups
        .iter()
        .map(|(pair, rs)| {
            let mut cells: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
            let mut n_layers = 0;
            for r in rs {
                let Some(l) = r.layer() else { continue };
                n_layers = n_layers.max(l + 1);
                let row = if r.mode == crate::patch::PatchMode::Direct {
                    format!("{} (direct)", r.target)
                } else {
                    r.target.clone()
                };
                cells.entry((row, l)).or_default().push(r.delta_r);
            }
            let mut rows: Vec<String> = cells.keys().map(|k| k.0.clone()).collect();
            rows.dedup();
            let cols: Vec<String> = (0..n_layers).map(|l| l.to_string()).collect();
            let values: Vec<Vec<Option<f64>>> = rows
                .iter()
                .map(|row| (0..n_layers).map(|l| cells.get(&(row.clone(), l)).map(|v| mean(v))).collect())
                .collect();
            let title = format!("Mean relative logit difference, {} to {}", pair.0, pair.1);
            (file_name(FigureKind::LayerHeatmap, Some(pair)), heatmap(&title, &rows, &cols, &values, "layer"))
        })
        .collect()
}

/// Mean Δ_r per head, layers as rows, one figure per pair and mode.
pub fn head_grids(records: &[MetricRecord]) -> Vec<(String, String)> {
    let head_records: Vec<MetricRecord> = records.iter().filter(|r| r.head().is_some()).cloned().collect();
    let groups = by_pair(&head_records, |r| (r.id1.clone(), r.id2.clone()));
    if groups.is_empty() {
        return vec![(file_name(FigureKind::HeadGrid, None), no_data("Mean relative logit difference by head"))];
    }
    groups
        .iter()
        .map(|(pair, rs)| {
            let mut cells: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
            for r in rs.iter().filter(|r| r.mode == crate::patch::PatchMode::Total) {
                if let (Some(l), Some(h)) = (r.layer(), r.head()) {
                    cells.entry((l, h)).or_default().push(r.delta_r);
                }
            }
            let n_layers = cells.keys().map(|k| k.0 + 1).max().unwrap_or(0);
            let n_heads = cells.keys().map(|k| k.1 + 1).max().unwrap_or(0);
            let rows: Vec<String> = (0..n_layers).map(|l| format!("layer {l}")).collect();
            let cols: Vec<String> = (0..n_heads).map(|h| h.to_string()).collect();
            let values: Vec<Vec<Option<f64>>> =
                (0..n_layers).map(|l| (0..n_heads).map(|h| cells.get(&(l, h)).map(|v| mean(v))).collect()).collect();
            let title = format!("Mean relative logit difference per head, {} to {}", pair.0, pair.1);
            (file_name(FigureKind::HeadGrid, Some(pair)), heatmap(&title, &rows, &cols, &values, "head"))
        })
        .collect()
}

/// Mean probability difference of each identity against `base`.
pub fn identity_bars(records: &[EvalRecord], base: &str) -> Vec<(String, String)> {
    let title = "Mean probability difference w.r.t. base";
    let base_prob: BTreeMap<&str, f64> =
        records.iter().filter(|r| r.identity == base).map(|r| (r.question_id.as_str(), r.prob)).collect();
    let mut order: Vec<&str> = Vec::new();
    let mut diffs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.identity != base) {
        if let Some(b) = base_prob.get(r.question_id.as_str()) {
            if !diffs.contains_key(r.identity.as_str()) {
                order.push(&r.identity);
            }
            diffs.entry(&r.identity).or_default().push(r.prob - b);
        }
    }
    let items: Vec<(String, f64)> = order.iter().map(|id| (id.to_string(), mean(&diffs[id]))).collect();
    vec![(file_name(FigureKind::IdentityBars, None), bars(title, &items, "probability difference"))]
}

/// Mean change (patched − corrupt) in each head's attention to the identity
/// position, per patched site, one figure per pair.
pub fn attention_bars(records: &[PatchedAttentionRecord]) -> Vec<(String, String)> {
    let groups = by_pair(records, |r| (r.id1.clone(), r.id2.clone()));
    if groups.is_empty() {
        return vec![(
            file_name(FigureKind::AttentionBars, None),
            no_data("Change in value-weighted attention at the identity position"),
        )];
    }
    groups
        .iter()
        .map(|(pair, rs)| {
            let mut m: BTreeMap<(String, crate::lens::HeadId), Vec<f64>> = BTreeMap::new();
            for r in rs {
                m.entry((r.site.clone(), r.head)).or_default().push(r.vw_patched - r.vw_corrupt);
            }
            let items: Vec<(String, f64)> = m.iter().map(|((site, h), v)| (format!("{site} {h}"), mean(v))).collect();
            let title = format!("Change in attention at the identity position, {} to {}", pair.0, pair.1);
            (file_name(FigureKind::AttentionBars, Some(pair)), bars(&title, &items, "value-weighted attention change"))
        })
        .collect()
}

/// Writes rendered figures into `dir`, returning their paths.
pub fn write_figures(figures: &[(String, String)], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    figures
        .iter()
        .map(|(name, svg)| {
            let p = dir.join(name);
            std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
            Ok(p)
        })
        .collect()
}
