// SPDX-License-Identifier: MIT OR Apache-2.0

//! SVG rendering of result files. Output depends only on file contents.
//!
//! Grids become heatmaps with the color scale clamped to [0, 1]; the raw
//! value is kept in each cell's tooltip. Null cells are hatched. Attention
//! summaries become bar plots.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;
use statetrack::patching::{AxisKind, PatchGrid};
use statetrack::AttentionSummary;

use crate::accuracy::AccuracyGrid;
use crate::RunError;

const CELL: usize = 28;
const LEFT: usize = 72;
const TOP: usize = 44;
const BOTTOM: usize = 96;
const RIGHT: usize = 16;

/// Anything `emit_plots` can draw.
#[derive(Clone, Debug)]
pub enum Plottable {
    Heatmap(Heatmap),
    Bars(Bars),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub title: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    /// Row-major.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bars {
    pub title: String,
    pub labels: Vec<String>,
    pub values: Vec<f64>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out
}

/// White at 0, dark blue at 1.
fn color(v: f64) -> String {
    let t = v.clamp(0.0, 1.0);
    let mix = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(255.0, 8.0), mix(255.0, 48.0), mix(255.0, 107.0))
}

fn header(out: &mut String, width: usize, height: usize, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    out.push_str(concat!(
        r#"<defs><pattern id="hatch" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)">"#,
        r##"<rect width="6" height="6" fill="#ffffff"/><line x1="0" y1="0" x2="0" y2="6" stroke="#999999" stroke-width="2"/>"##,
        "</pattern></defs>\n"
    ));
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2, escape(title));
}

pub fn render_heatmap(h: &Heatmap) -> String {
    let (rows, cols) = (h.row_labels.len(), h.col_labels.len());
    let width = LEFT + cols * CELL + RIGHT;
    let height = TOP + rows * CELL + BOTTOM;
    let mut out = String::new();
    header(&mut out, width, height, &h.title);
    for (r, label) in h.row_labels.iter().enumerate() {
        let y = TOP + r * CELL + CELL / 2 + 4;
        let _ = writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, LEFT - 6, escape(label));
    }
    for (c, label) in h.col_labels.iter().enumerate() {
        let x = LEFT + c * CELL + CELL / 2;
        let y = TOP + rows * CELL + 10;
        let _ = writeln!(
            out,
            r#"<text x="{x}" y="{y}" text-anchor="end" transform="rotate(-60 {x} {y})">{}</text>"#,
            escape(label)
        );
    }
    for r in 0..rows {
        for c in 0..cols {
            let (x, y) = (LEFT + c * CELL, TOP + r * CELL);
            let (fill, tip, class) = match h.values.get(r * cols + c).copied().flatten() {
                Some(v) => (color(v), format!("{v:.6}"), "cell"),
                None => ("url(#hatch)".to_owned(), "null".to_owned(), "cell null"),
            };
            let _ = writeln!(
                out,
                r##"<rect class="{class}" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#dddddd"><title>{} / {}: {tip}</title></rect>"##,
                escape(&h.row_labels[r]),
                escape(&h.col_labels[c]),
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

pub fn render_bars(b: &Bars) -> String {
    let plot_h = 160;
    let n = b.labels.len();
    let width = LEFT + n * CELL + RIGHT;
    let height = TOP + plot_h + BOTTOM;
    let base = TOP + plot_h;
    let mut out = String::new();
    header(&mut out, width, height, &b.title);
    let _ = writeln!(out, r#"<line x1="{LEFT}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, LEFT + n * CELL);
    for (tick, label) in [(0.0, "0"), (0.5, "0.5"), (1.0, "1")] {
        let y = base - (tick * plot_h as f64).round() as usize;
        let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="end">{label}</text>"#, LEFT - 6, y + 4);
    }
    for (i, (label, &v)) in b.labels.iter().zip(&b.values).enumerate() {
        let h = (v.clamp(0.0, 1.0) * plot_h as f64).round() as usize;
        let x = LEFT + i * CELL + 3;
        let _ = writeln!(
            out,
            r##"<rect class="bar" x="{x}" y="{}" width="{}" height="{h}" fill="#08306b"><title>{}: {v:.6}</title></rect>"##,
            base - h,
            CELL - 6,
            escape(label)
        );
        let (tx, ty) = (LEFT + i * CELL + CELL / 2, base + 10);
        let _ = writeln!(
            out,
            r#"<text x="{tx}" y="{ty}" text-anchor="end" transform="rotate(-60 {tx} {ty})">{}</text>"#,
            escape(label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn malformed(path: &Path, reason: impl ToString) -> RunError {
    RunError::MalformedResultFile { path: path.to_owned(), reason: reason.to_string() }
}

fn patch_heatmap(g: PatchGrid<f64>, title: String) -> Heatmap {
    let row_labels = (0..g.rows).map(|l| format!("L{l}")).collect();
    let col_labels = match (&g.token_labels, g.axis_kind) {
        (Some(labels), _) => labels.iter().enumerate().map(|(i, t)| format!("{i}:{t}")).collect(),
        (None, AxisKind::LayerByHead) => (0..g.cols).map(|h| format!("H{h}")).collect(),
        (None, AxisKind::LayerByPosition) => (0..g.cols).map(|p| format!("{p}")).collect(),
    };
    Heatmap { title, row_labels, col_labels, values: g.grid }
}

/// Reads one result file into something drawable.
pub fn load_plottable(path: &Path) -> Result<Plottable, RunError> {
    let text = fs::read_to_string(path).map_err(RunError::io(path))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| malformed(path, e))?;
    let title = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if value.get("axis_kind").is_some() {
        let g: PatchGrid<f64> = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
        let problems = g.violations();
        if !problems.is_empty() {
            return Err(malformed(path, problems.join("; ")));
        }
        let title = format!("{title} ({} pairs)", g.pair_count);
        Ok(Plottable::Heatmap(patch_heatmap(g, title)))
    } else if value.get("cells").is_some() && value.get("row_axis").is_some() {
        let g: AccuracyGrid = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
        let problems = g.violations();
        if !problems.is_empty() {
            return Err(malformed(path, problems.join("; ")));
        }
        Ok(Plottable::Heatmap(Heatmap {
            title: format!("{title} ({}, {} x {})", g.domain, g.row_axis, g.col_axis),
            row_labels: g.rows.iter().map(|r| r.to_string()).collect(),
            col_labels: g.cols.iter().map(|c| c.to_string()).collect(),
            values: g.cells.iter().map(|c| c.accuracy).collect(),
        }))
    } else if value.get("heads").is_some() && value.get("weights").is_some() {
        let s: AttentionSummary = serde_json::from_value(value).map_err(|e| malformed(path, e))?;
        if s.token_labels.len() != s.weights.len() {
            return Err(malformed(path, "token_labels and weights differ in length"));
        }
        let heads: Vec<String> = s.heads.iter().map(|(l, h)| format!("L{l}H{h}")).collect();
        Ok(Plottable::Bars(Bars {
            title: format!("{title} ({})", heads.join(", ")),
            labels: s.token_labels.iter().enumerate().map(|(i, t)| format!("{i}:{t}")).collect(),
            values: s.weights,
        }))
    } else {
        Err(malformed(path, "not a patching grid, accuracy grid or attention summary"))
    }
}

/// Result files among `inputs`, expanding directories. Manifests and head
/// rankings inside directories are skipped.
fn expand(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, RunError> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(RunError::io(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    name.ends_with(".json") && !name.ends_with(".manifest.json") && name != "top_heads.json" && name != "dfa.json"
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plot".into())
}

// Inputs sharing a file stem are told apart by their parent directory.
fn output_stem(p: &Path, all: &[PathBuf]) -> String {
    let own = stem(p);
    if all.iter().filter(|q| stem(q) == own).count() < 2 {
        return own;
    }
    let parent = p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{parent}_{own}")
}

/// Writes one SVG per result file into `out_dir`, named after the input.
pub fn emit_plots(inputs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, RunError> {
    let files = expand(inputs)?;
    let rendered = files
        .iter()
        .map(|f| {
            let svg = match load_plottable(f)? {
                Plottable::Heatmap(h) => render_heatmap(&h),
                Plottable::Bars(b) => render_bars(&b),
            };
            Ok((out_dir.join(format!("{}.svg", output_stem(f, &files))), svg))
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    fs::create_dir_all(out_dir).map_err(RunError::io(out_dir))?;
    let mut written = Vec::new();
    for (path, svg) in rendered {
        fs::write(&path, svg).map_err(RunError::io(&path))?;
        written.push(path);
    }
    Ok(written)
}
