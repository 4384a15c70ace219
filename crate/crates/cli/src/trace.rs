//! Score-versus-epoch trace: CSV table and SVG line plot.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::Path;

use pesqnet_core::training::{TracePhase, TraceRow};

use crate::error::{Error, Result};

pub const TRACE_HEADER: &str = "epoch,phase,heldout_score,train_loss";

/// One CSV line without the newline. Floats use the shortest repr that
/// parses back to the same value.
pub fn trace_line(row: &TraceRow) -> String {
    let loss = row.train_loss.map(|l| l.to_string()).unwrap_or_default();
    format!("{},{},{},{}", row.epoch, row.phase, row.heldout_score, loss)
}

pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&trace_line(r));
        out.push('\n');
    }
    out
}

pub fn parse_trace_csv(text: &str, path: &Path) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim_end) != Some(TRACE_HEADER) {
        return Err(Error::format(path, format!("expected header `{TRACE_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            Ok(TraceRow {
                epoch: f[0].parse().map_err(|_| bad("bad epoch"))?,
                phase: TracePhase::parse(f[1]).map_err(|_| bad("bad phase"))?,
                heldout_score: f[2].parse().map_err(|_| bad("bad score"))?,
                train_loss: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad("bad loss"))?) },
            })
        })
        .collect()
}

/// Appends rows to a CSV file as training produces them.
pub struct TraceWriter {
    file: File,
    path: std::path::PathBuf,
}

impl TraceWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "{TRACE_HEADER}").map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.into() })
    }

    pub fn append(&mut self, row: &TraceRow) -> Result<()> {
        writeln!(self.file, "{}", trace_line(row)).and_then(|_| self.file.flush()).map_err(|e| Error::io(&self.path, e))
    }
}

/// Line plot of held-out score against epoch. The initial point is drawn
/// as a triangle; DNS epochs are filled circles, PESQNet epochs hollow.
pub fn trace_to_svg(rows: &[TraceRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Config("cannot plot an empty trace".into()));
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let max_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(0).max(1) as f64;
    let (mut lo, mut hi) = rows.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.heldout_score), b.max(r.heldout_score)));
    if hi - lo < 1e-3 {
        lo -= 0.05;
        hi += 0.05;
    }
    let x = |e: usize| m + (w - 2.0 * m) * e as f64 / max_epoch;
    let y = |s: f64| h - m - (h - 2.0 * m) * (s - lo) / (hi - lo);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m, h - m);
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">epoch</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" font-size="14" transform="rotate(-90 14 {})" text-anchor="middle">held-out score</text>"#, h / 2.0, h / 2.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{lo:.3}</text>"#, m - 4.0, h - m);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{hi:.3}</text>"#, m - 4.0, m + 4.0);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#, w - m, h - m + 16.0, max_epoch);
    if rows.len() > 1 {
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", x(r.epoch), y(r.heldout_score))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#, pts.join(" "));
    }
    for r in rows {
        let (cx, cy) = (x(r.epoch), y(r.heldout_score));
        let _ = match r.phase {
            TracePhase::Initial => {
                writeln!(svg, r#"<polygon class="marker" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="black"/>"#, cx, cy - 6.0, cx - 5.0, cy + 4.0, cx + 5.0, cy + 4.0)
            }
            TracePhase::Dns => writeln!(svg, r#"<circle class="marker" cx="{cx:.2}" cy="{cy:.2}" r="4" fill="steelblue"/>"#),
            TracePhase::PesqNet => writeln!(svg, r#"<circle class="marker" cx="{cx:.2}" cy="{cy:.2}" r="4" fill="white" stroke="steelblue"/>"#),
        };
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Writes the table and the plot.
pub fn emit_trace_plot(rows: &[TraceRow], csv_path: &Path, svg_path: &Path) -> Result<()> {
    let svg = trace_to_svg(rows)?;
    fs::write(csv_path, trace_to_csv(rows)).map_err(|e| Error::io(csv_path, e))?;
    fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))
}
