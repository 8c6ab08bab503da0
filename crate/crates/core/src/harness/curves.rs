//! Erase curves: nodule score, erased area and DICE against the step index,
//! drawn as a plain SVG line plot.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub score: f64,
    pub erased_px: usize,
    pub dice: Option<f64>,
}

/// Parses the `step,score,erased_px,dice` CSV; an empty DICE cell means no
/// ground truth.
pub fn parse_curve_csv(text: &str, origin: &str) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        let body = line.trim_end_matches(['\n', '\r']);
        let at = offset;
        offset += line.len();
        if n == 0 || body.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Format {
            path: origin.to_string(),
            offset: at,
            msg: msg.to_string(),
        };
        let f: Vec<&str> = body.split(',').collect();
        if f.len() != 4 {
            return Err(bad("expected 4 fields"));
        }
        rows.push(CurveRow {
            step: f[0].parse().map_err(|_| bad("bad step"))?,
            score: f[1].parse().map_err(|_| bad("bad score"))?,
            erased_px: f[2].parse().map_err(|_| bad("bad erased_px"))?,
            dice: if f[3].is_empty() {
                None
            } else {
                Some(f[3].parse().map_err(|_| bad("bad dice"))?)
            },
        });
    }
    Ok(rows)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const PAD: f64 = 48.0;

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, label: &str) {
    let _ = write!(out, "  <polyline id=\"{label}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"");
    for (i, (x, y)) in pts.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x:.2},{y:.2}");
    }
    out.push_str("\"/>\n");
}

/// SVG with the score (0-1), erased area (fraction of the final area) and
/// DICE (0-100, scaled to 0-1) on a shared step axis, plus the flip
/// threshold `beta` as a dashed line.
pub fn render_svg(rows: &[CurveRow], beta: f64) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Data("erase curve has no steps".into()));
    }
    let first = rows[0].step as f64;
    let last = rows[rows.len() - 1].step as f64;
    let span = (last - first).max(1.0);
    let px = |s: usize| PAD + (s as f64 - first) / span * (WIDTH - 2.0 * PAD);
    let py = |v: f64| HEIGHT - PAD - v.clamp(0.0, 1.0) * (HEIGHT - 2.0 * PAD);
    let max_area = rows.iter().map(|r| r.erased_px).max().unwrap_or(0).max(1) as f64;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    s.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    let (x0, x1, y0, y1) = (PAD, WIDTH - PAD, py(0.0), py(1.0));
    let _ = writeln!(s, "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(s, "  <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    let _ = writeln!(
        s,
        "  <line x1=\"{x0}\" y1=\"{:.2}\" x2=\"{x1}\" y2=\"{:.2}\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>",
        py(beta),
        py(beta)
    );
    let _ = writeln!(s, "  <text x=\"{x0}\" y=\"{:.2}\" font-size=\"12\">step {}</text>", y0 + 20.0, rows[0].step);
    let _ = writeln!(
        s,
        "  <text x=\"{x1}\" y=\"{:.2}\" font-size=\"12\" text-anchor=\"end\">step {}</text>",
        y0 + 20.0,
        rows[rows.len() - 1].step
    );

    let score: Vec<_> = rows.iter().map(|r| (px(r.step), py(r.score))).collect();
    let area: Vec<_> = rows.iter().map(|r| (px(r.step), py(r.erased_px as f64 / max_area))).collect();
    polyline(&mut s, &score, "#d62728", "score");
    polyline(&mut s, &area, "#1f77b4", "erased-area");
    if rows.iter().all(|r| r.dice.is_some()) {
        let dice: Vec<_> = rows.iter().map(|r| (px(r.step), py(r.dice.unwrap_or(0.0) / 100.0))).collect();
        polyline(&mut s, &dice, "#2ca02c", "dice");
    }
    for (i, (name, color)) in [("score", "#d62728"), ("erased area", "#1f77b4"), ("DICE", "#2ca02c")].iter().enumerate() {
        let _ = writeln!(
            s,
            "  <text x=\"{:.2}\" y=\"{:.2}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            x0 + 8.0 + 110.0 * i as f64,
            PAD - 16.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
