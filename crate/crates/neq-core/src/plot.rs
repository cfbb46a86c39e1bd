//! Static SVG plots: backward FLOPs, updated-neuron fraction, and test
//! accuracy against the epoch axis, with schedule milestones marked.
//!
//! Plots are artifacts for inspection, not a UI; output is deterministic
//! for a given metrics log.

use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::MetricsRecord;

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 240.0;
const MARGIN_L: f64 = 58.0;
const MARGIN_B: f64 = 36.0;
const MARGIN_T: f64 = 26.0;
const MARGIN_R: f64 = 12.0;

struct Panel<'a> {
    title: &'a str,
    color: &'a str,
    values: Vec<f64>,
}

pub fn render_svg(records: &[MetricsRecord], milestones: &[(u64, f64)]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Training("refusing to plot an empty metrics log".into()));
    }
    let epochs: Vec<f64> = records.iter().map(|r| r.epoch as f64).collect();
    let panels = [
        Panel {
            title: "backward FLOPs / iteration",
            color: "#e08020",
            values: records.iter().map(|r| r.bprop_flops_mean).collect(),
        },
        Panel {
            title: "updated neuron fraction",
            color: "#2f9e44",
            values: records.iter().map(|r| r.updated_fraction).collect(),
        },
        Panel {
            title: "test accuracy",
            color: "#c2255c",
            values: records.iter().map(|r| r.test_accuracy).collect(),
        },
    ];

    let total_w = PANEL_W * panels.len() as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{PANEL_H}\" \
         viewBox=\"0 0 {total_w} {PANEL_H}\" font-family=\"monospace\" font-size=\"10\">\n\
         <rect width=\"{total_w}\" height=\"{PANEL_H}\" fill=\"white\"/>\n"
    );

    for (pi, panel) in panels.iter().enumerate() {
        let x0 = pi as f64 * PANEL_W + MARGIN_L;
        let x1 = (pi + 1) as f64 * PANEL_W - MARGIN_R;
        let y0 = PANEL_H - MARGIN_B;
        let y1 = MARGIN_T;

        let (e_lo, e_hi) = (epochs[0], epochs[epochs.len() - 1].max(epochs[0] + 1.0));
        let finite: Vec<f64> = panel.values.iter().copied().filter(|v| v.is_finite()).collect();
        let v_lo = finite.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let mut v_hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !v_hi.is_finite() || v_hi <= v_lo {
            v_hi = v_lo + 1.0;
        }
        let sx = |e: f64| x0 + (e - e_lo) / (e_hi - e_lo) * (x1 - x0);
        let sy = |v: f64| y0 - (v - v_lo) / (v_hi - v_lo) * (y0 - y1);

        // Axes and labels.
        svg.push_str(&format!(
            "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"black\"/>\n\
             <line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x0:.1}\" y2=\"{y1:.1}\" stroke=\"black\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            (x0 + x1) / 2.0,
            y1 - 8.0,
            panel.title
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">epoch</text>\n",
            (x0 + x1) / 2.0,
            y0 + 26.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            x0 - 4.0,
            y0 + 3.0,
            fmt_tick(v_lo)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            x0 - 4.0,
            y1 + 3.0,
            fmt_tick(v_hi)
        ));
        svg.push_str(&format!(
            "<text x=\"{x0:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 14.0,
            epochs[0] as u64
        ));
        svg.push_str(&format!(
            "<text x=\"{x1:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            y0 + 14.0,
            epochs[epochs.len() - 1] as u64
        ));

        // Schedule milestones.
        for &(m, _) in milestones {
            let mx = sx(m as f64);
            if mx >= x0 && mx <= x1 {
                svg.push_str(&format!(
                    "<line x1=\"{mx:.1}\" y1=\"{y0:.1}\" x2=\"{mx:.1}\" y2=\"{y1:.1}\" \
                     stroke=\"#888888\" stroke-dasharray=\"3,3\" class=\"milestone\"/>\n"
                ));
            }
        }

        // The series itself.
        let pts: Vec<String> = epochs
            .iter()
            .zip(panel.values.iter())
            .filter(|(_, v)| v.is_finite())
            .map(|(&e, &v)| format!("{:.1},{:.1}", sx(e), sy(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            pts.join(" "),
            panel.color
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v.abs() >= 1e3 {
        format!("{:.1}k", v / 1e3)
    } else {
        format!("{v:.2}")
    }
}

pub fn emit_plots(
    records: &[MetricsRecord],
    milestones: &[(u64, f64)],
    path: &Path,
) -> Result<()> {
    let svg = render_svg(records, milestones)?;
    std::fs::write(path, svg).map_err(|e| Error::io(path.display().to_string(), e))
}
