//! Minimal SVG line plots for closed-loop traces.

use std::fmt::Write;

use crate::closed_loop::ClosedLoopTrace;

const PANEL_W: f64 = 640.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    (x0, x1, y0, y1)
}

fn draw_panel(out: &mut String, panel: &Panel, top: f64) {
    let (x0, x1, y0, y1) = bounds(&panel.series);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (PANEL_W - 2.0 * MARGIN);
    let sy = |y: f64| top + PANEL_H - 25.0 - (y - y0) / (y1 - y0) * (PANEL_H - 50.0);
    let _ = writeln!(
        out,
        r#"<text x="{MARGIN}" y="{:.1}" font-size="13">{}</text>"#,
        top + 15.0,
        panel.title
    );
    let _ = writeln!(
        out,
        r##"<rect x="{MARGIN}" y="{:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
        top + 25.0,
        PANEL_W - 2.0 * MARGIN,
        PANEL_H - 50.0
    );
    for (v, y) in [(y1, sy(y1)), (y0, sy(y0))] {
        let _ = writeln!(
            out,
            r#"<text x="2" y="{:.1}" font-size="10">{v:.3e}</text>"#,
            y + 4.0
        );
    }
    for (i, s) in panel.series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{color}">{}</text>"#,
            PANEL_W - MARGIN + 5.0,
            top + 35.0 + 12.0 * i as f64,
            s.label
        );
    }
}

/// Stacks the panels vertically into one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let height = PANEL_H * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{:.0}" height="{height:.0}" font-family="sans-serif">"#,
        PANEL_W + 120.0
    );
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut out, p, PANEL_H * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// Positions, velocities and inputs against the step index, one line per
/// component and trace.
pub fn trace_figure(traces: &[ClosedLoopTrace], labels: &[String]) -> String {
    let n = traces.first().map_or(0, |t| t.states[0].len());
    let half = n / 2;
    let state_series = |range: std::ops::Range<usize>| {
        traces
            .iter()
            .zip(labels)
            .flat_map(|(t, label)| {
                range.clone().map(move |i| Series {
                    label: format!("{label} x{}", i + 1),
                    points: t
                        .states
                        .iter()
                        .enumerate()
                        .map(|(k, x)| (k as f64, x[i]))
                        .collect(),
                })
            })
            .collect::<Vec<_>>()
    };
    let inputs: Vec<Series> = traces
        .iter()
        .zip(labels)
        .flat_map(|(t, label)| {
            let m = t.inputs.first().map_or(0, |u| u.len());
            (0..m).map(move |i| Series {
                label: format!("{label} u{}", i + 1),
                points: t
                    .inputs
                    .iter()
                    .enumerate()
                    .map(|(k, u)| (k as f64, u[i]))
                    .collect(),
            })
        })
        .collect();
    render(&[
        Panel {
            title: "position".into(),
            series: state_series(0..half.max(1).min(n)),
        },
        Panel {
            title: "velocity".into(),
            series: state_series(half.max(1).min(n)..n),
        },
        Panel {
            title: "input".into(),
            series: inputs,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polyline_per_series() {
        let svg = render(&[Panel {
            title: "t".into(),
            series: vec![
                Series {
                    label: "a".into(),
                    points: vec![(0.0, 1.0), (1.0, 2.0)],
                },
                Series {
                    label: "b".into(),
                    points: vec![(0.0, 0.0), (1.0, f64::NAN)],
                },
            ],
        }]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn empty_panel_is_valid() {
        let svg = render(&[Panel {
            title: "none".into(),
            series: vec![],
        }]);
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
