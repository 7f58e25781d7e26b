//! Static SVG emission for result displays: volume-trajectory line charts
//! and ablation bar charts. Hand-built markup, deterministic output.

use super::TrajectoryReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{x}\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        x = WIDTH / 2.0,
    )
}

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points
        .iter()
        .map(|(x, y)| format!("{x:.2},{y:.2}"))
        .collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        coords.join(" ")
    )
}

fn markers(points: &[(f64, f64)], color: &str) -> String {
    points
        .iter()
        .map(|(x, y)| format!("<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"{color}\"/>\n"))
        .collect()
}

/// Line chart of predicted vs ground-truth lesion volumes across
/// timepoints, annotated with the Pearson coefficient.
pub fn trajectory_svg(report: &TrajectoryReport, title: &str) -> String {
    let n = report.pred_volumes_mm3.len();
    let all: Vec<f64> = report
        .pred_volumes_mm3
        .iter()
        .chain(&report.gt_volumes_mm3)
        .copied()
        .collect();
    let vmax = all.iter().cloned().fold(f64::MIN, f64::max).max(1.0);
    let vmin = 0.0;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let map = |t: usize, v: f64| -> (f64, f64) {
        let x = MARGIN + plot_w * t as f64 / (n.max(2) - 1) as f64;
        let y = HEIGHT - MARGIN - plot_h * (v - vmin) / (vmax - vmin);
        (x, y)
    };
    let pred: Vec<(f64, f64)> = report
        .pred_volumes_mm3
        .iter()
        .enumerate()
        .map(|(t, &v)| map(t, v))
        .collect();
    let gt: Vec<(f64, f64)> = report
        .gt_volumes_mm3
        .iter()
        .enumerate()
        .map(|(t, &v)| map(t, v))
        .collect();

    let mut svg = header(title);
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN,
    ));
    for t in 0..n {
        let (x, _) = map(t, 0.0);
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\" \
             text-anchor=\"middle\">t{t}</text>\n",
            y = HEIGHT - MARGIN + 20.0,
        ));
    }
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\" \
         transform=\"rotate(-90 18 {y})\" text-anchor=\"middle\">volume (mm3)</text>\n",
        y = HEIGHT / 2.0,
    ));
    svg.push_str(&polyline(&gt, "black"));
    svg.push_str(&markers(&gt, "black"));
    svg.push_str(&polyline(&pred, "#1f6fb5"));
    svg.push_str(&markers(&pred, "#1f6fb5"));
    let rho_text = match report.rho {
        Some(r) => format!("rho = {r:.3}"),
        None => "rho undefined (constant series)".to_string(),
    };
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"52\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\" fill=\"#1f6fb5\">{rho_text}</text>\n",
        x = WIDTH / 2.0,
    ));
    svg.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"black\">ground truth</text>\n\
         <text x=\"{x}\" y=\"{y2}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#1f6fb5\">prediction</text>\n",
        x = WIDTH - MARGIN - 110.0,
        y = MARGIN + 6.0,
        y2 = MARGIN + 24.0,
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart for ablation-style mean-score comparisons.
pub fn bar_chart_svg(labels: &[String], values: &[f64], title: &str) -> String {
    assert_eq!(labels.len(), values.len());
    let vmax = values.iter().cloned().fold(f64::MIN, f64::max).max(1e-9);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let n = values.len().max(1);
    let slot = plot_w / n as f64;
    let bar_w = slot * 0.6;

    let mut svg = header(title);
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
    ));
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let h = plot_h * (v / vmax).max(0.0);
        let x = MARGIN + slot * i as f64 + (slot - bar_w) / 2.0;
        let y = HEIGHT - MARGIN - h;
        svg.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w:.1}\" height=\"{h:.1}\" fill=\"#1f6fb5\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{label}</text>\n",
            cx = x + bar_w / 2.0,
            ly = HEIGHT - MARGIN + 18.0,
        ));
        svg.push_str(&format!(
            "<text x=\"{cx:.1}\" y=\"{vy:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
             text-anchor=\"middle\">{v:.3}</text>\n",
            cx = x + bar_w / 2.0,
            vy = y - 6.0,
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
