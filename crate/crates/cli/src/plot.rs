//! Minimal hand-written SVG charts.

use std::fmt::Write;

use anyhow::{anyhow, bail};
use strata::experiment_harness::ComparisonReport;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

const SHUFFLED: &str = "#1f77b4";
const STRATIFIED: &str = "#d62728";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str, source: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <desc>source: {}</desc>\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        escape(source),
        WIDTH / 2.0,
        escape(title)
    )
}

/// Axis frame with `ticks` labelled y-ticks over `[lo, hi]`.
fn frame(svg: &mut String, lo: f64, hi: f64, ticks: usize, x_label: &str, y_label: &str) {
    let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        svg,
        "<path d=\"M{x0} {y1} V{y0} H{x1}\" fill=\"none\" stroke=\"black\"/>"
    );
    for t in 0..=ticks {
        let v = lo + (hi - lo) * t as f64 / ticks as f64;
        let y = y0 - (y0 - y1) * t as f64 / ticks as f64;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{y:.1}\" x2=\"{x1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{v:.3}</text>",
            x0,
            x0 - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        "<text transform=\"translate(16 {}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-6);
    (lo - pad, hi + pad)
}

/// Trailing mean over up to `window` points.
pub fn rolling_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn polyline(svg: &mut String, values: &[f64], n: usize, lo: f64, hi: f64, style: &str) {
    if values.is_empty() {
        return;
    }
    let span = (n.max(2) - 1) as f64;
    let px = |i: usize| LEFT + (WIDTH - RIGHT - LEFT) * i as f64 / span;
    let py = |v: f64| HEIGHT - BOTTOM - (HEIGHT - BOTTOM - TOP) * (v - lo) / (hi - lo);
    let points: Vec<String> = values.iter().enumerate().map(|(i, &v)| format!("{:.1},{:.1}", px(i), py(v))).collect();
    let _ = writeln!(svg, "<polyline fill=\"none\" {style} points=\"{}\"/>", points.join(" "));
}

/// Per-batch loss of both arms: faded raw values under a rolling average.
pub fn loss_chart(r: &ComparisonReport, window: usize, source: &str) -> String {
    let shuffled: Vec<f64> = r.per_batch_shuffled.iter().map(|b| b.mean_loss).collect();
    let stratified: Vec<f64> = r.per_batch_stratified.iter().map(|b| b.mean_loss).collect();
    let (lo, hi) = padded_range(shuffled.iter().chain(&stratified).copied());
    let n = shuffled.len().max(stratified.len());

    let mut svg = header("Per-batch InfoNCE loss", source);
    frame(&mut svg, lo, hi, 5, "batch", "loss");
    for (values, color) in [(&shuffled, SHUFFLED), (&stratified, STRATIFIED)] {
        polyline(&mut svg, values, n, lo, hi, &format!("stroke=\"{color}\" stroke-opacity=\"0.25\""));
        polyline(&mut svg, &rolling_mean(values, window), n, lo, hi, &format!("stroke=\"{color}\" stroke-width=\"2\""));
    }
    for (row, (label, color)) in [("shuffled", SHUFFLED), ("stratified", STRATIFIED)].into_iter().enumerate() {
        let y = TOP + 12.0 + 16.0 * row as f64;
        let x = WIDTH - RIGHT - 150.0;
        let _ = writeln!(
            svg,
            "<line x1=\"{x}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{label} (mean {:.4})</text>",
            x + 20.0,
            x + 26.0,
            y + 4.0,
            if row == 0 { r.mean_loss_shuffled } else { r.mean_loss_stratified }
        );
    }
    let _ = writeln!(
        svg,
        "<text x=\"{LEFT}\" y=\"{}\" fill=\"#555\">rolling mean over {window} batches, seed {}</text>",
        TOP - 6.0,
        r.config.batch.seed
    );
    svg.push_str("</svg>\n");
    svg
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatBar {
    pub label: String,
    pub size: usize,
    pub similarity: Option<f64>,
}

/// Read the rows of a cluster stats TSV.
pub fn parse_stats(text: &str) -> anyhow::Result<Vec<StatBar>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.is_empty());
    match lines.next() {
        Some((_, h)) if h.starts_with("cluster\t") => {}
        _ => bail!("missing header row"),
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                bail!("line {}: expected 4 fields, found {}", n + 1, f.len());
            }
            let size = f[1].parse().map_err(|e| anyhow!("line {}: size: {e}", n + 1))?;
            let similarity = match f[3] {
                "NA" => None,
                s => Some(s.parse().map_err(|e| anyhow!("line {}: similarity: {e}", n + 1))?),
            };
            Ok(StatBar {
                label: f[0].to_string(),
                size,
                similarity,
            })
        })
        .collect()
}

/// One bar per cluster, with the overall value as a dashed reference line.
pub fn stats_chart(bars: &[StatBar], source: &str) -> String {
    let (clusters, overall): (Vec<&StatBar>, Vec<&StatBar>) = bars.iter().partition(|b| b.label != "overall");
    let values = bars.iter().filter_map(|b| b.similarity);
    let (lo, hi) = padded_range(values.chain([0.0]));
    let (lo, hi) = (lo.min(0.0), hi.max(0.0));

    let mut svg = header("Mean pairwise cosine similarity per cluster", source);
    frame(&mut svg, lo, hi, 5, "cluster", "similarity");
    let py = |v: f64| HEIGHT - BOTTOM - (HEIGHT - BOTTOM - TOP) * (v - lo) / (hi - lo);
    let slot = (WIDTH - RIGHT - LEFT) / clusters.len().max(1) as f64;
    for (i, b) in clusters.iter().enumerate() {
        let x = LEFT + slot * i as f64;
        if let Some(v) = b.similarity {
            let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
            let _ = writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{top:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{SHUFFLED}\"><title>{} (n={}): {v:.4}</title></rect>",
                x + slot * 0.15,
                slot * 0.7,
                bottom - top,
                escape(&b.label),
                b.size
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            x + slot / 2.0,
            HEIGHT - BOTTOM + 16.0,
            escape(&b.label)
        );
    }
    if let Some(v) = overall.first().and_then(|b| b.similarity) {
        let y = py(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{LEFT}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"{STRATIFIED}\" stroke-dasharray=\"6 4\"/><text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" fill=\"{STRATIFIED}\">overall {v:.4}</text>",
            WIDTH - RIGHT,
            WIDTH - RIGHT,
            y - 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rolling_mean_warms_up() {
        assert_eq!(rolling_mean(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(rolling_mean(&[1.0, 3.0], 10), vec![1.0, 2.0]);
        assert!(rolling_mean(&[], 3).is_empty());
    }

    #[test]
    fn parses_stats_rows() {
        let text = "# sample_size=3000\n# seed=0\ncluster\tsize\tsampled\tsimilarity\n000\t5\t5\t0.500000\n001\t1\t1\tNA\noverall\t6\t6\t0.250000\n";
        let bars = parse_stats(text).unwrap();
        assert_eq!(bars.len(), 3);
        assert_eq!(bars[1].similarity, None);
        assert_eq!(bars[2].label, "overall");
        let svg = stats_chart(&bars, "stats.tsv");
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<rect x=").count(), 1);
    }

    #[test]
    fn rejects_malformed_stats() {
        assert!(parse_stats("000\t1\t1\t0.5\n").is_err());
        assert!(parse_stats("cluster\tsize\tsampled\tsimilarity\n000\tx\t1\t0.5\n").is_err());
    }

    #[test]
    fn escapes_markup() {
        assert_eq!(escape("a<b>&c"), "a&lt;b&gt;&amp;c");
    }
}
