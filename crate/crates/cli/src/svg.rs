//! Minimal SVG line, bar and heatmap renderings of the experiment tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::Failure;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#7f7f7f"];

type Table = (Vec<String>, Vec<Vec<String>>);

fn read_table(path: &Path) -> Option<Table> {
    let mut rdr = csv::Reader::from_path(path).ok()?;
    let header = rdr.headers().ok()?.iter().map(str::to_owned).collect();
    let rows = rdr
        .records()
        .filter_map(|r| r.ok())
        .map(|r| r.iter().map(str::to_owned).collect())
        .collect();
    Some((header, rows))
}

fn col(header: &[String], name: &str) -> Option<usize> {
    header.iter().position(|h| h == name)
}

fn num(s: &str) -> Option<f64> {
    s.parse().ok().filter(|v: &f64| v.is_finite())
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for (a, b) in points {
            x = (x.0.min(a), x.1.max(a));
            y = (y.0.min(b), y.1.max(b));
        }
        let pad = |r: (f64, f64)| if r.1 > r.0 { r } else { (r.0 - 0.5, r.0 + 0.5) };
        Frame { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * MARGIN)
    }
}

fn open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(svg: &mut String, f: &Frame, xl: &str, yl: &str) {
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, H - MARGIN, MARGIN);
    let _ = writeln!(svg, "<path d=\"M{x0} {y1} L{x0} {y0} L{x1} {y0}\" stroke=\"black\" fill=\"none\"/>");
    for (v, anchor) in [(f.x.0, "start"), (f.x.1, "end")] {
        let _ = writeln!(svg, "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"{anchor}\">{}</text>", f.px(v), y0 + 16.0, tick(v));
    }
    for v in [f.y.0, f.y.1] {
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 4.0, f.py(v) + 4.0, tick(v));
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 12.0, escape(xl));
    let _ = writeln!(
        svg,
        "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(yl)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(svg: &mut String, names: &[String]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{c}\"/>", W - MARGIN - 110.0, y - 9.0);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"{y}\">{}</text>", W - MARGIN - 95.0, escape(name));
    }
}

/// Line chart of named series, with optional horizontal reference line.
pub fn line_chart(title: &str, xl: &str, yl: &str, series: &[(String, Vec<(f64, f64)>)], reference: Option<f64>) -> String {
    let mut pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.1.iter().copied()).collect();
    if let (Some(r), Some(&(x, _))) = (reference, pts.first()) {
        pts.push((x, r));
    }
    let f = Frame::fit(pts.into_iter());
    let mut svg = open(title);
    axes(&mut svg, &f, xl, yl);
    if let Some(r) = reference {
        let _ = writeln!(
            svg,
            "<line x1=\"{MARGIN}\" x2=\"{}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>",
            W - MARGIN,
            y = f.py(r)
        );
    }
    for (i, (_, pts)) in series.iter().enumerate() {
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            d.join(" "),
            PALETTE[i % PALETTE.len()]
        );
    }
    legend(&mut svg, &series.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bar chart; every series has one value per category.
pub fn bar_chart(title: &str, xl: &str, yl: &str, categories: &[String], series: &[(String, Vec<f64>)], reference: Option<f64>) -> String {
    let top = series
        .iter()
        .flat_map(|s| s.1.iter().copied())
        .chain(reference)
        .fold(0.0, f64::max)
        .max(1e-12);
    let f = Frame { x: (0.0, categories.len() as f64), y: (0.0, top * 1.1) };
    let mut svg = open(title);
    axes(&mut svg, &f, xl, yl);
    let slot = (W - 2.0 * MARGIN) / categories.len().max(1) as f64;
    let bw = 0.8 * slot / series.len().max(1) as f64;
    for (i, (_, vals)) in series.iter().enumerate() {
        for (k, v) in vals.iter().enumerate() {
            let x = MARGIN + k as f64 * slot + 0.1 * slot + i as f64 * bw;
            let y = f.py(*v);
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                H - MARGIN - y,
                PALETTE[i % PALETTE.len()]
            );
        }
    }
    if let Some(r) = reference {
        let _ = writeln!(
            svg,
            "<line x1=\"{MARGIN}\" x2=\"{}\" y1=\"{y:.1}\" y2=\"{y:.1}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>",
            W - MARGIN,
            y = f.py(r)
        );
    }
    for (k, c) in categories.iter().enumerate() {
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>",
            MARGIN + (k as f64 + 0.5) * slot,
            H - MARGIN + 30.0,
            escape(c)
        );
    }
    legend(&mut svg, &series.iter().map(|s| s.0.clone()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Square cells at the given unit-square coordinates, coloured on a
/// diverging scale symmetric about zero.
pub fn heatmap(title: &str, cells: &[(f64, f64, f64)]) -> String {
    let n = cells.len().max(1);
    let side = (n as f64).sqrt().ceil();
    let span = H - 2.0 * MARGIN;
    let size = span / side;
    let scale = cells.iter().map(|c| c.2.abs()).fold(0.0, f64::max).max(1e-12);
    let mut svg = open(title);
    let x0 = (W - span) / 2.0;
    for &(x, y, v) in cells {
        let t = (v / scale).clamp(-1.0, 1.0);
        let (r, g, b) = if t >= 0.0 {
            (255.0, 255.0 * (1.0 - t), 255.0 * (1.0 - t))
        } else {
            (255.0 * (1.0 + t), 255.0 * (1.0 + t), 255.0)
        };
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{size:.1}\" height=\"{size:.1}\" fill=\"rgb({:.0},{:.0},{:.0})\"/>",
            x0 + x * span - size / 2.0,
            MARGIN + (1.0 - y) * span - size / 2.0,
            r,
            g,
            b
        );
    }
    let _ = writeln!(svg, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">colour range ±{}</text>", W / 2.0, H - 16.0, tick(scale));
    svg.push_str("</svg>\n");
    svg
}

fn grouped(rows: &[Vec<String>], key: usize, x: usize, y: usize) -> Vec<(String, Vec<(f64, f64)>)> {
    let mut m: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let (Some(a), Some(b)) = (num(&r[x]), num(&r[y])) {
            m.entry(r[key].clone()).or_default().push((a, b));
        }
    }
    m.into_iter().collect()
}

fn write(out: &mut Vec<PathBuf>, dir: &Path, name: &str, svg: String) -> Result<(), Failure> {
    let p = dir.join(name);
    std::fs::write(&p, svg).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    out.push(p);
    Ok(())
}

/// Renders whichever of the five figures have their tables under
/// `<root>/tables`, into `<root>/figures`.
pub fn render_figures(root: &Path) -> Result<Vec<PathBuf>, Failure> {
    let tables = root.join("tables");
    let figs = root.join("figures");
    std::fs::create_dir_all(&figs).map_err(|e| Failure::Runtime(format!("{}: {e}", figs.display())))?;
    let mut out = Vec::new();

    if let Some((h, rows)) = read_table(&tables.join("rho_trajectory.csv")) {
        let (r, e, v) = (col(&h, "replicate"), col(&h, "epoch"), col(&h, "rho"));
        if let (Some(r), Some(e), Some(v)) = (r, e, v) {
            let series: Vec<_> = grouped(&rows, r, e, v).into_iter().map(|(k, p)| (format!("replicate {k}"), p)).collect();
            let truth = read_table(&tables.join("variography_summary.csv"))
                .and_then(|(h, rows)| col(&h, "rho_true").and_then(|c| rows.first().and_then(|r| num(&r[c]))));
            write(&mut out, &figs, "rho_trajectory.svg", line_chart("Learned range by epoch", "epoch", "rho", &series, truth))?;
        }
    }
    for model in ["geo", "vanilla", "kriging"] {
        if let Some((h, rows)) = read_table(&tables.join(format!("residual_snapshot_{model}.csv"))) {
            if let (Some(x), Some(y), Some(v)) = (col(&h, "x"), col(&h, "y"), col(&h, "residual")) {
                let cells: Vec<_> = rows.iter().filter_map(|r| Some((num(&r[x])?, num(&r[y])?, num(&r[v])?))).collect();
                write(&mut out, &figs, &format!("residuals_{model}.svg"), heatmap(&format!("Test residuals ({model})"), &cells))?;
            }
        }
    }
    if let Some((h, rows)) = read_table(&tables.join("forecast_trace.csv")) {
        let series: Vec<_> = h
            .iter()
            .enumerate()
            .skip(1)
            .map(|(c, name)| (name.clone(), rows.iter().filter_map(|r| Some((num(&r[0])?, num(&r[c])?))).collect()))
            .collect();
        write(&mut out, &figs, "forecast_trace.svg", line_chart("One-step forecasts at site 0", "test step", "value", &series, None))?;
    }
    if let Some((h, rows)) = read_table(&tables.join("horizon_decay.csv")) {
        if let (Some(hz), Some(m), Some(v)) = (col(&h, "horizon"), col(&h, "model"), col(&h, "rmse")) {
            write(
                &mut out,
                &figs,
                "horizon_decay.svg",
                line_chart("RMSE by forecast horizon", "horizon", "RMSE", &grouped(&rows, m, hz, v), None),
            )?;
        }
    }
    let mut pit_series = Vec::new();
    let mut cats = Vec::new();
    for model in ["geo", "vanilla"] {
        if let Some((h, rows)) = read_table(&tables.join(format!("pit_{model}.csv"))) {
            if let (Some(lo), Some(d)) = (col(&h, "bin_lo"), col(&h, "density")) {
                cats = rows.iter().map(|r| r[lo].clone()).collect();
                pit_series.push((model.to_owned(), rows.iter().map(|r| num(&r[d]).unwrap_or(0.0)).collect()));
            }
        }
    }
    if !pit_series.is_empty() {
        write(&mut out, &figs, "pit_histogram.svg", bar_chart("PIT histograms", "PIT bin", "density", &cats, &pit_series, Some(1.0)))?;
    }
    Ok(out)
}
