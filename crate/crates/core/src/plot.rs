//! Static SVG charts derived from JSON reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::decode::BiasSweepPoint;
use crate::metrics::{SeqLengthReport, SequenceForm};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("report has no {0} series")]
    MissingSeries(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PlotError {
    pub fn kind(&self) -> &'static str {
        match self {
            PlotError::MissingSeries(_) => "MissingSeries",
            PlotError::Io { .. } => "Io",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum PlotSource<'a> {
    PrCurve(&'a [BiasSweepPoint]),
    SeqLength(&'a SeqLengthReport),
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 3] = ["#4c72b0", "#dd8452", "#55a868"];

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{title}</text>"#,
        W / 2.0
    );
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN / 1.5);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#,
        (x0 + x1) / 2.0,
        H - 16.0
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn plot_w() -> f64 {
    W - MARGIN - MARGIN / 2.0
}

fn plot_h() -> f64 {
    H - MARGIN - MARGIN / 1.5
}

/// Precision against recall, one marker per bias, joined in bias order.
pub fn pr_curve_svg(points: &[BiasSweepPoint]) -> Result<String, PlotError> {
    if points.is_empty() {
        return Err(PlotError::MissingSeries("sweep"));
    }
    let mut out = String::new();
    header(&mut out, "Precision-recall by start-token bias");
    axes(&mut out, "recall", "precision");
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let x = MARGIN + v * plot_w();
        let y = H - MARGIN - v * plot_h();
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{v:.2}</text>"#, H - MARGIN + 16.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, MARGIN - 6.0, y + 4.0);
    }
    let coords: Vec<(f64, f64)> = points
        .iter()
        .map(|p| (MARGIN + p.recall * plot_w(), H - MARGIN - p.precision * plot_h()))
        .collect();
    let path: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
        path.join(" "),
        COLORS[0]
    );
    for (p, (x, y)) in points.iter().zip(&coords) {
        let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="{}"/>"#, COLORS[0]);
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10">b={}</text>"#,
            x + 6.0,
            y - 6.0,
            p.bias
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Grouped bars: mean, median and max length, one bar per form.
pub fn seq_length_svg(report: &SeqLengthReport) -> Result<String, PlotError> {
    let forms: Vec<(SequenceForm, &str)> = [
        (SequenceForm::Plain, "plain"),
        (SequenceForm::SpanMarker, "span"),
        (SequenceForm::Bio, "BIO"),
    ]
    .into_iter()
    .filter(|(f, _)| report.summary.get(f).is_some_and(|s| s.count > 0))
    .collect();
    if forms.is_empty() {
        return Err(PlotError::MissingSeries("sequence length"));
    }
    let stats: [(&str, Box<dyn Fn(&crate::metrics::LengthSummary) -> f64>); 3] = [
        ("mean", Box::new(|s| s.mean)),
        ("median", Box::new(|s| s.median)),
        ("max", Box::new(|s| s.max as f64)),
    ];
    let top = forms
        .iter()
        .map(|(f, _)| report.summary[f].max as f64)
        .fold(1.0, f64::max);

    let mut out = String::new();
    header(&mut out, "Sequence length by tagging scheme");
    axes(&mut out, "statistic", &format!("tokens ({})", report.tokenizer));
    let group_w = plot_w() / stats.len() as f64;
    let bar_w = group_w * 0.8 / forms.len() as f64;
    for (g, (name, get)) in stats.iter().enumerate() {
        let gx = MARGIN + g as f64 * group_w + group_w * 0.1;
        for (b, (form, _)) in forms.iter().enumerate() {
            let v = get(&report.summary[form]);
            let h = v / top * plot_h();
            let x = gx + b as f64 * bar_w;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
                H - MARGIN - h,
                bar_w * 0.95,
                COLORS[b % COLORS.len()]
            );
            let _ = writeln!(
                out,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="10">{v:.1}</text>"#,
                x + bar_w / 2.0,
                H - MARGIN - h - 3.0
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{name}</text>"#,
            gx + group_w * 0.4,
            H - MARGIN + 16.0
        );
    }
    for (b, (_, label)) in forms.iter().enumerate() {
        let y = MARGIN / 1.5 + 4.0 + b as f64 * 16.0;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{y:.1}" width="10" height="10" fill="{}"/><text x="{}" y="{:.1}">{label}</text>"#,
            MARGIN + 10.0,
            COLORS[b % COLORS.len()],
            MARGIN + 24.0,
            y + 9.0
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

pub fn render(source: PlotSource<'_>) -> Result<String, PlotError> {
    match source {
        PlotSource::PrCurve(points) => pr_curve_svg(points),
        PlotSource::SeqLength(report) => seq_length_svg(report),
    }
}

pub fn emit_plot(source: PlotSource<'_>, path: &Path) -> Result<(), PlotError> {
    let svg = render(source)?;
    std::fs::write(path, svg).map_err(|source| PlotError::Io {
        path: path.to_path_buf(),
        source,
    })
}
