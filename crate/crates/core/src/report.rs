//! Report tables and plots.
//!
//! Every table shares one long-format schema,
//! `slice,model,modality,metric,threshold,value`, with the threshold column
//! empty for metrics that have none. Values are written in Rust's shortest
//! round-trip form, so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::metrics::{self, SegmentationSource};
use crate::phantom::Modality;

pub const CSV_HEADER: &str = "slice,model,modality,metric,threshold,value";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// `v<volume>s<slice>`, or an aggregate label such as `all` or `mean`.
    pub slice: String,
    pub model: String,
    pub modality: Modality,
    pub metric: String,
    pub threshold: Option<f64>,
    pub value: f64,
}

impl MetricRow {
    pub fn new(slice: impl Into<String>, model: impl Into<String>, modality: Modality, metric: impl Into<String>, value: f64) -> Self {
        MetricRow { slice: slice.into(), model: model.into(), modality, metric: metric.into(), threshold: None, value }
    }

    pub fn at(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut s = String::with_capacity(64 * (rows.len() + 1));
    s.push_str(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let th = r.threshold.map(|t| t.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{},{}", r.slice, r.model, r.modality.name(), r.metric, th, r.value);
    }
    s
}

pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

/// Mean Dice and Jaccard over slices at each threshold, comparing the
/// top-p% of `|pred|` with the top-p% of `|gt|` inside each slice's ROI.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub label: String,
    pub thresholds: Vec<f64>,
    pub dice: Vec<f64>,
    pub jaccard: Vec<f64>,
}

pub fn sweep_curve(label: impl Into<String>, source: SegmentationSource, gt: &[&[f32]], pred: &[&[f32]], rois: &[&Mask], thresholds: &[f64]) -> Result<SweepCurve> {
    if gt.len() != pred.len() || gt.len() != rois.len() || gt.is_empty() {
        return Err(Error::invalid(format!("sweep: {} gt, {} pred and {} roi slices", gt.len(), pred.len(), rois.len())));
    }
    let n = gt.len() as f64;
    let mut dice = Vec::with_capacity(thresholds.len());
    let mut jaccard = Vec::with_capacity(thresholds.len());
    for &p in thresholds {
        let (mut d, mut j) = (0.0, 0.0);
        for ((g, q), roi) in gt.iter().zip(pred).zip(rois) {
            let gs = metrics::threshold_segment(g, roi, p, SegmentationSource::GroundTruth)?;
            let ps = metrics::threshold_segment(q, roi, p, source)?;
            let (a, b) = metrics::dice_jaccard(&ps.mask, &gs.mask)?;
            d += a;
            j += b;
        }
        dice.push(d / n);
        jaccard.push(j / n);
    }
    Ok(SweepCurve { label: label.into(), thresholds: thresholds.to_vec(), dice, jaccard })
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

/// Line plot of score against threshold, y fixed to `[0, 1]`.
pub fn render_svg(title: &str, y_label: &str, curves: &[(&str, &[f64], &[f64])]) -> String {
    let (w, h) = (640.0, 420.0);
    let (l, r, t, b) = (60.0, 150.0, 40.0, 50.0);
    let (pw, ph) = (w - l - r, h - t - b);
    let xmax = curves.iter().flat_map(|c| c.1.iter().copied()).fold(1.0f64, f64::max);
    let xs = |x: f64| l + x / xmax * pw;
    let ys = |y: f64| t + (1.0 - y.clamp(0.0, 1.0)) * ph;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, l + pw / 2.0, escape(title));
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        let (x2, yy, tx, ty) = (l + pw, ys(y), l - 6.0, ys(y) + 4.0);
        let _ = writeln!(s, r##"<line x1="{l}" x2="{x2}" y1="{yy:.1}" y2="{yy:.1}" stroke="#ddd"/><text x="{tx}" y="{ty:.1}" text-anchor="end">{y:.1}</text>"##);
    }
    for i in 0..=6 {
        let x = xmax * i as f64 / 6.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, xs(x), t + ph + 18.0, (x * 10.0).round() / 10.0);
    }
    let _ = writeln!(s, r#"<rect x="{l}" y="{t}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">threshold (% of ROI)</text>"#, l + pw / 2.0, h - 10.0);
    let _ = writeln!(s, r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#, t + ph / 2.0, escape(y_label));
    for (k, (label, x, y)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = x.iter().zip(y.iter()).map(|(&a, &b)| format!("{:.1},{:.1}", xs(a), ys(b))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        let ly = t + 10.0 + 18.0 * k as f64;
        let _ = writeln!(s, r#"<line x1="{0}" x2="{1}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{4}</text>"#, l + pw + 10.0, l + pw + 30.0, l + pw + 36.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
