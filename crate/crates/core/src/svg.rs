//! Orthographic SVG renderings of point clouds.
//!
//! Each figure holds three panels (xy, xz, yz). Points are drawn back to
//! front along the dropped axis, and nearer points get larger radii.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::geom::PointCloud;

const PANEL: f64 = 240.0;
const MARGIN: f64 = 12.0;
const MIN_RADIUS: f64 = 0.6;
const MAX_RADIUS: f64 = 2.0;
/// (horizontal axis, vertical axis, depth axis, label)
const VIEWS: [(usize, usize, usize, &str); 3] = [(0, 1, 2, "xy"), (0, 2, 1, "xz"), (1, 2, 0, "yz")];

/// A named layer drawn in one colour.
#[derive(Debug, Clone, Copy)]
pub struct Layer<'a> {
    pub cloud: &'a PointCloud,
    pub color: &'a str,
}

/// Renders the layers into a three-panel SVG document sharing one scale.
pub fn render(layers: &[Layer<'_>]) -> String {
    let all = layers.iter().flat_map(|l| l.cloud.points());
    let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
    for p in all {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (0..3).map(|a| hi[a] - lo[a]).fold(1e-12, f64::max);
    let scale = (PANEL - 2.0 * MARGIN) / span;
    let width = PANEL * VIEWS.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}">"#,
        h = PANEL + 20.0
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (v, &(ax, ay, az, label)) in VIEWS.iter().enumerate() {
        let x0 = v as f64 * PANEL;
        let _ = writeln!(out, r##"<g><rect x="{x0}" y="0" width="{PANEL}" height="{PANEL}" fill="none" stroke="#ccc"/>"##);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12" font-family="sans-serif">{label}</text>"#, x0 + 6.0, PANEL + 14.0);
        let mut dots: Vec<(f64, f64, f64, &str)> = Vec::new();
        for layer in layers {
            for p in layer.cloud.points() {
                let depth = if hi[az] > lo[az] { (p[az] - lo[az]) / (hi[az] - lo[az]) } else { 0.5 };
                let x = x0 + MARGIN + (p[ax] - lo[ax]) * scale;
                let y = PANEL - MARGIN - (p[ay] - lo[ay]) * scale;
                dots.push((depth, x, y, layer.color));
            }
        }
        dots.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (depth, x, y, color) in dots {
            let r = MIN_RADIUS + (MAX_RADIUS - MIN_RADIUS) * depth;
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{color}" fill-opacity="0.8"/>"#);
        }
        let _ = writeln!(out, "</g>");
    }
    out.push_str("</svg>\n");
    out
}

pub const INPUT_COLOR: &str = "#d62728";
pub const PREDICTION_COLOR: &str = "#1f77b4";

/// Writes `{prefix}_input.svg`, `{prefix}_prediction.svg` and
/// `{prefix}_overlay.svg`, returning their paths.
pub fn write_figures(prefix: &Path, input: &PointCloud, prediction: &PointCloud) -> Result<Vec<PathBuf>> {
    let path = |suffix: &str| {
        let mut name = prefix.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(format!("_{suffix}.svg"));
        prefix.with_file_name(name)
    };
    let input_layer = Layer { cloud: input, color: INPUT_COLOR };
    let pred_layer = Layer { cloud: prediction, color: PREDICTION_COLOR };
    let figures = [
        (path("input"), render(&[input_layer])),
        (path("prediction"), render(&[pred_layer])),
        (path("overlay"), render(&[pred_layer, input_layer])),
    ];
    let mut written = Vec::new();
    for (p, doc) in figures {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&p, doc)?;
        written.push(p);
    }
    Ok(written)
}
