//! Decorative SVG output; the CSV files are the contractual artifacts.

use anyhow::Result;
use ccfg_core::data::{MixtureSpec, RED};
use ccfg_core::guidance::CurveRow;
use std::fs;
use std::path::Path;

const SIZE: f64 = 640.0;
const MARGIN: f64 = 40.0;

fn bounds(points: impl Iterator<Item = (f64, f64)>) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in points {
        b.0 = b.0.min(x);
        b.1 = b.1.max(x);
        b.2 = b.2.min(y);
        b.3 = b.3.max(y);
    }
    if !b.0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad_x = (b.1 - b.0).max(1e-9) * 0.05;
    let pad_y = (b.3 - b.2).max(1e-9) * 0.05;
    (b.0 - pad_x, b.1 + pad_x, b.2 - pad_y, b.3 + pad_y)
}

fn mapper(b: (f64, f64, f64, f64)) -> impl Fn(f64, f64) -> (f64, f64) {
    move |x, y| {
        let sx = MARGIN + (x - b.0) / (b.1 - b.0) * (SIZE - 2.0 * MARGIN);
        let sy = SIZE - MARGIN - (y - b.2) / (b.3 - b.2) * (SIZE - 2.0 * MARGIN);
        (sx, sy)
    }
}

pub fn scatter_by_class(path: &Path, mix: &MixtureSpec, points: &[Vec<f64>]) -> Result<()> {
    let b = bounds(
        points
            .iter()
            .map(|p| (p[0], p[1]))
            .chain(mix.nodes.iter().map(|n| (n.center[0], n.center[1]))),
    );
    let map = mapper(b);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for p in points {
        let (x, y) = map(p[0], p[1]);
        let color = if mix.class_posterior(p, RED) > 0.5 {
            "#d62728"
        } else {
            "#1f77b4"
        };
        out.push_str(&format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"2\" fill=\"{color}\" fill-opacity=\"0.5\"/>\n"
        ));
    }
    for node in &mix.nodes {
        let (x, y) = map(node.center[0], node.center[1]);
        out.push_str(&format!(
            "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"5\" fill=\"none\" stroke=\"black\" stroke-width=\"1.5\"/>\n"
        ));
    }
    out.push_str("</svg>\n");
    fs::write(path, out)?;
    Ok(())
}

pub fn coefficient_curves(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let b = bounds(
        rows.iter()
            .flat_map(|r| [(r.dist_sq, r.coef_pos), (r.dist_sq, r.coef_neg)]),
    );
    let map = mapper(b);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    let series: [(&str, Box<dyn Fn(&CurveRow) -> f64>); 2] = [
        ("#2ca02c", Box::new(|r: &CurveRow| r.coef_pos)),
        ("#d62728", Box::new(|r: &CurveRow| r.coef_neg)),
    ];
    for (color, getter) in &series {
        let pts: Vec<String> = rows
            .iter()
            .map(|r| {
                let (x, y) = map(r.dist_sq, getter(r));
                format!("{x:.1},{y:.1}")
            })
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
    }
    // Zero line for reference.
    let (x0, y0) = map(b.0, 0.0);
    let (x1, _) = map(b.1, 0.0);
    out.push_str(&format!(
        "<line x1=\"{x0:.1}\" y1=\"{y0:.1}\" x2=\"{x1:.1}\" y2=\"{y0:.1}\" stroke=\"#999\" stroke-dasharray=\"4\"/>\n"
    ));
    out.push_str("</svg>\n");
    fs::write(path, out)?;
    Ok(())
}
