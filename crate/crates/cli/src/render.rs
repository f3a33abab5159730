//! Seeded spring layout and SVG drawing of colored molecular graphs.

use std::fmt::Write;

use cliffkit::molgraph::{BondOrder, MolecularGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SVG_SCHEMA: &str = "cliffkit-svg/1";

const PANEL: f64 = 320.0;
const MARGIN: f64 = 28.0;
const ATOM_RADIUS: f64 = 11.0;
const LAYOUT_ITERATIONS: usize = 300;

const WHITE: [f64; 3] = [255.0, 255.0, 255.0];
const COLD: [f64; 3] = [33.0, 102.0, 172.0];
const WARM: [f64; 3] = [178.0, 24.0, 43.0];

/// Fruchterman-Reingold embedding in the unit square, from seeded random
/// starting points.
pub fn spring_layout(graph: &MolecularGraph, seed: u64) -> Vec<(f64, f64)> {
    let n = graph.num_atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<(f64, f64)> = (0..n).map(|_| (rng.random::<f64>(), rng.random::<f64>())).collect();
    if n < 2 {
        return vec![(0.5, 0.5); n];
    }
    let k = (1.0 / n as f64).sqrt();
    for iter in 0..LAYOUT_ITERATIONS {
        let temperature = 0.1 * (1.0 - iter as f64 / LAYOUT_ITERATIONS as f64) + 1e-4;
        let mut disp = vec![(0.0, 0.0); n];
        for a in 0..n {
            for b in (a + 1)..n {
                let (dx, dy) = (pos[a].0 - pos[b].0, pos[a].1 - pos[b].1);
                let d = (dx * dx + dy * dy).sqrt().max(1e-6);
                let f = k * k / d;
                disp[a].0 += dx / d * f;
                disp[a].1 += dy / d * f;
                disp[b].0 -= dx / d * f;
                disp[b].1 -= dy / d * f;
            }
        }
        for bond in &graph.bonds {
            let (a, b) = bond.endpoints;
            let (dx, dy) = (pos[a].0 - pos[b].0, pos[a].1 - pos[b].1);
            let d = (dx * dx + dy * dy).sqrt().max(1e-6);
            let f = d * d / k;
            disp[a].0 -= dx / d * f;
            disp[a].1 -= dy / d * f;
            disp[b].0 += dx / d * f;
            disp[b].1 += dy / d * f;
        }
        for (p, (dx, dy)) in pos.iter_mut().zip(disp) {
            let len = (dx * dx + dy * dy).sqrt().max(1e-12);
            let step = len.min(temperature);
            p.0 += dx / len * step;
            p.1 += dy / len * step;
        }
    }
    normalize(pos)
}

fn normalize(pos: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pos {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-9);
    let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
    pos.into_iter()
        .map(|(x, y)| (0.5 + (x - cx) / span, 0.5 + (y - cy) / span))
        .collect()
}

/// Diverging color for `t` in `[-1, 1]`: cold below zero, white at zero,
/// warm above.
pub fn diverging_color(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t < 0.0 { COLD } else { WARM };
    let c: Vec<u8> = (0..3)
        .map(|i| (WHITE[i] + t.abs() * (end[i] - WHITE[i])).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Values divided by their largest magnitude; all zeros stay zero.
pub fn normalize_values(values: &[f64]) -> Vec<f64> {
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        vec![0.0; values.len()]
    } else {
        values.iter().map(|v| v / max).collect()
    }
}

pub struct Panel<'a> {
    pub title: String,
    /// Per-atom values in `[-1, 1]`.
    pub values: &'a [f64],
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Side-by-side panels of one molecule sharing a layout.
pub fn render_svg(
    graph: &MolecularGraph,
    layout: &[(f64, f64)],
    title: &str,
    panels: &[Panel],
    manifest_hash: &str,
) -> String {
    let width = PANEL * panels.len() as f64;
    let height = PANEL + 24.0;
    let mut s = String::new();
    writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" data-schema="{SVG_SCHEMA}" data-manifest-hash="{manifest_hash}">"##
    )
    .unwrap();
    writeln!(s, "<title>{}</title>", escape(title)).unwrap();
    writeln!(s, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##).unwrap();
    for (k, panel) in panels.iter().enumerate() {
        let ox = k as f64 * PANEL;
        let place = |(x, y): (f64, f64)| {
            (ox + MARGIN + x * (PANEL - 2.0 * MARGIN), 24.0 + MARGIN + y * (PANEL - 2.0 * MARGIN))
        };
        writeln!(s, r##"<g id="panel-{k}">"##).unwrap();
        writeln!(
            s,
            r##"<text x="{:.2}" y="16" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"##,
            ox + PANEL / 2.0,
            escape(&panel.title)
        )
        .unwrap();
        for bond in &graph.bonds {
            let (a, b) = (place(layout[bond.endpoints.0]), place(layout[bond.endpoints.1]));
            let stroke = match bond.order {
                BondOrder::Single => 1.5,
                BondOrder::Aromatic => 2.5,
                BondOrder::Double => 3.5,
                BondOrder::Triple => 5.0,
            };
            let dash = if bond.order == BondOrder::Aromatic { r##" stroke-dasharray="4 2""## } else { "" };
            writeln!(
                s,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#555555" stroke-width="{stroke}"{dash}/>"##,
                a.0, a.1, b.0, b.1
            )
            .unwrap();
        }
        for (i, atom) in graph.atoms.iter().enumerate() {
            let (x, y) = place(layout[i]);
            let value = panel.values.get(i).copied().unwrap_or(0.0);
            writeln!(
                s,
                r##"<circle cx="{x:.2}" cy="{y:.2}" r="{ATOM_RADIUS}" fill="{}" stroke="#333333" stroke-width="1" data-atom="{i}" data-value="{value:.6}"/>"##,
                diverging_color(value)
            )
            .unwrap();
            writeln!(
                s,
                r##"<text x="{x:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"##,
                y + 3.5,
                atom.element.symbol()
            )
            .unwrap();
        }
        writeln!(s, "</g>").unwrap();
    }
    writeln!(s, "</svg>").unwrap();
    s
}
