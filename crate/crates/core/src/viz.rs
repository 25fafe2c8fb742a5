//! Static SVG bird's-eye views.
//!
//! Forward (`+x`) points up and left (`+y`) points left. Grid cell
//! `(row, col)` is a `scale`-pixel square centred on [`grid_to_pixel`].

use std::fmt::Write as _;

use crate::geometry::BevGridSpec;
use crate::sim::ObjectBox;
use crate::tensor::Tensor;

pub const GT_COLOR: &str = "#1f5fd6";
pub const BASELINE_COLOR: &str = "#2ca02c";
pub const OURS_COLOR: &str = "#8e44ad";

pub struct BoxLayer<'a> {
    pub name: &'a str,
    pub color: &'a str,
    pub boxes: &'a [ObjectBox],
}

/// Pixel of a continuous grid coordinate.
pub fn grid_to_pixel(spec: &BevGridSpec, row: f64, col: f64, scale: f64) -> (f64, f64) {
    let x = (spec.width_cells as f64 - 0.5 - col) * scale;
    let y = (spec.height_cells as f64 - 0.5 - row) * scale;
    (x, y)
}

pub fn world_to_pixel(spec: &BevGridSpec, x: f64, y: f64, scale: f64) -> (f64, f64) {
    let (r, c) = spec.world_to_grid(x, y);
    grid_to_pixel(spec, r, c, scale)
}

/// SVG of one sample. `occupancy` is a `[H, W]` or `[C, H, W]` tensor whose
/// first plane is drawn as grey cells.
pub fn render_svg(spec: &BevGridSpec, occupancy: Option<&Tensor<f32>>, layers: &[BoxLayer], scale: f64) -> String {
    let (w, h) = (spec.width_cells as f64 * scale, spec.height_cells as f64 * scale);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r##"<rect width="{w}" height="{h}" fill="#ffffff"/>"##);
    if let Some(occ) = occupancy {
        let plane = &occ.data()[..spec.cells()];
        for (i, &v) in plane.iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            if v < 0.05 {
                continue;
            }
            let (row, col) = ((i / spec.width_cells) as f64, (i % spec.width_cells) as f64);
            let (cx, cy) = grid_to_pixel(spec, row, col, scale);
            let _ = writeln!(
                s,
                r##"<rect x="{:.2}" y="{:.2}" width="{scale}" height="{scale}" fill="#404040" fill-opacity="{:.3}"/>"##,
                cx - scale / 2.0,
                cy - scale / 2.0,
                v * 0.6
            );
        }
    }
    let (ex, ey) = world_to_pixel(spec, 0.0, 0.0, scale);
    let _ = writeln!(
        s,
        r##"<polygon class="ego" points="{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}" fill="#d62728"/>"##,
        ex,
        ey - scale,
        ex - 0.6 * scale,
        ey + 0.6 * scale,
        ex + 0.6 * scale,
        ey + 0.6 * scale
    );
    for layer in layers {
        let _ = writeln!(s, r#"<g class="{}" stroke="{}" fill="none" stroke-width="1.5">"#, layer.name, layer.color);
        for b in layer.boxes {
            let pts: Vec<String> = b
                .corners()
                .iter()
                .map(|&(x, y)| {
                    let (px, py) = world_to_pixel(spec, x, y, scale);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(s, r#"<polygon points="{}"/>"#, pts.join(" "));
            let (s_, c_) = b.yaw.sin_cos();
            let nose = (b.center[0] + c_ * b.size[0] / 2.0, b.center[1] + s_ * b.size[0] / 2.0);
            let (x0, y0) = world_to_pixel(spec, b.center[0], b.center[1], scale);
            let (x1, y1) = world_to_pixel(spec, nose.0, nose.1, scale);
            let _ = writeln!(s, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}"/>"#);
        }
        s.push_str("</g>\n");
    }
    let mut ly = 14.0;
    for layer in layers {
        let _ = writeln!(
            s,
            r#"<text x="6" y="{ly}" font-family="monospace" font-size="12" fill="{}">{}</text>"#,
            layer.color, layer.name
        );
        ly += 14.0;
    }
    s.push_str("</svg>\n");
    s
}
