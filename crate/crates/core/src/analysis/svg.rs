//! Static heat-map rendering of an attention export. Darker cells carry
//! more attention.

use std::fmt::Write as _;

use super::AttentionExport;

const CELL: usize = 22;
const LABEL_W: usize = 110;
const HEADER_H: usize = 90;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn shade(v: f64) -> String {
    let g = (255.0 * (1.0 - v.clamp(0.0, 1.0))).round() as u8;
    format!("rgb({g},{g},{g})")
}

/// One panel per layer, stacked vertically, plus a one-column panel for the
/// final-layer placeholder scores.
pub fn render_svg(export: &AttentionExport) -> String {
    let rows = export.candidates.len();
    let cols = export.query.len();
    let panel_h = HEADER_H + rows * CELL + CELL;
    let width = LABEL_W + (cols + 2) * CELL;
    let height = panel_h * export.layers.len() + HEADER_H + rows * CELL + CELL;
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="monospace" font-size="11">"#
    );
    let mut top = 0;
    let panel = |w: &mut String, title: &str, top: usize, heads: &[String], grid: &[Vec<f64>]| {
        let _ = writeln!(
            w,
            r#"<text x="4" y="{}" font-weight="bold">{}</text>"#,
            top + 14,
            escape(title)
        );
        for (j, h) in heads.iter().enumerate() {
            let x = LABEL_W + j * CELL + CELL / 2;
            let y = top + HEADER_H - 4;
            let _ = writeln!(
                w,
                r#"<text transform="translate({x},{y}) rotate(-60)">{}</text>"#,
                escape(h)
            );
        }
        for (i, row) in grid.iter().enumerate() {
            let y = top + HEADER_H + i * CELL;
            let _ = writeln!(
                w,
                r#"<text x="4" y="{}">{}</text>"#,
                y + 15,
                escape(&export.candidates[i])
            );
            for (j, v) in row.iter().enumerate() {
                let _ = writeln!(
                    w,
                    r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}" stroke="white"><title>{v:.3}</title></rect>"#,
                    LABEL_W + j * CELL,
                    shade(*v)
                );
            }
        }
    };
    for (l, grid) in export.layers.iter().enumerate() {
        panel(
            w,
            &format!("{} layer {}", export.sample_id, l + 1),
            top,
            &export.query,
            grid,
        );
        top += panel_h;
    }
    let col: Vec<Vec<f64>> = export.placeholder.iter().map(|&v| vec![v]).collect();
    panel(w, "placeholder", top, &["@placeholder".to_string()], &col);
    s.push_str("</svg>\n");
    s
}
