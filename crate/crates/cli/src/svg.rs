//! Standalone SVG renderings of attention distributions.

use std::fmt::Write;

const RAMP: [(u8, u8, u8); 8] = [
    (0x44, 0x01, 0x54),
    (0x46, 0x32, 0x7e),
    (0x36, 0x5c, 0x8d),
    (0x27, 0x7f, 0x8e),
    (0x1f, 0xa1, 0x87),
    (0x4a, 0xc1, 0x6d),
    (0xa0, 0xda, 0x39),
    (0xfd, 0xe7, 0x25),
];

const CELL: usize = 28;
const LABEL_W: usize = 110;
const HEADER_H: usize = 60;

/// Viridis-like colour for `v` in `[0, 1]`.
pub fn color(v: f64) -> String {
    let x = v.clamp(0.0, 1.0) * (RAMP.len() - 1) as f64;
    let i = (x.floor() as usize).min(RAMP.len() - 2);
    let f = x - i as f64;
    let mix = |a: u8, b: u8| (a as f64 + (b as f64 - a as f64) * f).round() as u8;
    let (a, b) = (RAMP[i], RAMP[i + 1]);
    format!("#{:02x}{:02x}{:02x}", mix(a.0, b.0), mix(a.1, b.1), mix(a.2, b.2))
}

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn open(out: &mut String, w: usize, h: usize, title: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="monospace" font-size="11">"#
    );
    let _ = write!(out, r#"<title>{}</title><rect width="{w}" height="{h}" fill="white"/>"#, escape(title));
    let _ = write!(out, r#"<text x="4" y="14" font-size="13">{}</text>"#, escape(title));
}

fn max_of(rows: &[Vec<f64>]) -> f64 {
    rows.iter().flatten().fold(0.0f64, |m, &v| m.max(v)).max(f64::MIN_POSITIVE)
}

/// A grid with one cell per weight, coloured relative to the largest one.
pub fn heatmap(title: &str, rows: &[Vec<f64>], row_labels: &[String], col_labels: &[String]) -> String {
    let cols = rows.first().map_or(0, Vec::len);
    let (w, h) = (LABEL_W + cols * CELL + 10, HEADER_H + rows.len() * CELL + 10);
    let scale = max_of(rows);
    let mut out = String::new();
    open(&mut out, w, h, title);
    for (j, label) in col_labels.iter().enumerate() {
        let x = LABEL_W + j * CELL + CELL / 2;
        let _ = write!(
            out,
            r#"<text x="{x}" y="{}" transform="rotate(-45 {x} {})">{}</text>"#,
            HEADER_H - 6,
            HEADER_H - 6,
            escape(label)
        );
    }
    for (i, row) in rows.iter().enumerate() {
        let y = HEADER_H + i * CELL;
        if let Some(label) = row_labels.get(i) {
            let _ = write!(out, r#"<text x="4" y="{}">{}</text>"#, y + CELL / 2 + 4, escape(label));
        }
        for (j, &v) in row.iter().enumerate() {
            let _ = write!(
                out,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{v:.6}</title></rect>"#,
                LABEL_W + j * CELL,
                color(v / scale)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// One bar chart per row, stacked vertically.
pub fn bars(title: &str, rows: &[Vec<f64>], row_labels: &[String], col_labels: &[String]) -> String {
    let cols = rows.first().map_or(0, Vec::len);
    let panel = 70;
    let (w, h) = (LABEL_W + cols * CELL + 10, HEADER_H + rows.len() * panel + 10);
    let scale = max_of(rows);
    let mut out = String::new();
    open(&mut out, w, h, title);
    for (j, label) in col_labels.iter().enumerate() {
        let x = LABEL_W + j * CELL + CELL / 2;
        let _ = write!(
            out,
            r#"<text x="{x}" y="{}" transform="rotate(-45 {x} {})">{}</text>"#,
            HEADER_H - 6,
            HEADER_H - 6,
            escape(label)
        );
    }
    for (i, row) in rows.iter().enumerate() {
        let base = HEADER_H + (i + 1) * panel - 8;
        if let Some(label) = row_labels.get(i) {
            let _ = write!(out, r#"<text x="4" y="{}">{}</text>"#, base - 20, escape(label));
        }
        let _ = write!(
            out,
            r##"<line x1="{LABEL_W}" y1="{base}" x2="{}" y2="{base}" stroke="#888"/>"##,
            LABEL_W + cols * CELL
        );
        for (j, &v) in row.iter().enumerate() {
            let bh = ((v / scale) * (panel - 14) as f64).round() as usize;
            let _ = write!(
                out,
                r#"<rect x="{}" y="{}" width="{}" height="{bh}" fill="{}"><title>{v:.6}</title></rect>"#,
                LABEL_W + j * CELL + 2,
                base - bh,
                CELL - 4,
                color(v / scale)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
