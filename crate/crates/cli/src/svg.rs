//! Heatmaps rendered directly as SVG.
//!
//! Cells are filled from a fixed five-stop blue ramp, interpolated linearly in
//! RGB between the stops:
//!
//! | position | color     |
//! |----------|-----------|
//! | 0.00     | `#f7fbff` |
//! | 0.25     | `#c6dbef` |
//! | 0.50     | `#6baed6` |
//! | 0.75     | `#2171b5` |
//! | 1.00     | `#08306b` |
//!
//! A value `v` sits at position `(v - lo) / (hi - lo)`, clamped to `[0, 1]`.
//! Undefined cells are filled with `#d9d9d9` and labelled `n/a`. The output
//! depends only on the inputs, so files can be compared byte for byte.

use std::fmt::Write;

const RAMP: [(f64, [u8; 3]); 5] = [
    (0.0, [0xf7, 0xfb, 0xff]),
    (0.25, [0xc6, 0xdb, 0xef]),
    (0.5, [0x6b, 0xae, 0xd6]),
    (0.75, [0x21, 0x71, 0xb5]),
    (1.0, [0x08, 0x30, 0x6b]),
];
const UNDEFINED_FILL: &str = "#d9d9d9";
const CELL_W: usize = 72;
const CELL_H: usize = 36;
const CHAR_W: usize = 7;

/// Hex color of ramp position `t` (clamped to `[0, 1]`).
pub fn ramp_color(t: f64) -> String {
    let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
    let i = RAMP.windows(2).position(|w| t <= w[1].0).unwrap_or(RAMP.len() - 2);
    let ((t0, c0), (t1, c1)) = (RAMP[i], RAMP[i + 1]);
    let f = (t - t0) / (t1 - t0);
    let mix = |a: u8, b: u8| (f64::from(a) + f * (f64::from(b) - f64::from(a))).round() as u8;
    format!("#{:02x}{:02x}{:02x}", mix(c0[0], c1[0]), mix(c0[1], c1[1]), mix(c0[2], c1[2]))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// A matrix of optional values with row and column labels.
pub struct Heatmap<'a> {
    pub title: &'a str,
    pub rows: &'a [String],
    pub cols: &'a [String],
    pub values: &'a [Vec<Option<f64>>],
    /// Text drawn in each cell; lines are separated by `\n`.
    pub annotations: &'a [Vec<String>],
    /// Values mapped to the two ends of the ramp.
    pub range: (f64, f64),
}

impl Heatmap<'_> {
    pub fn render(&self) -> String {
        let label_w = self.rows.iter().map(|r| r.chars().count()).max().unwrap_or(0) * CHAR_W + 16;
        let left = label_w.max(48);
        let top = 64;
        let grid_w = self.cols.len() * CELL_W;
        let grid_h = self.rows.len() * CELL_H;
        let width = left + grid_w + 24;
        let height = top + grid_h + 56;
        let (lo, hi) = self.range;
        let span = if hi > lo { hi - lo } else { 1.0 };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r##"<rect width="{width}" height="{height}" fill="#ffffff"/>"##);
        let _ = writeln!(s, r#"<text x="{left}" y="20" font-size="14">{}</text>"#, escape(self.title));
        for (j, col) in self.cols.iter().enumerate() {
            let x = left + j * CELL_W + CELL_W / 2;
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top - 8, escape(col));
        }
        for (i, row) in self.rows.iter().enumerate() {
            let y = top + i * CELL_H;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                left - 8,
                y + CELL_H / 2 + 4,
                escape(row)
            );
            for j in 0..self.cols.len() {
                let x = left + j * CELL_W;
                let value = self.values.get(i).and_then(|r| r.get(j)).copied().flatten();
                let (fill, ink) = match value {
                    Some(v) => {
                        let t = (v - lo) / span;
                        (ramp_color(t), if t > 0.6 { "#ffffff" } else { "#000000" })
                    }
                    None => (UNDEFINED_FILL.to_string(), "#000000"),
                };
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{fill}" stroke="#ffffff"/>"##
                );
                let text = match value {
                    Some(_) => self
                        .annotations
                        .get(i)
                        .and_then(|r| r.get(j))
                        .cloned()
                        .unwrap_or_default(),
                    None => "n/a".to_string(),
                };
                let lines: Vec<&str> = text.lines().collect();
                let first_y = y + CELL_H / 2 + 4 - 6 * (lines.len().saturating_sub(1));
                for (k, line) in lines.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{}</text>"#,
                        x + CELL_W / 2,
                        first_y + 12 * k,
                        escape(line)
                    );
                }
            }
        }
        // Legend: ten swatches spanning the ramp with the range end labels.
        let ly = top + grid_h + 16;
        let sw = 16;
        for k in 0..10 {
            let t = k as f64 / 9.0;
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{ly}" width="{sw}" height="12" fill="{}"/>"#,
                left + k * sw,
                ramp_color(t)
            );
        }
        let _ = writeln!(s, r#"<text x="{left}" y="{}">{}</text>"#, ly + 26, crate::output::fixed(lo, 3));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left + 10 * sw,
            ly + 26,
            crate::output::fixed(hi, 3)
        );
        s.push_str("</svg>\n");
        s
    }
}
