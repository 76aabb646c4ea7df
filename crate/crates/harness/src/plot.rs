// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal deterministic SVG charts.

use std::fmt::Write;

use crate::run::BoxSummary;

const PALETTE: [&str; 6] = ["#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3", "#937860"];
const PLOT_H: f64 = 260.0;
const TOP: f64 = 40.0;
const LEFT: f64 = 60.0;
const BOTTOM: f64 = 110.0;

/// One bar series; `None` leaves a gap.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    /// Legend label.
    pub name: String,
    /// One value per category.
    pub values: Vec<Option<f64>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    lo: f64,
    hi: f64,
    width: f64,
}

impl Frame {
    fn y(&self, v: f64) -> f64 {
        TOP + (self.hi - v.clamp(self.lo, self.hi)) / (self.hi - self.lo) * PLOT_H
    }

    fn open(&self, out: &mut String, title: &str, y_label: &str) {
        let h = TOP + PLOT_H + BOTTOM;
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#,
            w = self.width
        );
        let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
        let _ = writeln!(out, r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#, self.width / 2.0, esc(title));
        let _ = writeln!(
            out,
            r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
            TOP + PLOT_H / 2.0,
            TOP + PLOT_H / 2.0,
            esc(y_label)
        );
        for i in 0..=4 {
            let v = self.lo + (self.hi - self.lo) * f64::from(i) / 4.0;
            let y = self.y(v);
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
                self.width - 10.0,
                LEFT - 4.0,
                y + 4.0
            );
        }
        if self.lo < 0.0 && self.hi > 0.0 {
            let _ = writeln!(
                out,
                r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#333333"/>"##,
                self.width - 10.0,
                y = self.y(0.0)
            );
        }
    }

    fn category_label(out: &mut String, x: f64, label: &str) {
        let y = TOP + PLOT_H + 12.0;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" transform="rotate(35 {x:.1} {y:.1})">{}</text>"#,
            esc(label)
        );
    }
}

/// Grouped bar chart over `categories` with values in `range`.
pub fn bar_chart(title: &str, y_label: &str, categories: &[String], series: &[Series], range: (f64, f64)) -> String {
    let group = 14.0 * series.len().max(1) as f64 + 16.0;
    let frame = Frame { lo: range.0, hi: range.1, width: LEFT + group * categories.len() as f64 + 140.0 };
    let mut out = String::new();
    frame.open(&mut out, title, y_label);
    for (c, cat) in categories.iter().enumerate() {
        let x0 = LEFT + 8.0 + group * c as f64;
        for (s, ser) in series.iter().enumerate() {
            let Some(v) = ser.values.get(c).copied().flatten() else { continue };
            let (a, b) = (frame.y(v), frame.y(0.0f64.clamp(frame.lo, frame.hi)));
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="12" height="{:.1}" fill="{}"><title>{}: {v:.3}</title></rect>"#,
                x0 + 14.0 * s as f64,
                a.min(b),
                (a - b).abs().max(0.5),
                PALETTE[s % PALETTE.len()],
                esc(&ser.name)
            );
        }
        Frame::category_label(&mut out, x0, cat);
    }
    legend(&mut out, frame.width, series.iter().map(|s| s.name.as_str()));
    out.push_str("</svg>\n");
    out
}

/// Box summaries, one per label, with values in `range`.
pub fn box_chart(title: &str, y_label: &str, boxes: &[(String, BoxSummary)], range: (f64, f64)) -> String {
    let step = 36.0;
    let frame = Frame { lo: range.0, hi: range.1, width: LEFT + step * boxes.len() as f64 + 40.0 };
    let mut out = String::new();
    frame.open(&mut out, title, y_label);
    for (i, (label, b)) in boxes.iter().enumerate() {
        let x = LEFT + 10.0 + step * i as f64;
        let mid = x + 10.0;
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(
            out,
            r#"<line x1="{mid:.1}" y1="{:.1}" x2="{mid:.1}" y2="{:.1}" stroke="{color}"/>"#,
            frame.y(b.max),
            frame.y(b.min)
        );
        let _ = writeln!(
            out,
            r#"<rect x="{x:.1}" y="{:.1}" width="20" height="{:.1}" fill="{color}" fill-opacity="0.5" stroke="{color}"/>"#,
            frame.y(b.q3),
            (frame.y(b.q1) - frame.y(b.q3)).max(0.5)
        );
        let _ = writeln!(
            out,
            r##"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#000000" stroke-width="2"/>"##,
            x + 20.0,
            y = frame.y(b.median)
        );
        Frame::category_label(&mut out, x, label);
    }
    out.push_str("</svg>\n");
    out
}

fn legend<'a>(out: &mut String, width: f64, names: impl Iterator<Item = &'a str>) {
    for (i, name) in names.enumerate() {
        let y = TOP + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            width - 125.0,
            y,
            PALETTE[i % PALETTE.len()],
            width - 110.0,
            y + 9.0,
            esc(name)
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bars_are_well_formed_and_escaped() {
        let svg = bar_chart(
            "a < b",
            "BDDiff",
            &["none".to_owned(), "assertion".to_owned()],
            &[Series { name: "m/fk".into(), values: vec![Some(0.5), None] }],
            (-1.0, 1.0),
        );
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert!(svg.contains("a &lt; b"));
        assert_eq!(svg.matches("<rect x=").count(), 2, "one bar and one legend swatch");
    }

    #[test]
    fn boxes_render_one_group_each() {
        let b = BoxSummary { min: -0.5, q1: -0.1, median: 0.0, q3: 0.2, max: 0.6 };
        let svg = box_chart("t", "y", &[("x".into(), b), ("y".into(), b)], (-1.0, 1.0));
        assert_eq!(svg.matches("fill-opacity").count(), 2);
    }
}
