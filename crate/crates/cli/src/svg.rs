//! Static SVG rendering of the per-step calibration curves.

use std::fmt::Write as _;

use pedcov::metrics::CalibrationReport;

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 48.0;

/// Maps data coordinates into one panel.
struct Panel {
    left: f64,
    x_max: f64,
    y_max: f64,
}

impl Panel {
    fn x(&self, t: f64) -> f64 {
        self.left + MARGIN + (t - 1.0) / (self.x_max - 1.0).max(1.0) * (PANEL_W - 1.5 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        PANEL_H - MARGIN + MARGIN * 0.5 - v / self.y_max * (PANEL_H - 1.5 * MARGIN)
    }

    fn polyline(&self, out: &mut String, values: &[f64], style: &str) {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.2},{:.2}", self.x(k as f64 + 1.0), self.y(*v)))
            .collect();
        writeln!(out, r#"<polyline fill="none" {style} points="{}"/>"#, pts.join(" ")).unwrap();
    }

    fn reference(&self, out: &mut String, v: f64, color: &str) {
        writeln!(
            out,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{color}" stroke-dasharray="5,4"/>"#,
            self.x(1.0),
            self.x(self.x_max),
            y = self.y(v)
        )
        .unwrap();
    }

    fn frame(&self, out: &mut String, title: &str, y_label: &str) {
        let (x0, x1) = (self.x(1.0), self.x(self.x_max));
        let (y0, y1) = (self.y(0.0), self.y(self.y_max));
        writeln!(
            out,
            r##"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="#444"/>"##,
            x1 - x0,
            y0 - y1
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="18" text-anchor="middle" font-size="14">{title}</text>"#,
            (x0 + x1) / 2.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11">horizon step t</text>"#,
            (x0 + x1) / 2.0,
            y0 + 30.0
        )
        .unwrap();
        writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="11" transform="rotate(-90 {:.2} {:.2})">{y_label}</text>"#,
            x0 - 34.0,
            (y0 + y1) / 2.0,
            x0 - 34.0,
            (y0 + y1) / 2.0
        )
        .unwrap();
        for t in 1..=self.x_max as usize {
            writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="middle" font-size="9">{t}</text>"#,
                self.x(t as f64),
                y0 + 13.0
            )
            .unwrap();
        }
        for k in 0..=4 {
            let v = self.y_max * k as f64 / 4.0;
            writeln!(
                out,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" font-size="9">{v:.2}</text>"#,
                x0 - 4.0,
                self.y(v) + 3.0
            )
            .unwrap();
        }
    }
}

/// Two panels: PPEI₁/PPEI₃ against the horizon, and Mahalanobis-distance
/// median with its interquartile band. Dashed lines mark the ideal values.
pub fn curves_svg(report: &CalibrationReport) -> String {
    let steps = &report.steps;
    let x_max = steps.len().max(2) as f64;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#,
        w = 2.0 * PANEL_W,
        h = PANEL_H
    )
    .unwrap();
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();

    let ppei = Panel {
        left: 0.0,
        x_max,
        y_max: 1.0,
    };
    ppei.frame(&mut out, "PPEI per horizon step", "fraction inside");
    ppei.reference(&mut out, report.reference.ppei1, "#1f77b4");
    ppei.reference(&mut out, report.reference.ppei3, "#d62728");
    let p1: Vec<f64> = steps.iter().map(|s| s.ppei1).collect();
    let p3: Vec<f64> = steps.iter().map(|s| s.ppei3).collect();
    ppei.polyline(&mut out, &p1, r##"stroke="#1f77b4" stroke-width="2""##);
    ppei.polyline(&mut out, &p3, r##"stroke="#d62728" stroke-width="2""##);

    let top = steps
        .iter()
        .map(|s| s.md_p75)
        .fold(report.reference.md_median, f64::max)
        * 1.15;
    let md = Panel {
        left: PANEL_W,
        x_max,
        y_max: if top.is_finite() && top > 0.0 { top } else { 1.0 },
    };
    md.frame(&mut out, "Mahalanobis distance", "MD");
    let mut band: Vec<String> = steps
        .iter()
        .map(|s| format!("{:.2},{:.2}", md.x(s.t as f64), md.y(s.md_p75)))
        .collect();
    band.extend(
        steps
            .iter()
            .rev()
            .map(|s| format!("{:.2},{:.2}", md.x(s.t as f64), md.y(s.md_p25))),
    );
    writeln!(
        out,
        r##"<polygon fill="#2ca02c" fill-opacity="0.25" stroke="none" points="{}"/>"##,
        band.join(" ")
    )
    .unwrap();
    md.reference(&mut out, report.reference.md_median, "#444");
    let p50: Vec<f64> = steps.iter().map(|s| s.md_p50).collect();
    md.polyline(&mut out, &p50, r##"stroke="#2ca02c" stroke-width="2""##);
    out.push_str("</svg>\n");
    out
}
