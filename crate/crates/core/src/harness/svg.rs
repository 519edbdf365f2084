//! Minimal grouped bar charts as standalone SVG.

use std::fmt::Write;

pub struct Series {
    pub name: String,
    /// Heights in `[0, 1]`; `None` leaves a gap.
    pub values: Vec<Option<f64>>,
    pub color: &'static str,
}

pub struct BarChart {
    pub title: String,
    pub x_label: String,
    pub labels: Vec<String>,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 90.0;

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

impl BarChart {
    pub fn render(&self) -> String {
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let base = TOP + plot_h;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}" font-family="sans-serif" font-size="11">"#,
            WIDTH, HEIGHT, WIDTH, HEIGHT
        );
        let _ = writeln!(s, r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#, WIDTH, HEIGHT);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        for tick in 0..=4 {
            let v = tick as f64 / 4.0;
            let y = base - v * plot_h;
            let _ = writeln!(
                s,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#e0e0e0"/>"##,
                LEFT,
                y,
                LEFT + plot_w,
                y
            );
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.2}</text>"#, LEFT - 6.0, y + 4.0, v);
        }
        let groups = self.labels.len().max(1);
        let group_w = plot_w / groups as f64;
        let bar_w = group_w * 0.8 / self.series.len().max(1) as f64;
        for (g, label) in self.labels.iter().enumerate() {
            let gx = LEFT + g as f64 * group_w + group_w * 0.1;
            for (k, series) in self.series.iter().enumerate() {
                if let Some(Some(v)) = series.values.get(g) {
                    let h = v.clamp(0.0, 1.0) * plot_h;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                        gx + k as f64 * bar_w,
                        base - h,
                        bar_w,
                        h,
                        series.color
                    );
                }
            }
            let lx = LEFT + (g as f64 + 0.5) * group_w;
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end" transform="rotate(-60 {:.2} {:.2})">{}</text>"#,
                lx,
                base + 12.0,
                lx,
                base + 12.0,
                escape(label)
            );
        }
        let _ = writeln!(
            s,
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000000"/>"##,
            LEFT,
            base,
            LEFT + plot_w,
            base
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 8.0,
            escape(&self.x_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let y = 34.0;
            let x = LEFT + k as f64 * 240.0;
            let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/>"#, x, y - 9.0, series.color);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 14.0, y, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}
