//! Minimal SVG boxplots of confidence scores.
//!
//! Each box carries its exact statistics as `data-*` attributes, and the root
//! element records the linear value-to-pixel map so plots can be read back.

use std::fmt::Write as _;

use crate::eval::ScoreKind;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

/// Value axis for a score kind. Dot products have no natural bound, so their
/// axis spans the data.
fn value_domain(kind: ScoreKind, boxes: &[(String, [f64; 6])]) -> (f64, f64) {
    match kind {
        ScoreKind::Cosine => (-1.0, 1.0),
        ScoreKind::SoftmaxProb => (0.0, 1.0),
        ScoreKind::Dot => {
            let lo = boxes.iter().map(|b| b.1[0]).fold(f64::INFINITY, f64::min);
            let hi = boxes.iter().map(|b| b.1[4]).fold(f64::NEG_INFINITY, f64::max);
            if !lo.is_finite() || !hi.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// `boxes` holds `(label, [min, q1, median, q3, max, mean])` per box.
pub fn boxplot_svg(title: &str, kind: ScoreKind, boxes: &[(String, [f64; 6])]) -> String {
    let (lo, hi) = value_domain(kind, boxes);
    let top = MARGIN_TOP;
    let bottom = HEIGHT - MARGIN_BOTTOM;
    let y = |v: f64| bottom - (v - lo) / (hi - lo) * (bottom - top);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let slot = plot_w / boxes.len().max(1) as f64;
    let half = (slot * 0.3).min(40.0);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" data-score-kind="{}" data-y-domain="{lo} {hi}" data-y-range="{bottom} {top}">"#,
        kind.as_str()
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN_LEFT}" y1="{top}" x2="{MARGIN_LEFT}" y2="{bottom}" stroke="black"/>"#
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let py = y(v);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.3}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.2}</text>"#,
            MARGIN_LEFT - 6.0,
            py + 4.0
        );
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_LEFT}" y1="{py:.3}" x2="{}" y2="{py:.3}" stroke="#ddd"/>"##,
            WIDTH - MARGIN_RIGHT
        );
    }
    for (i, (label, [min, q1, median, q3, max, mean])) in boxes.iter().enumerate() {
        let cx = MARGIN_LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<g class="box" data-label="{}" data-min="{min}" data-q1="{q1}" data-median="{median}" data-q3="{q3}" data-max="{max}" data-mean="{mean}">"#,
            escape(label)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.3}" y1="{:.3}" x2="{cx:.3}" y2="{:.3}" stroke="black"/>"#,
            y(*max),
            y(*min)
        );
        let _ = writeln!(
            s,
            r##"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="#9ecae1" stroke="black"/>"##,
            cx - half,
            y(*q3),
            2.0 * half,
            (y(*q1) - y(*q3)).max(0.0)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.3}" y1="{:.3}" x2="{:.3}" y2="{:.3}" stroke="black" stroke-width="2"/>"#,
            cx - half,
            y(*median),
            cx + half,
            y(*median)
        );
        let _ = writeln!(s, r#"<circle cx="{cx:.3}" cy="{:.3}" r="3" fill="red"/>"#, y(*mean));
        let _ = writeln!(
            s,
            r#"<text x="{cx:.3}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="11">{}</text>"#,
            bottom + 18.0,
            escape(label)
        );
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
