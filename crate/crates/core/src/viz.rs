//! Text and SVG renderings of paragraph attention for one sample.

use std::fmt::Write;

/// Attention over paragraph sentences plus the question and answers.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionReport {
    pub id: String,
    pub question: String,
    pub predicted: String,
    pub gold: String,
    /// Each sentence with its weight, in paragraph order.
    pub sentences: Vec<(String, f64)>,
}

impl AttentionReport {
    /// Index of the most attended sentence (first on ties).
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, (_, a)) in self.sentences.iter().enumerate() {
            if best.is_none_or(|b| *a > self.sentences[b].1) {
                best = Some(i);
            }
        }
        best
    }
}

/// Weights in units of 1e-4, rounded by largest remainder so the printed
/// values add up to the rounded total and each stays within 1e-4 of its
/// exact value.
pub fn rounded_weights(weights: &[f64]) -> Vec<u64> {
    const UNITS: f64 = 1e4;
    let target = (weights.iter().sum::<f64>() * UNITS).round().max(0.0) as u64;
    let mut units: Vec<u64> = weights.iter().map(|w| (w.max(0.0) * UNITS).floor() as u64).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    let frac = |i: usize| weights[i].max(0.0) * UNITS - units[i] as f64;
    order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
    let assigned: u64 = units.iter().sum();
    for &i in order.iter().take(target.saturating_sub(assigned) as usize) {
        units[i] += 1;
    }
    units
}

/// One line per sentence with its weight to four decimals, then the
/// question and both answers.
pub fn render_table(report: &AttentionReport) -> String {
    let weights: Vec<f64> = report.sentences.iter().map(|(_, a)| *a).collect();
    let mut out = String::new();
    writeln!(out, "alpha\tsentence").unwrap();
    for ((s, _), u) in report.sentences.iter().zip(rounded_weights(&weights)) {
        writeln!(out, "{}.{:04}\t{s}", u / 10_000, u % 10_000).unwrap();
    }
    writeln!(out, "question: {}", report.question).unwrap();
    writeln!(out, "predicted: {}", report.predicted).unwrap();
    writeln!(out, "gold: {}", report.gold).unwrap();
    out
}

pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

const BAR_MAX: f64 = 300.0;
const ROW_H: usize = 24;
const LABEL_W: usize = 360;

/// Horizontal bar chart: one `<rect class="bar">` per sentence with width
/// proportional to its weight, the sentence as label, and a caption block
/// with the question and answers.
pub fn render_svg(report: &AttentionReport) -> String {
    let rows = report.sentences.len();
    let width = LABEL_W + BAR_MAX as usize + 80;
    let caption_y = 20 + rows * ROW_H + 20;
    let height = caption_y + 3 * 18 + 10;
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, "  <title>{}</title>", xml_escape(&report.id)).unwrap();
    for (i, (sentence, alpha)) in report.sentences.iter().enumerate() {
        let y = 20 + i * ROW_H;
        writeln!(
            out,
            r#"  <text x="{}" y="{}" text-anchor="end">{}</text>"#,
            LABEL_W - 8,
            y + 14,
            xml_escape(sentence)
        )
        .unwrap();
        writeln!(
            out,
            r##"  <rect class="bar" x="{LABEL_W}" y="{y}" width="{:.2}" height="{}" fill="#3b6ea5"/>"##,
            alpha.clamp(0.0, 1.0) * BAR_MAX,
            ROW_H - 6
        )
        .unwrap();
        writeln!(
            out,
            r#"  <text x="{:.2}" y="{}">{alpha:.4}</text>"#,
            LABEL_W as f64 + alpha.clamp(0.0, 1.0) * BAR_MAX + 6.0,
            y + 14
        )
        .unwrap();
    }
    writeln!(out, r#"  <g class="caption">"#).unwrap();
    for (k, (label, text)) in [
        ("question", &report.question),
        ("predicted", &report.predicted),
        ("gold", &report.gold),
    ]
    .into_iter()
    .enumerate()
    {
        writeln!(
            out,
            r#"    <text x="10" y="{}">{label}: {}</text>"#,
            caption_y + k * 18,
            xml_escape(text)
        )
        .unwrap();
    }
    writeln!(out, "  </g>\n</svg>").unwrap();
    out
}
