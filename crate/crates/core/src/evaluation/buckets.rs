//! BLEU broken down by source sentence length, with CSV and SVG output.

use std::fmt::Write;
use std::hash::Hash;

use crate::error::Result;

use super::bleu::{check_aligned, BleuStats};

pub const DEFAULT_BUCKET_WIDTH: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct Bucket {
    /// Inclusive source-length range.
    pub lo: usize,
    pub hi: usize,
    pub count: usize,
    pub bleu: f64,
}

/// Groups sentences by source length into `[1, w]`, `[w + 1, 2w]`, ... and
/// scores each non-empty group with corpus BLEU. Empty sources count as
/// length 1.
pub fn length_bucket_report<W: Eq + Hash>(
    hyps: &[Vec<W>],
    refs: &[Vec<W>],
    sources: &[Vec<W>],
    width: usize,
) -> Result<Vec<Bucket>> {
    check_aligned(hyps.len(), refs.len())?;
    check_aligned(sources.len(), refs.len())?;
    let width = width.max(1);
    let mut groups: Vec<(usize, BleuStats)> = Vec::new();
    for ((h, r), s) in hyps.iter().zip(refs).zip(sources) {
        let k = (s.len().max(1) - 1) / width;
        if groups.len() <= k {
            groups.resize(k + 1, (0, BleuStats::default()));
        }
        groups[k].0 += 1;
        groups[k].1.add(&BleuStats::sentence(h, r));
    }
    Ok(groups
        .into_iter()
        .enumerate()
        .filter(|(_, (count, _))| *count > 0)
        .map(|(k, (count, stats))| Bucket {
            lo: k * width + 1,
            hi: (k + 1) * width,
            count,
            bleu: stats.score(),
        })
        .collect())
}

pub fn buckets_to_csv(buckets: &[Bucket]) -> String {
    let mut out = String::from("bucket_lo,bucket_hi,count,bleu\n");
    for b in buckets {
        writeln!(out, "{},{},{},{:.4}", b.lo, b.hi, b.count, b.bleu).expect("write to String");
    }
    out
}

/// Standalone SVG line chart of BLEU per bucket.
pub fn buckets_to_svg(buckets: &[Bucket], title: &str) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const LEFT: f64 = 60.0;
    const RIGHT: f64 = 20.0;
    const TOP: f64 = 40.0;
    const BOTTOM: f64 = 60.0;
    let plot_w = W - LEFT - RIGHT;
    let plot_h = H - TOP - BOTTOM;
    let y_max = buckets.iter().map(|b| b.bleu).fold(0.0f64, f64::max).max(1.0);
    let y_max = (y_max / 10.0).ceil() * 10.0;
    let x_of = |i: usize| {
        if buckets.len() <= 1 {
            LEFT + plot_w / 2.0
        } else {
            LEFT + plot_w * i as f64 / (buckets.len() - 1) as f64
        }
    };
    let y_of = |v: f64| TOP + plot_h * (1.0 - v / y_max);

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-family="sans-serif" font-size="16">{}</text>"#,
        W / 2.0,
        escape(title)
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#,
        TOP + plot_h
    )
    .unwrap();
    writeln!(
        s,
        r#"<line x1="{LEFT}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#,
        LEFT + plot_w,
        y0 = TOP + plot_h
    )
    .unwrap();
    for tick in 0..=5 {
        let v = y_max * tick as f64 / 5.0;
        writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11">{v:.0}</text>"#,
            LEFT - 6.0,
            y_of(v) + 4.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle" font-family="sans-serif" font-size="12">BLEU</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="{}" text-anchor="middle" font-family="sans-serif" font-size="12">source length</text>"#,
        LEFT + plot_w / 2.0,
        H - 12.0
    )
    .unwrap();
    if !buckets.is_empty() {
        let points: Vec<String> = buckets
            .iter()
            .enumerate()
            .map(|(i, b)| format!("{:.1},{:.1}", x_of(i), y_of(b.bleu)))
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="steelblue" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        )
        .unwrap();
    }
    for (i, b) in buckets.iter().enumerate() {
        let (x, y) = (x_of(i), y_of(b.bleu));
        writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="4" fill="steelblue"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-family="sans-serif" font-size="11">{}-{}</text>"#,
            TOP + plot_h + 18.0,
            b.lo,
            b.hi
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
