//! SVG charts and a markdown summary built from training logs and metric reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use qtrack::io::{parse_log, read_text, write_file};
use qtrack::training::LogRecord;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn label(p: &Path) -> String {
    let parent = p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().to_string());
    parent.unwrap_or_else(|| p.display().to_string())
}

/// Exponential moving average.
fn smooth(values: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = None;
    for &v in values {
        let s = match acc {
            None => v,
            Some(a) => alpha * v + (1.0 - alpha) * a,
        };
        acc = Some(s);
        out.push(s);
    }
    out
}

fn loss_svg(runs: &[(String, Vec<LogRecord>)]) -> String {
    let max_it = runs.iter().flat_map(|(_, r)| r.last()).map(|r| r.iteration).max().unwrap_or(1).max(1) as f64;
    let curves: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .map(|(name, recs)| {
            let s = smooth(&recs.iter().map(|r| r.loss).collect::<Vec<_>>(), 0.05);
            (name.clone(), recs.iter().zip(s).map(|(r, l)| (r.iteration as f64, l)).collect())
        })
        .collect();
    let max_loss = curves
        .iter()
        .flat_map(|(_, c)| c.iter().map(|p| p.1))
        .fold(0.0f64, f64::max)
        .max(1e-9);
    let x = |it: f64| PAD + (W - 2.0 * PAD) * it / max_it;
    let y = |l: f64| H - PAD - (H - 2.0 * PAD) * l / max_loss;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD},{PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="12" y="{}" transform="rotate(-90 12 {})" text-anchor="middle">loss (smoothed)</text>"#, H / 2.0, H / 2.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{max_it}</text>"#, W - PAD, H - PAD + 16.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{max_loss:.3}</text>"#, PAD - 4.0, PAD + 4.0);
    for (i, (name, pts)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|&(it, l)| format!("{:.1},{:.1}", x(it), y(l))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="{color}" fill="none"/>"#, d.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{color}" text-anchor="end">{name}</text>"#, W - PAD, PAD + 14.0 * i as f64);
    }
    s.push_str("</svg>\n");
    s
}

fn parse_key_values(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| v.trim().parse().ok().map(|v| (k.trim().to_string(), v)))
        .collect()
}

fn metrics_svg(reports: &[(String, BTreeMap<String, f64>)]) -> String {
    let keys = ["mota", "idf1"];
    let group = (W - 2.0 * PAD) / reports.len().max(1) as f64;
    let bar = group / (keys.len() as f64 + 1.0);
    // MOTA can be negative; the axis spans [min(0, lowest), 1]
    let lo = reports
        .iter()
        .flat_map(|(_, m)| keys.iter().filter_map(|k| m.get(*k).copied()))
        .fold(0.0f64, f64::min);
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (1.0 - lo);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<line x1="{PAD}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/>"#, y(0.0), W - PAD);
    for (g, (name, m)) in reports.iter().enumerate() {
        let gx = PAD + group * g as f64;
        for (i, k) in keys.iter().enumerate() {
            let v = m.get(*k).copied().unwrap_or(0.0);
            let (top, bottom) = (y(v.max(0.0)), y(v.min(0.0)));
            let bx = gx + bar * (i as f64 + 0.5);
            let _ = writeln!(
                s,
                r#"<rect x="{bx:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                bar * 0.9,
                bottom - top,
                COLORS[i]
            );
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#, bx + bar * 0.45, top - 4.0);
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{name}</text>"#, gx + group / 2.0, H - 12.0);
    }
    for (i, k) in keys.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="{}" text-anchor="end">{}</text>"#, W - PAD, PAD + 14.0 * i as f64, COLORS[i], k.to_uppercase());
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_report(logs: &[PathBuf], metrics: &[PathBuf], out: &Path) -> Result<()> {
    if logs.is_empty() && metrics.is_empty() {
        bail!("give at least one --log or --metrics file");
    }
    let mut md = String::from("# Run report\n\n");
    if !logs.is_empty() {
        let runs = logs
            .iter()
            .map(|p| Ok((label(p), parse_log(&read_text(p)?).with_context(|| format!("parsing {}", p.display()))?)))
            .collect::<Result<Vec<_>>>()?;
        write_file(&out.join("loss.svg"), loss_svg(&runs))?;
        md.push_str("![loss](loss.svg)\n\n| run | iterations | first loss | last loss (smoothed) |\n|---|---|---|---|\n");
        for (name, recs) in &runs {
            let s = smooth(&recs.iter().map(|r| r.loss).collect::<Vec<_>>(), 0.05);
            let _ = writeln!(
                md,
                "| {name} | {} | {:.4} | {:.4} |",
                recs.last().map_or(0, |r| r.iteration),
                recs.first().map_or(f64::NAN, |r| r.loss),
                s.last().copied().unwrap_or(f64::NAN)
            );
        }
        md.push('\n');
    }
    if !metrics.is_empty() {
        let reports = metrics
            .iter()
            .map(|p| Ok((label(p), parse_key_values(&read_text(p)?))))
            .collect::<Result<Vec<_>>>()?;
        write_file(&out.join("metrics.svg"), metrics_svg(&reports))?;
        md.push_str("![metrics](metrics.svg)\n\n| run | MOTA | IDF1 | IDS | FP | FN |\n|---|---|---|---|---|---|\n");
        for (name, m) in &reports {
            let g = |k: &str| m.get(k).copied().unwrap_or(f64::NAN);
            let _ = writeln!(md, "| {name} | {:.4} | {:.4} | {} | {} | {} |", g("mota"), g("idf1"), g("ids"), g("fp"), g("fn"));
        }
    }
    write_file(&out.join("report.md"), &md)?;
    print!("{md}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_starts_at_first_value() {
        assert_eq!(smooth(&[2.0, 0.0], 0.5), vec![2.0, 1.0]);
    }

    #[test]
    fn key_values_skip_noise() {
        let m = parse_key_values("mota=0.5\nMOTA  0.5\nids=3\n");
        assert_eq!(m.len(), 2);
        assert_eq!(m["ids"], 3.0);
    }
}
