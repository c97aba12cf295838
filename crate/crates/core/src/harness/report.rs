//! Report emission: CSV tables, a markdown summary, and SVG line charts.
//!
//! Aggregation joins the latest record per `(config hash, seed)` against the
//! recorded cell coordinates, keeps completed runs, and reduces to
//! mean / sample-standard-deviation per cell. All outputs sort rows
//! explicitly and format floats with fixed precision, so files are
//! byte-deterministic for fixed inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::store::{ResultsStore, RunStatus};
use crate::error::{Error, Result};

/// Per-cell reduction across seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CellAggregate {
    pub kind: String,
    pub policy: Option<String>,
    pub width: Option<f64>,
    pub tau: Option<f64>,
    pub bits: Option<u32>,
    pub seeds: usize,
    pub mean_train_acc: f64,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
}

/// Reduce completed runs to per-cell statistics, sorted by
/// `(kind, policy, width, tau)`.
pub fn aggregate(store: &ResultsStore) -> Vec<CellAggregate> {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for record in store.latest() {
        if !matches!(record.status, RunStatus::Completed) {
            continue;
        }
        groups
            .entry(record.config_hash.clone())
            .or_default()
            .push((record.final_train_acc, record.final_test_acc));
    }
    let mut out = Vec::new();
    for (hash, accs) in groups {
        let Some(info) = store.config(&hash) else { continue };
        let n = accs.len();
        let mean_train = accs.iter().map(|a| a.0).sum::<f64>() / n as f64;
        let mean_test = accs.iter().map(|a| a.1).sum::<f64>() / n as f64;
        let std_test = if n > 1 {
            (accs.iter().map(|a| (a.1 - mean_test).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        out.push(CellAggregate {
            kind: info.kind.clone(),
            policy: info.policy.clone(),
            width: info.width_factor,
            tau: info.tau,
            bits: info.bits,
            seeds: n,
            mean_train_acc: mean_train,
            mean_test_acc: mean_test,
            std_test_acc: std_test,
        });
    }
    out.sort_by(|a, b| {
        (&a.kind, &a.policy, ord(a.width), ord(a.tau))
            .cmp(&(&b.kind, &b.policy, ord(b.width), ord(b.tau)))
    });
    out
}

fn ord(v: Option<f64>) -> u64 {
    // Positive finite floats order correctly through their bit patterns.
    v.map_or(0, f64::to_bits)
}

fn row_csv(a: &CellAggregate) -> String {
    format!(
        "{},{},{},{},{},{},{:.6},{:.6},{:.6}\n",
        a.kind,
        a.policy.as_deref().unwrap_or(""),
        a.width.map_or(String::new(), |w| w.to_string()),
        a.tau.map_or(String::new(), |t| t.to_string()),
        a.bits.map_or(String::new(), |b| b.to_string()),
        a.seeds,
        a.mean_train_acc,
        a.mean_test_acc,
        a.std_test_acc,
    )
}

const CSV_HEADER: &str =
    "kind,policy,width_factor,tau,bits,num_seeds,mean_train_acc,mean_test_acc,stddev_test_acc\n";

/// Full results table, one row per cell.
pub fn write_results_csv(store: &ResultsStore, path: &Path) -> Result<()> {
    let aggs = non_empty(aggregate(store))?;
    let mut out = String::from(CSV_HEADER);
    for a in &aggs {
        out.push_str(&row_csv(a));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Accuracy vs teacher width, one series per temperature (constant-lambda
/// cells only).
pub fn write_fig3_csv(store: &ResultsStore, path: &Path) -> Result<()> {
    let aggs = non_empty(aggregate(store))?;
    let mut out = String::from("policy,width_factor,tau,mean_test_acc,stddev_test_acc,num_seeds\n");
    let mut rows: Vec<&CellAggregate> = aggs
        .iter()
        .filter(|a| {
            a.kind == "student" && a.policy.as_deref().is_some_and(|p| p.starts_with("constant"))
        })
        .collect();
    rows.sort_by(|a, b| {
        (&a.policy, ord(a.width), ord(a.tau)).cmp(&(&b.policy, ord(b.width), ord(b.tau)))
    });
    for a in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            a.policy.as_deref().unwrap_or(""),
            a.width.unwrap_or(f64::NAN),
            a.tau.unwrap_or(f64::NAN),
            a.mean_test_acc,
            a.std_test_acc,
            a.seeds
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Teacher accuracy per width (the reference line of the width sweep).
pub fn write_fig3_teachers_csv(store: &ResultsStore, path: &Path) -> Result<()> {
    let aggs = non_empty(aggregate(store))?;
    let mut out = String::from("width_factor,mean_test_acc,stddev_test_acc,num_seeds\n");
    for a in aggs.iter().filter(|a| a.kind == "teacher") {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{}",
            a.width.unwrap_or(f64::NAN),
            a.mean_test_acc,
            a.std_test_acc,
            a.seeds
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Constant-lambda vs GSLR comparison, hard baseline included.
pub fn write_fig4_csv(store: &ResultsStore, path: &Path) -> Result<()> {
    let aggs = non_empty(aggregate(store))?;
    let mut out = String::from("policy,width_factor,tau,mean_test_acc,stddev_test_acc,num_seeds\n");
    let mut rows: Vec<&CellAggregate> =
        aggs.iter().filter(|a| a.kind == "student" || a.kind == "hd").collect();
    rows.sort_by(|a, b| {
        (&a.policy, ord(a.width), ord(a.tau)).cmp(&(&b.policy, ord(b.width), ord(b.tau)))
    });
    for a in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{}",
            a.policy.as_deref().unwrap_or(""),
            a.width.map_or(String::new(), |w| w.to_string()),
            a.tau.map_or(String::new(), |t| t.to_string()),
            a.mean_test_acc,
            a.std_test_acc,
            a.seeds
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Markdown summary ordered by `(width, tau)` within each policy.
pub fn write_markdown(store: &ResultsStore, path: &Path) -> Result<()> {
    let aggs = non_empty(aggregate(store))?;
    let mut out = String::from("# Sweep results\n\n");
    out.push_str("| kind | policy | width | tau | seeds | mean train acc | mean test acc | std |\n");
    out.push_str("|---|---|---|---|---|---|---|---|\n");
    let mut rows: Vec<&CellAggregate> = aggs.iter().collect();
    rows.sort_by(|a, b| {
        (&a.kind, &a.policy, ord(a.width), ord(a.tau))
            .cmp(&(&b.kind, &b.policy, ord(b.width), ord(b.tau)))
    });
    for a in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {:.4} |",
            a.kind,
            a.policy.as_deref().unwrap_or("-"),
            a.width.map_or("-".to_string(), |w| w.to_string()),
            a.tau.map_or("-".to_string(), |t| t.to_string()),
            a.seeds,
            a.mean_train_acc,
            a.mean_test_acc,
            a.std_test_acc,
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn non_empty(aggs: Vec<CellAggregate>) -> Result<Vec<CellAggregate>> {
    if aggs.is_empty() {
        return Err(Error::usage("no completed runs to report".to_string()));
    }
    Ok(aggs)
}

// ---- SVG line charts ----

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Minimal deterministic line chart. `hline` draws a dashed horizontal
/// reference (the hard-label baseline in the figures).
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    hline: Option<(f64, &str)>,
) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 40.0, 50.0);
    let (pw, ph) = (w - ml - mr, h - mt - mb);
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
    }
    if let Some((y, _)) = hline {
        ys.push(y);
    }
    let (x0, x1) = span(&xs);
    let (y0, y1) = span(&ys);
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title}</text>"#,
        ml + pw / 2.0
    );
    // Axes and ticks.
    let _ = writeln!(
        svg,
        r#"<line x1="{ml:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
        mt + ph,
        ml + pw,
        mt + ph
    );
    let _ = writeln!(svg, r#"<line x1="{ml:.1}" y1="{mt:.1}" x2="{ml:.1}" y2="{:.1}" stroke="black"/>"#, mt + ph);
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * f64::from(i) / 4.0;
        let fy = y0 + (y1 - y0) * f64::from(i) / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="middle">{:.2}</text>"#,
            px(fx),
            mt + ph + 16.0,
            fx
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{:.3}</text>"#,
            ml - 6.0,
            py(fy) + 4.0,
            fy
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{ml:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#dddddd"/>"##,
            py(fy),
            ml + pw,
            py(fy)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle">{x_label}</text>"#,
        ml + pw / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.1}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {:.1})">{y_label}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0
    );
    if let Some((y, label)) = hline {
        let _ = writeln!(
            svg,
            r#"<line x1="{ml:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black" stroke-dasharray="6,4"/>"#,
            py(y),
            ml + pw,
            py(y)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11" text-anchor="end">{label}</text>"#,
            ml + pw - 4.0,
            py(y) - 5.0
        );
    }
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> =
            s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                px(x),
                py(y)
            );
        }
        let ly = mt + 14.0 + 16.0 * si as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            ml + pw - 110.0,
            ml + pw - 90.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="11">{}</text>"#,
            ml + pw - 84.0,
            ly + 4.0,
            s.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn span(values: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if (hi - lo).abs() < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.06;
    (lo - pad, hi + pad)
}

fn policy_series(aggs: &[CellAggregate], policy_prefix: &str) -> Vec<Series> {
    let mut by_tau: BTreeMap<u64, Vec<(f64, f64)>> = BTreeMap::new();
    for a in aggs {
        if a.kind != "student"
            || !a.policy.as_deref().is_some_and(|p| p.starts_with(policy_prefix))
        {
            continue;
        }
        if let (Some(w), Some(t)) = (a.width, a.tau) {
            by_tau.entry(t.to_bits()).or_default().push((w, a.mean_test_acc));
        }
    }
    by_tau
        .into_iter()
        .map(|(bits, mut points)| {
            points.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite widths"));
            Series { label: format!("tau={}", f64::from_bits(bits)), points }
        })
        .collect()
}

fn hd_baseline(aggs: &[CellAggregate]) -> Option<f64> {
    aggs.iter().find(|a| a.kind == "hd").map(|a| a.mean_test_acc)
}

/// Write the width-sweep chart (one line per temperature, hard baseline
/// rule) for each lambda policy present.
pub fn write_svgs(store: &ResultsStore, dir: &Path) -> Result<Vec<PathBuf>> {
    let aggs = non_empty(aggregate(store))?;
    let hd = hd_baseline(&aggs);
    let mut written = Vec::new();
    for (prefix, file, title) in [
        ("constant", "fig_width_vs_tau_constant.svg", "Quantized student accuracy (constant lambda)"),
        ("gslr", "fig_width_vs_tau_gslr.svg", "Quantized student accuracy (GSLR)"),
    ] {
        let series = policy_series(&aggs, prefix);
        if series.is_empty() {
            continue;
        }
        let svg = line_chart(
            title,
            "teacher width factor",
            "mean test accuracy",
            &series,
            hd.map(|y| (y, "hard-label baseline")),
        );
        let path = dir.join(file);
        std::fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "svg" => Ok(ReportFormat::Svg),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::usage(format!("unknown report format {other:?}"))),
        }
    }
}

/// Emit one format's artifacts into `out_dir`; returns the files written.
pub fn report(store: &ResultsStore, format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    match format {
        ReportFormat::Csv => {
            let files = vec![
                out_dir.join("results.csv"),
                out_dir.join("fig_width_vs_tau.csv"),
                out_dir.join("fig_teachers.csv"),
                out_dir.join("fig_gslr_vs_constant.csv"),
            ];
            write_results_csv(store, &files[0])?;
            write_fig3_csv(store, &files[1])?;
            write_fig3_teachers_csv(store, &files[2])?;
            write_fig4_csv(store, &files[3])?;
            Ok(files)
        }
        ReportFormat::Svg => write_svgs(store, out_dir),
        ReportFormat::Markdown => {
            let path = out_dir.join("results.md");
            write_markdown(store, &path)?;
            Ok(vec![path])
        }
    }
}

/// Figure-shaped CSVs refreshed at the end of a sweep.
pub fn emit_sweep_csvs(store: &ResultsStore) -> Result<()> {
    let dir = store.dir().to_path_buf();
    write_results_csv(store, &dir.join("results.csv"))?;
    write_fig3_csv(store, &dir.join("fig_width_vs_tau.csv"))?;
    write_fig3_teachers_csv(store, &dir.join("fig_teachers.csv")).ok();
    write_fig4_csv(store, &dir.join("fig_gslr_vs_constant.csv"))?;
    Ok(())
}
