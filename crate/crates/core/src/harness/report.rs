//! Output files of a study: the error table, the fit summary, a manifest for
//! reproduction and a log-log plot.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use super::checks::{CorrectorScaling, DualCheckReport};
use super::study::{ConvergenceReport, Fit};
use crate::error::{Error, Result};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T, what: &str) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        context: what.into(),
        source,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `epsilon,phi_id,mean_err,stderr,metric_d_mean`, one row per epsilon and
/// test function.
pub fn errors_csv(report: &ConvergenceReport) -> String {
    let mut s = String::from("epsilon,phi_id,mean_err,stderr,metric_d_mean\n");
    for row in &report.rows {
        for e in &row.per_phi {
            let _ = writeln!(s, "{},{},{:.10e},{:.10e},{:.10e}", row.epsilon, e.phi_id, e.mean_err, e.stderr, row.metric_mean);
        }
    }
    s
}

fn fit_json(fit: &Option<Fit>) -> serde_json::Value {
    match fit {
        Some(f) => json!({
            "slope": f.slope,
            "intercept": f.intercept,
            "slope_ci": f.slope_ci,
            "confidence": f.confidence,
            "residuals": f.residuals,
        }),
        None => serde_json::Value::Null,
    }
}

/// Slope, intercept, interval and residuals of both fits, with the points
/// they were computed from and the gates.
pub fn fit_summary(report: &ConvergenceReport) -> serde_json::Value {
    let mut v = fit_json(&report.fit);
    let summary = json!({
        "target": "paired error averaged over the reported test functions",
        "moment": report.config.moment,
        "points": report.rows.iter().map(|r| json!({
            "epsilon": r.epsilon,
            "error": r.error,
            "stderr": r.stderr,
            "metric_d_mean": r.metric_mean,
            "metric_d_stderr": r.metric_stderr,
            "replications": r.replications,
        })).collect::<Vec<_>>(),
        "metric": fit_json(&report.metric_fit),
        "refusal": report.fit_refusal,
        "flag": report.flag(),
        "monotone": report.monotone,
        "bias_budget": report.bias,
        "partial": report.is_partial(),
        "gates": report.gates,
    });
    match v.as_object_mut() {
        Some(obj) => {
            if let serde_json::Value::Object(extra) = summary {
                obj.extend(extra);
            }
            v
        }
        None => summary,
    }
}

/// Config hash, seed, stream layout, versions and any failed replications.
pub fn manifest(report: &ConvergenceReport) -> Result<serde_json::Value> {
    let cfg = &report.config;
    let cfg_text = serde_json::to_string(cfg).map_err(|source| Error::Json {
        context: "configuration".into(),
        source,
    })?;
    let model_hash = std::fs::read(&cfg.model).ok().map(|b| sha256_hex(&b));
    Ok(json!({
        "config_sha256": sha256_hex(cfg_text.as_bytes()),
        "model_sha256": model_hash,
        "config": cfg,
        "seed": cfg.seed,
        "streams": {
            "path": "(seed, Path, replication), shared by every epsilon",
            "filters": "(seed, FilterInitial, replication), per-particle children",
            "bias_budget": "same identities on the refined grid",
        },
        "versions": {
            "homofilter": env!("CARGO_PKG_VERSION"),
            "report_format": 1,
        },
        "workers": rayon::current_num_threads(),
        "partial": report.is_partial(),
        "failures": report.failures,
    }))
}

/// Log-log plot of the error with two-standard-error bars and the fitted
/// line.
pub fn plot_svg(report: &ConvergenceReport) -> String {
    let (w, h, pad) = (640.0, 440.0, 60.0);
    let pts: Vec<(f64, f64, f64)> = report
        .rows
        .iter()
        .filter(|r| r.error > 0.0)
        .map(|r| (r.epsilon.ln(), r.error.ln(), (2.0 * r.stderr / r.error).min(5.0)))
        .collect();
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    if pts.is_empty() {
        s.push_str("<text x=\"20\" y=\"40\">no positive errors to plot</text>\n</svg>\n");
        return s;
    }
    let (mut x0, mut x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (mut y0, mut y1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1 - p.2), b.max(p.1 + p.2)));
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 - y0 < 1e-9 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |v: f64| pad + (v - x0) / (x1 - x0) * (w - 2.0 * pad);
    let sy = |v: f64| h - pad - (v - y0) / (y1 - y0) * (h - 2.0 * pad);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#,
        h - pad,
        w - pad,
        h - pad,
        h - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epsilon (log scale)</text>"#, w / 2.0, h - 20.0);
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">paired error (log scale)</text>"#, h / 2.0, h / 2.0);
    for r in &report.rows {
        if r.error > 0.0 {
            let x = sx(r.epsilon.ln());
            let _ = writeln!(s, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, h - pad + 16.0, r.epsilon);
        }
    }
    for &(x, y, e) in &pts {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="gray"/><circle cx="{0:.1}" cy="{3:.1}" r="4" fill="steelblue"/>"#,
            sx(x),
            sy(y - e),
            sy(y + e),
            sy(y)
        );
    }
    if let Some(f) = &report.fit {
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="firebrick" stroke-dasharray="6 4"/>"#,
            sx(x0),
            sy(f.intercept + f.slope * x0),
            sx(x1),
            sy(f.intercept + f.slope * x1)
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}">slope {:.3} [{:.3}, {:.3}]</text>"#, pad + 10.0, pad - 20.0, f.slope, f.slope_ci[0], f.slope_ci[1]);
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `errors.csv`, `fit.json`, `manifest.json`, `plot.svg` and, when
/// probe times were requested, `probes.csv` into `dir`.
pub fn emit_report(report: &ConvergenceReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, text: String| -> Result<()> {
        let p = dir.join(name);
        write(&p, &text)?;
        written.push(p);
        Ok(())
    };
    put("errors.csv", errors_csv(report))?;
    put("fit.json", to_json(&fit_summary(report), "fit summary")?)?;
    put("manifest.json", to_json(&manifest(report)?, "manifest")?)?;
    put("plot.svg", plot_svg(report))?;
    if report.rows.iter().any(|r| !r.probes.is_empty()) {
        let mut s = String::from("epsilon,t,error,stderr\n");
        for r in &report.rows {
            for p in &r.probes {
                let _ = writeln!(s, "{},{},{:.10e},{:.10e}", r.epsilon, p.t, p.error, p.stderr);
            }
        }
        put("probes.csv", s)?;
    }
    Ok(written)
}

/// `duality.csv` with `filter,t,value,drift` rows and the report as JSON.
pub fn write_dual_check(report: &DualCheckReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut s = String::from("filter,t,value,drift\n");
    for (name, check) in [("reduced", &report.averaged), ("full", &report.full)] {
        for p in &check.points {
            let _ = writeln!(s, "{name},{},{:.10e},{:.10e}", p.t, p.value, p.drift);
        }
    }
    write(&dir.join("duality.csv"), &s)?;
    write(&dir.join("duality.json"), &to_json(report, "duality report")?)
}

/// `corrector.json` with the per-path estimates and the ratio.
pub fn write_corrector_scaling(report: &CorrectorScaling, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("corrector.json"), &to_json(report, "corrector report")?)
}
