//! Closed-loop logs as CSV (full precision, `#` comment header) and
//! two-panel SVG plots.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context};
use fmpc_core::{LogSample, OcpRecord, OcpStatus};

use crate::config::config_error;

/// Which command produced a log; selects the input bound used by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogKind {
    Simulate,
    Baseline,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Simulate => "simulate",
            LogKind::Baseline => "baseline",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "simulate" => Some(LogKind::Simulate),
            "baseline" => Some(LogKind::Baseline),
            _ => None,
        }
    }
}

const VECTOR_COLUMNS: [&str; 5] = ["y", "y_ref", "e", "e_r", "u"];

pub fn header(m: usize) -> Vec<String> {
    let vector = |name: &str| -> Vec<String> {
        if m == 1 {
            vec![name.to_string()]
        } else {
            (1..=m).map(|i| format!("{name}_{i}")).collect()
        }
    };
    let mut cols = vec!["t".to_string()];
    cols.extend(vector("y"));
    cols.extend(vector("y_ref"));
    cols.extend(vector("e"));
    cols.push("psi".into());
    cols.extend(vector("e_r"));
    cols.push("theta".into());
    cols.extend(vector("u"));
    debug_assert_eq!(cols.len(), 3 + VECTOR_COLUMNS.len() * m);
    cols
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `samples` after a comment block holding the log kind and the
/// resolved configuration.
pub fn write_log(
    path: &Path,
    kind: LogKind,
    resolved_json: &str,
    samples: &[LogSample],
) -> anyhow::Result<()> {
    let m = samples.first().map_or(1, |s| s.y.len());
    let mut file = std::io::BufWriter::new(
        std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    writeln!(file, "# mode: {}", kind.as_str())?;
    writeln!(file, "# config:")?;
    for line in resolved_json.lines() {
        writeln!(file, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header(m))?;
    let mut row = Vec::with_capacity(3 + 5 * m);
    for s in samples {
        row.clear();
        row.push(num(s.t));
        row.extend(s.y.iter().map(|v| num(*v)));
        row.extend(s.y_ref.iter().map(|v| num(*v)));
        row.extend(s.e.iter().map(|v| num(*v)));
        row.push(num(s.psi));
        row.extend(s.e_r.iter().map(|v| num(*v)));
        row.push(num(s.theta));
        row.extend(s.u.iter().map(|v| num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct LoadedLog {
    pub kind: LogKind,
    pub samples: Vec<LogSample>,
}

/// Parse a log written by [`write_log`] with `m` output channels. Any
/// deviation from the schema is a configuration error.
pub fn read_log(path: &Path, m: usize) -> anyhow::Result<LoadedLog> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
    let kind = text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix("# mode: "))
        .and_then(|k| LogKind::parse(k.trim()))
        .ok_or_else(|| {
            config_error(format!("{}: missing '# mode:' header line", path.display()))
        })?;
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let expected = header(m);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| config_error(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(config_error(format!(
            "{}: columns {found:?} do not match schema {expected:?}",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| config_error(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        let values: Vec<f64> = record
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| config_error(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        let mut it = values.into_iter();
        let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
        let t = take(1)[0];
        let (y, y_ref, e) = (take(m), take(m), take(m));
        let psi = take(1)[0];
        let e_r = take(m);
        let theta = take(1)[0];
        let u = take(m);
        samples.push(LogSample {
            t,
            y,
            y_ref,
            e,
            psi,
            e_r,
            theta,
            u,
        });
    }
    if samples.is_empty() {
        bail!(config_error(format!("{}: no data rows", path.display())));
    }
    Ok(LoadedLog { kind, samples })
}

fn status_name(s: OcpStatus) -> &'static str {
    match s {
        OcpStatus::Converged => "converged",
        OcpStatus::BudgetExhausted => "budget_exhausted",
        OcpStatus::InfeasibleStartRecovered => "infeasible_start_recovered",
    }
}

pub fn write_steps(path: &Path, steps: &[OcpRecord]) -> anyhow::Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record([
        "t_hat",
        "cost",
        "start_cost",
        "iters",
        "evaluations",
        "status",
    ])?;
    for s in steps {
        w.write_record([
            num(s.t_hat),
            num(s.cost),
            num(s.start_cost),
            s.iterations.to_string(),
            s.evaluations.to_string(),
            status_name(s.status).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const PANEL_W: f64 = 800.0;
const PANEL_H: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (70.0, 20.0, 40.0, 50.0); // left, right, top, bottom

struct Series<'a> {
    points: Vec<(f64, f64)>,
    color: &'a str,
    label: &'a str,
}

fn panel(out: &mut String, y_offset: f64, title: &str, series: &[Series<'_>]) {
    let (left, right, top, bottom) = MARGIN;
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut t_lo, mut t_hi, mut v_lo, mut v_hi) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(t, v) in all {
        t_lo = t_lo.min(t);
        t_hi = t_hi.max(t);
        v_lo = v_lo.min(v);
        v_hi = v_hi.max(v);
    }
    if !(t_hi > t_lo) {
        t_hi = t_lo + 1.0;
    }
    if !(v_hi > v_lo) {
        v_lo -= 1.0;
        v_hi += 1.0;
    }
    let pad = 0.05 * (v_hi - v_lo);
    let (v_lo, v_hi) = (v_lo - pad, v_hi + pad);
    let (w, h) = (PANEL_W - left - right, PANEL_H - top - bottom);
    let x = |t: f64| left + (t - t_lo) / (t_hi - t_lo) * w;
    let y = |v: f64| top + (v_hi - v) / (v_hi - v_lo) * h;

    let _ = writeln!(
        out,
        r#"<svg x="0" y="{y_offset}" width="{PANEL_W}" height="{PANEL_H}" viewBox="0 0 {PANEL_W} {PANEL_H}">"#
    );
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{w}" height="{h}" fill="white" stroke="black"/>"#
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="16">{title}</text>"#,
        PANEL_W / 2.0,
        top - 15.0
    );
    for k in 0..=4 {
        let frac = k as f64 / 4.0;
        let (tv, vv) = (t_lo + frac * (t_hi - t_lo), v_lo + frac * (v_hi - v_lo));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{tv:.2}</text>"#,
            x(tv),
            top + h + 18.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="12">{vv:.3}</text>"#,
            left - 6.0,
            y(vv) + 4.0
        );
    }
    if v_lo < 0.0 && v_hi > 0.0 {
        let _ = writeln!(
            out,
            r##"<line x1="{left}" y1="{0:.2}" x2="{1}" y2="{0:.2}" stroke="#bbbbbb"/>"##,
            y(0.0),
            left + w
        );
    }
    for (i, s) in series.iter().enumerate() {
        let mut pts = String::with_capacity(s.points.len() * 16);
        for &(t, v) in &s.points {
            let _ = write!(pts, "{:.2},{:.2} ", x(t), y(v));
        }
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            s.color,
            pts.trim_end()
        );
        let ly = top + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" text-anchor="end" font-size="12" fill="{}">{}</text>"#,
            left + w - 8.0,
            s.color,
            s.label
        );
    }
    out.push_str("</svg>\n");
}

const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Tracking error against the funnel, and the input.
pub fn render_svg(samples: &[LogSample]) -> String {
    let m = samples.first().map_or(1, |s| s.y.len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{}" viewBox="0 0 {PANEL_W} {}">"#,
        2.0 * PANEL_H,
        2.0 * PANEL_H
    );
    let psi: Vec<(f64, f64)> = samples.iter().map(|s| (s.t, s.psi)).collect();
    let mut top = Vec::new();
    if m == 1 {
        top.push(Series {
            points: samples.iter().map(|s| (s.t, s.e[0])).collect(),
            color: COLORS[0],
            label: "e(t)",
        });
        top.push(Series {
            points: psi.iter().map(|&(t, p)| (t, -p)).collect(),
            color: "black",
            label: "",
        });
    } else {
        top.push(Series {
            points: samples
                .iter()
                .map(|s| (s.t, s.e.iter().map(|v| v * v).sum::<f64>().sqrt()))
                .collect(),
            color: COLORS[0],
            label: "‖e(t)‖",
        });
    }
    top.push(Series {
        points: psi,
        color: "black",
        label: "ψ(t)",
    });
    panel(&mut out, 0.0, "tracking error and funnel", &top);
    // at most four channels are drawn
    let labels = ["u_1(t)", "u_2(t)", "u_3(t)", "u_4(t)"];
    let bottom: Vec<Series<'_>> = (0..m.min(4))
        .map(|c| Series {
            points: samples.iter().map(|s| (s.t, s.u[c])).collect(),
            color: COLORS[c],
            label: if m == 1 { "u(t)" } else { labels[c] },
        })
        .collect();
    panel(&mut out, PANEL_H, "input", &bottom);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64) -> LogSample {
        LogSample {
            t,
            y: vec![t.cos() + 0.1],
            y_ref: vec![t.cos()],
            e: vec![0.1],
            psi: 1.0,
            e_r: vec![0.2],
            theta: 2.0,
            u: vec![-t],
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let samples: Vec<LogSample> = (0..50).map(|k| sample(k as f64 * 0.0137)).collect();
        write_log(&path, LogKind::Baseline, "{\n  \"a\": 1\n}", &samples).unwrap();
        let back = read_log(&path, 1).unwrap();
        assert_eq!(back.kind, LogKind::Baseline);
        assert_eq!(back.samples, samples);
        assert!(read_log(&path, 2).is_err());
    }

    #[test]
    fn truncated_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let samples: Vec<LogSample> = (0..5).map(|k| sample(k as f64)).collect();
        write_log(&path, LogKind::Simulate, "{}", &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() - 30]).unwrap();
        let err = read_log(&path, 1).unwrap_err();
        assert!(err.downcast_ref::<crate::config::ConfigError>().is_some());
    }

    #[test]
    fn multichannel_header() {
        assert_eq!(
            header(2),
            [
                "t", "y_1", "y_2", "y_ref_1", "y_ref_2", "e_1", "e_2", "psi", "e_r_1", "e_r_2",
                "theta", "u_1", "u_2"
            ]
        );
    }

    #[test]
    fn svg_has_two_fixed_panels() {
        let samples: Vec<LogSample> = (0..10).map(|k| sample(k as f64)).collect();
        let svg = render_svg(&samples);
        assert_eq!(svg.matches(r#"width="800" height="400""#).count(), 2);
        assert!(svg.starts_with("<svg xmlns"));
    }
}
