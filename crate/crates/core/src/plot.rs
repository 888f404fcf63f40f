//! Static SVG time-series plots with margin bands and phase markers.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{IntervalRecord, MarginSet, Metric, Phase, PhaseBounds};

const W: f64 = 720.0;
const H: f64 = 360.0;
const PAD_L: f64 = 64.0;
const PAD_R: f64 = 24.0;
const PAD_T: f64 = 40.0;
const PAD_B: f64 = 48.0;

fn file_name(m: Metric) -> &'static str {
    match m {
        Metric::Convergence => "convergence.svg",
        Metric::Quality => "quality.svg",
        Metric::Messages => "messages.svg",
    }
}

fn title(m: Metric) -> &'static str {
    match m {
        Metric::Convergence => "Convergence duration (ticks)",
        Metric::Quality => "Solution quality (objective, lower is better)",
        Metric::Messages => "Messages per interval",
    }
}

/// Renders one metric as an SVG document.
pub fn render_svg(records: &[IntervalRecord], margins: &MarginSet, bounds: PhaseBounds, metric: Metric) -> String {
    let margin = margins.get(metric);
    let values: Vec<(u32, f64)> = records.iter().map(|r| (r.interval, metric.value(r))).collect();
    let mut lo = values.iter().map(|v| v.1).fold(margin.lower, f64::min);
    let mut hi = values.iter().map(|v| v.1).fold(margin.upper, f64::max);
    if hi - lo < 1e-9 {
        lo -= 1.0;
        hi += 1.0;
    }
    let span_x = f64::from(bounds.num_intervals.saturating_sub(1).max(1));
    let x = |i: f64| PAD_L + (W - PAD_L - PAD_R) * i / span_x;
    let y = |v: f64| H - PAD_B - (H - PAD_T - PAD_B) * (v - lo) / (hi - lo);

    let present: Vec<Phase> = Phase::ALL
        .iter()
        .copied()
        .filter(|p| records.iter().any(|r| r.phase == *p))
        .collect();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r##"<rect width="{W}" height="{H}" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"<text x="{PAD_L}" y="22" font-size="14">{}</text>"#, title(metric));
    let _ = writeln!(
        s,
        r##"<line x1="{PAD_L}" y1="{}" x2="{}" y2="{}" stroke="#000"/>"##,
        H - PAD_B,
        W - PAD_R,
        H - PAD_B
    );
    let _ = writeln!(s, r##"<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{}" stroke="#000"/>"##, H - PAD_B);
    for (v, label) in [(lo, lo), (hi, hi)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{label:.1}</text>"#,
            PAD_L - 6.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">interval</text>"#,
        (PAD_L + W - PAD_R) / 2.0,
        H - 12.0
    );

    for (name, v, dash) in [
        ("lower", margin.lower, "6 4"),
        ("upper", margin.upper, "6 4"),
        ("target", margin.target, "2 3"),
    ] {
        let _ = writeln!(
            s,
            r##"<line class="margin-{name}" x1="{PAD_L}" y1="{:.2}" x2="{}" y2="{:.2}" stroke="#1f77b4" stroke-dasharray="{dash}"/>"##,
            y(v),
            W - PAD_R,
            y(v)
        );
    }

    for (phase, at, label) in [
        (Phase::Disruption, bounds.incident_interval, "incident"),
        (Phase::ControlActive, bounds.control_interval, "control"),
    ] {
        if present.contains(&phase) {
            let px = x(f64::from(at));
            let _ = writeln!(
                s,
                r##"<line class="marker-{label}" x1="{px:.2}" y1="{PAD_T}" x2="{px:.2}" y2="{}" stroke="#d62728"/>"##,
                H - PAD_B
            );
            let _ = writeln!(s, r##"<text x="{:.2}" y="{}" fill="#d62728">{label} {at}</text>"##, px + 4.0, PAD_T + 12.0);
        }
    }

    if !values.is_empty() {
        let pts: Vec<String> = values
            .iter()
            .map(|(i, v)| format!("{:.2},{:.2}", x(f64::from(*i)), y(*v)))
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline class="series" fill="none" stroke="#2ca02c" stroke-width="1.5" points="{}"/>"##,
            pts.join(" ")
        );
    }

    let missing: Vec<String> = Phase::ALL
        .iter()
        .filter(|p| !present.contains(p))
        .map(|p| p.to_string())
        .collect();
    if !missing.is_empty() {
        let _ = writeln!(
            s,
            r##"<text class="warning" x="{}" y="22" text-anchor="end" fill="#ff7f0e">warning: partial plot, missing phase(s) {}</text>"##,
            W - PAD_R,
            missing.join(", ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one SVG per metric into `dir` and returns the paths.
pub fn emit_plots(records: &[IntervalRecord], margins: &MarginSet, bounds: PhaseBounds, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for m in Metric::ALL {
        let p = dir.join(file_name(m));
        std::fs::write(&p, render_svg(records, margins, bounds, m)).map_err(|e| Error::io(&p, e))?;
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::compute_margins;

    fn records(phases: &[Phase]) -> Vec<IntervalRecord> {
        phases
            .iter()
            .enumerate()
            .map(|(i, p)| IntervalRecord {
                interval: i as u32,
                convergence_ticks: 10 + i as u64 % 3,
                solution_quality: 1.0,
                message_count: 50,
                phase: *p,
            })
            .collect()
    }

    const B: PhaseBounds = PhaseBounds {
        num_intervals: 6,
        incident_interval: 2,
        control_interval: 4,
    };

    #[test]
    fn full_run_has_markers_and_no_warning() {
        use Phase::*;
        let r = records(&[Normal, Normal, Disruption, Disruption, ControlActive, ControlActive]);
        let m = compute_margins(&r[..2]).unwrap();
        let svg = render_svg(&r, &m, B, Metric::Quality);
        assert!(svg.contains("marker-incident") && svg.contains("marker-control"));
        assert!(!svg.contains("class=\"warning\""));
    }

    #[test]
    fn normal_only_run_is_partial() {
        let r = records(&[Phase::Normal; 3]);
        let m = compute_margins(&r).unwrap();
        let svg = render_svg(&r, &m, B, Metric::Convergence);
        assert!(!svg.contains("marker-"));
        assert!(svg.contains("missing phase(s) Disruption, ControlActive"));
    }

    #[test]
    fn plots_are_deterministic() {
        let r = records(&[Phase::Normal; 4]);
        let m = compute_margins(&r).unwrap();
        assert_eq!(render_svg(&r, &m, B, Metric::Messages), render_svg(&r, &m, B, Metric::Messages));
    }
}
