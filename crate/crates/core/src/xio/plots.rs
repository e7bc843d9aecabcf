//! Minimal SVG line charts of a metrics log.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::Result;
use crate::trainer::StepReport;

/// Trailing window of the exponentially weighted smoother.
pub const SMOOTH_WINDOW: usize = 11;
/// Weight decay per step back inside the window.
pub const SMOOTH_DECAY: f64 = 0.6;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: &[&str] = &["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// `s_t = Σ_j w^j x_{t-j} / Σ_j w^j` over the trailing window.
pub fn smooth(xs: &[f64]) -> Vec<f64> {
    (0..xs.len())
        .map(|t| {
            let (mut num, mut den, mut w) = (0.0, 0.0, 1.0);
            for j in 0..SMOOTH_WINDOW.min(t + 1) {
                num += w * xs[t - j];
                den += w;
                w *= SMOOTH_DECAY;
            }
            num / den
        })
        .collect()
}

pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders each series raw (faint) and smoothed (solid) against `steps`.
pub fn render_svg(title: &str, steps: &[f64], series: &[Series]) -> String {
    let finite = series
        .iter()
        .flat_map(|s| s.values.iter().copied())
        .filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x0 = steps.first().copied().unwrap_or(0.0);
    let x1 = steps.last().copied().unwrap_or(1.0).max(x0 + 1.0);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - lo) / (hi - lo) * (HEIGHT - 2.0 * MARGIN);
    let polyline = |vals: &[f64]| {
        steps
            .iter()
            .zip(vals)
            .filter(|(_, v)| v.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>"#
    );
    for (y, label) in [(bottom, lo), (top, hi)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{:.4}</text>"#,
            left - 4.0,
            y + 4.0,
            label
        );
    }
    for (x, label) in [(left, x0), (right, x1)] {
        let _ = writeln!(
            svg,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{label}</text>"#,
            bottom + 16.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let _ = writeln!(
            svg,
            r#"<polyline class="raw" points="{}" stroke="{color}" stroke-opacity="0.3" fill="none"/>"#,
            polyline(&s.values)
        );
        let _ = writeln!(
            svg,
            r#"<polyline class="smoothed" points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            polyline(&smooth(&s.values))
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" fill="{color}">{}</text>"#,
            right - 120.0,
            top + 14.0 * (i as f64 + 1.0),
            escape(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `return.svg`, `entropy.svg`, `sigma.svg` and, when there are
/// critics, `critic_loss.svg`. Returns the file names written; an empty log
/// writes nothing.
pub fn write_plots(dir: &Path, reports: &[StepReport]) -> Result<Vec<String>> {
    if reports.is_empty() {
        log::warn!("no metrics to plot");
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir)?;
    let steps: Vec<f64> = reports.iter().map(|r| r.step as f64).collect();
    let col = |f: fn(&StepReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let mut charts: Vec<(&str, &str, Vec<Series>)> = vec![
        (
            "return.svg",
            "mean return",
            vec![Series {
                name: "mean return".into(),
                values: col(|r| r.mean_return),
            }],
        ),
        (
            "entropy.svg",
            "policy entropy",
            vec![Series {
                name: "entropy".into(),
                values: col(|r| r.policy_entropy),
            }],
        ),
        (
            "sigma.svg",
            "critic value spread",
            vec![
                Series {
                    name: "q10".into(),
                    values: col(|r| r.sigma_q10),
                },
                Series {
                    name: "q50".into(),
                    values: col(|r| r.sigma_q50),
                },
                Series {
                    name: "q90".into(),
                    values: col(|r| r.sigma_q90),
                },
            ],
        ),
    ];
    let n_critics = reports.iter().map(|r| r.critic_losses.len()).max().unwrap_or(0);
    if n_critics > 0 {
        let series = (0..n_critics)
            .map(|m| Series {
                name: format!("critic {m}"),
                values: reports
                    .iter()
                    .map(|r| r.critic_losses.get(m).copied().unwrap_or(f64::NAN))
                    .collect(),
            })
            .collect();
        charts.push(("critic_loss.svg", "critic loss", series));
    }
    let mut written = Vec::new();
    for (file, title, series) in charts {
        std::fs::write(dir.join(file), render_svg(title, &steps, &series))?;
        written.push(file.to_string());
    }
    Ok(written)
}

/// Plot files a run directory is expected to hold.
pub fn plot_paths(dir: &Path, with_critics: bool) -> Vec<PathBuf> {
    let mut names = vec!["return.svg", "entropy.svg", "sigma.svg"];
    if with_critics {
        names.push("critic_loss.svg");
    }
    names.into_iter().map(|n| dir.join(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_examples() {
        assert_eq!(smooth(&[]), Vec::<f64>::new());
        assert!(smooth(&[3.0, 3.0, 3.0]).iter().all(|v| (v - 3.0).abs() < 1e-15));
        let s = smooth(&[0.0, 1.0]);
        assert!((s[1] - 1.0 / 1.6).abs() < 1e-15);
        let long: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let s = smooth(&long);
        let weights: Vec<f64> = (0..11).map(|j| 0.6f64.powi(j)).collect();
        let want = weights.iter().enumerate().map(|(j, w)| w * (29 - j) as f64).sum::<f64>() / weights.iter().sum::<f64>();
        assert!((s[29] - want).abs() < 1e-12);
    }

    #[test]
    fn empty_log_is_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_plots(dir.path(), &[]).unwrap().is_empty());
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn constant_series_renders() {
        let svg = render_svg("t<", &[0.0], &[Series {
            name: "x".into(),
            values: vec![2.0],
        }]);
        assert!(svg.contains("t&lt;"));
        assert!(!svg.contains("NaN"));
    }
}
