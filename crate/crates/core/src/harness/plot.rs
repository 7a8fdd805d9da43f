//! Gain and covariance-ellipse diagnostics as CSV tables plus
//! self-contained SVG markup.

use std::fmt::Write as _;
use std::path::Path;

use crate::cycle::FilterTrace;
use crate::error::Result;
use crate::math::{covariance_ellipse, Vec2};
use crate::nn::checkpoint::write_atomic;

pub const GAIN_COLUMNS: &str = "step,m,k_obs_x,k_obs_y,k_pred_x,k_pred_y,missing";
pub const ELLIPSE_COLUMNS: &str = "step,m,prior_x,prior_y,semi_major,semi_minor,angle_rad";

const BAR_W: f64 = 24.0;
const PLOT_H: f64 = 200.0;
const MARGIN: f64 = 30.0;

/// One row per step; the initial step has no gain and leaves those fields
/// empty.
pub fn gain_csv(trace: &FilterTrace) -> String {
    let mut s = format!("{GAIN_COLUMNS}\n");
    for (k, st) in trace.steps.iter().enumerate() {
        let missing = u8::from(st.m == 0);
        match st.gain {
            Some(g) => {
                let _ = writeln!(
                    s,
                    "{k},{},{},{},{},{},{missing}",
                    st.m, g.k_obs[0], g.k_obs[1], g.k_pred[0], g.k_pred[1]
                );
            }
            None => {
                let _ = writeln!(s, "{k},{},,,,,{missing}", st.m);
            }
        }
    }
    s
}

/// Per-step stacked bars of `k_obs` (bottom) and `k_pred` (top), averaged
/// over the two axes, over a shaded background at masked steps.
pub fn gain_svg(trace: &FilterTrace) -> String {
    let n = trace.len() as f64;
    let width = 2.0 * MARGIN + n * BAR_W;
    let height = 2.0 * MARGIN + PLOT_H;
    let mut s = svg_open(width, height);
    let base = MARGIN + PLOT_H;
    for (k, st) in trace.steps.iter().enumerate() {
        let x = MARGIN + k as f64 * BAR_W;
        if st.m == 0 {
            let _ = writeln!(
                s,
                r##"<rect class="missing" x="{x:.2}" y="{MARGIN:.2}" width="{BAR_W:.2}" height="{PLOT_H:.2}" fill="#f4c7c3"/>"##
            );
        }
        if let Some(g) = st.gain {
            let ko = 0.5 * (g.k_obs[0] + g.k_obs[1]);
            let h_obs = ko * PLOT_H;
            let (bx, bw) = (x + 3.0, BAR_W - 6.0);
            let _ = writeln!(
                s,
                r##"<rect class="k_obs" x="{bx:.2}" y="{:.2}" width="{bw:.2}" height="{h_obs:.2}" fill="#1f77b4"/>"##,
                base - h_obs
            );
            let _ = writeln!(
                s,
                r##"<rect class="k_pred" x="{bx:.2}" y="{MARGIN:.2}" width="{bw:.2}" height="{:.2}" fill="#ff7f0e"/>"##,
                PLOT_H - h_obs
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-size="9" text-anchor="middle">{k}</text>"#,
            x + 0.5 * BAR_W,
            base + 12.0
        );
    }
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{base}" x2="{:.2}" y2="{base}" stroke="black"/>"#,
        width - MARGIN
    );
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="{:.2}" font-size="11">k_obs (blue), k_pred (orange); shaded steps are missing</text>"#, MARGIN - 10.0);
    s.push_str("</svg>\n");
    s
}

/// One row per step with the prior's `n_sigma` ellipse; the initial step
/// has no prior and leaves those fields empty.
pub fn ellipse_csv(trace: &FilterTrace, n_sigma: f64) -> String {
    let mut s = format!("{ELLIPSE_COLUMNS}\n");
    for (k, st) in trace.steps.iter().enumerate() {
        match st.prior {
            Some(p) => {
                let e = covariance_ellipse(&p.0.cov, n_sigma);
                let _ = writeln!(
                    s,
                    "{k},{},{},{},{},{},{}",
                    st.m, p.0.mean.x, p.0.mean.y, e.semi_major, e.semi_minor, e.angle
                );
            }
            None => {
                let _ = writeln!(s, "{k},{},,,,,", st.m);
            }
        }
    }
    s
}

/// Ground-truth path, observations, prior means with their `n_sigma`
/// ellipses, and a cross at the true position of every masked step.
pub fn ellipse_svg(trace: &FilterTrace, n_sigma: f64) -> String {
    const SIZE: f64 = 480.0;
    let mut pts: Vec<Vec2> = trace.steps.iter().map(|s| s.gt).collect();
    pts.extend(trace.steps.iter().filter(|s| s.m == 1).map(|s| s.obs));
    let mut shapes = Vec::new();
    for st in &trace.steps {
        if let Some(p) = st.prior {
            let e = covariance_ellipse(&p.0.cov, n_sigma);
            let r = e.semi_major;
            pts.push(p.0.mean + Vec2::new(r, r));
            pts.push(p.0.mean - Vec2::new(r, r));
            shapes.push((p.0.mean, e));
        }
    }
    let (mut lo, mut hi) = (Vec2::new(f64::MAX, f64::MAX), Vec2::new(f64::MIN, f64::MIN));
    for p in &pts {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let span = (hi.x - lo.x).max(hi.y - lo.y).max(1e-6);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    // world y points up, SVG y points down
    let px = |p: Vec2| (MARGIN + (p.x - lo.x) * scale, SIZE - MARGIN - (p.y - lo.y) * scale);
    let mut s = svg_open(SIZE, SIZE);
    for (m, e) in &shapes {
        let (cx, cy) = px(*m);
        let _ = writeln!(
            s,
            r##"<ellipse class="prior" cx="{cx:.2}" cy="{cy:.2}" rx="{:.2}" ry="{:.2}" transform="rotate({:.3} {cx:.2} {cy:.2})" fill="none" stroke="#2ca02c"/>"##,
            e.semi_major * scale,
            e.semi_minor * scale,
            -e.angle.to_degrees()
        );
        let _ = writeln!(s, r##"<circle class="prior_mean" cx="{cx:.2}" cy="{cy:.2}" r="1.5" fill="#2ca02c"/>"##);
    }
    let path: Vec<String> = trace
        .steps
        .iter()
        .map(|st| {
            let (x, y) = px(st.gt);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(s, r#"<polyline class="gt" points="{}" fill="none" stroke="black"/>"#, path.join(" "));
    for st in &trace.steps {
        if st.m == 1 {
            let (x, y) = px(st.obs);
            let _ = writeln!(s, r##"<circle class="obs" cx="{x:.2}" cy="{y:.2}" r="2.5" fill="#1f77b4"/>"##);
        } else {
            let (x, y) = px(st.gt);
            let d = 4.0;
            let _ = writeln!(
                s,
                r##"<path class="missing" d="M{:.2},{:.2} L{:.2},{:.2} M{:.2},{:.2} L{:.2},{:.2}" stroke="#d62728" stroke-width="1.5"/>"##,
                x - d, y - d, x + d, y + d, x - d, y + d, x + d, y - d
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn svg_open(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

/// Writes `<stem>.csv` and `<stem>.svg` next to `svg_path`.
fn emit(svg_path: &Path, csv: &str, svg: &str) -> Result<()> {
    if let Some(dir) = svg_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_atomic(&svg_path.with_extension("csv"), csv.as_bytes())?;
    write_atomic(&svg_path.with_extension("svg"), svg.as_bytes())
}

pub fn emit_gain_plot(trace: &FilterTrace, svg_path: &Path) -> Result<()> {
    emit(svg_path, &gain_csv(trace), &gain_svg(trace))
}

pub fn emit_ellipse_plot(trace: &FilterTrace, n_sigma: f64, svg_path: &Path) -> Result<()> {
    emit(svg_path, &ellipse_csv(trace, n_sigma), &ellipse_svg(trace, n_sigma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycle::{GainPair, PosteriorState, PriorState, TraceStep};
    use crate::math::{Gaussian2D, Mat2};

    fn trace(mask: &[u8], cov: Mat2) -> FilterTrace {
        let steps = mask
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let p = Vec2::new(k as f64 * 0.1, 0.0);
                TraceStep {
                    prior: (k > 0).then(|| PriorState(Gaussian2D::new(p, cov).unwrap())),
                    posterior: PosteriorState(Gaussian2D::new(p, cov).unwrap()),
                    gain: (k > 0).then(|| GainPair::from_obs([0.7, 0.5])),
                    m,
                    k_miss: 0,
                    obs: if m == 1 { p } else { Vec2::ZERO },
                    gt: p,
                }
            })
            .collect();
        FilterTrace { steps }
    }

    #[test]
    fn fully_observed_trace_has_no_highlights() {
        let t = trace(&[1, 1, 1, 1], Mat2::IDENTITY);
        assert!(!gain_svg(&t).contains("class=\"missing\""));
        assert!(!ellipse_svg(&t, 3.0).contains("class=\"missing\""));
        assert!(gain_csv(&t).lines().skip(1).all(|l| l.ends_with(",0")));
    }

    #[test]
    fn masked_steps_are_highlighted() {
        let t = trace(&[1, 0, 0, 1], Mat2::IDENTITY);
        assert_eq!(gain_svg(&t).matches("class=\"missing\"").count(), 2);
        assert_eq!(ellipse_svg(&t, 3.0).matches("class=\"missing\"").count(), 2);
    }

    #[test]
    fn csv_rows_match_trace_length() {
        let t = trace(&[1, 1, 0, 1, 1], Mat2::IDENTITY);
        assert_eq!(gain_csv(&t).lines().count(), 1 + 5);
        assert_eq!(ellipse_csv(&t, 3.0).lines().count(), 1 + 5);
        let csv = gain_csv(&t);
        let row: Vec<&str> = csv.lines().nth(2).unwrap().split(',').collect();
        assert_eq!(row, ["1", "1", "0.7", "0.5", &(1.0 - 0.7f64).to_string(), "0.5", "0"]);
    }

    #[test]
    fn isotropic_covariance_gives_circle_of_three_sigma() {
        let sigma = 0.2;
        let t = trace(&[1, 1], Mat2::diag(sigma * sigma, sigma * sigma));
        let row: Vec<f64> = ellipse_csv(&t, 3.0).lines().nth(2).unwrap().split(',').skip(4).map(|v| v.parse().unwrap()).collect();
        assert!((row[0] - 0.6).abs() < 1e-12 && (row[1] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn diagonal_covariance_axes_and_orientation() {
        let t = trace(&[1, 1], Mat2::diag(4.0, 1.0));
        let row: Vec<f64> = ellipse_csv(&t, 3.0).lines().nth(2).unwrap().split(',').skip(4).map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![6.0, 3.0, 0.0]);
    }

    #[test]
    fn emit_writes_csv_and_svg() {
        let dir = tempfile::tempdir().unwrap();
        let t = trace(&[1, 0, 1], Mat2::IDENTITY);
        emit_gain_plot(&t, &dir.path().join("gain.svg")).unwrap();
        emit_ellipse_plot(&t, 3.0, &dir.path().join("sub/ell.svg")).unwrap();
        for f in ["gain.svg", "gain.csv", "sub/ell.svg", "sub/ell.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let svg = std::fs::read_to_string(dir.path().join("gain.svg")).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
