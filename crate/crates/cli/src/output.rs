//! Result emission: CSV files (RFC-4180-style, LF line endings,
//! 17-significant-digit floats), minimal SVG plots, and atomic writes.

use std::fs;
use std::io;
use std::path::Path;

use als_irls::experiments::{McSummary, SweepPoint, TrialRecord};
use als_irls::ssm::TrajectoryBatch;

/// 17 significant digits: enough to reproduce any f64 exactly on re-parse.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Write through a temporary file and rename, so a failed run never leaves a
/// partially written output behind.
pub fn write_atomic(path: &Path, contents: &str) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)
}

fn scalar(m: &nalgebra::DMatrix<f64>) -> f64 {
    m.trace() / m.nrows() as f64
}

/// `summary.csv`: one row per method.
pub fn summary_csv(summary: &McSummary) -> String {
    let mut out = String::from("method,rmse_q,rmse_r,mean_q,mean_r,rmse_state\n");
    for m in &summary.methods {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            m.method.label(),
            fmt_f64(m.rmse_q),
            fmt_f64(m.rmse_r),
            fmt_f64(m.mean_q),
            fmt_f64(m.mean_r),
            fmt_f64(m.rmse_state),
        ));
    }
    out
}

/// `trials.csv`: one row per trial per method. Matrix covariances are
/// reported as their mean diagonal (`trace / n`).
pub fn trials_csv(records: &[TrialRecord], eval_length: usize) -> String {
    let mut out = String::from("trial,method,q,r,state_rmse\n");
    for record in records {
        for row in &record.rows {
            let state_rmse = (row.state_sse / eval_length as f64).sqrt();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                record.trial_index,
                row.method.label(),
                fmt_f64(scalar(&row.q)),
                fmt_f64(scalar(&row.r)),
                fmt_f64(state_rmse),
            ));
        }
    }
    out
}

/// `sweep.csv`: leading column is the swept value, then per-method blocks.
pub fn sweep_csv<T: std::fmt::Display>(
    value_name: &str,
    points: &[SweepPoint<T>],
) -> String {
    let mut header = String::from(value_name);
    if let Some(first) = points.first() {
        for m in &first.summary.methods {
            let label = m.method.label();
            header.push_str(&format!(
                ",{label}_rmse_q,{label}_rmse_r,{label}_mean_q,{label}_mean_r,{label}_rmse_state"
            ));
        }
    }
    header.push('\n');
    let mut out = header;
    for point in points {
        out.push_str(&point.value.to_string());
        for m in &point.summary.methods {
            out.push_str(&format!(
                ",{},{},{},{},{}",
                fmt_f64(m.rmse_q),
                fmt_f64(m.rmse_r),
                fmt_f64(m.mean_q),
                fmt_f64(m.mean_r),
                fmt_f64(m.rmse_state),
            ));
        }
        out.push('\n');
    }
    out
}

/// `trajectory.csv`: states, measurements and the outlier flag per step.
pub fn trajectory_csv(traj: &TrajectoryBatch) -> String {
    let n_x = traj.states[0].len();
    let n_z = traj.measurements[0].len();
    let mut header = String::from("t");
    for i in 0..n_x {
        header.push_str(&format!(",x{}", i + 1));
    }
    for i in 0..n_z {
        header.push_str(&format!(",z{}", i + 1));
    }
    header.push_str(",outlier\n");
    let mut out = header;
    for k in 0..traj.len() {
        out.push_str(&(k + 1).to_string());
        for v in traj.states[k].iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        for v in traj.measurements[k].iter() {
            out.push(',');
            out.push_str(&fmt_f64(*v));
        }
        out.push_str(if traj.outlier_flags[k] { ",1\n" } else { ",0\n" });
    }
    out
}

/// How a series is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesStyle {
    Line,
    Points,
}

/// One plotted series.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: SeriesStyle,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn axis_ticks(min: f64, max: f64) -> Vec<f64> {
    if !(max > min) {
        return vec![min];
    }
    let span = max - min;
    let step = 10f64.powf((span / 4.0).log10().floor());
    let step = if span / step > 8.0 {
        step * 2.0
    } else if span / step < 3.0 {
        step / 2.0
    } else {
        step
    };
    let mut ticks = Vec::new();
    let mut t = (min / step).ceil() * step;
    while t <= max + 1e-12 * span {
        ticks.push(t);
        t += step;
    }
    ticks
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 10_000.0 {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

/// Render series into a self-contained SVG plot with linear axes.
pub fn svg_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 440.0;
    const ML: f64 = 70.0; // margins
    const MR: f64 = 20.0;
    const MT: f64 = 40.0;
    const MB: f64 = 55.0;

    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x_min, mut x_max) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.0), hi.max(p.0))
        });
    let (mut y_min, mut y_max) = all
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.1), hi.max(p.1))
        });
    if !x_min.is_finite() {
        x_min = 0.0;
        x_max = 1.0;
    }
    if !y_min.is_finite() {
        y_min = 0.0;
        y_max = 1.0;
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    // a little headroom
    let pad_y = 0.05 * (y_max - y_min);
    y_min -= pad_y;
    y_max += pad_y;

    let sx = |x: f64| ML + (x - x_min) / (x_max - x_min) * (W - ML - MR);
    let sy = |y: f64| H - MB - (y - y_min) / (y_max - y_min) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB
    ));
    for t in axis_ticks(x_min, x_max) {
        let x = sx(t);
        svg.push_str(&format!(
            "<line x1=\"{x:.1}\" y1=\"{0}\" x2=\"{x:.1}\" y2=\"{1}\" stroke=\"black\"/>\n\
             <text x=\"{x:.1}\" y=\"{2}\" text-anchor=\"middle\">{3}</text>\n",
            H - MB,
            H - MB + 5.0,
            H - MB + 20.0,
            fmt_tick(t)
        ));
    }
    for t in axis_ticks(y_min, y_max) {
        let y = sy(t);
        svg.push_str(&format!(
            "<line x1=\"{0}\" y1=\"{y:.1}\" x2=\"{ML}\" y2=\"{y:.1}\" stroke=\"black\"/>\n\
             <text x=\"{1}\" y=\"{2:.1}\" text-anchor=\"end\">{3}</text>\n",
            ML - 5.0,
            ML - 8.0,
            y + 4.0,
            fmt_tick(t)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {0})\">{y_label}</text>\n",
        (MT + H - MB) / 2.0
    ));
    // series
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        match s.style {
            SeriesStyle::Line => {
                let path: Vec<String> = s
                    .points
                    .iter()
                    .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
                    .collect();
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>\n",
                    path.join(" ")
                ));
                for &(x, y) in &s.points {
                    svg.push_str(&format!(
                        "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n",
                        sx(x),
                        sy(y)
                    ));
                }
            }
            SeriesStyle::Points => {
                for &(x, y) in &s.points {
                    svg.push_str(&format!(
                        "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.6\"/>\n",
                        sx(x),
                        sy(y)
                    ));
                }
            }
        }
        // legend
        let ly = MT + 16.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{0}\" y=\"{1:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n\
             <text x=\"{2}\" y=\"{3:.1}\">{4}</text>\n",
            W - MR - 150.0,
            ly,
            W - MR - 135.0,
            ly + 9.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_have_17_significant_digits_and_round_trip() {
        let values = [5.02, 0.1 + 0.2, 1.0 / 3.0, -1.234e-17, 0.0, 4.25];
        for v in values {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s} -> {back}");
            // mantissa carries exactly 17 significant digits
            let mantissa: String = s
                .chars()
                .take_while(|c| *c != 'e')
                .filter(|c| c.is_ascii_digit())
                .collect();
            assert_eq!(mantissa.len(), 17, "{s}");
        }
    }

    #[test]
    fn atomic_write_leaves_no_tmp_behind() {
        let dir = std::env::temp_dir().join(format!("alsirls-out-test-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("x.csv");
        write_atomic(&path, "a,b\n1,2\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n1,2\n");
        assert!(!dir.join("x.csv.tmp").exists());
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let svg = svg_plot(
            "test",
            "x",
            "y",
            &[Series {
                label: "s".into(),
                points: vec![(0.0, 1.0), (1.0, 2.0), (2.0, 0.5)],
                style: SeriesStyle::Line,
            }],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("polyline"));
    }
}
