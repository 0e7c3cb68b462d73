//! CSV and SVG artifacts for trajectories and error breakdowns.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{BucketStats, EvalReport, Trajectory, SPEED_BIN_WIDTH};

#[derive(Debug, Clone, PartialEq)]
pub struct PlotFiles {
    pub pred_csv: PathBuf,
    pub gt_csv: Option<PathBuf>,
    pub svg: PathBuf,
    pub length_csv: PathBuf,
    pub speed_csv: PathBuf,
}

pub fn trajectory_csv(traj: &Trajectory) -> String {
    let mut s = String::from("frame,x,y,z\n");
    for (i, p) in traj.poses().iter().enumerate() {
        let t = p.translation();
        writeln!(s, "{i},{:?},{:?},{:?}", t.x, t.y, t.z).unwrap();
    }
    s
}

fn stats_cells(st: &Option<BucketStats>) -> String {
    match st {
        Some(b) => format!("{},{:?},{:?}", b.subsequences, b.t_err, b.r_err),
        None => "0,,".to_string(),
    }
}

/// Per-length rows; absent buckets leave the error cells empty.
pub fn length_csv(report: &EvalReport) -> String {
    let mut s = String::from("length_m,subsequences,t_err_pct,r_err_deg_per_100m\n");
    for b in &report.lengths {
        writeln!(s, "{:?},{}", b.length, stats_cells(&b.stats)).unwrap();
    }
    s
}

pub fn speed_csv(report: &EvalReport) -> String {
    let mut s =
        String::from("speed_lo_mps,speed_hi_mps,subsequences,t_err_pct,r_err_deg_per_100m\n");
    for b in &report.speeds {
        writeln!(
            s,
            "{:?},{:?},{}",
            b.lo,
            b.lo + SPEED_BIN_WIDTH,
            stats_cells(&b.stats)
        )
        .unwrap();
    }
    s
}

/// Top-down polylines over the two axes with the largest extent across all trajectories.
pub fn trajectory_svg(trajs: &[(&str, &str, &Trajectory)]) -> String {
    const SIZE: f64 = 800.0;
    const MARGIN: f64 = 40.0;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for (_, _, t) in trajs {
        for p in t.poses() {
            let v = p.translation();
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
    }
    let mut axes = [0usize, 1, 2];
    axes.sort_by(|&a, &b| (hi[b] - lo[b]).total_cmp(&(hi[a] - lo[a])).then(a.cmp(&b)));
    let (ax, ay) = (axes[0].min(axes[1]), axes[0].max(axes[1]));
    let span = (hi[ax] - lo[ax]).max(hi[ay] - lo[ay]).max(1e-9);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let names = ["x", "y", "z"];

    let mut s = String::new();
    writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">
<rect width="100%" height="100%" fill="white"/>"#
    )
    .unwrap();
    for (i, (label, color, t)) in trajs.iter().enumerate() {
        let pts: Vec<String> = t
            .poses()
            .iter()
            .map(|p| {
                let v = p.translation();
                let x = MARGIN + (v[ax] - lo[ax]) * scale;
                let y = SIZE - MARGIN - (v[ay] - lo[ay]) * scale;
                format!("{x:.3},{y:.3}")
            })
            .collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{MARGIN}" y="{}" font-size="14" fill="{color}">{}</text>"#,
            20 + 16 * i,
            xml_escape(label)
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="12">{} (m) horizontal, {} (m) vertical, span {span:.2} m</text>
</svg>"#,
        MARGIN,
        SIZE - 10.0,
        names[ax],
        names[ay]
    )
    .unwrap();
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn write(path: PathBuf, text: &str) -> Result<PathBuf> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn emit_plots(
    gt: Option<&Trajectory>,
    pred: &Trajectory,
    report: &EvalReport,
    out_dir: &Path,
) -> Result<PlotFiles> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pred_csv = write(out_dir.join("trajectory_pred.csv"), &trajectory_csv(pred))?;
    let gt_csv = gt
        .map(|g| write(out_dir.join("trajectory_gt.csv"), &trajectory_csv(g)))
        .transpose()?;
    let mut layers = Vec::new();
    if let Some(g) = gt {
        layers.push(("ground truth", "black", g));
    }
    layers.push(("estimate", "crimson", pred));
    let svg = write(out_dir.join("trajectory.svg"), &trajectory_svg(&layers))?;
    let length_csv = write(out_dir.join("error_vs_length.csv"), &length_csv(report))?;
    let speed_csv = write(out_dir.join("error_vs_speed.csv"), &speed_csv(report))?;
    Ok(PlotFiles {
        pred_csv,
        gt_csv,
        svg,
        length_csv,
        speed_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::evaluate;
    use crate::rigid::PoseMatrix;
    use nalgebra::Vector3;

    fn arc(n: usize) -> Trajectory {
        let step = PoseMatrix::from_axis_angle(
            &Vector3::new(0.0, 0.0, 0.01),
            &Vector3::new(1.5, 0.0, 0.0),
        );
        crate::eval::accumulate(&vec![step; n - 1]).unwrap()
    }

    #[test]
    fn files_are_consistent() {
        let dir = tempfile::tempdir().unwrap();
        let t = arc(300);
        let report = evaluate(&t, &t).unwrap();
        let files = emit_plots(Some(&t), &t, &report, dir.path()).unwrap();
        let rows = std::fs::read_to_string(&files.pred_csv)
            .unwrap()
            .lines()
            .count()
            - 1;
        assert_eq!(rows, t.len());
        let svg = std::fs::read_to_string(&files.svg).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(
            doc.descendants()
                .filter(|n| n.has_tag_name("polyline"))
                .count(),
            2
        );
        for path in [&files.length_csv, &files.speed_csv] {
            for line in std::fs::read_to_string(path).unwrap().lines().skip(1) {
                let cells: Vec<&str> = line.split(',').collect();
                let errs = &cells[cells.len() - 2..];
                assert!(
                    errs.iter()
                        .all(|c| c.is_empty() || c.parse::<f64>().unwrap() == 0.0),
                    "{line}"
                );
            }
        }
    }

    #[test]
    fn absent_buckets_stay_empty() {
        let t = arc(100);
        let r = evaluate(&t, &t).unwrap();
        let csv = length_csv(&r);
        assert!(csv.lines().any(|l| l == "800.0,0,,"));
    }

    #[test]
    fn unwritable_directory_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let t = arc(10);
        let r = evaluate(&t, &t).unwrap();
        assert!(matches!(
            emit_plots(None, &t, &r, &blocker.join("sub")),
            Err(Error::Io { .. })
        ));
    }
}
