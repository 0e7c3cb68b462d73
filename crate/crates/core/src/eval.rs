//! Trajectories, KITTI pose and calibration files, and devkit-style relative errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Matrix4;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rigid::PoseMatrix;

pub const DEFAULT_FRAME_PERIOD: f64 = 0.1;
pub const DEFAULT_LENGTHS: [f64; 8] = [100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0];
pub const SPEED_BIN_WIDTH: f64 = 2.0;

/// Loaded poses may deviate from rigidity by this much before projection onto SO(3).
pub const LOAD_RIGID_TOL: f64 = 1e-4;

/// Poses of frames `0..n` in frame-0 coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    poses: Vec<PoseMatrix>,
    pub frame_period: f64,
}

impl Trajectory {
    pub fn new(poses: Vec<PoseMatrix>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::invalid("trajectory must contain at least one pose"));
        }
        Ok(Trajectory {
            poses,
            frame_period: DEFAULT_FRAME_PERIOD,
        })
    }

    pub fn with_frame_period(mut self, period: f64) -> Result<Self> {
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::invalid(format!(
                "frame period {period} must be positive"
            )));
        }
        self.frame_period = period;
        Ok(self)
    }

    pub fn poses(&self) -> &[PoseMatrix] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// `pose[t]⁻¹ · pose[t+1]` for every consecutive pair.
    pub fn relatives(&self) -> Vec<PoseMatrix> {
        self.poses
            .windows(2)
            .map(|w| w[0].inverse().compose(&w[1]))
            .collect()
    }

    pub fn left_multiplied(&self, a: &PoseMatrix) -> Trajectory {
        Trajectory {
            poses: self.poses.iter().map(|p| a.compose(p)).collect(),
            frame_period: self.frame_period,
        }
    }

    /// Cumulative path length at each frame.
    pub fn path_lengths(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        let mut d = 0.0;
        out.push(0.0);
        for w in self.poses.windows(2) {
            d += (w[1].translation() - w[0].translation()).norm();
            out.push(d);
        }
        out
    }
}

/// Chains relative transforms: `pose[0] = I`, `pose[t+1] = pose[t] · T_t`.
pub fn accumulate(relatives: &[PoseMatrix]) -> Result<Trajectory> {
    let mut poses = Vec::with_capacity(relatives.len() + 1);
    let mut cur = PoseMatrix::identity();
    poses.push(cur);
    for (t, rel) in relatives.iter().enumerate() {
        PoseMatrix::new(*rel.matrix())
            .map_err(|e| Error::invalid(format!("relative transform {t}: {e}")))?;
        cur = cur.compose(rel);
        poses.push(cur);
    }
    Trajectory::new(poses)
}

fn near_rigid(m: Matrix4<f64>) -> std::result::Result<PoseMatrix, String> {
    let p = PoseMatrix::reorthonormalized(&m);
    let dev = (p.matrix() - m).abs().max();
    let bottom_ok = m
        .fixed_view::<1, 4>(3, 0)
        .iter()
        .zip([0.0, 0.0, 0.0, 1.0])
        .all(|(a, b)| *a == b);
    if dev.is_finite() && dev <= LOAD_RIGID_TOL && bottom_ok {
        Ok(p)
    } else {
        Err(format!("pose is not rigid (deviation {dev:.3e})"))
    }
}

/// Parses KITTI pose text: one row-major `[R|t]` per line, 12 numbers each.
pub fn parse_kitti_poses(text: &str, path: &Path) -> Result<Trajectory> {
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let vals = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.len() != 12 {
            return Err(err(format!("expected 12 numbers, found {}", vals.len())));
        }
        let mut m = Matrix4::identity();
        for r in 0..3 {
            for c in 0..4 {
                m[(r, c)] = vals[4 * r + c];
            }
        }
        poses.push(near_rigid(m).map_err(err)?);
    }
    if poses.is_empty() {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: "no poses".into(),
        });
    }
    Trajectory::new(poses)
}

pub fn load_kitti_poses(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_poses(&text, path)
}

pub fn format_kitti_poses(traj: &Trajectory) -> String {
    let mut out = String::with_capacity(traj.len() * 12 * 20);
    for p in traj.poses() {
        let row = p.to_row_major_3x4();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{v:.12e}").expect("write to string");
        }
        out.push('\n');
    }
    out
}

pub fn save_kitti_poses(traj: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_kitti_poses(traj)).map_err(|e| Error::io(path, e))
}

/// Parses `KEY: v1 v2 …` lines.
pub fn parse_calibration(text: &str, path: &Path) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| err("missing `KEY:` prefix".into()))?;
        let vals = rest
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| err(format!("`{t}`: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        out.insert(key.trim().to_string(), vals);
    }
    Ok(out)
}

/// The velodyne-to-camera extrinsic `Tr` of a KITTI calibration file.
pub fn load_velo_to_cam(path: impl AsRef<Path>) -> Result<PoseMatrix> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cal = parse_calibration(&text, path)?;
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let tr = cal
        .get("Tr")
        .ok_or_else(|| malformed("no `Tr` entry".into()))?;
    if tr.len() != 12 {
        return Err(malformed(format!(
            "`Tr` holds {} values, expected 12",
            tr.len()
        )));
    }
    let mut m = Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            m[(r, c)] = tr[4 * r + c];
        }
    }
    near_rigid(m).map_err(malformed)
}

/// `tr · pose · tr⁻¹` for every pose.
pub fn apply_calibration(traj: &Trajectory, tr: &PoseMatrix) -> Result<Trajectory> {
    let tr = PoseMatrix::new(*tr.matrix())?;
    let inv = tr.inverse();
    Ok(Trajectory {
        poses: traj
            .poses()
            .iter()
            .map(|p| tr.compose(p).compose(&inv))
            .collect(),
        frame_period: traj.frame_period,
    })
}

/// Mean errors over the subsequences in one bucket.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketStats {
    pub subsequences: usize,
    /// Translational error in percent.
    pub t_err: f64,
    /// Rotational error in degrees per 100 m.
    pub r_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    pub length: f64,
    pub stats: Option<BucketStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedBucket {
    /// Lower bound in m/s; the bin spans `[lo, lo + SPEED_BIN_WIDTH)`.
    pub lo: f64,
    pub stats: Option<BucketStats>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub frames: usize,
    pub frame_period: f64,
    pub subsequences: usize,
    /// Mean translational error over all subsequences, percent.
    pub t_rel: Option<f64>,
    /// Mean rotational error over all subsequences, degrees per 100 m.
    pub r_rel: Option<f64>,
    pub lengths: Vec<LengthBucket>,
    pub speeds: Vec<SpeedBucket>,
}

/// One evaluated subsequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub first: usize,
    pub last: usize,
    pub length: f64,
    pub speed: f64,
    pub t_err: f64,
    pub r_err: f64,
}

pub fn evaluate(gt: &Trajectory, pred: &Trajectory) -> Result<EvalReport> {
    evaluate_lengths(gt, pred, &DEFAULT_LENGTHS)
}

/// All subsequences: for every start frame and length, the first end frame whose
/// ground-truth path growth reaches the length. Errors are per meter, in radians
/// for rotation.
pub fn segments(gt: &Trajectory, pred: &Trajectory, lengths: &[f64]) -> Result<Vec<Segment>> {
    if gt.len() != pred.len() {
        return Err(Error::invalid(format!(
            "ground truth has {} frames, prediction has {}",
            gt.len(),
            pred.len()
        )));
    }
    if lengths.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::invalid("subsequence lengths must be positive"));
    }
    let dist = gt.path_lengths();
    let (g, p) = (gt.poses(), pred.poses());
    let per_start: Vec<Vec<Segment>> = (0..gt.len())
        .into_par_iter()
        .map(|first| {
            let mut out = Vec::new();
            for &len in lengths {
                let target = dist[first] + len;
                let Some(off) = dist[first..].iter().position(|&d| d >= target) else {
                    continue;
                };
                let last = first + off;
                let dg = g[first].inverse().compose(&g[last]);
                let dp = p[first].inverse().compose(&p[last]);
                let (t, r) = relative_error(&dg, &dp);
                let frames = (last - first) as f64;
                out.push(Segment {
                    first,
                    last,
                    length: len,
                    speed: (dist[last] - dist[first]) / (frames * gt.frame_period),
                    t_err: t / len,
                    r_err: r / len,
                });
            }
            out
        })
        .collect();
    Ok(per_start.into_iter().flatten().collect())
}

/// Translation norm and rotation angle of `dg⁻¹ · dp`.
///
/// Uses `|t_p − t_g|` and the chordal identity `|R_p − R_g|_F = 2√2 sin(θ/2)`,
/// which equal the norm and angle of the error pose and vanish exactly when
/// the two relative motions coincide.
pub fn relative_error(dg: &PoseMatrix, dp: &PoseMatrix) -> (f64, f64) {
    let t = (dp.translation() - dg.translation()).norm();
    let chord = (dp.rotation() - dg.rotation()).norm() / (2.0 * std::f64::consts::SQRT_2);
    (t, 2.0 * chord.clamp(0.0, 1.0).asin())
}

fn stats(segs: &[&Segment]) -> Option<BucketStats> {
    if segs.is_empty() {
        return None;
    }
    let n = segs.len() as f64;
    Some(BucketStats {
        subsequences: segs.len(),
        t_err: 100.0 * segs.iter().map(|s| s.t_err).sum::<f64>() / n,
        r_err: 100.0 * segs.iter().map(|s| s.r_err).sum::<f64>().to_degrees() / n,
    })
}

pub fn evaluate_lengths(gt: &Trajectory, pred: &Trajectory, lengths: &[f64]) -> Result<EvalReport> {
    let segs = segments(gt, pred, lengths)?;
    let all: Vec<&Segment> = segs.iter().collect();
    let overall = stats(&all);
    let length_buckets = lengths
        .iter()
        .map(|&l| LengthBucket {
            length: l,
            stats: stats(&segs.iter().filter(|s| s.length == l).collect::<Vec<_>>()),
        })
        .collect();
    let bins = segs
        .iter()
        .map(|s| (s.speed / SPEED_BIN_WIDTH).floor() as usize + 1)
        .max()
        .unwrap_or(0);
    let speeds = (0..bins)
        .map(|b| SpeedBucket {
            lo: b as f64 * SPEED_BIN_WIDTH,
            stats: stats(
                &segs
                    .iter()
                    .filter(|s| (s.speed / SPEED_BIN_WIDTH).floor() as usize == b)
                    .collect::<Vec<_>>(),
            ),
        })
        .collect();
    Ok(EvalReport {
        frames: gt.len(),
        frame_period: gt.frame_period,
        subsequences: segs.len(),
        t_rel: overall.map(|s| s.t_err),
        r_rel: overall.map(|s| s.r_err),
        lengths: length_buckets,
        speeds,
    })
}

impl EvalReport {
    /// Flat `key = value` text; absent buckets carry `"absent"` in place of numbers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let num = |v: Option<f64>| v.map_or_else(|| "\"absent\"".to_string(), |v| format!("{v:?}"));
        writeln!(s, "format_version = 1").unwrap();
        writeln!(s, "frames = {}", self.frames).unwrap();
        writeln!(s, "frame_period = {:?}", self.frame_period).unwrap();
        writeln!(s, "subsequences = {}", self.subsequences).unwrap();
        writeln!(s, "t_rel = {}", num(self.t_rel)).unwrap();
        writeln!(s, "r_rel = {}", num(self.r_rel)).unwrap();
        let mut bucket = |prefix: String, st: &Option<BucketStats>| {
            writeln!(
                s,
                "{prefix}.subsequences = {}",
                st.map_or(0, |b| b.subsequences)
            )
            .unwrap();
            writeln!(s, "{prefix}.t_err = {}", num(st.map(|b| b.t_err))).unwrap();
            writeln!(s, "{prefix}.r_err = {}", num(st.map(|b| b.r_err))).unwrap();
        };
        for b in &self.lengths {
            bucket(format!("length.{}", b.length), &b.stats);
        }
        for (i, b) in self.speeds.iter().enumerate() {
            bucket(format!("speed.{i}"), &b.stats);
        }
        for (i, b) in self.speeds.iter().enumerate() {
            writeln!(s, "speed.{i}.lo = {:?}", b.lo).unwrap();
            writeln!(s, "speed.{i}.hi = {:?}", b.lo + SPEED_BIN_WIDTH).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use nalgebra::Vector3;
    use proptest::prelude::*;
    use rand::Rng;

    fn straight(n: usize, step: f64) -> Trajectory {
        Trajectory::new(
            (0..n)
                .map(|i| PoseMatrix::translation_only(&Vector3::new(step * i as f64, 0.0, 0.0)))
                .collect(),
        )
        .unwrap()
    }

    /// Poses projected back onto SO(3), as delivered by the pose loader.
    fn rigidified(t: Trajectory) -> Trajectory {
        Trajectory::new(
            t.poses()
                .iter()
                .map(|p| PoseMatrix::reorthonormalized(p.matrix()))
                .collect(),
        )
        .unwrap()
    }

    fn random_walk(n: usize, seed: u64) -> Trajectory {
        let mut r = rng::seeded(seed);
        let rel: Vec<_> = (0..n - 1)
            .map(|_| {
                PoseMatrix::from_axis_angle(
                    &Vector3::new(
                        r.random_range(-0.01..0.01),
                        r.random_range(-0.01..0.01),
                        r.random_range(-0.05..0.05),
                    ),
                    &Vector3::new(
                        r.random_range(0.5..2.0),
                        r.random_range(-0.1..0.1),
                        r.random_range(-0.05..0.05),
                    ),
                )
            })
            .collect();
        accumulate(&rel).unwrap()
    }

    fn perturbed(t: &Trajectory, seed: u64) -> Trajectory {
        let mut r = rng::seeded(seed);
        let rel: Vec<_> = t
            .relatives()
            .iter()
            .map(|p| {
                let n = PoseMatrix::from_axis_angle(
                    &Vector3::new(
                        r.random_range(-1e-3..1e-3),
                        r.random_range(-1e-3..1e-3),
                        r.random_range(-3e-3..3e-3),
                    ),
                    &Vector3::new(
                        r.random_range(-0.02..0.02),
                        r.random_range(-0.02..0.02),
                        0.0,
                    ),
                );
                p.compose(&n)
            })
            .collect();
        accumulate(&rel).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let t = accumulate(&[PoseMatrix::identity(); 3]).unwrap();
        assert!(t.poses().iter().all(|p| *p == PoseMatrix::identity()));
        let step = PoseMatrix::translation_only(&Vector3::new(1.0, 0.0, 0.0));
        let t = accumulate(&[step; 3]).unwrap();
        let xs: Vec<f64> = t.poses().iter().map(|p| p.translation().x).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0]);
        let skew = PoseMatrix::from_parts_unchecked(
            &nalgebra::Matrix3::identity().scale(2.0),
            &Vector3::zeros(),
        );
        assert!(
            matches!(accumulate(&[step, skew]), Err(Error::InvalidArgument(m)) if m.contains("transform 1"))
        );
    }

    #[test]
    fn accumulate_matches_matrix_product() {
        let mut r = rng::seeded(1);
        let rel: Vec<_> = (0..40)
            .map(|_| {
                PoseMatrix::from_axis_angle(
                    &Vector3::new(
                        r.random_range(-0.5..0.5),
                        r.random_range(-0.5..0.5),
                        r.random_range(-0.5..0.5),
                    ),
                    &Vector3::new(
                        r.random_range(-2.0..2.0),
                        r.random_range(-2.0..2.0),
                        r.random_range(-2.0..2.0),
                    ),
                )
            })
            .collect();
        let t = accumulate(&rel).unwrap();
        let mut m = Matrix4::identity();
        for (i, p) in rel.iter().enumerate() {
            m *= p.matrix();
            assert!((t.poses()[i + 1].matrix() - m).abs().max() <= 1e-9);
        }
    }

    #[test]
    fn kitti_pose_examples() {
        let p = Path::new("x.txt");
        let t = parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n", p).unwrap();
        assert_eq!(t.poses(), &[PoseMatrix::identity()]);
        let e =
            parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n", p).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        assert!(matches!(
            parse_kitti_poses("1 0 0 0 0 x 0 0 0 0 1 0", p),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_kitti_poses("2 0 0 0 0 1 0 0 0 0 1 0", p),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(parse_kitti_poses("\n", p).is_err());
    }

    #[test]
    fn kitti_pose_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = random_walk(60, 2);
        let path = dir.path().join("p.txt");
        save_kitti_poses(&t, &path).unwrap();
        let back = load_kitti_poses(&path).unwrap();
        assert_eq!(back.len(), t.len());
        for (a, b) in t.poses().iter().zip(back.poses()) {
            assert!((a.matrix() - b.matrix()).abs().max() <= 1e-9);
        }
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 60);
    }

    #[test]
    fn calibration_examples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.txt");
        std::fs::write(
            &path,
            "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nTr: 0 -1 0 0.5 0 0 -1 -0.1 1 0 0 -0.3\n",
        )
        .unwrap();
        let tr = load_velo_to_cam(&path).unwrap();
        assert_eq!(tr.translation(), Vector3::new(0.5, -0.1, -0.3));
        let t = random_walk(20, 3);
        let same = apply_calibration(&t, &PoseMatrix::identity()).unwrap();
        assert_eq!(same, t);
        let conj = apply_calibration(&t, &tr).unwrap();
        assert!(conj
            .poses()
            .iter()
            .all(|p| p.orthonormality_residual() < 1e-9));

        let rot = PoseMatrix::from_axis_angle(
            &Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2),
            &Vector3::zeros(),
        );
        let line = straight(5, 1.0);
        let out = apply_calibration(&line, &rot).unwrap();
        for (i, p) in out.poses().iter().enumerate() {
            let oracle =
                rot.matrix() * line.poses()[i].matrix() * rot.matrix().try_inverse().unwrap();
            assert!((p.matrix() - oracle).abs().max() < 1e-12);
            assert!((p.translation() - Vector3::new(0.0, i as f64, 0.0)).norm() < 1e-12);
        }
        std::fs::write(&path, "P0: 1 0 0\n").unwrap();
        assert!(matches!(
            load_velo_to_cam(&path),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn relative_error_matches_error_pose() {
        let mut r = rng::seeded(8);
        for _ in 0..200 {
            let mut draw = || {
                PoseMatrix::from_axis_angle(
                    &Vector3::new(
                        r.random_range(-1.5..1.5),
                        r.random_range(-1.5..1.5),
                        r.random_range(-1.5..1.5),
                    ),
                    &Vector3::new(
                        r.random_range(-9.0..9.0),
                        r.random_range(-9.0..9.0),
                        r.random_range(-9.0..9.0),
                    ),
                )
            };
            let (a, b) = (draw(), draw());
            let e = a.inverse().compose(&b);
            let (t, ang) = relative_error(&a, &b);
            assert!((t - e.translation().norm()).abs() < 1e-9);
            assert!((ang - e.rotation_angle()).abs() < 1e-9);
        }
    }

    #[test]
    fn self_evaluation_is_exactly_zero() {
        let t = random_walk(500, 4);
        let r = evaluate(&t, &t).unwrap();
        assert!(r.subsequences > 0);
        assert_eq!((r.t_rel, r.r_rel), (Some(0.0), Some(0.0)));
        for b in r
            .lengths
            .iter()
            .filter_map(|b| b.stats)
            .chain(r.speeds.iter().filter_map(|b| b.stats))
        {
            assert_eq!((b.t_err, b.r_err), (0.0, 0.0));
        }
    }

    #[test]
    fn straight_line_drift_is_one_percent() {
        let gt = straight(1000, 1.0);
        let pred = straight(1000, 1.01);
        let r = evaluate(&gt, &pred).unwrap();
        for b in &r.lengths {
            let s = b.stats.expect("every bucket fits");
            assert!((s.t_err - 1.0).abs() <= 1e-6, "{} m: {}", b.length, s.t_err);
            assert_eq!(s.r_err, 0.0);
        }
        assert!((r.t_rel.unwrap() - 1.0).abs() <= 1e-6);
        assert_eq!(r.speeds.len(), 6);
        assert!(r.speeds[..5].iter().all(|b| b.stats.is_none()));
        assert_eq!(r.speeds[5].stats.unwrap().subsequences, r.subsequences);
    }

    #[test]
    fn short_paths_mark_buckets_absent() {
        let gt = straight(150, 1.0);
        let r = evaluate(&gt, &gt).unwrap();
        assert!(r.lengths[0].stats.is_some());
        assert!(r.lengths[1..].iter().all(|b| b.stats.is_none()));
        let r = evaluate(&straight(10, 1.0), &straight(10, 1.0)).unwrap();
        assert_eq!((r.subsequences, r.t_rel), (0, None));
        assert!(r.to_text().contains("t_rel = \"absent\""));
        assert!(toml::from_str::<toml::Table>(&r.to_text()).is_ok());
        assert!(matches!(
            evaluate(&straight(10, 1.0), &straight(11, 1.0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    /// Independent metric: raw matrices, linear scans, no shared helpers.
    fn brute_force(
        gt: &[Matrix4<f64>],
        pred: &[Matrix4<f64>],
        len: f64,
    ) -> Option<(f64, f64, usize)> {
        let mut acc = (0.0, 0.0, 0usize);
        for first in 0..gt.len() {
            let mut d = 0.0;
            let mut last = None;
            for j in first + 1..gt.len() {
                let a = gt[j - 1].fixed_view::<3, 1>(0, 3).into_owned();
                let b = gt[j].fixed_view::<3, 1>(0, 3).into_owned();
                d += (b - a).norm();
                if d >= len {
                    last = Some(j);
                    break;
                }
            }
            let Some(last) = last else { continue };
            let dg = gt[first].try_inverse().unwrap() * gt[last];
            let dp = pred[first].try_inverse().unwrap() * pred[last];
            let e = dg.try_inverse().unwrap() * dp;
            let t = (e[(0, 3)].powi(2) + e[(1, 3)].powi(2) + e[(2, 3)].powi(2)).sqrt();
            let c = ((e[(0, 0)] + e[(1, 1)] + e[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
            acc.0 += t / len;
            acc.1 += c.acos() / len;
            acc.2 += 1;
        }
        (acc.2 > 0).then(|| {
            (
                100.0 * acc.0 / acc.2 as f64,
                100.0 * acc.1.to_degrees() / acc.2 as f64,
                acc.2,
            )
        })
    }

    #[test]
    fn matches_brute_force_metric() {
        let gt = rigidified(random_walk(900, 5));
        let pred = rigidified(perturbed(&gt, 6));
        let r = evaluate(&gt, &pred).unwrap();
        let g: Vec<_> = gt.poses().iter().map(|p| *p.matrix()).collect();
        let p: Vec<_> = pred.poses().iter().map(|p| *p.matrix()).collect();
        for b in &r.lengths {
            let oracle = brute_force(&g, &p, b.length);
            match (b.stats, oracle) {
                (Some(s), Some((t, rr, n))) => {
                    assert_eq!(s.subsequences, n);
                    assert!(
                        (s.t_err - t).abs() <= 1e-9 && (s.r_err - rr).abs() <= 1e-9,
                        "{} m: {:?} vs {:?}",
                        b.length,
                        (s.t_err, s.r_err),
                        (t, rr)
                    );
                }
                (None, None) => {}
                other => panic!("bucket {} disagrees: {other:?}", b.length),
            }
        }
    }

    #[test]
    fn relatives_reaccumulate() {
        let t = random_walk(100, 7).left_multiplied(&PoseMatrix::identity());
        let back = accumulate(&t.relatives()).unwrap();
        for (a, b) in t.poses().iter().zip(back.poses()) {
            assert!((a.matrix() - b.matrix()).abs().max() <= 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn common_left_transform_leaves_report_unchanged(
            seed in 0u64..500,
            w in prop::array::uniform3(-3.0f64..3.0),
            t in prop::array::uniform3(-100.0f64..100.0),
        ) {
            let gt = random_walk(300, seed);
            let pred = perturbed(&gt, seed + 1);
            let a = PoseMatrix::from_axis_angle(&Vector3::from(w), &Vector3::from(t));
            let base = evaluate_lengths(&gt, &pred, &[50.0, 100.0, 200.0]).unwrap();
            let moved = evaluate_lengths(&gt.left_multiplied(&a), &pred.left_multiplied(&a), &[50.0, 100.0, 200.0]).unwrap();
            prop_assert_eq!(base.subsequences, moved.subsequences);
            for (x, y) in base.lengths.iter().zip(&moved.lengths) {
                match (x.stats, y.stats) {
                    (Some(x), Some(y)) => {
                        prop_assert!((x.t_err - y.t_err).abs() <= 1e-9);
                        prop_assert!((x.r_err - y.r_err).abs() <= 1e-9);
                    }
                    (None, None) => {}
                    _ => prop_assert!(false, "bucket presence changed"),
                }
            }
        }

        #[test]
        fn self_evaluation_zero(seed in 0u64..1000) {
            let t = random_walk(200, seed);
            let r = evaluate_lengths(&t, &t, &[20.0, 100.0]).unwrap();
            prop_assert_eq!(r.t_rel, Some(0.0));
            prop_assert_eq!(r.r_rel, Some(0.0));
        }
    }
}
