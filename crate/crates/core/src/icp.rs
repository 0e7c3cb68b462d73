//! Iterative closest point registration: point-to-point and point-to-plane.

use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud_io::PointCloud;
use crate::error::{Error, Result};
use crate::rigid::{orthonormalize, PoseMatrix};

/// Condition number of the point-to-plane normal equations above which the
/// problem counts as rank deficient.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the incremental update has norm `sqrt(angle² + |t|²)` below this.
    pub convergence_tol: f64,
    pub max_correspondence_dist: f64,
    pub normal_k: usize,
    /// Coarse-to-fine gating: level `k` runs to convergence with the gate at
    /// `max_correspondence_dist / 2^k`, seeded by level `k - 1`. One level is
    /// plain ICP.
    pub gating_levels: usize,
}

impl Default for IcpParams {
    fn default() -> Self {
        IcpParams {
            max_iterations: 50,
            convergence_tol: 1e-6,
            max_correspondence_dist: 2.0,
            normal_k: 10,
            gating_levels: 1,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        if !(self.convergence_tol > 0.0 && self.max_correspondence_dist > 0.0) {
            return Err(Error::invalid("ICP tolerances must be positive"));
        }
        if self.gating_levels == 0 {
            return Err(Error::invalid("gating_levels must be at least 1"));
        }
        if self.normal_k < 3 {
            return Err(Error::invalid("normal_k must be at least 3"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcpMethod {
    PointToPoint,
    PointToPlane,
}

/// Residuals of one iteration, measured on that iteration's correspondences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub correspondences: usize,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcpResult {
    /// Maps source coordinates onto the target.
    pub transform: PoseMatrix,
    /// RMS residual after the last update: point distances for point-to-point,
    /// distances along target normals for point-to-plane.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub history: Vec<IterationRecord>,
}

/// Nearest-neighbor index over a fixed point set.
pub struct PointIndex {
    tree: ImmutableKdTree<f64, 3>,
    points: Vec<Vector3<f64>>,
}

impl PointIndex {
    pub fn new(points: &[Vector3<f64>]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::DegenerateGeometry(
                "cannot index an empty point set".into(),
            ));
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("point set has non-finite coordinates"));
        }
        let entries: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&entries)
            .map_err(|e| Error::invalid(format!("k-d tree construction failed: {e:?}")))?;
        Ok(PointIndex {
            tree,
            points: points.to_vec(),
        })
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Index and squared distance of the nearest point.
    pub fn nearest(&self, p: &Vector3<f64>) -> (usize, f64) {
        let r = self
            .tree
            .query(&[p.x, p.y, p.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute();
        (r.item as usize, r.distance)
    }

    /// Indices of the `k` nearest points, closest first.
    pub fn nearest_k(&self, p: &Vector3<f64>, k: usize) -> Vec<usize> {
        let k = NonZeroUsize::new(k.min(self.points.len())).expect("index is non-empty");
        self.tree
            .query(&[p.x, p.y, p.z])
            .nearest_n::<SquaredEuclidean<f64>>(k)
            .execute()
            .into_iter()
            .map(|r| r.item as usize)
            .collect()
    }
}

/// Unit normals from the smallest-eigenvalue eigenvector of each point's
/// `k`-neighborhood covariance. Signs are arbitrary.
pub fn estimate_normals(index: &PointIndex, k: usize) -> Vec<Vector3<f64>> {
    index
        .points()
        .par_iter()
        .map(|p| {
            let nbrs = index.nearest_k(p, k);
            let pts: Vec<Vector3<f64>> = nbrs.iter().map(|&i| index.points()[i]).collect();
            let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            let cov = pts.iter().fold(Matrix3::zeros(), |acc, q| {
                let d = q - mean;
                acc + d * d.transpose()
            });
            let eig = SymmetricEigen::new(cov);
            let i = eig.eigenvalues.imin();
            eig.eigenvectors.column(i).normalize()
        })
        .collect()
}

/// Least-squares rigid transform `T` minimizing `Σ |T src_i − dst_i|²`.
pub fn kabsch(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Result<PoseMatrix> {
    if src.len() != dst.len() {
        return Err(Error::invalid(format!(
            "rigid fit needs paired points, got {} and {}",
            src.len(),
            dst.len()
        )));
    }
    if src.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "rigid fit needs at least 3 correspondences, got {}",
            src.len()
        )));
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let cd = dst.iter().sum::<Vector3<f64>>() / n;
    let h = src.iter().zip(dst).fold(Matrix3::zeros(), |acc, (s, d)| {
        acc + (s - cs) * (d - cd).transpose()
    });
    let svd = h.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if !(sv[1] > 1e-12 * sv[0].max(f64::MIN_POSITIVE)) {
        return Err(Error::DegenerateGeometry(
            "correspondences are collinear".into(),
        ));
    }
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = cd - r * cs;
    Ok(PoseMatrix::from_parts_unchecked(&orthonormalize(&r), &t))
}

fn check_cloud(cloud: &PointCloud, role: &str) -> Result<()> {
    if cloud.len() < 3 {
        return Err(Error::DegenerateGeometry(format!(
            "{role} cloud has {} points; registration needs at least 3",
            cloud.len()
        )));
    }
    Ok(())
}

fn step_norm(delta: &PoseMatrix) -> f64 {
    (delta.rotation_angle().powi(2) + delta.translation().norm_squared()).sqrt()
}

/// Correspondences `(source index, target index)` within the distance gate.
fn correspond(moved: &[Vector3<f64>], index: &PointIndex, max_dist: f64) -> Vec<(usize, usize)> {
    let gate = max_dist * max_dist;
    moved
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let (j, d2) = index.nearest(p);
            (d2 <= gate).then_some((i, j))
        })
        .collect()
}

fn too_few(n: usize, iteration: usize) -> Error {
    Error::DegenerateGeometry(format!(
        "only {n} correspondences within the distance gate at iteration {iteration}"
    ))
}

fn rms(sum_sq: f64, n: usize) -> f64 {
    (sum_sq / n as f64).sqrt()
}

pub fn icp_point_to_point(
    source: &PointCloud,
    target: &PointCloud,
    init: &PoseMatrix,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    check_cloud(source, "source")?;
    check_cloud(target, "target")?;
    let index = PointIndex::new(target.positions())?;
    let tgt = target.positions();
    let mut transform = *init;
    let mut history = Vec::new();
    let mut converged = false;
    for it in 1..=params.max_iterations {
        let moved: Vec<Vector3<f64>> = source
            .positions()
            .iter()
            .map(|p| transform.transform_point(p))
            .collect();
        let pairs = correspond(&moved, &index, params.max_correspondence_dist);
        if pairs.len() < 3 {
            return Err(too_few(pairs.len(), it));
        }
        let s: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| moved[i]).collect();
        let d: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| tgt[j]).collect();
        let before = rms(
            s.iter().zip(&d).map(|(a, b)| (a - b).norm_squared()).sum(),
            s.len(),
        );
        let delta = kabsch(&s, &d)?;
        let after = rms(
            s.iter()
                .zip(&d)
                .map(|(a, b)| (delta.transform_point(a) - b).norm_squared())
                .sum(),
            s.len(),
        );
        transform = delta.compose(&transform);
        history.push(IterationRecord {
            correspondences: s.len(),
            before,
            after,
        });
        if step_norm(&delta) < params.convergence_tol {
            converged = true;
            break;
        }
    }
    finish(transform, history, converged)
}

pub fn icp_point_to_plane(
    source: &PointCloud,
    target: &PointCloud,
    init: &PoseMatrix,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    check_cloud(source, "source")?;
    check_cloud(target, "target")?;
    let index = PointIndex::new(target.positions())?;
    let normals = estimate_normals(&index, params.normal_k);
    let tgt = target.positions();
    let mut transform = *init;
    let mut history = Vec::new();
    let mut converged = false;
    for it in 1..=params.max_iterations {
        let moved: Vec<Vector3<f64>> = source
            .positions()
            .iter()
            .map(|p| transform.transform_point(p))
            .collect();
        let pairs = correspond(&moved, &index, params.max_correspondence_dist);
        if pairs.len() < 3 {
            return Err(too_few(pairs.len(), it));
        }
        let mut ata = Matrix6::zeros();
        let mut atb = Vector6::zeros();
        let mut before = 0.0;
        for &(i, j) in &pairs {
            let (s, n) = (moved[i], normals[j]);
            let r = n.dot(&(tgt[j] - s));
            let a = Vector6::from_iterator(s.cross(&n).iter().chain(n.iter()).copied());
            ata += a * a.transpose();
            atb += a * r;
            before += r * r;
        }
        let eig = SymmetricEigen::new(ata);
        let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
        if !(lo > 0.0 && hi / lo <= MAX_CONDITION) {
            return Err(Error::DegenerateGeometry(format!(
                "point-to-plane system is rank deficient (eigenvalues {lo:.3e} to {hi:.3e})"
            )));
        }
        let x = ata
            .cholesky()
            .ok_or_else(|| {
                Error::DegenerateGeometry("point-to-plane system is not positive definite".into())
            })?
            .solve(&atb);
        // Small-angle solution mapped through the exponential, which is exactly orthonormal.
        let delta = PoseMatrix::from_axis_angle(
            &Vector3::new(x[0], x[1], x[2]),
            &Vector3::new(x[3], x[4], x[5]),
        );
        let after: f64 = pairs
            .iter()
            .map(|&(i, j)| {
                normals[j]
                    .dot(&(tgt[j] - delta.transform_point(&moved[i])))
                    .powi(2)
            })
            .sum();
        transform = PoseMatrix::reorthonormalized(delta.compose(&transform).matrix());
        history.push(IterationRecord {
            correspondences: pairs.len(),
            before: rms(before, pairs.len()),
            after: rms(after, pairs.len()),
        });
        if step_norm(&delta) < params.convergence_tol {
            converged = true;
            break;
        }
    }
    finish(transform, history, converged)
}

fn finish(
    transform: PoseMatrix,
    history: Vec<IterationRecord>,
    converged: bool,
) -> Result<IcpResult> {
    let transform = PoseMatrix::reorthonormalized(transform.matrix());
    let last = history.last().expect("at least one iteration");
    Ok(IcpResult {
        transform,
        residual: last.after,
        iterations: history.len(),
        converged,
        history,
    })
}

/// Runs `method` over the gating levels of `params`. Iteration counts and
/// histories accumulate across levels; convergence refers to the finest level.
pub fn register(
    method: IcpMethod,
    source: &PointCloud,
    target: &PointCloud,
    init: &PoseMatrix,
    params: &IcpParams,
) -> Result<IcpResult> {
    params.validate()?;
    let mut level = params.clone();
    let mut total: Option<IcpResult> = None;
    for k in 0..params.gating_levels {
        level.max_correspondence_dist = params.max_correspondence_dist / f64::powi(2.0, k as i32);
        let start = total.as_ref().map_or(*init, |r| r.transform);
        let r = match method {
            IcpMethod::PointToPoint => icp_point_to_point(source, target, &start, &level)?,
            IcpMethod::PointToPlane => icp_point_to_plane(source, target, &start, &level)?,
        };
        total = Some(match total {
            None => r,
            Some(mut acc) => {
                acc.history.extend(r.history);
                IcpResult {
                    transform: r.transform,
                    residual: r.residual,
                    iterations: acc.iterations + r.iterations,
                    converged: r.converged,
                    history: acc.history,
                }
            }
        });
    }
    Ok(total.expect("at least one level"))
}

/// Relative transforms `T_t` (frame `t+1` into frame `t`) for a scan sequence.
/// With `warm_start` each pair starts from the previous pair's estimate.
pub fn icp_odometry(
    frames: &[PointCloud],
    method: IcpMethod,
    params: &IcpParams,
    warm_start: bool,
) -> Result<Vec<IcpResult>> {
    if !warm_start {
        return frames
            .par_windows(2)
            .map(|w| register(method, &w[1], &w[0], &PoseMatrix::identity(), params))
            .collect();
    }
    let mut out: Vec<IcpResult> = Vec::with_capacity(frames.len().saturating_sub(1));
    for w in frames.windows(2) {
        let init = out
            .last()
            .map_or_else(PoseMatrix::identity, |r| r.transform);
        out.push(register(method, &w[1], &w[0], &init, params)?);
    }
    Ok(out)
}
