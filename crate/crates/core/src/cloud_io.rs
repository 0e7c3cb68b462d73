//! Point clouds: KITTI scan I/O, filtering, rigid transforms, augmentation and
//! synthetic scene generation.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rigid::PoseMatrix;
use crate::rng;

/// Bytes per KITTI velodyne record: four little-endian f32 (x, y, z, reflectance).
pub const KITTI_RECORD_BYTES: usize = 16;

pub const DEFAULT_MIN_RANGE: f64 = 2.5;
pub const DEFAULT_MAX_RANGE: f64 = 75.0;

/// An unordered point set with per-point feature vectors of a fixed width.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vector3<f64>>,
    features: Vec<f64>,
    channels: usize,
    pub frame_index: usize,
}

impl PointCloud {
    /// `features` is row-major with `channels` values per point.
    pub fn new(positions: Vec<Vector3<f64>>, features: Vec<f64>, channels: usize) -> Result<Self> {
        if features.len() != positions.len() * channels {
            return Err(Error::invalid(format!(
                "{} points need {} feature values, got {}",
                positions.len(),
                positions.len() * channels,
                features.len()
            )));
        }
        if !positions.iter().all(|p| p.iter().all(|v| v.is_finite()))
            || !features.iter().all(|v| v.is_finite())
        {
            return Err(Error::invalid("point cloud contains non-finite values"));
        }
        Ok(PointCloud {
            positions,
            features,
            channels,
            frame_index: 0,
        })
    }

    /// Cloud with no feature channels.
    pub fn from_positions(positions: Vec<Vector3<f64>>) -> Result<Self> {
        PointCloud::new(positions, Vec::new(), 0)
    }

    pub fn with_frame_index(mut self, frame_index: usize) -> Self {
        self.frame_index = frame_index;
        self
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        &self.features[i * self.channels..(i + 1) * self.channels]
    }

    /// Keeps the channel count but sets every feature value to zero.
    pub fn zero_features(mut self) -> Self {
        self.features.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let mut features = Vec::with_capacity(indices.len() * self.channels);
        for &i in indices {
            features.extend_from_slice(self.feature(i));
        }
        PointCloud {
            positions,
            features,
            channels: self.channels,
            frame_index: self.frame_index,
        }
    }

    /// Applies a validated rigid transform to every position.
    pub fn transformed(&self, transform: &PoseMatrix) -> PointCloud {
        let r = transform.rotation();
        let t = transform.translation();
        PointCloud {
            positions: self.positions.iter().map(|p| r * p + t).collect(),
            features: self.features.clone(),
            channels: self.channels,
            frame_index: self.frame_index,
        }
    }

    /// Concatenates clouds with equal channel counts.
    pub fn concat(parts: &[PointCloud]) -> Result<PointCloud> {
        let channels = parts.first().map_or(0, |c| c.channels);
        if parts.iter().any(|c| c.channels != channels) {
            return Err(Error::invalid(
                "cannot concatenate clouds with different channel counts",
            ));
        }
        let positions = parts
            .iter()
            .flat_map(|c| c.positions.iter().copied())
            .collect();
        let features = parts
            .iter()
            .flat_map(|c| c.features.iter().copied())
            .collect();
        PointCloud::new(positions, features, channels)
    }
}

/// Decodes KITTI velodyne records. Reflectance becomes the single feature channel.
pub fn parse_kitti_bin(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(KITTI_RECORD_BYTES) {
        return Err(Error::MalformedFile {
            path: path.to_path_buf(),
            reason: format!(
                "byte length {} is not a multiple of {KITTI_RECORD_BYTES}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / KITTI_RECORD_BYTES;
    let mut positions = Vec::with_capacity(n);
    let mut features = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(KITTI_RECORD_BYTES) {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap()) as f64;
        positions.push(Vector3::new(f(0), f(1), f(2)));
        features.push(f(3));
    }
    PointCloud::new(positions, features, 1).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_kitti_bin(&bytes, path)
}

/// Loads several scans in parallel; output order follows `paths`.
pub fn load_kitti_bins<P: AsRef<Path> + Sync>(paths: &[P]) -> Result<Vec<PointCloud>> {
    paths
        .par_iter()
        .enumerate()
        .map(|(i, p)| load_kitti_bin(p).map(|c| c.with_frame_index(i)))
        .collect()
}

/// Encodes as KITTI records; the first feature channel is written as reflectance
/// (zero when the cloud has no channels).
pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_RECORD_BYTES);
    for (i, p) in cloud.positions.iter().enumerate() {
        let refl = if cloud.channels > 0 {
            cloud.feature(i)[0]
        } else {
            0.0
        };
        for v in [p.x, p.y, p.z, refl] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn save_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_kitti_bin(cloud)).map_err(|e| Error::io(path, e))
}

/// Keeps points whose range lies in `[min_range, max_range]`, preserving order.
pub fn filter_range(cloud: &PointCloud, min_range: f64, max_range: f64) -> Result<PointCloud> {
    if !(min_range >= 0.0) || !(min_range < max_range) {
        return Err(Error::invalid(format!(
            "range filter needs 0 <= min < max, got [{min_range}, {max_range}]"
        )));
    }
    let keep: Vec<usize> = cloud
        .positions
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let r = p.norm();
            r >= min_range && r <= max_range
        })
        .map(|(i, _)| i)
        .collect();
    Ok(cloud.select(&keep))
}

/// Transforms the cloud by a 4x4 matrix after checking that it is rigid.
pub fn apply_rigid(cloud: &PointCloud, transform: &nalgebra::Matrix4<f64>) -> Result<PointCloud> {
    let pose = PoseMatrix::new(*transform)?;
    Ok(cloud.transformed(&pose))
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AugmentParams {
    /// Per-axis translation bound in meters.
    pub max_translation: f64,
    /// Rotation magnitude bound in radians.
    pub max_rotation: f64,
    pub seed: u64,
}

impl AugmentParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_translation >= 0.0) || !(self.max_rotation >= 0.0) {
            return Err(Error::invalid("augmentation bounds must be non-negative"));
        }
        Ok(())
    }
}

/// Uniform axis on the sphere, uniform angle in `[0, max_rotation]`, uniform
/// per-axis translation in `[-max_translation, max_translation]`.
pub fn sample_rigid(rng: &mut ChaCha8Rng, max_translation: f64, max_rotation: f64) -> PoseMatrix {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).max(0.0).sqrt();
    let axis = Vector3::new(s * phi.cos(), s * phi.sin(), z);
    let angle = max_rotation * rng.random::<f64>();
    let mut t = Vector3::zeros();
    for k in 0..3 {
        t[k] = max_translation * rng.random_range(-1.0..=1.0);
    }
    PoseMatrix::from_axis_angle(&(axis * angle), &t)
}

/// Applies a seeded random rigid perturbation; returns the moved cloud and the
/// transform used, so `source.transformed(&label)` equals the returned cloud.
pub fn augment_pair(
    source: &PointCloud,
    params: &AugmentParams,
) -> Result<(PointCloud, PoseMatrix)> {
    params.validate()?;
    let mut rng = rng::seeded(params.seed);
    let label = sample_rigid(&mut rng, params.max_translation, params.max_rotation);
    Ok((source.transformed(&label), label))
}

/// Synthetic structured scene. Plane 0 is the ground `z = 0`; further planes
/// are vertical walls whose normals rotate by roughly 90 degrees each, so any
/// three planes form a well-conditioned corner. Boxes rest on the ground.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    /// Half-width of the square footprint in meters.
    pub extent: f64,
    pub planes: usize,
    pub plane_points: usize,
    pub boxes: usize,
    pub box_points: usize,
    pub scatter_points: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            extent: 10.0,
            planes: 3,
            plane_points: 300,
            boxes: 4,
            box_points: 150,
            scatter_points: 100,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn total_points(&self) -> usize {
        self.planes * self.plane_points + self.boxes * self.box_points + self.scatter_points
    }
}

fn reflectance(rng: &mut ChaCha8Rng, base: f64) -> f64 {
    (base + 0.1 * rng.random_range(-1.0..=1.0)).clamp(0.0, 1.0)
}

/// Point on the surface of an axis-aligned box given by its min corner and size,
/// chosen with probability proportional to face area.
fn box_surface_point(rng: &mut ChaCha8Rng, lo: &Vector3<f64>, size: &Vector3<f64>) -> Vector3<f64> {
    let areas = [size.y * size.z, size.x * size.z, size.x * size.y];
    let total: f64 = 2.0 * areas.iter().sum::<f64>();
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if pick < 2.0 * a {
            axis = k;
            break;
        }
        pick -= 2.0 * a;
    }
    let mut p = Vector3::new(
        lo.x + size.x * rng.random::<f64>(),
        lo.y + size.y * rng.random::<f64>(),
        lo.z + size.z * rng.random::<f64>(),
    );
    p[axis] = if rng.random::<bool>() {
        lo[axis]
    } else {
        lo[axis] + size[axis]
    };
    p
}

pub fn synth_scene(spec: &SceneSpec) -> Result<PointCloud> {
    if spec.total_points() == 0 {
        return Err(Error::invalid("scene must contain at least one point"));
    }
    if !(spec.extent > 0.0) {
        return Err(Error::invalid("scene extent must be positive"));
    }
    let e = spec.extent;
    let mut rng = rng::seeded(spec.seed);
    let mut positions = Vec::with_capacity(spec.total_points());
    let mut features = Vec::with_capacity(spec.total_points());

    for k in 0..spec.planes {
        let base = 0.2 + 0.6 * rng.random::<f64>();
        if k == 0 {
            for _ in 0..spec.plane_points {
                positions.push(Vector3::new(
                    rng.random_range(-e..=e),
                    rng.random_range(-e..=e),
                    0.0,
                ));
                features.push(reflectance(&mut rng, base));
            }
            continue;
        }
        // Wall k: normal at angle (k-1)*90deg plus jitter, offset from the origin.
        let theta = (k - 1) as f64 * 0.5 * PI + rng.random_range(-0.2..=0.2);
        let normal = Vector3::new(theta.cos(), theta.sin(), 0.0);
        let along = Vector3::new(-theta.sin(), theta.cos(), 0.0);
        let offset = e * rng.random_range(0.5..=0.9);
        let height = 0.4 * e;
        for _ in 0..spec.plane_points {
            let u = rng.random_range(-e..=e);
            let h = rng.random_range(0.0..=height);
            positions.push(normal * offset + along * u + Vector3::new(0.0, 0.0, h));
            features.push(reflectance(&mut rng, base));
        }
    }

    for _ in 0..spec.boxes {
        let base = 0.2 + 0.6 * rng.random::<f64>();
        let size = Vector3::new(
            rng.random_range(0.1 * e..=0.3 * e),
            rng.random_range(0.1 * e..=0.3 * e),
            rng.random_range(0.05 * e..=0.2 * e),
        );
        let lo = Vector3::new(
            rng.random_range(-0.7 * e..=0.5 * e),
            rng.random_range(-0.7 * e..=0.5 * e),
            0.0,
        );
        for _ in 0..spec.box_points {
            positions.push(box_surface_point(&mut rng, &lo, &size));
            features.push(reflectance(&mut rng, base));
        }
    }

    for _ in 0..spec.scatter_points {
        positions.push(Vector3::new(
            rng.random_range(-e..=e),
            rng.random_range(-e..=e),
            rng.random_range(0.0..=0.5 * e),
        ));
        features.push(rng.random::<f64>());
    }
    PointCloud::new(positions, features, 1)
}

/// A drive through a static synthetic street: ground, building facades on both
/// sides with gaps, and boxes along the curb.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SequenceSpec {
    pub frames: usize,
    /// Forward motion per frame in meters.
    pub step: f64,
    /// Yaw change per frame in radians.
    pub yaw_rate: f64,
    /// Half-width of the street in meters.
    pub street_half_width: f64,
    /// Sampling density: mean spacing between world points in meters.
    pub spacing: f64,
    pub min_range: f64,
    pub max_range: f64,
    pub seed: u64,
}

impl Default for SequenceSpec {
    fn default() -> Self {
        SequenceSpec {
            frames: 50,
            step: 2.5,
            yaw_rate: 0.004,
            street_half_width: 8.0,
            spacing: 0.8,
            min_range: DEFAULT_MIN_RANGE,
            max_range: 40.0,
            seed: 0,
        }
    }
}

/// Generates the world-frame point set and ground-truth sensor poses; frame `t`
/// observes the world points within range expressed in its own coordinates.
pub fn synth_sequence(spec: &SequenceSpec) -> Result<(Vec<PointCloud>, Vec<PoseMatrix>)> {
    if spec.frames == 0 || !(spec.spacing > 0.0) || !(spec.step >= 0.0) {
        return Err(Error::invalid(
            "sequence needs frames >= 1, spacing > 0, step >= 0",
        ));
    }
    let mut poses = Vec::with_capacity(spec.frames);
    let (mut x, mut y, mut yaw) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..spec.frames {
        poses.push(PoseMatrix::from_axis_angle(
            &Vector3::new(0.0, 0.0, yaw),
            &Vector3::new(x, y, 0.0),
        ));
        x += spec.step * yaw.cos();
        y += spec.step * yaw.sin();
        yaw += spec.yaw_rate;
    }
    let world = street_world(spec, &poses);
    let clouds = poses
        .par_iter()
        .enumerate()
        .map(|(t, pose)| {
            let local = world.transformed(&pose.inverse()).with_frame_index(t);
            filter_range(&local, spec.min_range, spec.max_range)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clouds, poses))
}

fn street_world(spec: &SequenceSpec, poses: &[PoseMatrix]) -> PointCloud {
    let mut rng = rng::seeded(spec.seed);
    let w = spec.street_half_width;
    let d = spec.spacing;
    let margin = spec.max_range * 0.6;
    let length = spec.step * spec.frames as f64 + 2.0 * margin;
    let mut local = Vec::new();
    let mut refl = Vec::new();
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.5 * d..=0.5 * d);

    // Street-local coordinates (s along the path, lateral l, height h).
    let mut s = -margin;
    while s < length - margin {
        let mut l = -w - 4.0;
        while l <= w + 4.0 {
            local.push(Vector3::new(
                s + jitter(&mut rng),
                l + jitter(&mut rng),
                0.0,
            ));
            refl.push(0.3);
            l += 1.5 * d;
        }
        s += 1.5 * d;
    }
    for side in [-1.0f64, 1.0] {
        let mut s = -margin;
        while s < length - margin {
            let facade = rng.random_range(6.0..14.0);
            let gap = rng.random_range(2.0..5.0);
            let setback = rng.random_range(0.0..2.0);
            let height = rng.random_range(4.0..10.0);
            let mut u = 0.0;
            while u < facade {
                let mut h = 0.2;
                while h < height {
                    local.push(Vector3::new(
                        s + u + jitter(&mut rng),
                        side * (w + setback),
                        h + jitter(&mut rng),
                    ));
                    refl.push(0.6);
                    h += d;
                }
                u += d;
            }
            // Facade end caps give along-track structure.
            for cap_s in [s, s + facade] {
                let mut depth = 0.0;
                while depth < 3.0 {
                    let mut h = 0.2;
                    while h < height {
                        local.push(Vector3::new(cap_s, side * (w + setback + depth), h));
                        refl.push(0.5);
                        h += d;
                    }
                    depth += d;
                }
            }
            s += facade + gap;
        }
        let mut s = -margin + rng.random_range(0.0..10.0);
        while s < length - margin {
            let size = Vector3::new(
                rng.random_range(0.8..2.5),
                rng.random_range(0.8..2.0),
                rng.random_range(0.8..2.0),
            );
            let lo = Vector3::new(s, side * (w - 2.5) - 0.5 * size.y, 0.0);
            let count =
                ((size.x * size.y + size.x * size.z + size.y * size.z) * 2.0 / (d * d)) as usize;
            for _ in 0..count.max(8) {
                local.push(box_surface_point(&mut rng, &lo, &size));
                refl.push(0.8);
            }
            s += rng.random_range(6.0..15.0);
        }
    }

    // Bend the straight street along the trajectory: place each local point using
    // the nearest pose by arc length.
    let arc = spec.step.max(1e-9);
    let positions = local
        .iter()
        .map(|p| {
            let idx = (p.x / arc).floor().clamp(0.0, (poses.len() - 1) as f64) as usize;
            let pose = &poses[idx];
            let along = p.x - idx as f64 * spec.step;
            pose.transform_point(&Vector3::new(along, p.y, p.z))
        })
        .collect();
    PointCloud::new(positions, refl, 1).expect("street world is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = rng::seeded(seed);
        let positions = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-20.0..20.0),
                    rng.random_range(-2.0..5.0),
                )
            })
            .collect();
        let features = (0..n).map(|_| rng.random::<f64>()).collect();
        PointCloud::new(positions, features, 1).unwrap()
    }

    #[test]
    fn kitti_parse_examples() {
        let p = Path::new("mem");
        assert_eq!(parse_kitti_bin(&[], p).unwrap().len(), 0);
        // Independent writer: build the record by hand from f32 bit patterns.
        let mut bytes = Vec::new();
        for bits in [0x3f80_0000u32, 0x4000_0000, 0x4040_0000, 0x3f00_0000] {
            bytes.extend_from_slice(&bits.to_le_bytes());
        }
        let c = parse_kitti_bin(&bytes, p).unwrap();
        assert_eq!(c.positions()[0], Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(c.feature(0), &[0.5]);
        assert!(matches!(
            parse_kitti_bin(&[0u8; 24], p),
            Err(Error::MalformedFile { .. })
        ));
    }

    #[test]
    fn kitti_file_io() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("000000.bin");
        let cloud = sample_cloud(50, 1);
        save_kitti_bin(&cloud, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let back = load_kitti_bin(&path).unwrap();
        assert_eq!(encode_kitti_bin(&back), bytes);
        assert!(matches!(
            load_kitti_bin(dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
        let many = load_kitti_bins(&[path.clone(), path]).unwrap();
        assert_eq!(many[1].frame_index, 1);
    }

    #[test]
    fn range_filter_examples() {
        let c = PointCloud::from_positions(vec![
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 3.0, 0.0),
            Vector3::new(0.0, 0.0, 5.0),
        ])
        .unwrap();
        assert_eq!(filter_range(&c, 0.0, f64::INFINITY).unwrap(), c);
        let f = filter_range(&c, 2.0, 4.0).unwrap();
        assert_eq!(f.positions(), &[Vector3::new(0.0, 3.0, 0.0)]);
        assert!(matches!(
            filter_range(&c, 5.0, 2.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rigid_examples() {
        let c = PointCloud::from_positions(vec![Vector3::new(1.0, 0.0, 0.0)]).unwrap();
        assert_eq!(apply_rigid(&c, &nalgebra::Matrix4::identity()).unwrap(), c);
        let rz = PoseMatrix::from_axis_angle(&Vector3::new(0.0, 0.0, PI / 2.0), &Vector3::zeros());
        let out = apply_rigid(&c, rz.matrix()).unwrap();
        assert!((out.positions()[0] - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-9);
        let mut bad = nalgebra::Matrix4::identity();
        bad[(0, 1)] = 0.5;
        assert!(matches!(
            apply_rigid(&c, &bad),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn rigid_matches_matrix_vector_oracle() {
        let c = sample_cloud(100, 2);
        let mut rng = rng::seeded(3);
        let t = sample_rigid(&mut rng, 5.0, 3.0);
        let out = apply_rigid(&c, t.matrix()).unwrap();
        let m = t.matrix();
        for (p, q) in c.positions().iter().zip(out.positions()) {
            let mut expect = [0.0; 3];
            for r in 0..3 {
                expect[r] = m[(r, 0)] * p.x + m[(r, 1)] * p.y + m[(r, 2)] * p.z + m[(r, 3)];
            }
            assert!((q - Vector3::from(expect)).norm() < 1e-9);
        }
        assert_eq!(out.features(), c.features());
    }

    #[test]
    fn augment_examples() {
        let c = sample_cloud(40, 4);
        let zero = AugmentParams {
            max_translation: 0.0,
            max_rotation: 0.0,
            seed: 9,
        };
        let (same, label) = augment_pair(&c, &zero).unwrap();
        assert_eq!(*label.matrix(), nalgebra::Matrix4::identity());
        assert_eq!(same, c);
        let p = AugmentParams {
            max_translation: 1.0,
            max_rotation: 0.3,
            seed: 11,
        };
        let a = augment_pair(&c, &p).unwrap();
        let b = augment_pair(&c, &p).unwrap();
        assert_eq!(a, b);
        let back = apply_rigid(&c, a.1.matrix()).unwrap();
        for (x, y) in back.positions().iter().zip(a.0.positions()) {
            assert!((x - y).norm() < 1e-9);
        }
        assert!(a.1.rotation_angle() <= 0.3 + 1e-12);
        assert!(a.1.translation().amax() <= 1.0);
        let bad = AugmentParams {
            max_translation: -1.0,
            max_rotation: 0.0,
            seed: 0,
        };
        assert!(augment_pair(&c, &bad).is_err());
    }

    #[test]
    fn synth_scene_contracts() {
        let spec = SceneSpec {
            planes: 1,
            plane_points: 60,
            boxes: 1,
            box_points: 30,
            scatter_points: 10,
            seed: 7,
            ..Default::default()
        };
        assert_eq!(spec.total_points(), 100);
        let a = synth_scene(&spec).unwrap();
        assert_eq!(a, synth_scene(&spec).unwrap());
        assert_eq!(a.len(), 100);
        assert!(a.features().iter().all(|v| (0.0..=1.0).contains(v)));
        let plane_only = SceneSpec {
            planes: 1,
            plane_points: 200,
            boxes: 0,
            scatter_points: 0,
            ..Default::default()
        };
        let c = synth_scene(&plane_only).unwrap();
        assert!(c.positions().iter().all(|p| p.z.abs() < 1e-6));
        let empty = SceneSpec {
            planes: 0,
            boxes: 0,
            scatter_points: 0,
            ..Default::default()
        };
        assert!(matches!(
            synth_scene(&empty),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn synth_sequence_frames_are_consistent() {
        let spec = SequenceSpec {
            frames: 4,
            ..Default::default()
        };
        let (clouds, poses) = synth_sequence(&spec).unwrap();
        assert_eq!(clouds.len(), 4);
        assert!(clouds.iter().all(|c| c.len() > 1000));
        assert_eq!(*poses[0].matrix(), nalgebra::Matrix4::identity());
        for c in &clouds {
            assert!(c.positions().iter().all(|p| p.norm() <= spec.max_range));
        }
    }

    proptest! {
        #[test]
        fn kitti_round_trip_is_byte_identical(vals in prop::collection::vec(-1e4f32..1e4, 0..64)) {
            let n = vals.len() / 4 * 4;
            let bytes: Vec<u8> = vals[..n].iter().flat_map(|v| v.to_le_bytes()).collect();
            let c = parse_kitti_bin(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(encode_kitti_bin(&c), bytes);
        }

        #[test]
        fn rigid_inverse_round_trip(seed in 0u64..1000) {
            let c = sample_cloud(30, seed);
            let t = sample_rigid(&mut rng::seeded(seed + 1), 10.0, PI);
            let back = c.transformed(&t).transformed(&t.inverse());
            for (a, b) in c.positions().iter().zip(back.positions()) {
                prop_assert!((a - b).norm() < 1e-9);
            }
            let (_, label) = augment_pair(&c, &AugmentParams { max_translation: 2.0, max_rotation: 1.0, seed }).unwrap();
            prop_assert!(label.orthonormality_residual() < 1e-9);
        }

        #[test]
        fn filter_range_idempotent(seed in 0u64..1000, lo in 0.0f64..10.0, span in 0.1f64..20.0) {
            let c = sample_cloud(60, seed);
            let once = filter_range(&c, lo, lo + span).unwrap();
            prop_assert_eq!(filter_range(&once, lo, lo + span).unwrap(), once);
        }
    }
}
