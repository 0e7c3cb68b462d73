//! On-disk dataset layouts.
//!
//! Sequences follow the KITTI odometry tree:
//! `<root>/sequences/<id>/velodyne/NNNNNN.bin`, `<root>/poses/<id>.txt` and an
//! optional `<root>/sequences/<id>/calib.txt`. A pair set holds
//! `<root>/velodyne/NNNNNN.bin` (frames `2i` and `2i+1` form pair `i`) and
//! `<root>/labels.txt`, whose line `i` maps target coordinates of pair `i`
//! into its source frame.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use eliot_core::cloud_io::{filter_range, load_kitti_bins, PointCloud};
use eliot_core::eval::{load_kitti_poses, load_velo_to_cam, Trajectory};
use eliot_core::net::TrainSample;
use eliot_core::rigid::PoseMatrix;

use crate::config::DataConfig;

pub fn frame_name(i: usize) -> String {
    format!("{i:06}.bin")
}

pub fn sequence_dir(root: &Path, seq: &str) -> PathBuf {
    root.join("sequences").join(seq)
}

pub fn velodyne_dir(root: &Path, seq: &str) -> PathBuf {
    sequence_dir(root, seq).join("velodyne")
}

pub fn poses_path(root: &Path, seq: &str) -> PathBuf {
    root.join("poses").join(format!("{seq}.txt"))
}

pub fn calib_path(root: &Path, seq: &str) -> PathBuf {
    sequence_dir(root, seq).join("calib.txt")
}

pub fn labels_path(root: &Path) -> PathBuf {
    root.join("labels.txt")
}

pub fn is_pair_set(root: &Path) -> bool {
    labels_path(root).is_file()
}

/// Sorted `.bin` files of a directory.
pub fn scan_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| eliot_core::Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| eliot_core::Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "bin") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        anyhow::bail!(eliot_core::Error::MalformedFile {
            path: dir.to_path_buf(),
            reason: "no .bin scans".into(),
        });
    }
    Ok(files)
}

/// Range filter followed by even striding down to `max_points`.
pub fn preprocess(cloud: PointCloud, data: &DataConfig) -> Result<PointCloud> {
    let cloud = if data.min_range > 0.0 || data.max_range > 0.0 {
        let hi = if data.max_range > 0.0 {
            data.max_range
        } else {
            f64::INFINITY
        };
        filter_range(&cloud, data.min_range, hi)?
    } else {
        cloud
    };
    if data.max_points == 0 || cloud.len() <= data.max_points {
        return Ok(cloud);
    }
    let n = cloud.len();
    let idx: Vec<usize> = (0..data.max_points)
        .map(|i| i * n / data.max_points)
        .collect();
    Ok(cloud.select(&idx))
}

pub fn load_scans(files: &[PathBuf], data: &DataConfig) -> Result<Vec<PointCloud>> {
    load_kitti_bins(files)?
        .into_iter()
        .map(|c| preprocess(c, data))
        .collect()
}

pub fn data_root(data: &DataConfig) -> Result<&Path> {
    data.root
        .as_deref()
        .ok_or_else(|| crate::usage("`data.root` is not set in the config"))
}

/// Ground-truth poses of a sequence, in the scanner frame when calibration is enabled.
pub fn sequence_poses(root: &Path, seq: &str, data: &DataConfig) -> Result<Trajectory> {
    let gt = load_kitti_poses(poses_path(root, seq))?;
    if !data.use_calib {
        return Ok(gt);
    }
    let tr = load_velo_to_cam(calib_path(root, seq))?;
    Ok(eliot_core::eval::apply_calibration(&gt, &tr.inverse())?)
}

/// Training samples: consecutive frames of each sequence, or the pairs of a pair set.
pub fn training_samples(data: &DataConfig) -> Result<Vec<TrainSample>> {
    let root = data_root(data)?;
    if is_pair_set(root) {
        let files = scan_files(&root.join("velodyne"))?;
        let labels = load_kitti_poses(labels_path(root))?;
        if files.len() != 2 * labels.len() {
            anyhow::bail!(eliot_core::Error::MalformedFile {
                path: labels_path(root),
                reason: format!("{} labels for {} scans", labels.len(), files.len()),
            });
        }
        let scans = load_scans(&files, data)?;
        let mut it = scans.into_iter();
        return Ok(labels
            .poses()
            .iter()
            .map(|label| TrainSample {
                p: it.next().expect("counted"),
                q: it.next().expect("counted"),
                label: *label,
            })
            .collect());
    }
    let mut out = Vec::new();
    for seq in &data.train_sequences {
        let scans = load_scans(&scan_files(&velodyne_dir(root, seq))?, data)
            .with_context(|| format!("sequence {seq}"))?;
        let gt = sequence_poses(root, seq, data)?;
        if gt.len() != scans.len() {
            anyhow::bail!(eliot_core::Error::MalformedFile {
                path: poses_path(root, seq),
                reason: format!("{} poses for {} scans", gt.len(), scans.len()),
            });
        }
        let rel: Vec<PoseMatrix> = gt.relatives();
        for (t, label) in rel.into_iter().enumerate() {
            out.push(TrainSample {
                p: scans[t].clone(),
                q: scans[t + 1].clone(),
                label,
            });
        }
    }
    if out.is_empty() {
        anyhow::bail!(crate::usage("training data is empty"));
    }
    Ok(out)
}
