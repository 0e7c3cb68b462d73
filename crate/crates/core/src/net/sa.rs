//! Multi-scale set abstraction.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::config::NetConfig;
use super::layers::{linear, mlp_bn_relu, mlp_bn_relu_specs};
use crate::cloud_io::PointCloud;
use crate::diff::{Graph, LayerSpec, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{ball_query, fps};

/// Keypoints and abstracted features of one cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub keypoints: Vec<Vector3<f64>>,
    /// Row-major `[n_key, c′]`.
    pub features: Vec<f64>,
    pub width: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.width..(i + 1) * self.width]
    }
}

/// Geometry of one cloud resolved ahead of the differentiable pass: FPS
/// keypoints and, per radius, the grouped `[n_key · samples, 3 + c]` input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    pub keypoints: Vec<Vector3<f64>>,
    pub grouped: Vec<Vec<f64>>,
}

pub fn prepare_cloud(cloud: &PointCloud, cfg: &NetConfig) -> Result<PreparedCloud> {
    if cloud.len() < cfg.n_key {
        return Err(Error::invalid(format!(
            "cloud has {} points, fewer than n_key = {}",
            cloud.len(),
            cfg.n_key
        )));
    }
    if cloud.channels() != cfg.in_channels {
        return Err(Error::invalid(format!(
            "cloud has {} feature channels, network expects {}",
            cloud.channels(),
            cfg.in_channels
        )));
    }
    let pts = cloud.positions();
    let sel = fps(pts, cfg.n_key, 0)?;
    let keypoints: Vec<Vector3<f64>> = sel.indices.iter().map(|&i| pts[i]).collect();
    let width = 3 + cfg.in_channels;
    let mut grouped = Vec::with_capacity(cfg.sa.radii.len());
    for (r, &radius) in cfg.sa.radii.iter().enumerate() {
        let table = ball_query(&keypoints, pts, radius, cfg.sa.max_samples[r])?;
        let mut rows = Vec::with_capacity(table.flat().len() * width);
        for (k, center) in keypoints.iter().enumerate() {
            for &j in table.row(k) {
                let d = pts[j] - center;
                rows.extend_from_slice(&[d.x, d.y, d.z]);
                rows.extend_from_slice(cloud.feature(j));
            }
        }
        grouped.push(rows);
    }
    Ok(PreparedCloud { keypoints, grouped })
}

pub fn prepare_clouds(clouds: &[&PointCloud], cfg: &NetConfig) -> Result<Vec<PreparedCloud>> {
    clouds.par_iter().map(|c| prepare_cloud(c, cfg)).collect()
}

pub(crate) fn sa_specs(cfg: &NetConfig, out: &mut Vec<LayerSpec>) {
    for (r, widths) in cfg.sa.mlps.iter().enumerate() {
        mlp_bn_relu_specs(&format!("sa.r{r}"), 3 + cfg.in_channels, widths, out);
    }
    let c = cfg.feature_width();
    out.push(LayerSpec::linear("sa.out", c, c));
    out.push(LayerSpec::batch_norm("sa.out.bn", c));
}

/// Abstracted features `[clouds · n_key, c′]` for a batch of prepared clouds;
/// batch-norm statistics are shared across the whole batch.
pub(crate) fn abstract_batch<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    clouds: &[&PreparedCloud],
) -> Result<Var> {
    let m = clouds.len();
    let k = cfg.n_key;
    let width = 3 + cfg.in_channels;
    let mut pooled = Vec::with_capacity(cfg.sa.radii.len());
    for (r, widths) in cfg.sa.mlps.iter().enumerate() {
        let samples = cfg.sa.max_samples[r];
        let mut data = Vec::with_capacity(m * k * samples * width);
        for c in clouds {
            data.extend_from_slice(&c.grouped[r]);
        }
        let x = g.constant(Tensor::from_f64(vec![m * k * samples, width], &data)?)?;
        let h = mlp_bn_relu(g, s, &format!("sa.r{r}"), widths.len(), x)?;
        let last = *widths.last().unwrap();
        let h = g.reshape(h, &[m * k, samples, last])?;
        pooled.push(g.max_pool(h, 1)?);
    }
    let f = g.concat(&pooled, 1)?;
    let f = linear(g, s, "sa.out", f)?;
    g.batch_norm(f, s, "sa.out.bn")
}

/// Set abstraction of a single cloud evaluated outside any training loop.
pub fn set_abstraction<T: Real>(
    cloud: &PointCloud,
    cfg: &NetConfig,
    store: &ParamStore<T>,
    mode: crate::diff::Mode,
) -> Result<FeatureSet> {
    cfg.validate()?;
    let prep = prepare_cloud(cloud, cfg)?;
    let mut g = Graph::new(mode);
    let f = abstract_batch(&mut g, store, cfg, &[&prep])?;
    Ok(FeatureSet {
        keypoints: prep.keypoints,
        features: g.value(f).to_f64(),
        width: cfg.feature_width(),
    })
}
