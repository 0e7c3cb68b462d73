//! Flow embeddings: the correspondence-free IRFE tokens and the
//! nearest-neighbor baseline. Both produce `[n_key, 4·c′]` rows.

use nalgebra::Vector3;

use super::config::NetConfig;
use super::encoding::encode_keypoints;
use super::layers::{linear, mlp_bn_relu, mlp_bn_relu_specs};
use super::sa::FeatureSet;
use crate::diff::{Graph, LayerSpec, Mode, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{knn, GroupTable};

pub(crate) fn irfe_specs(cfg: &NetConfig, out: &mut Vec<LayerSpec>) {
    let c = cfg.feature_width();
    out.push(LayerSpec::linear("irfe.proj_p", cfg.pe_width(), c));
    out.push(LayerSpec::linear("irfe.proj_q", cfg.pe_width(), c));
}

pub(crate) fn knn_specs(cfg: &NetConfig, out: &mut Vec<LayerSpec>) {
    let c = cfg.feature_width();
    let mut widths = cfg.flow.mlp.clone();
    widths.push(4 * c);
    mlp_bn_relu_specs("fe", 3 + 2 * c, &widths, out);
}

/// `[proj_p(γ(p_i)), proj_q(γ(q_i)), f_i, g_i]` per keypoint index.
pub(crate) fn irfe<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    pe_p: Var,
    pe_q: Var,
    f: Var,
    gq: Var,
) -> Result<Var> {
    if g.shape(f) != g.shape(gq) {
        return Err(Error::invalid(format!(
            "feature sets differ in shape: {:?} vs {:?}",
            g.shape(f),
            g.shape(gq)
        )));
    }
    let a = linear(g, s, "irfe.proj_p", pe_p)?;
    let b = linear(g, s, "irfe.proj_q", pe_q)?;
    g.concat(&[a, b, f, gq], 1)
}

/// The `n_group` nearest target keypoints of each source keypoint and the
/// displacement rows `y_j − x_i`, flattened `[n_key · n_group, 3]`.
pub fn knn_groups(
    kp_p: &[Vector3<f64>],
    kp_q: &[Vector3<f64>],
    n_group: usize,
) -> Result<(GroupTable, Vec<f64>)> {
    let table = knn(kp_p, kp_q, n_group)?;
    let mut disp = Vec::with_capacity(kp_p.len() * n_group * 3);
    for (i, x) in kp_p.iter().enumerate() {
        for &j in table.row(i) {
            let d = kp_q[j] - x;
            disp.extend_from_slice(&[d.x, d.y, d.z]);
        }
    }
    Ok((table, disp))
}

/// Nearest-neighbor flow embedding over a batch. Keypoint lists are per sample
/// and feature rows are sample-major.
pub(crate) fn knn_embed<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    kps_p: &[Vec<Vector3<f64>>],
    kps_q: &[Vec<Vector3<f64>>],
    f: Var,
    gq: Var,
) -> Result<Var> {
    let k = cfg.n_key;
    let ng = cfg.flow.n_group;
    let b = kps_p.len();
    let mut disp = Vec::with_capacity(b * k * ng * 3);
    let mut fi = Vec::with_capacity(b * k * ng);
    let mut gj = Vec::with_capacity(b * k * ng);
    for (n, (p, q)) in kps_p.iter().zip(kps_q).enumerate() {
        if p.len() != k || q.len() != k {
            return Err(Error::invalid(format!(
                "keypoint counts {} and {} differ from n_key = {k}",
                p.len(),
                q.len()
            )));
        }
        let (table, d) = knn_groups(p, q, ng)?;
        disp.extend(d);
        for i in 0..k {
            for &j in table.row(i) {
                fi.push(n * k + i);
                gj.push(n * k + j);
            }
        }
    }
    let d = g.constant(Tensor::from_f64(vec![b * k * ng, 3], &disp)?)?;
    let fr = g.gather_rows(f, &fi)?;
    let gr = g.gather_rows(gq, &gj)?;
    let x = g.concat(&[d, fr, gr], 1)?;
    let h = mlp_bn_relu(g, s, "fe", cfg.flow.mlp.len() + 1, x)?;
    let h = g.reshape(h, &[b * k, ng, cfg.token_width()])?;
    g.max_pool(h, 1)
}

fn feature_vars<T: Real>(
    g: &mut Graph<T>,
    fs_p: &FeatureSet,
    fs_q: &FeatureSet,
) -> Result<(Var, Var)> {
    if fs_p.len() != fs_q.len() || fs_p.width != fs_q.width {
        return Err(Error::invalid(format!(
            "feature sets differ: {} x {} vs {} x {}",
            fs_p.len(),
            fs_p.width,
            fs_q.len(),
            fs_q.width
        )));
    }
    let f = g.constant(Tensor::from_f64(
        vec![fs_p.len(), fs_p.width],
        &fs_p.features,
    )?)?;
    let q = g.constant(Tensor::from_f64(
        vec![fs_q.len(), fs_q.width],
        &fs_q.features,
    )?)?;
    Ok((f, q))
}

/// IRFE tokens for two feature sets, row-major `[n_key, 4·c′]`.
pub fn irfe_tokens<T: Real>(
    fs_p: &FeatureSet,
    fs_q: &FeatureSet,
    cfg: &NetConfig,
    store: &ParamStore<T>,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(Mode::Eval);
    let (f, q) = feature_vars(&mut g, fs_p, fs_q)?;
    let pe_p = g.constant(encode_keypoints(
        std::slice::from_ref(&fs_p.keypoints),
        cfg,
        store,
    )?)?;
    let pe_q = g.constant(encode_keypoints(
        std::slice::from_ref(&fs_q.keypoints),
        cfg,
        store,
    )?)?;
    let t = irfe(&mut g, store, pe_p, pe_q, f, q)?;
    Ok(g.value(t).to_f64())
}

/// Nearest-neighbor flow embedding of two feature sets, row-major `[n_key, 4·c′]`.
pub fn knn_flow_embed<T: Real>(
    fs_p: &FeatureSet,
    fs_q: &FeatureSet,
    cfg: &NetConfig,
    store: &ParamStore<T>,
    mode: Mode,
) -> Result<Vec<f64>> {
    let mut g = Graph::new(mode);
    let (f, q) = feature_vars(&mut g, fs_p, fs_q)?;
    let t = knn_embed(
        &mut g,
        store,
        cfg,
        std::slice::from_ref(&fs_p.keypoints),
        std::slice::from_ref(&fs_q.keypoints),
        f,
        q,
    )?;
    Ok(g.value(t).to_f64())
}
