use super::config::NetConfig;
use super::layers::linear;
use crate::diff::{Graph, LayerSpec, ParamStore, Real, Var};
use crate::error::Result;

pub(crate) fn head_specs(cfg: &NetConfig, out: &mut Vec<LayerSpec>) {
    for (i, w) in cfg.head.mlp_pn.windows(2).enumerate() {
        out.push(LayerSpec::linear(format!("head.pn{i}"), w[0], w[1]));
        out.push(LayerSpec::batch_norm(format!("head.pn{i}.bn"), w[1]));
    }
    for (i, w) in cfg.head.mlp_fc.windows(2).enumerate() {
        out.push(LayerSpec::linear(format!("head.fc{i}"), w[0], w[1]));
    }
}

/// Name of the final fully connected layer producing the 8 raw values.
pub(crate) fn final_layer(cfg: &NetConfig) -> String {
    format!("head.fc{}", cfg.head.mlp_fc.len() - 2)
}

/// Per-token MLP, max-pool over each sample's tokens, then the fully connected
/// stack. Returns raw `[samples, 8]` values in (real wxyz, dual wxyz) order.
pub(crate) fn pose_head<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    decoded: Var,
    samples: usize,
) -> Result<Var> {
    let mut h = decoded;
    for i in 0..cfg.head.mlp_pn.len() - 1 {
        let name = format!("head.pn{i}");
        h = linear(g, s, &name, h)?;
        h = g.batch_norm(h, s, &format!("{name}.bn"))?;
        h = g.relu(h)?;
    }
    let width = *cfg.head.mlp_pn.last().unwrap();
    let tokens = g.shape(h)[0] / samples;
    let h3 = g.reshape(h, &[samples, tokens, width])?;
    let mut v = g.max_pool(h3, 1)?;
    let layers = cfg.head.mlp_fc.len() - 1;
    for i in 0..layers {
        v = linear(g, s, &format!("head.fc{i}"), v)?;
        if i + 1 < layers {
            v = g.relu(v)?;
        }
    }
    Ok(v)
}
