use crate::diff::{Graph, LayerSpec, ParamStore, Real, Var};
use crate::error::Result;

/// `x · W + b` for a `[rows, fan_in]` input.
pub(crate) fn linear<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let w = g.param(s, &format!("{name}.weight"))?;
    let b = g.param(s, &format!("{name}.bias"))?;
    let h = g.matmul(x, w)?;
    g.add_bias(h, b)
}

/// Stack of linear → batch norm → relu layers named `{prefix}.l{i}`.
pub(crate) fn mlp_bn_relu<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    prefix: &str,
    layers: usize,
    x: Var,
) -> Result<Var> {
    let mut h = x;
    for i in 0..layers {
        let name = format!("{prefix}.l{i}");
        h = linear(g, s, &name, h)?;
        h = g.batch_norm(h, s, &format!("{name}.bn"))?;
        h = g.relu(h)?;
    }
    Ok(h)
}

pub(crate) fn mlp_bn_relu_specs(
    prefix: &str,
    input: usize,
    widths: &[usize],
    out: &mut Vec<LayerSpec>,
) {
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        let name = format!("{prefix}.l{i}");
        out.push(LayerSpec::linear(&name, fan_in, w));
        out.push(LayerSpec::batch_norm(format!("{name}.bn"), w));
        fan_in = w;
    }
}

/// Pre-norm layer normalization with learned affine `{name}.gamma`, `{name}.beta`.
pub(crate) fn norm<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    name: &str,
    x: Var,
) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let gamma = g.param(s, &format!("{name}.gamma"))?;
    let beta = g.param(s, &format!("{name}.beta"))?;
    g.layer_scale(n, gamma, beta)
}
