use super::{Graph, Mode, ParamStore, Var};
use crate::error::{Error, Result};

/// Agreement between analytic and central-difference gradients for one array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrayCheck {
    pub name: String,
    pub checked: usize,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-8) over the checked entries.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Compares the backward sweep of `f` against central differences with step `h`.
/// At most `max_entries` evenly spaced entries of each trainable array are
/// perturbed. `f` must be a deterministic function of the store.
pub fn gradient_check<F>(
    store: &ParamStore<f64>,
    mode: Mode,
    h: f64,
    max_entries: usize,
    f: F,
) -> Result<Vec<ArrayCheck>>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(mode);
        let out = f(&mut g, s)?;
        scalar(&g, out)
    };
    let mut analytic = store.clone();
    analytic.zero_grad();
    {
        let mut g = Graph::new(mode);
        let out = f(&mut g, &analytic)?;
        scalar(&g, out)?;
        let grads = g.backward(out)?;
        grads.accumulate_into(&mut analytic);
    }
    let mut work = store.clone();
    let mut report = Vec::new();
    for (ai, a) in store.arrays().iter().enumerate() {
        if !a.trainable || a.numel() == 0 {
            continue;
        }
        let n = a.numel();
        let stride = n.div_ceil(max_entries.max(1));
        let (mut diff2, mut an2, mut nu2, mut max_abs, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
        for j in (0..n).step_by(stride) {
            let orig = a.values[j];
            work.array_mut(ai).values[j] = orig + h;
            let up = eval(&work)?;
            work.array_mut(ai).values[j] = orig - h;
            let down = eval(&work)?;
            work.array_mut(ai).values[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let an = analytic.array(ai).grad[j];
            diff2 += (an - numeric).powi(2);
            an2 += an * an;
            nu2 += numeric * numeric;
            max_abs = max_abs.max((an - numeric).abs());
            checked += 1;
        }
        let denom = an2.sqrt().max(nu2.sqrt()).max(1e-8);
        report.push(ArrayCheck {
            name: a.name.clone(),
            checked,
            rel_error: diff2.sqrt() / denom,
            max_abs_error: max_abs,
        });
    }
    Ok(report)
}

fn scalar(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Shape {
            op: "gradient_check",
            lhs: t.shape().to_vec(),
            rhs: vec![1],
        });
    }
    Ok(t.data()[0])
}
