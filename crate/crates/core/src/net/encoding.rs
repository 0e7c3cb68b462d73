//! Fourier positional encoding of keypoint coordinates.

use std::f64::consts::PI;

use nalgebra::Vector3;

use super::config::{NetConfig, PeMethod};
use crate::diff::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub(crate) const GAUSS_BUFFER: &str = "pe.gauss";

/// Encodes one coordinate as `[p, sin(2⁰p), cos(2⁰p), …, sin(2^(L−1)p), cos(2^(L−1)p)]`.
pub fn encode_scalar(p: f64, bands: usize, out: &mut Vec<f64>) {
    out.push(p);
    let mut freq = 1.0;
    for _ in 0..bands {
        let a = freq * p;
        out.push(a.sin());
        out.push(a.cos());
        freq *= 2.0;
    }
}

/// Coordinate-major encoding of a 3-vector, width 3·(2L+1). With `normalize`,
/// coordinates are first scaled by `π / bound`.
pub fn positional_encode(
    p: &Vector3<f64>,
    bands: usize,
    normalize: bool,
    bound: f64,
) -> Result<Vec<f64>> {
    if bands == 0 {
        return Err(Error::invalid(
            "positional encoding needs at least one band",
        ));
    }
    let scale = normalization_scale(normalize, bound)?;
    let mut out = Vec::with_capacity(3 * (2 * bands + 1));
    for k in 0..3 {
        encode_scalar(p[k] * scale, bands, &mut out);
    }
    Ok(out)
}

fn normalization_scale(normalize: bool, bound: f64) -> Result<f64> {
    if !normalize {
        return Ok(1.0);
    }
    if !(bound.is_finite() && bound > 0.0) {
        return Err(Error::invalid(format!(
            "normalization bound {bound} must be finite and positive"
        )));
    }
    Ok(PI / bound)
}

/// Random-feature encoding `[p, sin(b₁·p), cos(b₁·p), …]` with `3L` frequency rows
/// `b_j`, which keeps the width at 3·(2L+1).
pub fn gaussian_encode(p: &Vector3<f64>, frequencies: &[f64], out: &mut Vec<f64>) {
    out.extend_from_slice(&[p.x, p.y, p.z]);
    for b in frequencies.chunks_exact(3) {
        let a = b[0] * p.x + b[1] * p.y + b[2] * p.z;
        out.push(a.sin());
        out.push(a.cos());
    }
}

/// Encodes every keypoint of every cloud into a `[clouds·n, 3(2L+1)]` tensor.
pub fn encode_keypoints<T: Real>(
    keypoints: &[Vec<Vector3<f64>>],
    cfg: &NetConfig,
    store: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let width = cfg.pe_width();
    let rows: usize = keypoints.iter().map(Vec::len).sum();
    let scale = normalization_scale(cfg.pe.normalize, cfg.pe.bound)?;
    let freqs: Option<Vec<f64>> = match cfg.pe.method {
        PeMethod::Fourier => None,
        PeMethod::Gauss => {
            let b = store
                .get(GAUSS_BUFFER)
                .ok_or_else(|| Error::Config(format!("missing buffer `{GAUSS_BUFFER}`")))?;
            Some(b.values.iter().map(|v| v.as_f64()).collect())
        }
    };
    let mut data = Vec::with_capacity(rows * width);
    for p in keypoints.iter().flatten() {
        let q = p * scale;
        match &freqs {
            None => {
                for k in 0..3 {
                    encode_scalar(q[k], cfg.pe.bands, &mut data);
                }
            }
            Some(f) => gaussian_encode(&q, f, &mut data),
        }
    }
    Tensor::from_f64(vec![rows, width], &data)
}
