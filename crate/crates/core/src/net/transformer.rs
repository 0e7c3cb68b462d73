//! Pre-norm transformer encoder-decoder over flow tokens.
//!
//! The encoder attends over tokens positioned by the source keypoints; decoder
//! queries are embeddings of the target keypoints and cross-attend to the
//! encoder memory.

use super::config::NetConfig;
use super::layers::{linear, norm};
use crate::diff::{Graph, LayerSpec, ParamStore, Real, Var};
use crate::error::Result;

pub(crate) fn transformer_specs(cfg: &NetConfig, out: &mut Vec<LayerSpec>) {
    let (de, dd) = (cfg.enc.dim, cfg.dec.dim);
    out.push(LayerSpec::linear("enc.tok", cfg.token_width(), de));
    out.push(LayerSpec::linear("enc.pos", cfg.pe_width(), de));
    for l in 0..cfg.enc.layers {
        let p = format!("enc.l{l}");
        out.push(LayerSpec::affine(format!("{p}.ln1"), de));
        for m in ["q", "k", "v", "o"] {
            out.push(LayerSpec::linear(format!("{p}.attn.{m}"), de, de));
        }
        out.push(LayerSpec::affine(format!("{p}.ln2"), de));
        out.push(LayerSpec::linear(format!("{p}.ffn1"), de, cfg.enc.ffn));
        out.push(LayerSpec::linear(format!("{p}.ffn2"), cfg.enc.ffn, de));
    }
    out.push(LayerSpec::affine("enc.norm", de));
    out.push(LayerSpec::linear("dec.query", cfg.pe_width(), dd));
    for l in 0..cfg.dec.layers {
        let p = format!("dec.l{l}");
        out.push(LayerSpec::affine(format!("{p}.ln1"), dd));
        for m in ["q", "k", "v", "o"] {
            out.push(LayerSpec::linear(format!("{p}.self.{m}"), dd, dd));
        }
        out.push(LayerSpec::affine(format!("{p}.ln2"), dd));
        out.push(LayerSpec::linear(format!("{p}.cross.q"), dd, dd));
        out.push(LayerSpec::linear(format!("{p}.cross.k"), de, dd));
        out.push(LayerSpec::linear(format!("{p}.cross.v"), de, dd));
        out.push(LayerSpec::linear(format!("{p}.cross.o"), dd, dd));
        out.push(LayerSpec::affine(format!("{p}.ln3"), dd));
        out.push(LayerSpec::linear(format!("{p}.ffn1"), dd, cfg.dec.ffn));
        out.push(LayerSpec::linear(format!("{p}.ffn2"), cfg.dec.ffn, dd));
    }
    out.push(LayerSpec::affine("dec.norm", dd));
}

/// Attention probabilities recorded during a forward pass, `[sample][head]`,
/// each a `[queries, keys]` value.
pub(crate) type AttentionVars = Vec<Vec<Var>>;

/// Multi-head scaled dot-product attention, computed per sample.
#[allow(clippy::too_many_arguments)]
fn attention<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    prefix: &str,
    xq: Var,
    xkv: Var,
    samples: usize,
    tokens: usize,
    heads: usize,
) -> Result<(Var, AttentionVars)> {
    let q = linear(g, s, &format!("{prefix}.q"), xq)?;
    let k = linear(g, s, &format!("{prefix}.k"), xkv)?;
    let v = linear(g, s, &format!("{prefix}.v"), xkv)?;
    let dim = g.shape(q)[1];
    let dh = dim / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(samples);
    let mut maps = Vec::with_capacity(samples);
    for b in 0..samples {
        let qb = g.slice(q, 0, b * tokens, tokens)?;
        let kb = g.slice(k, 0, b * tokens, tokens)?;
        let vb = g.slice(v, 0, b * tokens, tokens)?;
        let mut head_outs = Vec::with_capacity(heads);
        let mut head_maps = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (qb, kb, vb)
            } else {
                (
                    g.slice(qb, 1, h * dh, dh)?,
                    g.slice(kb, 1, h * dh, dh)?,
                    g.slice(vb, 1, h * dh, dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let a = g.softmax(scores, 1)?;
            head_maps.push(a);
            head_outs.push(g.matmul(a, vh)?);
        }
        outs.push(if heads == 1 {
            head_outs[0]
        } else {
            g.concat(&head_outs, 1)?
        });
        maps.push(head_maps);
    }
    let cat = if samples == 1 {
        outs[0]
    } else {
        g.concat(&outs, 0)?
    };
    Ok((linear(g, s, &format!("{prefix}.o"), cat)?, maps))
}

fn ffn<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    prefix: &str,
    x: Var,
    dropout: f64,
    site: u64,
) -> Result<Var> {
    let h = linear(g, s, &format!("{prefix}.ffn1"), x)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, dropout, site)?;
    linear(g, s, &format!("{prefix}.ffn2"), h)
}

fn residual<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    update: Var,
    dropout: f64,
    site: u64,
) -> Result<Var> {
    let u = g.dropout(update, dropout, site)?;
    g.add(x, u)
}

/// Output of the encoder-decoder for a batch.
pub(crate) struct TransformerOut {
    /// Final decoder states `[samples · n_key, dec.dim]`.
    pub decoded: Var,
    /// Cross-attention probabilities per decoder layer.
    pub cross_attention: Vec<AttentionVars>,
}

/// `tokens` is `[samples · n_key, 4c′]`; `pe_p`, `pe_q` are the keypoint encodings.
pub(crate) fn transformer<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    tokens: Var,
    pe_p: Var,
    pe_q: Var,
    samples: usize,
) -> Result<TransformerOut> {
    let n = cfg.n_key;
    let tok = linear(g, s, "enc.tok", tokens)?;
    let pos = linear(g, s, "enc.pos", pe_p)?;
    let mut x = g.add(tok, pos)?;
    let pe = cfg.enc.dropout;
    for l in 0..cfg.enc.layers {
        let p = format!("enc.l{l}");
        let site = 100 + 10 * l as u64;
        let h = norm(g, s, &format!("{p}.ln1"), x)?;
        let (a, _) = attention(g, s, &format!("{p}.attn"), h, h, samples, n, cfg.enc.heads)?;
        x = residual(g, x, a, pe, site)?;
        let h = norm(g, s, &format!("{p}.ln2"), x)?;
        let f = ffn(g, s, &p, h, pe, site + 1)?;
        x = residual(g, x, f, pe, site + 2)?;
    }
    let memory = norm(g, s, "enc.norm", x)?;

    let mut y = linear(g, s, "dec.query", pe_q)?;
    let pd = cfg.dec.dropout;
    let mut cross_attention = Vec::with_capacity(cfg.dec.layers);
    for l in 0..cfg.dec.layers {
        let p = format!("dec.l{l}");
        let site = 1000 + 10 * l as u64;
        let h = norm(g, s, &format!("{p}.ln1"), y)?;
        let (a, _) = attention(g, s, &format!("{p}.self"), h, h, samples, n, cfg.dec.heads)?;
        y = residual(g, y, a, pd, site)?;
        let h = norm(g, s, &format!("{p}.ln2"), y)?;
        let (c, maps) = attention(
            g,
            s,
            &format!("{p}.cross"),
            h,
            memory,
            samples,
            n,
            cfg.dec.heads,
        )?;
        cross_attention.push(maps);
        y = residual(g, y, c, pd, site + 1)?;
        let h = norm(g, s, &format!("{p}.ln3"), y)?;
        let f = ffn(g, s, &p, h, pd, site + 2)?;
        y = residual(g, y, f, pd, site + 3)?;
    }
    let decoded = norm(g, s, "dec.norm", y)?;
    Ok(TransformerOut {
        decoded,
        cross_attention,
    })
}
