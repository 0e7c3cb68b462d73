use rayon::prelude::*;

use super::config::{FlowMethod, NetConfig, PeMethod};
use super::encoding::{encode_keypoints, GAUSS_BUFFER};
use super::flow::{irfe, irfe_specs, knn_embed, knn_specs};
use super::head::{final_layer, head_specs, pose_head};
use super::sa::{abstract_batch, prepare_cloud, sa_specs, PreparedCloud};
use super::transformer::{transformer, transformer_specs};
use crate::cloud_io::PointCloud;
use crate::diff::{init_params, Graph, LayerSpec, Mode, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::rigid::{dq_normalize, dq_to_matrix, DualQuaternion, PoseMatrix};

/// Every parameter array of the network for `cfg`.
pub fn network_specs(cfg: &NetConfig) -> Vec<LayerSpec> {
    let mut out = Vec::new();
    sa_specs(cfg, &mut out);
    match cfg.flow.method {
        FlowMethod::Irfe => irfe_specs(cfg, &mut out),
        FlowMethod::Knn => knn_specs(cfg, &mut out),
    }
    if cfg.pe.method == PeMethod::Gauss {
        out.push(LayerSpec::Gaussian {
            name: GAUSS_BUFFER.to_string(),
            shape: vec![3 * cfg.pe.bands, 3],
            std: cfg.pe.gauss_scale,
        });
    }
    transformer_specs(cfg, &mut out);
    head_specs(cfg, &mut out);
    out
}

/// Scale applied to the head output weights at initialization.
pub const OUTPUT_INIT_SCALE: f64 = 1e-2;

/// Seeded parameters. The head output starts close to the identity dual
/// quaternion: its bias is the identity and its weights are shrunk by
/// [`OUTPUT_INIT_SCALE`].
pub fn init_network<T: Real>(cfg: &NetConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = init_params(&network_specs(cfg), seed)?;
    let last = final_layer(cfg);
    let w = store
        .get_mut(&format!("{last}.weight"))
        .expect("head output layer exists");
    w.values
        .iter_mut()
        .for_each(|v| *v = *v * T::lit(OUTPUT_INIT_SCALE));
    let bias = store
        .get_mut(&format!("{last}.bias"))
        .expect("head output layer exists");
    bias.values = DualQuaternion::IDENTITY
        .to_array()
        .iter()
        .map(|&v| T::lit(v))
        .collect();
    Ok(store)
}

/// Checks that `store` holds exactly the arrays `cfg` needs, with matching shapes.
pub fn check_compatible<T: Real>(cfg: &NetConfig, store: &ParamStore<T>) -> Result<()> {
    let expected: ParamStore<f32> = init_params(&network_specs(cfg), 0)?;
    for a in expected.arrays() {
        match store.get(&a.name) {
            None => {
                return Err(Error::Config(format!(
                    "checkpoint lacks `{}` required by the config",
                    a.name
                )))
            }
            Some(b) if b.shape != a.shape => {
                return Err(Error::Config(format!(
                    "`{}` has shape {:?} in the checkpoint but {:?} under the config",
                    a.name, b.shape, a.shape
                )))
            }
            Some(_) => {}
        }
    }
    if store.len() != expected.len() {
        return Err(Error::Config(format!(
            "checkpoint holds {} arrays, config expects {}",
            store.len(),
            expected.len()
        )));
    }
    Ok(())
}

/// Source and target geometry of one pair, resolved ahead of the network pass.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub p: PreparedCloud,
    pub q: PreparedCloud,
}

pub fn prepare_pair(p: &PointCloud, q: &PointCloud, cfg: &NetConfig) -> Result<PreparedPair> {
    let (p, q) = rayon::join(|| prepare_cloud(p, cfg), || prepare_cloud(q, cfg));
    Ok(PreparedPair { p: p?, q: q? })
}

pub fn prepare_pairs(
    pairs: &[(&PointCloud, &PointCloud)],
    cfg: &NetConfig,
) -> Result<Vec<PreparedPair>> {
    pairs
        .par_iter()
        .map(|(p, q)| prepare_pair(p, q, cfg))
        .collect()
}

/// Values recorded by one batched forward pass.
pub struct ForwardOut {
    /// Raw `[pairs, 8]` head output.
    pub raw: Var,
    /// Decoder states `[pairs · n_key, dec.dim]`.
    pub decoded: Var,
    /// Flow tokens `[pairs · n_key, 4c′]`.
    pub tokens: Var,
    /// `[layer][pair][head]` cross-attention probabilities, `[queries, keys]` each.
    pub(crate) cross_attention: Vec<Vec<Vec<Var>>>,
}

/// Batched forward pass. Source and target clouds of all pairs share one set
/// abstraction pass, so batch-norm statistics cover the whole batch.
pub fn forward_batch<T: Real>(
    g: &mut Graph<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    pairs: &[&PreparedPair],
) -> Result<ForwardOut> {
    if pairs.is_empty() {
        return Err(Error::invalid("forward pass over zero pairs"));
    }
    let b = pairs.len();
    let k = cfg.n_key;
    let c = cfg.feature_width();
    let clouds: Vec<&PreparedCloud> = pairs
        .iter()
        .map(|p| &p.p)
        .chain(pairs.iter().map(|p| &p.q))
        .collect();
    let feats = abstract_batch(g, s, cfg, &clouds)?;
    let f = g.slice(feats, 0, 0, b * k)?;
    let gq = g.slice(feats, 0, b * k, b * k)?;
    let kps_p: Vec<_> = pairs.iter().map(|p| p.p.keypoints.clone()).collect();
    let kps_q: Vec<_> = pairs.iter().map(|p| p.q.keypoints.clone()).collect();
    let pe_p = g.constant(encode_keypoints(&kps_p, cfg, s)?)?;
    let pe_q = g.constant(encode_keypoints(&kps_q, cfg, s)?)?;
    let tokens = match cfg.flow.method {
        FlowMethod::Irfe => irfe(g, s, pe_p, pe_q, f, gq)?,
        FlowMethod::Knn => knn_embed(g, s, cfg, &kps_p, &kps_q, f, gq)?,
    };
    debug_assert_eq!(g.shape(tokens), &[b * k, 4 * c]);
    let out = transformer(g, s, cfg, tokens, pe_p, pe_q, b)?;
    let raw = pose_head(g, s, cfg, out.decoded, b)?;
    Ok(ForwardOut {
        raw,
        decoded: out.decoded,
        tokens,
        cross_attention: out.cross_attention,
    })
}

/// Loss terms recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub real: Var,
    pub dual: Var,
}

/// `mean ‖r̂/‖r̂‖ − r‖ + λ · mean ‖d̂ − d‖` against canonical ground truth.
pub fn loss_on_graph<T: Real>(
    g: &mut Graph<T>,
    raw: Var,
    gt: &[DualQuaternion],
    lambda_dual: f64,
) -> Result<LossVars> {
    let b = gt.len();
    if g.shape(raw) != [b, 8] {
        return Err(Error::Shape {
            op: "loss",
            lhs: g.shape(raw).to_vec(),
            rhs: vec![b, 8],
        });
    }
    let mut real_gt = Vec::with_capacity(4 * b);
    let mut dual_gt = Vec::with_capacity(4 * b);
    for d in gt {
        let a = d.canonical().to_array();
        real_gt.extend_from_slice(&a[..4]);
        dual_gt.extend_from_slice(&a[4..]);
    }
    let rg = g.constant(Tensor::from_f64(vec![b, 4], &real_gt)?)?;
    let dg = g.constant(Tensor::from_f64(vec![b, 4], &dual_gt)?)?;
    let pr = g.slice(raw, 1, 0, 4)?;
    let pd = g.slice(raw, 1, 4, 4)?;
    let prn = g.row_normalize(pr)?;
    let mean_norm = |g: &mut Graph<T>, a: Var, b_: Var| -> Result<Var> {
        let d = g.sub(a, b_)?;
        let n = g.row_norm(d)?;
        let n = g.reshape(n, &[1, b])?;
        let m = g.mean(n, 1)?;
        g.reshape(m, &[1])
    };
    let real = mean_norm(g, prn, rg)?;
    let dual = mean_norm(g, pd, dg)?;
    let wd = g.scale(dual, T::lit(lambda_dual))?;
    let total = g.add(real, wd)?;
    Ok(LossVars { total, real, dual })
}

/// Head-averaged cross-attention of one decoder layer for one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub queries: usize,
    pub keys: usize,
    /// Row-major `[queries, keys]`; every row is a probability vector.
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.weights[q * self.keys..(q + 1) * self.keys]
    }
}

/// Head-averaged maps of pair `pair` from a forward record.
pub fn cross_attention_maps<T: Real>(
    g: &Graph<T>,
    out: &ForwardOut,
    pair: usize,
) -> Vec<AttentionMap> {
    out.cross_attention
        .iter()
        .enumerate()
        .map(|(layer, per_pair)| {
            let heads = &per_pair[pair];
            let shape = g.shape(heads[0]).to_vec();
            let mut weights = vec![0.0; shape[0] * shape[1]];
            for &h in heads {
                for (w, v) in weights.iter_mut().zip(g.value(h).data()) {
                    *w += v.as_f64();
                }
            }
            let inv = 1.0 / heads.len() as f64;
            weights.iter_mut().for_each(|w| *w *= inv);
            AttentionMap {
                layer,
                queries: shape[0],
                keys: shape[1],
                weights,
            }
        })
        .collect()
}

/// Inference result for one pair.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Unit dual quaternion of the transform mapping target-frame coordinates into the source frame.
    pub dq: DualQuaternion,
    pub pose: PoseMatrix,
    pub raw: [f64; 8],
    pub attention: Vec<AttentionMap>,
}

/// An initialized or restored network.
#[derive(Debug, Clone)]
pub struct Eliot<T: Real> {
    pub cfg: NetConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Eliot<T> {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        let params = init_network(&cfg, seed)?;
        Ok(Eliot { cfg, params })
    }

    pub fn from_params(cfg: NetConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_compatible(&cfg, &params)?;
        Ok(Eliot { cfg, params })
    }

    /// Eval-mode pose of `q` relative to `p`, with cross-attention maps.
    pub fn predict_prepared(&self, pair: &PreparedPair) -> Result<Prediction> {
        let mut g = Graph::new(Mode::Eval);
        let out = forward_batch(&mut g, &self.params, &self.cfg, &[pair])?;
        let r = g.value(out.raw).to_f64();
        let raw: [f64; 8] = r.as_slice().try_into().expect("8 outputs");
        let dq = dq_normalize(&DualQuaternion::from_slice(&raw)?)?;
        let pose = dq_to_matrix(&dq)?;
        Ok(Prediction {
            dq,
            pose,
            raw,
            attention: cross_attention_maps(&g, &out, 0),
        })
    }

    pub fn predict(&self, p: &PointCloud, q: &PointCloud) -> Result<Prediction> {
        self.predict_prepared(&prepare_pair(p, q, &self.cfg)?)
    }
}
