use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flow-embedding layer feeding the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMethod {
    /// Positional encodings of both keypoint sets concatenated with their features.
    Irfe,
    /// Nearest-neighbor grouping of target keypoints around each source keypoint.
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMethod {
    /// Sines and cosines at frequencies 2⁰ … 2^(L−1).
    Fourier,
    /// Random Gaussian frequency matrix, seeded and stored with the parameters.
    Gauss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaConfig {
    /// Grouping radii in meters, strictly increasing.
    pub radii: Vec<f64>,
    /// Per-radius shared MLP output widths.
    pub mlps: Vec<Vec<usize>>,
    /// Neighbors gathered per keypoint and radius.
    pub max_samples: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PeConfig {
    /// Number of frequency bands.
    #[serde(rename = "L")]
    pub bands: usize,
    pub method: PeMethod,
    /// Rescales coordinates by `π / bound` before encoding.
    pub normalize: bool,
    /// Coordinate magnitude mapped to π when normalizing, in meters.
    pub bound: f64,
    pub gauss_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub method: FlowMethod,
    /// Neighbors per keypoint for the nearest-neighbor embedding.
    pub n_group: usize,
    /// Hidden widths of the nearest-neighbor embedding MLP; a final layer of
    /// width 4·c′ is always appended.
    pub mlp: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Per-token layer sizes, input width first (must equal `dec.dim`).
    pub mlp_pn: Vec<usize>,
    /// Pooled-vector layer sizes, input width first, output width 8 last.
    pub mlp_fc: Vec<usize>,
}

/// Network hyperparameters. Serialized as nested tables, so a config file can
/// use dotted keys such as `enc.layers = 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub n_key: usize,
    /// Per-point feature channels of the input clouds.
    pub in_channels: usize,
    pub sa: SaConfig,
    pub pe: PeConfig,
    pub flow: FlowConfig,
    pub enc: EncConfig,
    pub dec: DecConfig,
    pub head: HeadConfig,
    pub lambda_dual: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig::table_one()
    }
}

impl NetConfig {
    /// The full-scale KITTI reference configuration.
    pub fn table_one() -> Self {
        NetConfig {
            n_key: 1024,
            in_channels: 1,
            sa: SaConfig {
                radii: vec![0.5, 1.0],
                mlps: vec![vec![16, 16, 32], vec![16, 16, 32]],
                max_samples: vec![16, 32],
            },
            pe: PeConfig {
                bands: 64,
                method: PeMethod::Fourier,
                normalize: true,
                bound: 80.0,
                gauss_scale: 1.0,
            },
            flow: FlowConfig {
                method: FlowMethod::Irfe,
                n_group: 16,
                mlp: vec![128],
            },
            enc: EncConfig {
                layers: 3,
                dim: 256,
                heads: 4,
                ffn: 16,
                dropout: 0.1,
                activation: Activation::Relu,
            },
            dec: DecConfig {
                layers: 3,
                dim: 256,
                heads: 2,
                ffn: 16,
                dropout: 0.1,
                queries: 1024,
            },
            head: HeadConfig {
                mlp_pn: vec![256, 512, 1024],
                mlp_fc: vec![1024, 512, 256, 8],
            },
            lambda_dual: 1.0,
        }
    }

    /// Desk-scale configuration: 64 keypoints, width 32 throughout, no dropout.
    pub fn tiny() -> Self {
        NetConfig {
            n_key: 64,
            in_channels: 1,
            sa: SaConfig {
                radii: vec![1.0, 2.0],
                mlps: vec![vec![16, 16], vec![16, 16]],
                max_samples: vec![8, 16],
            },
            pe: PeConfig {
                bands: 4,
                method: PeMethod::Fourier,
                normalize: true,
                bound: 16.0,
                gauss_scale: 1.0,
            },
            flow: FlowConfig {
                method: FlowMethod::Irfe,
                n_group: 8,
                mlp: vec![64],
            },
            enc: EncConfig {
                layers: 2,
                dim: 32,
                heads: 2,
                ffn: 32,
                dropout: 0.0,
                activation: Activation::Relu,
            },
            dec: DecConfig {
                layers: 2,
                dim: 32,
                heads: 2,
                ffn: 32,
                dropout: 0.0,
                queries: 64,
            },
            head: HeadConfig {
                mlp_pn: vec![32, 64],
                mlp_fc: vec![64, 32, 8],
            },
            lambda_dual: 1.0,
        }
    }

    /// Width c′ of the abstracted keypoint features.
    pub fn feature_width(&self) -> usize {
        self.sa.mlps.iter().map(|m| *m.last().unwrap_or(&0)).sum()
    }

    /// Width of one flow token, 4·c′.
    pub fn token_width(&self) -> usize {
        4 * self.feature_width()
    }

    /// Width of the positional encoding of one point, 3·(2L+1).
    pub fn pe_width(&self) -> usize {
        3 * (2 * self.pe.bands + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_key == 0 {
            return bad("n_key must be at least 1".into());
        }
        let nr = self.sa.radii.len();
        if nr == 0 || self.sa.mlps.len() != nr || self.sa.max_samples.len() != nr {
            return bad(format!(
                "sa.radii, sa.mlps and sa.max_samples need equal non-zero lengths (got {}, {}, {})",
                nr,
                self.sa.mlps.len(),
                self.sa.max_samples.len()
            ));
        }
        if self.sa.radii.iter().any(|r| !(r.is_finite() && *r > 0.0))
            || self.sa.radii.windows(2).any(|w| w[1] <= w[0])
        {
            return bad(format!(
                "sa.radii must be positive and strictly increasing: {:?}",
                self.sa.radii
            ));
        }
        let widths = self
            .sa
            .mlps
            .iter()
            .flatten()
            .chain(&self.sa.max_samples)
            .chain(&self.flow.mlp)
            .chain(&self.head.mlp_pn)
            .chain(&self.head.mlp_fc)
            .chain([
                &self.enc.dim,
                &self.enc.ffn,
                &self.dec.dim,
                &self.dec.ffn,
                &self.flow.n_group,
                &self.pe.bands,
            ]);
        let mut any_zero = false;
        for w in widths {
            any_zero |= *w == 0;
        }
        if any_zero || self.sa.mlps.iter().any(|m| m.is_empty()) {
            return bad("all widths, sample counts and band counts must be at least 1".into());
        }
        if self.enc.layers == 0 || self.dec.layers == 0 {
            return bad("enc.layers and dec.layers must be at least 1".into());
        }
        for (name, dim, heads) in [
            ("enc", self.enc.dim, self.enc.heads),
            ("dec", self.dec.dim, self.dec.heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return bad(format!(
                    "{name}.heads = {heads} does not divide {name}.dim = {dim}"
                ));
            }
        }
        for (name, p) in [("enc", self.enc.dropout), ("dec", self.dec.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name}.dropout = {p} outside [0, 1)"));
            }
        }
        if self.dec.queries != self.n_key {
            return bad(format!(
                "dec.queries = {} must equal n_key = {}",
                self.dec.queries, self.n_key
            ));
        }
        if self.flow.n_group > self.n_key {
            return bad(format!(
                "flow.n_group = {} exceeds n_key = {}",
                self.flow.n_group, self.n_key
            ));
        }
        if self.pe.normalize && !(self.pe.bound.is_finite() && self.pe.bound > 0.0) {
            return bad(format!(
                "pe.bound = {} must be finite and positive",
                self.pe.bound
            ));
        }
        if self.pe.method == PeMethod::Gauss
            && !(self.pe.gauss_scale.is_finite() && self.pe.gauss_scale > 0.0)
        {
            return bad(format!(
                "pe.gauss_scale = {} must be positive",
                self.pe.gauss_scale
            ));
        }
        let (pn, fc) = (&self.head.mlp_pn, &self.head.mlp_fc);
        if pn.len() < 2 || pn[0] != self.dec.dim {
            return bad(format!(
                "head.mlp_pn {pn:?} must start with dec.dim = {} and have a layer",
                self.dec.dim
            ));
        }
        if fc.len() < 2 || fc[0] != *pn.last().unwrap() || *fc.last().unwrap() != 8 {
            return bad(format!(
                "head.mlp_fc {fc:?} must start with {} and end with 8",
                pn.last().unwrap()
            ));
        }
        if !(self.lambda_dual.is_finite() && self.lambda_dual >= 0.0) {
            return bad(format!(
                "lambda_dual = {} must be non-negative",
                self.lambda_dual
            ));
        }
        Ok(())
    }
}
