//! Run configuration: one flat dotted-key TOML namespace.
//!
//! Network keys (`n_key`, `sa.radii`, `pe.L`, `enc.layers`, …) sit at the top
//! level and override the chosen preset. Run keys live under `data.`,
//! `train.`, `icp.` and `synth.`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use eliot_core::cloud_io::{SceneSpec, SequenceSpec};
use eliot_core::icp::{IcpMethod, IcpParams};
use eliot_core::net::{FlowMethod, NetConfig, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "eliot")]
    Eliot,
    #[serde(rename = "eliot-knn")]
    EliotKnn,
    #[serde(rename = "icp-po2po")]
    IcpPo2Po,
    #[serde(rename = "icp-po2pl")]
    IcpPo2Pl,
}

impl Method {
    pub const NAMES: [&'static str; 4] = ["eliot", "eliot-knn", "icp-po2po", "icp-po2pl"];

    pub fn parse(s: &str) -> Result<Method> {
        Ok(match s {
            "eliot" => Method::Eliot,
            "eliot-knn" => Method::EliotKnn,
            "icp-po2po" => Method::IcpPo2Po,
            "icp-po2pl" => Method::IcpPo2Pl,
            other => {
                return Err(crate::usage(format!(
                    "unknown method `{other}`; expected one of {:?}",
                    Method::NAMES
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Eliot => "eliot",
            Method::EliotKnn => "eliot-knn",
            Method::IcpPo2Po => "icp-po2po",
            Method::IcpPo2Pl => "icp-po2pl",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Method::Eliot | Method::EliotKnn)
    }

    pub fn flow(self) -> Option<FlowMethod> {
        match self {
            Method::Eliot => Some(FlowMethod::Irfe),
            Method::EliotKnn => Some(FlowMethod::Knn),
            _ => None,
        }
    }

    pub fn icp(self) -> Option<IcpMethod> {
        match self {
            Method::IcpPo2Po => Some(IcpMethod::PointToPoint),
            Method::IcpPo2Pl => Some(IcpMethod::PointToPlane),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-scale reference network.
    Table1,
    /// Desk-scale network (64 keypoints, width 32).
    Tiny,
}

impl Preset {
    pub fn config(self) -> NetConfig {
        match self {
            Preset::Table1 => NetConfig::table_one(),
            Preset::Tiny => NetConfig::tiny(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: Option<PathBuf>,
    pub train_sequences: Vec<String>,
    pub eval_sequences: Vec<String>,
    /// Keep at most this many points per scan by even striding; 0 keeps all.
    pub max_points: usize,
    /// Drop points closer than this (meters); 0 disables.
    pub min_range: f64,
    /// Drop points farther than this (meters); 0 disables.
    pub max_range: f64,
    /// Conjugate ground truth by each sequence's `calib.txt` extrinsic.
    pub use_calib: bool,
    /// Seconds between scans, used for speed bins.
    pub frame_period: f64,
}

fn seqs(r: std::ops::RangeInclusive<u32>) -> Vec<String> {
    r.map(|i| format!("{i:02}")).collect()
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            train_sequences: seqs(0..=6),
            eval_sequences: seqs(7..=10),
            max_points: 0,
            min_range: 0.0,
            max_range: 0.0,
            use_calib: false,
            frame_period: eliot_core::eval::DEFAULT_FRAME_PERIOD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcpSection {
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub max_correspondence_dist: f64,
    pub normal_k: usize,
    pub gating_levels: usize,
    /// Start each pair from the previous pair's estimate.
    pub warm_start: bool,
}

impl Default for IcpSection {
    fn default() -> Self {
        let p = IcpParams::default();
        IcpSection {
            max_iterations: p.max_iterations,
            convergence_tol: p.convergence_tol,
            max_correspondence_dist: p.max_correspondence_dist,
            normal_k: p.normal_k,
            gating_levels: p.gating_levels,
            warm_start: true,
        }
    }
}

impl IcpSection {
    pub fn params(&self) -> IcpParams {
        IcpParams {
            max_iterations: self.max_iterations,
            convergence_tol: self.convergence_tol,
            max_correspondence_dist: self.max_correspondence_dist,
            normal_k: self.normal_k,
            gating_levels: self.gating_levels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthMode {
    /// Independent scene pairs with labels.
    Pairs,
    /// One drive through a synthetic street with ground-truth poses.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub mode: SynthMode,
    pub pairs: usize,
    pub max_translation: f64,
    pub max_rotation_deg: f64,
    /// Sequence id written in sequence mode.
    pub sequence_id: String,
    pub scene: SceneSpec,
    pub sequence: SequenceSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: SynthMode::Pairs,
            pairs: 8,
            max_translation: 0.5,
            max_rotation_deg: 10.0,
            sequence_id: "00".into(),
            scene: SceneSpec::default(),
            sequence: SequenceSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub seed: u64,
    pub precision: Precision,
    pub preset: Preset,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub icp: IcpSection,
    pub synth: SynthConfig,
}

const RUN_KEYS: [&str; 8] = [
    "method",
    "seed",
    "precision",
    "preset",
    "data",
    "train",
    "icp",
    "synth",
];

fn take<T: serde::de::DeserializeOwned>(table: &mut toml::Table, key: &str) -> Result<Option<T>> {
    match table.remove(key) {
        None => Ok(None),
        Some(v) => Ok(Some(v.try_into().map_err(|e| {
            anyhow::Error::new(eliot_core::Error::Config(format!("`{key}`: {e}")))
        })?)),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let mut t: toml::Table = text
            .parse()
            .map_err(|e| anyhow::Error::new(eliot_core::Error::Config(format!("{e}"))))?;
        let method = match t.remove("method") {
            None => Method::Eliot,
            Some(toml::Value::String(s)) => Method::parse(&s)?,
            Some(other) => bail!(eliot_core::Error::Config(format!(
                "`method` must be a string, got {other}"
            ))),
        };
        let seed = take(&mut t, "seed")?.unwrap_or(0);
        let precision = take(&mut t, "precision")?.unwrap_or(Precision::F32);
        let preset: Preset = take(&mut t, "preset")?.unwrap_or(Preset::Table1);
        let train: TrainConfig = take(&mut t, "train")?.unwrap_or_default();
        let data = take(&mut t, "data")?.unwrap_or_default();
        let icp = take(&mut t, "icp")?.unwrap_or_default();
        let synth = take(&mut t, "synth")?.unwrap_or_default();
        debug_assert!(RUN_KEYS.iter().all(|k| !t.contains_key(*k)));
        let mut net = toml::Table::try_from(preset.config()).context("serializing preset")?;
        merge(&mut net, t);
        let net: NetConfig = toml::Value::Table(net).try_into().map_err(|e| {
            anyhow::Error::new(eliot_core::Error::Config(format!("network keys: {e}")))
        })?;
        let mut cfg = RunConfig {
            method,
            seed,
            precision,
            preset,
            net,
            train,
            data,
            icp,
            synth,
        };
        cfg.apply_seed(seed);
        cfg.apply_method(method);
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => RunConfig::from_toml(""),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| anyhow::Error::new(eliot_core::Error::io(p, e)))?;
                RunConfig::from_toml(&text).with_context(|| format!("config {}", p.display()))
            }
        }
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.synth.scene.seed = seed;
        self.synth.sequence.seed = seed;
    }

    pub fn apply_method(&mut self, method: Method) {
        self.method = method;
        if let Some(flow) = method.flow() {
            self.net.flow.method = flow;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        self.icp.params().validate()?;
        Ok(())
    }

    /// Snapshot for manifests: run keys as tables, network keys at the top level.
    pub fn to_toml(&self) -> Result<String> {
        let mut t = toml::Table::try_from(&self.net).context("serializing network config")?;
        let run = toml::Table::try_from(RunSnapshot {
            method: self.method,
            seed: self.seed,
            precision: self.precision,
            preset: self.preset,
            train: &self.train,
            data: &self.data,
            icp: &self.icp,
            synth: &self.synth,
        })
        .context("serializing run config")?;
        t.extend(run);
        Ok(toml::to_string(&t)?)
    }
}

#[derive(Serialize)]
struct RunSnapshot<'a> {
    method: Method,
    seed: u64,
    precision: Precision,
    preset: Preset,
    train: &'a TrainConfig,
    data: &'a DataConfig,
    icp: &'a IcpSection,
    synth: &'a SynthConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_network() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c.net, NetConfig::table_one());
        assert_eq!(c.method, Method::Eliot);
        assert_eq!((c.train.lr, c.train.batch_size, c.train.seed), (1e-4, 4, 0));
        assert_eq!(
            c.data.train_sequences.first().map(String::as_str),
            Some("00")
        );
        assert_eq!(c.data.eval_sequences.last().map(String::as_str), Some("10"));
    }

    #[test]
    fn dotted_keys_override_the_preset() {
        let c = RunConfig::from_toml(
            "preset = \"tiny\"\nmethod = \"eliot-knn\"\nseed = 5\nenc.layers = 3\npe.L = 6\ntrain.epochs = 2\ndata.max_points = 500\n",
        )
        .unwrap();
        assert_eq!(c.net.enc.layers, 3);
        assert_eq!(c.net.pe.bands, 6);
        assert_eq!(c.net.n_key, 64);
        assert_eq!(c.net.flow.method, FlowMethod::Knn);
        assert_eq!(
            (c.train.epochs, c.train.seed, c.synth.scene.seed),
            (2, 5, 5)
        );
        assert_eq!(c.data.max_points, 500);
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_methods_are_rejected() {
        assert!(RunConfig::from_toml("enc.layerz = 3").is_err());
        assert!(RunConfig::from_toml("train.epoch = 3").is_err());
        let e = RunConfig::from_toml("method = \"gicp\"").unwrap_err();
        assert!(crate::is_usage(&e));
    }
}
