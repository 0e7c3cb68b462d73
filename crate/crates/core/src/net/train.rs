//! Supervised training loop.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::NetConfig;
use super::model::{
    check_compatible, forward_batch, init_network, loss_on_graph, prepare_pair, Eliot, PreparedPair,
};
use crate::cloud_io::{sample_rigid, PointCloud};
use crate::diff::{
    load_checkpoint, save_checkpoint, Adam, AdamConfig, Graph, Mode, ParamStore, Real,
};
use crate::error::{Error, Result};
use crate::rigid::PoseMatrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Per-axis bound of the random translation applied to target clouds, meters.
    pub augment_translation: f64,
    /// Bound of the random rotation applied to target clouds, radians.
    pub augment_rotation: f64,
    /// Epochs between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub lr_schedule: LrSchedule,
    /// Learning rate reached by the last epoch under the cosine schedule.
    pub lr_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from `lr` to `lr_min` across the epochs.
    Cosine,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 4,
            lr: 1e-4,
            seed: 0,
            augment_translation: 0.0,
            augment_rotation: 0.0,
            checkpoint_every: 0,
            lr_schedule: LrSchedule::Constant,
            lr_min: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config(format!(
                "lr_min = {} must lie in [0, lr]",
                self.lr_min
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.lr)));
        }
        if !(self.augment_translation >= 0.0 && self.augment_rotation >= 0.0) {
            return Err(Error::Config(
                "augmentation bounds must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let span = self.epochs.saturating_sub(1).max(1) as f64;
                let t = (epoch as f64 / span).min(1.0);
                self.lr_min
                    + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    fn augments(&self) -> bool {
        self.augment_translation > 0.0 || self.augment_rotation > 0.0
    }
}

/// One training pair: `label` maps target-frame (`q`) coordinates into the source frame (`p`).
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub p: PointCloud,
    pub q: PointCloud,
    pub label: PoseMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub real: f64,
    pub dual: f64,
}

/// Rotation (degrees) and translation (meters) error of a prediction.
pub fn pose_error(pred: &PoseMatrix, gt: &PoseMatrix) -> (f64, f64) {
    let e = gt.inverse().compose(pred);
    (e.rotation_angle().to_degrees(), e.translation().norm())
}

pub struct Trainer<T: Real> {
    pub net: NetConfig,
    pub train: TrainConfig,
    pub params: ParamStore<T>,
    pub adam: Adam<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Next epoch to run.
    pub epoch: usize,
    cache: Vec<Option<PreparedPair>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(net: NetConfig, train: TrainConfig) -> Result<Self> {
        train.validate()?;
        let params = init_network(&net, train.seed)?;
        let adam = Adam::new(adam_config(&train), &params);
        Ok(Trainer {
            net,
            train,
            params,
            adam,
            step: 0,
            epoch: 0,
            cache: Vec::new(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(net: NetConfig, train: TrainConfig, path: &Path) -> Result<Self> {
        train.validate()?;
        net.validate()?;
        let ck = load_checkpoint::<T>(path)?;
        check_compatible(&net, &ck.params)?;
        let adam = match ck.adam {
            Some(mut a) => {
                a.config = adam_config(&train);
                a
            }
            None => Adam::new(adam_config(&train), &ck.params),
        };
        let read = |key: &str| -> Result<u64> {
            ck.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("checkpoint metadata lacks `{key}`")))
        };
        Ok(Trainer {
            params: ck.params,
            adam,
            step: read("step")?,
            epoch: read("epoch")? as usize,
            net,
            train,
            cache: Vec::new(),
        })
    }

    pub fn model(&self) -> Eliot<T> {
        Eliot {
            cfg: self.net.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("step".into(), self.step.to_string());
        meta.insert("epoch".into(), self.epoch.to_string());
        let net = toml::to_string(&self.net).map_err(|e| Error::Config(e.to_string()))?;
        meta.insert("net_config".into(), net);
        save_checkpoint(path, &self.params, Some(&self.adam), &meta)
    }

    /// Sample order of `epoch`, a deterministic function of (seed, epoch).
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut r = rng::stream(rng::mix(self.train.seed, 0x5eed), epoch as u64);
        order.shuffle(&mut r);
        order
    }

    fn prepared(
        &mut self,
        samples: &[TrainSample],
        idx: usize,
        epoch: usize,
    ) -> Result<(PreparedPair, PoseMatrix)> {
        let s = &samples[idx];
        if !self.train.augments() {
            if self.cache.len() != samples.len() {
                self.cache = vec![None; samples.len()];
            }
            if self.cache[idx].is_none() {
                self.cache[idx] = Some(prepare_pair(&s.p, &s.q, &self.net)?);
            }
            return Ok((self.cache[idx].clone().expect("cached"), s.label));
        }
        // Q' = A Q, so the label becomes T A⁻¹.
        let key = rng::mix(rng::mix(self.train.seed, epoch as u64), idx as u64);
        let mut r = rng::stream(key, 0xa6);
        let a = sample_rigid(
            &mut r,
            self.train.augment_translation,
            self.train.augment_rotation,
        );
        let q = s.q.transformed(&a);
        Ok((
            prepare_pair(&s.p, &q, &self.net)?,
            s.label.compose(&a.inverse()),
        ))
    }

    /// One optimizer step on the given sample indices.
    pub fn step_on(
        &mut self,
        samples: &[TrainSample],
        batch: &[usize],
        epoch: usize,
    ) -> Result<StepStats> {
        let mut pairs = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for &i in batch {
            let (p, l) = self.prepared(samples, i, epoch)?;
            pairs.push(p);
            labels.push(l.to_dual_quaternion());
        }
        let refs: Vec<&PreparedPair> = pairs.iter().collect();
        let mut g = Graph::with_seed(Mode::Train, self.train.seed, self.step);
        let out = forward_batch(&mut g, &self.params, &self.net, &refs)?;
        let loss = loss_on_graph(&mut g, out.raw, &labels, self.net.lambda_dual)?;
        let stats = StepStats {
            step: self.step,
            epoch,
            total: g.value(loss.total).data()[0].as_f64(),
            real: g.value(loss.real).data()[0].as_f64(),
            dual: g.value(loss.dual).data()[0].as_f64(),
        };
        let grads = g.backward(loss.total)?;
        self.params.zero_grad();
        grads.accumulate_into(&mut self.params);
        self.adam.step(&mut self.params)?;
        self.params.apply_buffer_updates(g.take_buffer_updates())?;
        self.step += 1;
        Ok(stats)
    }

    /// Runs one epoch of mini-batches.
    pub fn run_epoch(&mut self, samples: &[TrainSample]) -> Result<Vec<StepStats>> {
        if samples.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let epoch = self.epoch;
        let order = self.epoch_order(samples.len(), epoch);
        self.adam.config.lr = self.train.lr_at(epoch);
        let mut stats = Vec::new();
        for batch in order.chunks(self.train.batch_size) {
            stats.push(self.step_on(samples, batch, epoch)?);
        }
        self.epoch += 1;
        Ok(stats)
    }

    /// Eval-mode (rotation degrees, translation meters) error per sample, without augmentation.
    pub fn evaluate(&self, samples: &[TrainSample]) -> Result<Vec<(f64, f64)>> {
        let model = self.model();
        samples
            .iter()
            .map(|s| {
                let pred = model.predict(&s.p, &s.q)?;
                Ok(pose_error(&pred.pose, &s.label))
            })
            .collect()
    }
}

fn adam_config(train: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: train.lr,
        ..AdamConfig::default()
    }
}

/// `count` synthetic pairs: scene `i` is drawn with seed `seed + i` and its
/// target is the scene under a random rigid motion; labels are the inverse motions.
pub fn synth_pairs(
    count: usize,
    scene: &crate::cloud_io::SceneSpec,
    max_translation: f64,
    max_rotation: f64,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let spec = crate::cloud_io::SceneSpec {
                seed: rng::mix(seed, 2 * i as u64),
                ..scene.clone()
            };
            let p = crate::cloud_io::synth_scene(&spec)?;
            let params = crate::cloud_io::AugmentParams {
                max_translation,
                max_rotation,
                seed: rng::mix(seed, 2 * i as u64 + 1),
            };
            let (q, a) = crate::cloud_io::augment_pair(&p, &params)?;
            Ok(TrainSample {
                p,
                q,
                label: a.inverse(),
            })
        })
        .collect()
}
