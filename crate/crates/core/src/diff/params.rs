use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::BufferUpdate;
use super::Real;
use crate::error::{Error, Result};
use crate::rng;

/// A named array of learnable weights or non-trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    pub trainable: bool,
}

impl<T: Real> ParamArray<T> {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        values: Vec<T>,
        trainable: bool,
    ) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::Shape {
                op: "param",
                lhs: shape,
                rhs: vec![values.len()],
            });
        }
        let grad = vec![T::zero(); values.len()];
        Ok(ParamArray {
            name,
            shape,
            values,
            grad,
            trainable,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Layer descriptions understood by [`init_params`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `{name}.weight` of shape `[fan_in, fan_out]` and `{name}.bias` of `[fan_out]`.
    Linear {
        name: String,
        fan_in: usize,
        fan_out: usize,
    },
    /// `{name}.gamma`, `.beta`, and non-trainable `.running_mean`, `.running_var`.
    BatchNorm { name: String, channels: usize },
    /// `{name}.gamma` (ones) and `{name}.beta` (zeros).
    Affine { name: String, channels: usize },
    /// Non-trainable `{name}` with entries drawn from N(0, std²).
    Gaussian {
        name: String,
        shape: Vec<usize>,
        std: f64,
    },
}

impl LayerSpec {
    pub fn linear(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        LayerSpec::Linear {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn batch_norm(name: impl Into<String>, channels: usize) -> Self {
        LayerSpec::BatchNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn affine(name: impl Into<String>, channels: usize) -> Self {
        LayerSpec::Affine {
            name: name.into(),
            channels,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            LayerSpec::Linear { name, .. }
            | LayerSpec::BatchNorm { name, .. }
            | LayerSpec::Affine { name, .. }
            | LayerSpec::Gaussian { name, .. } => name,
        }
    }
}

/// Ordered collection of parameter arrays with lookup by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    arrays: Vec<ParamArray<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            arrays: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, array: ParamArray<T>) -> Result<usize> {
        if self.index.contains_key(&array.name) {
            return Err(Error::Config(format!(
                "duplicate parameter `{}`",
                array.name
            )));
        }
        let i = self.arrays.len();
        self.index.insert(array.name.clone(), i);
        self.arrays.push(array);
        Ok(i)
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn array(&self, i: usize) -> &ParamArray<T> {
        &self.arrays[i]
    }

    pub fn array_mut(&mut self, i: usize) -> &mut ParamArray<T> {
        &mut self.arrays[i]
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray<T>> {
        self.index_of(name).map(|i| &self.arrays[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray<T>> {
        self.index_of(name).map(move |i| &mut self.arrays[i])
    }

    pub fn arrays(&self) -> &[ParamArray<T>] {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut [ParamArray<T>] {
        &mut self.arrays
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.arrays
            .iter()
            .filter(|a| a.trainable)
            .map(|a| a.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for a in &mut self.arrays {
            a.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<BufferUpdate<T>>) -> Result<()> {
        for u in updates {
            let a = self
                .get_mut(&u.name)
                .ok_or_else(|| Error::Config(format!("missing buffer `{}`", u.name)))?;
            if a.values.len() != u.values.len() {
                return Err(Error::Shape {
                    op: "buffer_update",
                    lhs: a.shape.clone(),
                    rhs: vec![u.values.len()],
                });
            }
            a.values = u.values;
        }
        Ok(())
    }

    /// Element-type conversion, gradients reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for a in &self.arrays {
            let values = a.values.iter().map(|v| U::lit(v.as_f64())).collect();
            out.insert(
                ParamArray::new(a.name.clone(), a.shape.clone(), values, a.trainable)
                    .expect("shape preserved"),
            )
            .expect("names unique");
        }
        out
    }

    /// Overwrites values from another store with the same layout.
    pub fn copy_values_from<U: Real>(&mut self, other: &ParamStore<U>) -> Result<()> {
        for a in &mut self.arrays {
            let src = other
                .get(&a.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", a.name)))?;
            if src.shape != a.shape {
                return Err(Error::Shape {
                    op: "copy_values",
                    lhs: a.shape.clone(),
                    rhs: src.shape.clone(),
                });
            }
            for (d, s) in a.values.iter_mut().zip(&src.values) {
                *d = T::lit(s.as_f64());
            }
        }
        Ok(())
    }
}

fn name_stream(seed: u64, name: &str) -> rand_chacha::ChaCha8Rng {
    // FNV-1a over the layer name selects an independent stream.
    let h = name.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    rng::stream(seed, h)
}

/// Builds parameters for `specs`. Weights are uniform in ±√(6 / fan_in), biases
/// zero. Each layer draws from its own stream keyed by its name, so adding a
/// layer does not perturb the others.
pub fn init_params<T: Real>(specs: &[LayerSpec], seed: u64) -> Result<ParamStore<T>> {
    let mut store = ParamStore::new();
    for spec in specs {
        let mut r = name_stream(seed, spec.name());
        match spec {
            LayerSpec::Linear {
                name,
                fan_in,
                fan_out,
            } => {
                if *fan_in == 0 || *fan_out == 0 {
                    return Err(Error::Config(format!("layer `{name}` has a zero size")));
                }
                let bound = (6.0 / *fan_in as f64).sqrt();
                let w = (0..fan_in * fan_out)
                    .map(|_| T::lit(r.random_range(-bound..bound)))
                    .collect();
                store.insert(ParamArray::new(
                    format!("{name}.weight"),
                    vec![*fan_in, *fan_out],
                    w,
                    true,
                )?)?;
                store.insert(ParamArray::new(
                    format!("{name}.bias"),
                    vec![*fan_out],
                    vec![T::zero(); *fan_out],
                    true,
                )?)?;
            }
            LayerSpec::BatchNorm { name, channels: c }
            | LayerSpec::Affine { name, channels: c } => {
                if *c == 0 {
                    return Err(Error::Config(format!("layer `{name}` has a zero size")));
                }
                store.insert(ParamArray::new(
                    format!("{name}.gamma"),
                    vec![*c],
                    vec![T::one(); *c],
                    true,
                )?)?;
                store.insert(ParamArray::new(
                    format!("{name}.beta"),
                    vec![*c],
                    vec![T::zero(); *c],
                    true,
                )?)?;
                if matches!(spec, LayerSpec::BatchNorm { .. }) {
                    store.insert(ParamArray::new(
                        format!("{name}.running_mean"),
                        vec![*c],
                        vec![T::zero(); *c],
                        false,
                    )?)?;
                    store.insert(ParamArray::new(
                        format!("{name}.running_var"),
                        vec![*c],
                        vec![T::one(); *c],
                        false,
                    )?)?;
                }
            }
            LayerSpec::Gaussian { name, shape, std } => {
                let normal = Normal::new(0.0, *std)
                    .map_err(|e| Error::Config(format!("layer `{name}`: {e}")))?;
                let n: usize = shape.iter().product();
                let v = (0..n).map(|_| T::lit(normal.sample(&mut r))).collect();
                store.insert(ParamArray::new(name.clone(), shape.clone(), v, false)?)?;
            }
        }
    }
    Ok(store)
}
