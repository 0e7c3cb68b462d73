use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Adam, AdamConfig, ParamArray, ParamStore, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

const STORAGE_ORDER: &str =
    "row-major arrays; linear weights [fan_in, fan_out]; dual quaternions (real w x y z, dual w x y z)";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    storage_order: String,
    blob: String,
    blob_bytes: usize,
    adam_step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam: Option<AdamConfig>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    arrays: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    kind: String,
}

/// Parameters, optimizer state and free-form metadata restored from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub adam: Option<Adam<T>>,
    pub meta: BTreeMap<String, String>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Writes `path` (TOML manifest) and a sibling `.bin` blob of little-endian values.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &ParamStore<T>,
    adam: Option<&Adam<T>>,
    meta: &BTreeMap<String, String>,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut arrays = Vec::new();
    let mut emit = |name: &str, shape: &[usize], kind: &str, values: &[T], blob: &mut Vec<u8>| {
        arrays.push(Entry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: blob.len(),
            kind: kind.to_string(),
        });
        for v in values {
            v.write_le(blob);
        }
    };
    for a in params.arrays() {
        let kind = if a.trainable { "param" } else { "buffer" };
        emit(&a.name, &a.shape, kind, &a.values, &mut blob);
    }
    if let Some(opt) = adam {
        let (m, v) = opt.moments();
        for (i, a) in params.arrays().iter().enumerate() {
            if a.trainable {
                emit(&a.name, &a.shape, "adam_m", &m[i], &mut blob);
                emit(&a.name, &a.shape, "adam_v", &v[i], &mut blob);
            }
        }
    }
    let blob_file = blob_path(path);
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        storage_order: STORAGE_ORDER.to_string(),
        blob: blob_file
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len(),
        adam_step: adam.map_or(0, |a| a.steps()),
        adam: adam.map(|a| a.config),
        meta: meta.clone(),
        arrays,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::MalformedFile {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    write_atomic(&blob_file, &blob)?;
    write_atomic(path, text.as_bytes())
}

fn decode<S: Real, T: Real>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(S::BYTES)
        .map(|c| T::lit(S::read_le(c).as_f64()))
        .collect()
}

/// Reads a checkpoint written by [`save_checkpoint`], converting to `T` if the
/// stored dtype differs.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    let malformed = |reason: String| Error::MalformedFile {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(malformed(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let bytes_per = match manifest.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(malformed(format!("unknown dtype `{other}`"))),
    };
    let blob_file = path.with_file_name(&manifest.blob);
    let blob = fs::read(&blob_file).map_err(|e| Error::io(&blob_file, e))?;
    if blob.len() != manifest.blob_bytes {
        return Err(malformed(format!(
            "blob holds {} bytes, manifest expects {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut params = ParamStore::new();
    let mut moments: BTreeMap<(String, bool), Vec<T>> = BTreeMap::new();
    for e in &manifest.arrays {
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * bytes_per;
        if end > blob.len() {
            return Err(malformed(format!(
                "array `{}` extends past the blob",
                e.name
            )));
        }
        let raw = &blob[e.offset..end];
        let values: Vec<T> = if bytes_per == 4 {
            decode::<f32, T>(raw)
        } else {
            decode::<f64, T>(raw)
        };
        match e.kind.as_str() {
            "param" | "buffer" => {
                params.insert(ParamArray::new(
                    e.name.clone(),
                    e.shape.clone(),
                    values,
                    e.kind == "param",
                )?)?;
            }
            "adam_m" | "adam_v" => {
                moments.insert((e.name.clone(), e.kind == "adam_m"), values);
            }
            other => return Err(malformed(format!("unknown array kind `{other}`"))),
        }
    }
    let adam = match manifest.adam {
        None => None,
        Some(config) => {
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for a in params.arrays() {
                let zeros = || vec![T::zero(); a.numel()];
                if a.trainable {
                    let take = |first: bool| {
                        moments
                            .get(&(a.name.clone(), first))
                            .cloned()
                            .ok_or_else(|| {
                                malformed(format!("missing optimizer state for `{}`", a.name))
                            })
                    };
                    m.push(take(true)?);
                    v.push(take(false)?);
                } else {
                    m.push(zeros());
                    v.push(zeros());
                }
            }
            Some(Adam::from_parts(config, m, v, manifest.adam_step))
        }
    };
    Ok(Checkpoint {
        params,
        adam,
        meta: manifest.meta,
    })
}
