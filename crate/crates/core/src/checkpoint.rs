//! Single-file array container used for model checkpoints and memory
//! snapshots.
//!
//! Layout (stable; all integers little-endian):
//!
//! ```text
//! bytes 0..8    magic "LUNACKP1"
//! bytes 8..16   u64: byte length N of the JSON manifest
//! bytes 16..16+N manifest JSON:
//!     { "version": 1,
//!       "extra": { ... string key/value metadata ... },
//!       "entries": [ {"name": ..., "dtype": "f32"|"f64",
//!                     "shape": [rows, cols], "offset": bytes-into-data} ] }
//! bytes 16+N..  data section: raw little-endian flat arrays at the stated
//!               offsets, in manifest order, densely packed
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::elem::{Dtype, Elem};
use crate::error::{Error, Result};
use crate::params::Parameters;

const MAGIC: &[u8; 8] = b"LUNACKP1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    extra: BTreeMap<String, String>,
    entries: Vec<ManifestEntry>,
}

/// A named array with runtime dtype, the unit read from / written to disk.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }

    pub fn from_elems<E: Elem>(values: &[E]) -> ArrayData {
        match E::DTYPE {
            Dtype::F32 => ArrayData::F32(values.iter().map(|&v| v.to_f64() as f32).collect()),
            Dtype::F64 => ArrayData::F64(values.iter().map(|&v| v.to_f64()).collect()),
        }
    }

    pub fn to_elems<E: Elem>(&self) -> Result<Vec<E>> {
        if self.dtype() != E::DTYPE {
            return Err(Error::input(format!(
                "dtype mismatch: file has {}, run uses {}",
                self.dtype().name(),
                E::DTYPE.name()
            )));
        }
        Ok(match self {
            ArrayData::F32(v) => v.iter().map(|&x| E::from_f64(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| E::from_f64(x)).collect(),
        })
    }
}

pub fn write_arrays(
    path: &Path,
    extra: &BTreeMap<String, String>,
    arrays: &[NamedArray],
) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut data = Vec::new();
    for a in arrays {
        let numel: usize = a.shape.iter().product();
        if numel != a.data.len() {
            return Err(Error::usage(format!(
                "array {}: shape {:?} does not match {} elements",
                a.name,
                a.shape,
                a.data.len()
            )));
        }
        entries.push(ManifestEntry {
            name: a.name.clone(),
            dtype: a.data.dtype(),
            shape: a.shape.clone(),
            offset: data.len() as u64,
        });
        match &a.data {
            ArrayData::F32(v) => v.iter().for_each(|x| x.append_le_bytes(&mut data)),
            ArrayData::F64(v) => v.iter().for_each(|x| x.append_le_bytes(&mut data)),
        }
    }
    let manifest = Manifest { version: 1, extra: extra.clone(), entries };
    let manifest_json = serde_json::to_vec(&manifest)
        .map_err(|e| Error::usage(format!("manifest serialization failed: {e}")))?;

    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_json.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_json)?;
    f.write_all(&data)?;
    Ok(())
}

pub fn read_arrays(path: &Path) -> Result<(BTreeMap<String, String>, Vec<NamedArray>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(Error::input(format!("{}: not a checkpoint file", path.display())));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + n {
        return Err(Error::input(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + n])
        .map_err(|e| Error::input(format!("{}: bad manifest: {e}", path.display())))?;
    let data = &bytes[16 + n..];

    let mut arrays = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let numel: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + numel * e.dtype.size_bytes();
        if end > data.len() {
            return Err(Error::input(format!(
                "{}: array {} extends past end of file",
                path.display(),
                e.name
            )));
        }
        let raw = &data[start..end];
        let array_data = match e.dtype {
            Dtype::F32 => ArrayData::F32(raw.chunks_exact(4).map(f32::from_le_slice).collect()),
            Dtype::F64 => ArrayData::F64(raw.chunks_exact(8).map(f64::from_le_slice).collect()),
        };
        arrays.push(NamedArray { name: e.name.clone(), shape: e.shape.clone(), data: array_data });
    }
    Ok((manifest.extra, arrays))
}

/// Save all parameters, in registration order, with optional metadata.
pub fn save_params<E: Elem>(
    params: &Parameters<E>,
    path: &Path,
    extra: &BTreeMap<String, String>,
) -> Result<()> {
    let arrays: Vec<NamedArray> = params
        .iter()
        .map(|(_, p)| NamedArray {
            name: p.name.clone(),
            shape: p.shape.to_vec(),
            data: ArrayData::from_elems(&p.data),
        })
        .collect();
    write_arrays(path, extra, &arrays)
}

/// Load parameter values back into an already-assembled model. Every
/// registered parameter must be present with matching shape and dtype.
pub fn load_params<E: Elem>(params: &mut Parameters<E>, path: &Path) -> Result<BTreeMap<String, String>> {
    let (extra, arrays) = read_arrays(path)?;
    let by_name: BTreeMap<&str, &NamedArray> =
        arrays.iter().map(|a| (a.name.as_str(), a)).collect();
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let (name, shape) = {
            let p = params.get(id);
            (p.name.clone(), p.shape.to_vec())
        };
        let a = by_name
            .get(name.as_str())
            .ok_or_else(|| Error::input(format!("checkpoint missing parameter {name}")))?;
        if a.shape != shape {
            return Err(Error::input(format!(
                "parameter {name}: checkpoint shape {:?} vs model shape {:?}",
                a.shape, shape
            )));
        }
        params.get_mut(id).data = a.data.to_elems::<E>()?;
    }
    Ok(extra)
}
