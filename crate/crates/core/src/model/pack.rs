//! ModelPack container.
//!
//! Little-endian layout:
//!
//! ```text
//! "NNPK" | version: u32 = 1 | manifest_len: u64 | manifest (UTF-8 JSON) | buffers
//! ```
//!
//! The manifest lists the layers in execution order. Every parameter tensor is
//! a row-major `f32` buffer addressed by byte `offset` and `length` relative to
//! the start of the buffer region.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ops::PoolGeometry;
use super::{Conv2d, Layer, Linear, Model, Preprocessing};
use crate::error::{Error, LoadError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NNPK";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    class_count: usize,
    input_shape: Vec<usize>,
    #[serde(default)]
    preprocessing: PreprocessingSpec,
    layers: Vec<LayerSpec>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct PreprocessingSpec {
    #[serde(default)]
    mean: Vec<f64>,
    #[serde(default)]
    std: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerSpec {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    params: BTreeMap<String, BufferRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferRef {
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

pub fn load_modelpack<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let bytes = std::fs::read(path)?;
    read_modelpack(&bytes)
}

pub fn read_modelpack<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let truncated = |needed: usize| LoadError::Truncated {
        needed: needed as u64,
        available: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != MAGIC {
        return Err(LoadError::BadMagic(magic).into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN).into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(LoadError::Version(version).into());
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let manifest_end = usize::try_from(manifest_len)
        .ok()
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| LoadError::Manifest(format!("manifest length {manifest_len} overflows")))?;
    if bytes.len() < manifest_end {
        return Err(truncated(manifest_end).into());
    }
    let manifest: Manifest =
        serde_json::from_slice(&bytes[HEADER_LEN..manifest_end]).map_err(|e| LoadError::Manifest(e.to_string()))?;
    let buffers = &bytes[manifest_end..];

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (k, spec) in manifest.layers.iter().enumerate() {
        layers.push(decode_layer::<T>(k, spec, buffers, bytes.len())?);
    }
    let preprocessing = Preprocessing {
        mean: manifest.preprocessing.mean.iter().map(|&v| T::of(v)).collect(),
        std: manifest.preprocessing.std.iter().map(|&v| T::of(v)).collect(),
    };
    Model::new(layers, manifest.input_shape, manifest.class_count, preprocessing)
}

fn decode_layer<T: Scalar>(k: usize, spec: &LayerSpec, buffers: &[u8], file_len: usize) -> Result<Layer<T>> {
    let param = |name: &str| -> Result<Tensor<T>> {
        let r = spec
            .params
            .get(name)
            .ok_or_else(|| LoadError::Manifest(format!("layer {k} ({}) lacks parameter `{name}`", spec.kind)))?;
        read_buffer(&format!("layers[{k}].{name}"), r, buffers, file_len)
    };
    let pool = || -> Result<PoolGeometry> {
        let kernel = spec
            .kernel
            .ok_or_else(|| LoadError::Manifest(format!("layer {k} ({}) lacks `kernel`", spec.kind)))?;
        Ok(PoolGeometry {
            kernel,
            stride: spec.stride.unwrap_or(kernel),
            padding: spec.padding.unwrap_or(0),
        })
    };
    let layer = match spec.kind.as_str() {
        "conv2d" => Layer::Conv2d(Conv2d {
            weight: param("weight")?,
            bias: param("bias")?,
            stride: spec.stride.unwrap_or(1),
            padding: spec.padding.unwrap_or(0),
        }),
        "linear" => Layer::Linear(Linear {
            weight: param("weight")?,
            bias: param("bias")?,
        }),
        "relu" => Layer::Relu,
        "maxpool2d" => Layer::MaxPool2d(pool()?),
        "avgpool2d" => Layer::AvgPool2d(pool()?),
        "flatten" => Layer::Flatten,
        other => return Err(LoadError::UnsupportedLayer(other.to_string()).into()),
    };
    Ok(layer)
}

fn read_buffer<T: Scalar>(name: &str, r: &BufferRef, buffers: &[u8], file_len: usize) -> Result<Tensor<T>> {
    let count: usize = r.shape.iter().product();
    let expected = count as u64 * 4;
    if r.shape.is_empty() || r.shape.contains(&0) || r.length != expected {
        return Err(LoadError::BufferLength {
            name: name.to_string(),
            shape: r.shape.clone(),
            expected,
            declared: r.length,
        }
        .into());
    }
    let end = r.offset.saturating_add(r.length);
    if end > buffers.len() as u64 {
        return Err(LoadError::Truncated {
            needed: (file_len - buffers.len()) as u64 + end,
            available: file_len as u64,
        }
        .into());
    }
    let raw = &buffers[r.offset as usize..end as usize];
    let mut data = Vec::with_capacity(count);
    for (index, chunk) in raw.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(LoadError::NonFinite {
                name: name.to_string(),
                index,
            }
            .into());
        }
        data.push(T::of(v as f64));
    }
    Tensor::new(r.shape.clone(), data)
}

/// Serializes `model` with its parameters rounded to `f32`.
pub fn write_modelpack<T: Scalar>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut buffers: Vec<u8> = Vec::new();
    let mut push = |t: &Tensor<T>| -> BufferRef {
        let offset = buffers.len() as u64;
        for v in t.data() {
            buffers.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        BufferRef {
            shape: t.shape().to_vec(),
            offset,
            length: buffers.len() as u64 - offset,
        }
    };
    let mut layers = Vec::with_capacity(model.len());
    for layer in model.layers() {
        let mut spec = LayerSpec {
            kind: layer.kind().to_string(),
            kernel: None,
            stride: None,
            padding: None,
            params: BTreeMap::new(),
        };
        match layer {
            Layer::Conv2d(c) => {
                spec.stride = Some(c.stride);
                spec.padding = Some(c.padding);
                spec.params.insert("weight".into(), push(&c.weight));
                spec.params.insert("bias".into(), push(&c.bias));
            }
            Layer::Linear(l) => {
                spec.params.insert("weight".into(), push(&l.weight));
                spec.params.insert("bias".into(), push(&l.bias));
            }
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                spec.kernel = Some(p.kernel);
                spec.stride = Some(p.stride);
                spec.padding = Some(p.padding);
            }
            Layer::Relu | Layer::Flatten => {}
        }
        layers.push(spec);
    }
    let manifest = Manifest {
        class_count: model.class_count(),
        input_shape: model.input_shape().to_vec(),
        preprocessing: PreprocessingSpec {
            mean: model.preprocessing().mean.iter().map(|v| v.as_f64()).collect(),
            std: model.preprocessing().std.iter().map(|v| v.as_f64()).collect(),
        },
        layers,
    };
    let json = serde_json::to_vec(&manifest).map_err(Error::Json)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + buffers.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&buffers);
    Ok(out)
}

pub fn save_modelpack<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_modelpack(model)?)?;
    Ok(())
}
