//! Heatmap files: a raw float dump and an 8-bit grayscale preview.
//!
//! Raw layout, little-endian: `"HMAP"`, `u32` height, `u32` width, then
//! `height·width` `f32` values row-major.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const HMAP_MAGIC: &[u8; 4] = b"HMAP";

pub fn encode_raw<T: Scalar>(hm: &Tensor<T>) -> Result<Vec<u8>> {
    let (h, w) = hm.dims2("encode_raw")?;
    let mut out = Vec::with_capacity(12 + 4 * h * w);
    out.extend_from_slice(HMAP_MAGIC);
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in hm.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |msg: &str| Error::Dataset(format!("raw heatmap: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != HMAP_MAGIC {
        return Err(bad("missing HMAP header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    if bytes.len() != 12 + 4 * h * w {
        return Err(bad("length does not match the header"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![h, w], data)
}

/// `0 → 128`, `+max|v| → 255`, `−max|v| → 0`.
pub fn to_gray<T: Scalar>(hm: &Tensor<T>) -> Vec<u8> {
    let m = hm.max_abs().as_f64();
    hm.data()
        .iter()
        .map(|v| {
            let v = v.as_f64();
            if m == 0.0 || v == 0.0 {
                128
            } else if v > 0.0 {
                (128.0 + (127.0 * v / m).round()) as u8
            } else {
                (128.0 + (128.0 * v / m).round()) as u8
            }
        })
        .collect()
}

pub fn write_raw<T: Scalar>(hm: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_raw(hm)?)?;
    f.flush()?;
    Ok(())
}

/// Binary PGM (`P5`) preview.
pub fn write_pgm<T: Scalar>(hm: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = hm.dims2("write_pgm")?;
    let mut f = BufWriter::new(File::create(path)?);
    PnmEncoder::new(&mut f)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&to_gray(hm), w as u32, h as u32, ExtendedColorType::L8)?;
    f.flush()?;
    Ok(())
}

/// Writes the preview and, when given, the raw dump.
pub fn render_heatmap<T: Scalar>(hm: &Tensor<T>, pgm: impl AsRef<Path>, raw: Option<&Path>) -> Result<()> {
    let hm = hm.clone().ensure_finite("render_heatmap")?;
    write_pgm(&hm, pgm)?;
    if let Some(raw) = raw {
        write_raw(&hm, raw)?;
    }
    Ok(())
}
