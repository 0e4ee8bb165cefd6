//! Model checkpoint format: a JSON header (format version, config, tensor
//! manifest with shapes) followed by little-endian f32 payloads in manifest
//! order and a CRC32 of the payload bytes. Round trips are bit-exact.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{parameter_names, CropNetConfig, CropNetModel};
use crate::cropnet::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: CropNetConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &CropNetModel<f32>, path: &Path) -> Result<()> {
    let names = parameter_names(&model.config);
    assert_eq!(names.len(), model.params.len());
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        tensors: names
            .iter()
            .zip(&model.params)
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut payload = Vec::new();
    for t in &model.params {
        for v in &t.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = crc32fast::hash(&payload);

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    w.write_all(&payload)?;
    w.write_all(&checksum.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<CropNetModel<f32>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Malformed(format!(
            "bad checkpoint magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let header_len = read_u32(&mut r, "header length")? as usize;
    let mut header_bytes = vec![0u8; header_len];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            expected: CHECKPOINT_VERSION,
            found: header.format_version,
        });
    }
    header.config.validate()?;

    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    let mut payload = vec![0u8; total * 4];
    read_exact(&mut r, &mut payload, "tensor payload")?;
    let stored = read_u32(&mut r, "checksum")?;
    let computed = crc32fast::hash(&payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let expected_names = parameter_names(&header.config);
    if expected_names.len() != header.tensors.len()
        || expected_names
            .iter()
            .zip(&header.tensors)
            .any(|(a, b)| a != &b.name)
    {
        return Err(Error::Malformed(
            "tensor manifest does not match the model configuration".into(),
        ));
    }

    let mut params = Vec::with_capacity(header.tensors.len());
    let mut off = 0usize;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let b = &payload[(off + i) * 4..(off + i) * 4 + 4];
            data.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        }
        off += n;
        params.push(Tensor::from_vec(&entry.shape, data));
    }
    Ok(CropNetModel {
        config: header.config,
        params,
    })
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Truncated(format!("while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}
