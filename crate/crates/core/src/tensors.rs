//! Dense tensors and the on-disk activation cache.
//!
//! A cache is a directory holding `manifest.json` plus one flat payload file
//! `<sample_id>.act` per sample. Payloads are C-major (channel, row, column),
//! little-endian, either bf16 or f32.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense f32 tensor (last index fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, rejecting extent mismatches and non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(Error::Shape(format!(
                "rank {} not supported (1..=3)",
                shape.len()
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// (C, H, W) of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Element (c, y, x) of a rank-3 tensor.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f32 {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }
}

/// f32 → bf16 with round-to-nearest-even on the discarded low half.
pub fn f32_to_bf16(value: f32) -> u16 {
    let bits = value.to_bits();
    let rounding = 0x7FFF + ((bits >> 16) & 1);
    (bits.wrapping_add(rounding) >> 16) as u16
}

pub fn bf16_to_f32(half: u16) -> f32 {
    f32::from_bits(u32::from(half) << 16)
}

/// Encodes values as little-endian bf16, two bytes per value.
pub fn encode_bf16(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| f32_to_bf16(v).to_le_bytes())
        .collect()
}

/// Widens little-endian bf16 bytes back to f32.
pub fn decode_bf16(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 2 != 0 {
        return Err(Error::Format(format!(
            "bf16 payload has odd length {}",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|b| bf16_to_f32(u16::from_le_bytes([b[0], b[1]])))
        .collect())
}

fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "f32 payload length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Storage precision of cached activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    Bf16,
    F32,
}

impl DType {
    pub fn bytes(self) -> usize {
        match self {
            DType::Bf16 => 2,
            DType::F32 => 4,
        }
    }

    fn encode(self, values: &[f32]) -> Vec<u8> {
        match self {
            DType::Bf16 => encode_bf16(values),
            DType::F32 => encode_f32(values),
        }
    }

    fn decode(self, bytes: &[u8]) -> Result<Vec<f32>> {
        match self {
            DType::Bf16 => decode_bf16(bytes),
            DType::F32 => decode_f32(bytes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub layer: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub dtype: DType,
    pub samples: Vec<String>,
}

impl CacheManifest {
    pub fn sample_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn payload_bytes(&self) -> usize {
        self.sample_len() * self.dtype.bytes()
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn check_sample_id(id: &str) -> Result<()> {
    let bad = id.is_empty()
        || id == "."
        || id == ".."
        || id.contains(['/', '\\', '\0']);
    if bad {
        Err(Error::Format(format!("invalid sample id {id:?}")))
    } else {
        Ok(())
    }
}

/// Read handle over a cache directory. Samples are loaded one at a time.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    dir: PathBuf,
    manifest: CacheManifest,
}

impl ActivationCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CacheManifest =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if manifest.sample_len() == 0 {
            return Err(Error::Format(format!(
                "{}: zero-sized activation shape",
                path.display()
            )));
        }
        for id in &manifest.samples {
            check_sample_id(id)?;
        }
        Ok(Self { dir, manifest })
    }

    pub fn manifest(&self) -> &CacheManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// (C, H, W) shared by every sample.
    pub fn dims(&self) -> (usize, usize, usize) {
        let m = &self.manifest;
        (m.channels, m.height, m.width)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.manifest.samples.iter().any(|s| s == id)
    }

    pub fn read_sample(&self, id: &str) -> Result<Tensor> {
        if !self.contains(id) {
            return Err(Error::MissingSample(id.to_string()));
        }
        let path = self.dir.join(format!("{id}.act"));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let expected = self.manifest.payload_bytes();
        if bytes.len() != expected {
            return Err(Error::CorruptCache {
                id: id.to_string(),
                expected,
                found: bytes.len(),
            });
        }
        let data = self.manifest.dtype.decode(&bytes)?;
        let (c, h, w) = self.dims();
        Tensor::new(vec![c, h, w], data)
    }
}

/// Single-writer builder for a cache directory; the manifest is written on
/// [`CacheWriter::finish`].
#[derive(Debug)]
pub struct CacheWriter {
    dir: PathBuf,
    manifest: CacheManifest,
}

impl CacheWriter {
    pub fn create(
        dir: impl AsRef<Path>,
        layer: &str,
        dims: (usize, usize, usize),
        dtype: DType,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (channels, height, width) = dims;
        Ok(Self {
            dir,
            manifest: CacheManifest {
                layer: layer.to_string(),
                channels,
                height,
                width,
                dtype,
                samples: Vec::new(),
            },
        })
    }

    pub fn write_sample(&mut self, id: &str, tensor: &Tensor) -> Result<()> {
        check_sample_id(id)?;
        let m = &self.manifest;
        if tensor.shape() != [m.channels, m.height, m.width] {
            return Err(Error::Shape(format!(
                "sample `{id}` has shape {:?}, cache expects [{}, {}, {}]",
                tensor.shape(),
                m.channels,
                m.height,
                m.width
            )));
        }
        if self.manifest.samples.iter().any(|s| s == id) {
            return Err(Error::Format(format!("duplicate sample id `{id}`")));
        }
        let path = self.dir.join(format!("{id}.act"));
        fs::write(&path, m.dtype.encode(tensor.data())).map_err(|e| Error::io(&path, e))?;
        self.manifest.samples.push(id.to_string());
        Ok(())
    }

    pub fn finish(self) -> Result<ActivationCache> {
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| Error::json(&path, e))?;
        let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        file.write_all(text.as_bytes())
            .and_then(|_| file.write_all(b"\n"))
            .map_err(|e| Error::io(&path, e))?;
        Ok(ActivationCache {
            dir: self.dir,
            manifest: self.manifest,
        })
    }
}
