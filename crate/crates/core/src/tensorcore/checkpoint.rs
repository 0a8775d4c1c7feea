//! `ALB1` checkpoint files.
//!
//! Layout (little-endian): magic `ALB1`, `u32` version, `u32` entry count, then
//! per entry a `u16`-prefixed UTF-8 name, `u8` trainable flag, `u8` rank,
//! `u32` dims and raw `f32` data; a CRC32 over all preceding bytes closes the file.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::wire::{verify_crc, Reader, WireError, Writer};
use super::{ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ALB1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checksum mismatch: file is truncated or corrupted")]
    Checksum,
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("parameter names differ: missing {missing:?}, extra {extra:?}")]
    NameMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl From<WireError> for CheckpointError {
    fn from(e: WireError) -> Self {
        CheckpointError::Malformed(e.to_string())
    }
}

impl CheckpointError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Starts a container: magic then version.
pub(crate) fn begin_container(magic: &[u8; 4], version: u32) -> Writer {
    let mut w = Writer::new();
    w.bytes(magic);
    w.u32(version);
    w
}

/// Validates magic, checksum and version of a container and returns a reader
/// positioned after the version field. A file too short to hold a magic
/// number is reported as a checksum failure, like any other truncation.
pub(crate) fn open_container<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
) -> Result<Reader<'a>, CheckpointError> {
    if bytes.len() < 4 {
        return Err(CheckpointError::Checksum);
    }
    if &bytes[..4] != magic {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let body = verify_crc(bytes).ok_or(CheckpointError::Checksum)?;
    let mut r = Reader::new(body);
    r.take(4)?;
    let found = r.u32()?;
    if found != version {
        return Err(CheckpointError::Version {
            found,
            expected: version,
        });
    }
    Ok(r)
}

pub fn encode_entries(w: &mut Writer, store: &ParamStore) -> Result<(), CheckpointError> {
    w.u32(store.len() as u32);
    for (name, p) in store.iter() {
        w.str16(name)?;
        w.u8(p.trainable as u8);
        let shape = p.tensor.shape();
        let rank = u8::try_from(shape.len())
            .map_err(|_| CheckpointError::Malformed(format!("rank of `{name}` exceeds 255")))?;
        w.u8(rank);
        for &d in shape {
            let d = u32::try_from(d)
                .map_err(|_| CheckpointError::Malformed(format!("dim of `{name}` exceeds u32")))?;
            w.u32(d);
        }
        w.f32s(p.tensor.data());
    }
    Ok(())
}

pub fn decode_entries(r: &mut Reader<'_>) -> Result<ParamStore, CheckpointError> {
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name = r.str16()?;
        let trainable = match r.u8()? {
            0 => false,
            1 => true,
            v => {
                return Err(CheckpointError::Malformed(format!(
                    "trainable flag {v} for `{name}`"
                )))
            }
        };
        let rank = r.u8()? as usize;
        let shape: Vec<usize> = r.u32s(rank)?.into_iter().map(|d| d as usize).collect();
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n <= r.remaining() / 4)
            .ok_or_else(|| CheckpointError::Malformed(format!("shape {shape:?} of `{name}`")))?;
        let data = r.f32s(numel)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| CheckpointError::Malformed(format!("`{name}`: {e}")))?;
        store
            .insert(name.clone(), tensor, trainable)
            .map_err(|_| CheckpointError::Malformed(format!("duplicate entry `{name}`")))?;
    }
    Ok(store)
}

pub fn write_checkpoint(store: &ParamStore) -> Result<Vec<u8>, CheckpointError> {
    let mut w = begin_container(&CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    encode_entries(&mut w, store)?;
    Ok(w.finish_with_crc())
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    let mut r = open_container(bytes, &CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let store = decode_entries(&mut r)?;
    r.expect_end()?;
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let bytes = write_checkpoint(store)?;
    std::fs::write(path, bytes).map_err(|e| CheckpointError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
    read_checkpoint(&bytes)
}

impl ParamStore {
    /// Checks that `self` has exactly the names and shapes of `expected`.
    pub fn check_layout(&self, expected: &ParamStore) -> Result<(), CheckpointError> {
        let (missing, extra) = self.name_diff(expected);
        if !missing.is_empty() || !extra.is_empty() {
            return Err(CheckpointError::NameMismatch { missing, extra });
        }
        for (name, p) in expected.iter() {
            let found = self.tensor(name).expect("names checked").shape();
            if found != p.tensor.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: name.to_string(),
                    expected: p.tensor.shape().to_vec(),
                    found: found.to_vec(),
                });
            }
        }
        Ok(())
    }
}
