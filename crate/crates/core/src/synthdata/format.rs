//! `SDS1` dataset container and the plain-text manifest.

use std::path::Path;

use crate::tensorcore::checkpoint::{begin_container, open_container};
use crate::tensorcore::wire::WireError;
use crate::tensorcore::CheckpointError;

use super::{DataError, Dataset, Utterance};

pub const DATASET_MAGIC: [u8; 4] = *b"SDS1";
pub const DATASET_VERSION: u32 = 1;

/// Header: magic, version, record count, then `n_mel_bins` shared by every
/// record. All records of a dataset must agree on the bin count.
pub fn write_dataset(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    let bins = ds.utterances.first().map_or(0, |u| u.n_mel_bins);
    if let Some(u) = ds.utterances.iter().find(|u| u.n_mel_bins != bins) {
        return Err(DataError::Inconsistent {
            label: u.speaker.clone(),
            reason: format!("{} mel bins in a dataset of {bins}", u.n_mel_bins),
        });
    }
    let mut w = begin_container(&DATASET_MAGIC, DATASET_VERSION);
    w.u32(ds.len() as u32);
    w.u32(bins as u32);
    for u in &ds.utterances {
        w.str16(&u.speaker).map_err(CheckpointError::from)?;
        w.u32(u.tokens.len() as u32);
        w.u32s(&u.tokens);
        w.u32s(&u.durations);
        w.f32s(&u.log_f0);
        w.f32s(&u.energy);
        w.u32(u.n_frames() as u32);
        w.f32s(&u.mel);
    }
    Ok(w.finish_with_crc())
}

pub fn read_dataset(bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut r = open_container(bytes, &DATASET_MAGIC, DATASET_VERSION)?;
    let count = r.u32().map_err(CheckpointError::from)? as usize;
    let bins = r.u32().map_err(CheckpointError::from)? as usize;
    let mut utterances = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let mut read = || -> Result<Utterance, WireError> {
            let speaker = r.str16()?;
            let n = r.u32()? as usize;
            let tokens = r.u32s(n.min(r.remaining()))?;
            let durations = r.u32s(tokens.len())?;
            let log_f0 = r.f32s(tokens.len())?;
            let energy = r.f32s(tokens.len())?;
            let frames = r.u32()? as usize;
            let mel = r.f32s(frames.saturating_mul(bins))?;
            Ok(Utterance {
                speaker,
                tokens,
                durations,
                log_f0,
                energy,
                n_mel_bins: bins,
                mel,
            })
        };
        let u = read().map_err(|e| CheckpointError::Malformed(format!("record {i}: {e}")))?;
        u.validate()?;
        utterances.push(u);
    }
    r.expect_end().map_err(CheckpointError::from)?;
    Ok(Dataset { utterances })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let bytes = write_dataset(ds)?;
    std::fs::write(path, bytes).map_err(|e| DataError::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    read_dataset(&bytes)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: String,
    pub speaker: String,
    pub record_index: usize,
}

pub fn write_manifest(entries: &[ManifestEntry], path: &Path) -> Result<(), DataError> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.split, e.speaker, e.record_index));
    }
    std::fs::write(path, text).map_err(|e| DataError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let mut parts = line.split('\t');
            match (parts.next(), parts.next(), parts.next().and_then(|s| s.parse().ok()), parts.next()) {
                (Some(split), Some(speaker), Some(record_index), None) => Ok(ManifestEntry {
                    split: split.to_string(),
                    speaker: speaker.to_string(),
                    record_index,
                }),
                _ => Err(DataError::Container(CheckpointError::Malformed(format!(
                    "manifest line `{line}`"
                )))),
            }
        })
        .collect()
}
