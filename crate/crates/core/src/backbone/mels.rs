//! `MELS` spectrogram files and PGM previews.

use std::path::Path;

use crate::tensorcore::checkpoint::{begin_container, open_container};
use crate::tensorcore::CheckpointError;

use super::ModelError;

pub const MELS_MAGIC: [u8; 4] = *b"MELS";
pub const MELS_VERSION: u32 = 1;

/// Row-major `[frames, bins]` spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub bins: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn bits_eq(&self, other: &Spectrogram) -> bool {
        self.frames == other.frames
            && self.bins == other.bins
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn write_mels(s: &Spectrogram) -> Vec<u8> {
    let mut w = begin_container(&MELS_MAGIC, MELS_VERSION);
    w.u32(s.frames as u32);
    w.u32(s.bins as u32);
    w.f32s(&s.data);
    w.finish_with_crc()
}

pub fn read_mels(bytes: &[u8]) -> Result<Spectrogram, CheckpointError> {
    let mut r = open_container(bytes, &MELS_MAGIC, MELS_VERSION)?;
    let frames = r.u32()? as usize;
    let bins = r.u32()? as usize;
    let n = frames
        .checked_mul(bins)
        .filter(|&n| n <= r.remaining() / 4)
        .ok_or_else(|| CheckpointError::Malformed(format!("{frames}x{bins} spectrogram")))?;
    let data = r.f32s(n)?;
    r.expect_end()?;
    Ok(Spectrogram { frames, bins, data })
}

pub fn save_mels(s: &Spectrogram, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, write_mels(s)).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_mels(path: &Path) -> Result<Spectrogram, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(read_mels(&bytes)?)
}

/// Binary PGM (P5), bins as rows (low bins at the bottom), frames as
/// columns, min-max normalized to 0..=255.
pub fn mels_to_pgm(s: &Spectrogram) -> Vec<u8> {
    let lo = s.data.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = s.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{} {}\n255\n", s.frames, s.bins).into_bytes();
    for b in (0..s.bins).rev() {
        for f in 0..s.frames {
            let v = (s.data[f * s.bins + b] - lo) / span;
            out.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

pub fn save_pgm(s: &Spectrogram, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, mels_to_pgm(s)).map_err(|e| ModelError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
