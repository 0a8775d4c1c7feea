//! `APK1` adapter packs.
//!
//! Layout: magic `APK1`, `u32` version, speaker label (`u16` length + UTF-8),
//! 32-byte backbone fingerprint, `u32` site count and `u16`-prefixed site
//! names, then the checkpoint entry block (`adapter.<site>.*` and
//! `speaker_vec`) and a trailing CRC32.

use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::tensorcore::checkpoint::{begin_container, open_container};
use crate::tensorcore::{decode_entries, encode_entries, CheckpointError, ParamStore};

use super::{site_param, AdapterError, ADAPTER_FIELDS};

pub const PACK_MAGIC: [u8; 4] = *b"APK1";
pub const PACK_VERSION: u32 = 1;

/// Per-speaker deployment unit: adapters for each site plus a speaker vector.
/// A pack with no sites is an embedding-only pack.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPack {
    pub speaker_label: String,
    pub fingerprint: [u8; 32],
    pub sites: Vec<String>,
    /// `adapter.<site>.<field>` entries and `speaker_vec`.
    pub params: ParamStore,
}

impl AdapterPack {
    pub fn speaker_vec(&self) -> &[f32] {
        self.params
            .tensor("speaker_vec")
            .expect("validated packs carry a speaker vector")
            .data()
    }

    /// Adapter weights only, excluding the speaker vector.
    pub fn num_adapter_params(&self) -> usize {
        self.params.num_params() - self.speaker_vec().len()
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn check_compatible(&self, cfg: &BackboneConfig) -> Result<(), AdapterError> {
        if self.fingerprint != cfg.fingerprint() {
            return Err(AdapterError::Fingerprint {
                expected: cfg.fingerprint_hex(),
                found: hex(&self.fingerprint),
            });
        }
        if self.speaker_vec().len() != cfg.d_spk() {
            return Err(AdapterError::Malformed(format!(
                "speaker vector of {} values for d_spk {}",
                self.speaker_vec().len(),
                cfg.d_spk()
            )));
        }
        Ok(())
    }

    /// Structural checks: every declared site has all six fields, nothing else
    /// is present, and shapes agree within each adapter.
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.fingerprint == [0u8; 32] {
            return Err(AdapterError::Malformed("missing backbone fingerprint".into()));
        }
        let spk = self
            .params
            .tensor("speaker_vec")
            .map_err(|_| AdapterError::Malformed("missing speaker_vec".into()))?;
        if spk.rank() != 1 {
            return Err(AdapterError::Malformed("speaker_vec must be a vector".into()));
        }
        let mut expected = 1;
        for site in &self.sites {
            let get = |f: &str| {
                self.params
                    .tensor(&site_param(site, f))
                    .map_err(|_| AdapterError::Malformed(format!("site `{site}` lacks `{f}`")))
            };
            let w_down = get("w_down")?;
            let [d, r] = w_down.shape() else {
                return Err(AdapterError::Malformed(format!("site `{site}`: w_down is not a matrix")));
            };
            let (d, r) = (*d, *r);
            let want: [(&str, Vec<usize>); 5] = [
                ("ln_gain", vec![d]),
                ("ln_bias", vec![d]),
                ("b_down", vec![r]),
                ("w_up", vec![r, d]),
                ("b_up", vec![d]),
            ];
            for (f, shape) in want {
                if get(f)?.shape() != shape.as_slice() {
                    return Err(AdapterError::Malformed(format!("site `{site}`: `{f}` has the wrong shape")));
                }
            }
            expected += ADAPTER_FIELDS.len();
        }
        if self.params.len() != expected {
            return Err(AdapterError::Malformed(format!(
                "{} entries for {} sites",
                self.params.len(),
                self.sites.len()
            )));
        }
        Ok(())
    }
}

fn hex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

pub fn write_pack(pack: &AdapterPack) -> Result<Vec<u8>, AdapterError> {
    let mut w = begin_container(&PACK_MAGIC, PACK_VERSION);
    w.str16(&pack.speaker_label).map_err(CheckpointError::from)?;
    w.bytes(&pack.fingerprint);
    w.u32(pack.sites.len() as u32);
    for s in &pack.sites {
        w.str16(s).map_err(CheckpointError::from)?;
    }
    encode_entries(&mut w, &pack.params)?;
    Ok(w.finish_with_crc())
}

pub fn read_pack(bytes: &[u8]) -> Result<AdapterPack, AdapterError> {
    let mut r = open_container(bytes, &PACK_MAGIC, PACK_VERSION)?;
    let speaker_label = r.str16().map_err(CheckpointError::from)?;
    let fingerprint: [u8; 32] = r
        .take(32)
        .map_err(CheckpointError::from)?
        .try_into()
        .expect("took 32 bytes");
    let n = r.u32().map_err(CheckpointError::from)? as usize;
    let mut sites = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        sites.push(r.str16().map_err(CheckpointError::from)?);
    }
    let params = decode_entries(&mut r)?;
    r.expect_end().map_err(CheckpointError::from)?;
    let pack = AdapterPack {
        speaker_label,
        fingerprint,
        sites,
        params,
    };
    pack.validate()?;
    Ok(pack)
}

pub fn save_pack(pack: &AdapterPack, path: &Path) -> Result<(), AdapterError> {
    let bytes = write_pack(pack)?;
    std::fs::write(path, bytes).map_err(|e| AdapterError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn load_pack(path: &Path) -> Result<AdapterPack, AdapterError> {
    let bytes = std::fs::read(path).map_err(|e| AdapterError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    read_pack(&bytes)
}
