//! Multi-tenant inference: one shared immutable backbone, per-speaker
//! adapter packs kept in a capacity-bounded LRU, and a line protocol.

mod protocol;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;

use crate::adapters::{load_pack, AdapterError, AdapterPack};
use crate::backbone::{Backbone, ModelError, SpeakerRef, Spectrogram, Voice};

pub use protocol::{handle_line, handle_connection, serve, Reply};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("speaker `{0}` is not loaded")]
    NotLoaded(String),
    #[error(transparent)]
    Fingerprint(AdapterError),
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    Vocab { id: usize, vocab_size: usize },
    #[error("capacity: {0}")]
    Capacity(String),
    #[error("malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ServeError {
    /// Wire-protocol error code.
    pub fn code(&self) -> u8 {
        match self {
            ServeError::NotLoaded(_) => 1,
            ServeError::Fingerprint(_) => 2,
            ServeError::Vocab { .. } => 3,
            ServeError::Capacity(_) => 4,
            ServeError::Malformed(_) | ServeError::Model(_) => 5,
        }
    }
}

impl From<AdapterError> for ServeError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Fingerprint { .. } => ServeError::Fingerprint(e),
            other => ServeError::Malformed(other.to_string()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub residents: usize,
    pub loads: u64,
    pub evictions: u64,
    pub syntheses: u64,
    pub backbone_bytes: u64,
    pub total_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReport {
    pub backbone_bytes: u64,
    /// `(label, bytes)` per resident pack, least recently used first.
    pub pack_bytes: Vec<(String, u64)>,
    pub total_bytes: u64,
    pub ratio: f64,
}

pub const BYTES_PER_PARAM: u64 = 4;

/// Cost model without loading anything: a backbone of `backbone_params`
/// shared by `n_packs` packs of `pack_params` each.
pub fn analytic_memory_report(backbone_params: u64, n_packs: u64, pack_params: u64) -> MemoryReport {
    let backbone_bytes = backbone_params * BYTES_PER_PARAM;
    let per = pack_params * BYTES_PER_PARAM;
    let total = backbone_bytes + n_packs * per;
    MemoryReport {
        backbone_bytes,
        pack_bytes: Vec::new(),
        total_bytes: total,
        ratio: total as f64 / backbone_bytes as f64,
    }
}

#[derive(Default)]
struct Residents {
    /// Least recently used first.
    order: Vec<(String, Arc<AdapterPack>)>,
    loads: u64,
    evictions: u64,
}

impl Residents {
    fn position(&self, label: &str) -> Option<usize> {
        self.order.iter().position(|(l, _)| l == label)
    }
}

/// Shared backbone plus resident packs. Mutations are serialized by one
/// lock; syntheses only hold it long enough to clone the pack handle.
pub struct Registry {
    backbone: Arc<Backbone>,
    backbone_digest: [u8; 32],
    capacity: usize,
    residents: Mutex<Residents>,
    syntheses: AtomicU64,
}

impl Registry {
    pub fn new(backbone: Backbone, capacity: usize) -> Self {
        let backbone_digest = backbone.digest();
        Self {
            backbone: Arc::new(backbone),
            backbone_digest,
            capacity,
            residents: Mutex::new(Residents::default()),
            syntheses: AtomicU64::new(0),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Residents> {
        self.residents.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Digest taken when the registry was built.
    pub fn load_time_digest(&self) -> [u8; 32] {
        self.backbone_digest
    }

    pub fn backbone_intact(&self) -> bool {
        self.backbone.digest() == self.backbone_digest
    }

    /// Makes `pack` resident, evicting the least recently used pack when the
    /// registry is full. Reloading a resident label replaces it.
    pub fn load_pack(&self, pack: AdapterPack) -> Result<String, ServeError> {
        pack.check_compatible(&self.backbone.config)?;
        if self.capacity == 0 {
            return Err(ServeError::Capacity("registry capacity is 0".into()));
        }
        let label = pack.speaker_label.clone();
        let pack = Arc::new(pack);
        let mut r = self.lock();
        if let Some(i) = r.position(&label) {
            r.order.remove(i);
        } else if r.order.len() >= self.capacity {
            r.order.remove(0);
            r.evictions += 1;
        }
        r.order.push((label.clone(), pack));
        r.loads += 1;
        Ok(label)
    }

    pub fn load(&self, path: &Path) -> Result<String, ServeError> {
        let pack = load_pack(path)?;
        self.load_pack(pack)
    }

    pub fn unload(&self, label: &str) -> Result<(), ServeError> {
        let mut r = self.lock();
        let i = r.position(label).ok_or_else(|| ServeError::NotLoaded(label.to_string()))?;
        r.order.remove(i);
        Ok(())
    }

    /// Labels of resident packs, least recently used first.
    pub fn residents(&self) -> Vec<String> {
        self.lock().order.iter().map(|(l, _)| l.clone()).collect()
    }

    /// Handle to a resident pack; marks it most recently used.
    pub fn acquire(&self, label: &str) -> Result<Arc<AdapterPack>, ServeError> {
        let mut r = self.lock();
        let i = r.position(label).ok_or_else(|| ServeError::NotLoaded(label.to_string()))?;
        let entry = r.order.remove(i);
        let pack = Arc::clone(&entry.1);
        r.order.push(entry);
        Ok(pack)
    }

    pub fn synth(&self, label: &str, tokens: &[usize]) -> Result<Spectrogram, ServeError> {
        let vocab_size = self.backbone.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(ServeError::Vocab { id, vocab_size });
        }
        if tokens.is_empty() {
            return Err(ServeError::Malformed("empty token sequence".into()));
        }
        let pack = self.acquire(label)?;
        let out = synthesize_with_pack(&self.backbone, &pack, tokens)?;
        self.syntheses.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    pub fn memory_report(&self) -> MemoryReport {
        let backbone_bytes = self.backbone.num_params() as u64 * BYTES_PER_PARAM;
        let pack_bytes: Vec<(String, u64)> = self
            .lock()
            .order
            .iter()
            .map(|(l, p)| (l.clone(), p.num_params() as u64 * BYTES_PER_PARAM))
            .collect();
        let total = backbone_bytes + pack_bytes.iter().map(|(_, b)| b).sum::<u64>();
        MemoryReport {
            backbone_bytes,
            pack_bytes,
            total_bytes: total,
            ratio: total as f64 / backbone_bytes as f64,
        }
    }

    pub fn stats(&self) -> Stats {
        let mem = self.memory_report();
        let r = self.lock();
        Stats {
            residents: r.order.len(),
            loads: r.loads,
            evictions: r.evictions,
            syntheses: self.syntheses.load(Ordering::Relaxed),
            backbone_bytes: mem.backbone_bytes,
            total_bytes: mem.total_bytes,
        }
    }
}

/// Offline synthesis with a pack attached to a backbone; the registry
/// produces exactly this output.
pub fn synthesize_with_pack(backbone: &Backbone, pack: &AdapterPack, tokens: &[usize]) -> Result<Spectrogram, ModelError> {
    Voice::new(&backbone.config, vec![&pack.params, &backbone.params], SpeakerRef::Param("speaker_vec")).synthesize(tokens)
}
