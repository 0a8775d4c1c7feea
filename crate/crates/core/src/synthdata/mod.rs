//! Deterministic synthetic multi-speaker corpus.
//!
//! Every random quantity is drawn from a ChaCha stream keyed by a SHA-256 of
//! `(corpus_seed, kind, key)`, so any speaker, token or utterance can be
//! regenerated in isolation.

mod format;

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{parse_kv, render_kv};
use crate::tensorcore::CheckpointError;

pub use format::{
    load_dataset, read_dataset, read_manifest, save_dataset, write_dataset, write_manifest, ManifestEntry,
    DATASET_MAGIC, DATASET_VERSION,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    Vocabulary { id: usize, vocab_size: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Container(#[from] CheckpointError),
    #[error("invalid corpus settings: {0}")]
    Config(String),
    #[error("selected data source `{0}` is empty")]
    EmptySource(&'static str),
    #[error("utterance `{label}`: {reason}")]
    Inconsistent { label: String, reason: String },
}

impl DataError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Seeded stream for one `(corpus_seed, kind, key)` triple.
pub fn keyed_rng(corpus_seed: u64, kind: &str, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(corpus_seed.to_le_bytes());
    h.update((kind.len() as u64).to_le_bytes());
    h.update(kind.as_bytes());
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerSpec {
    pub label: String,
    /// Offset added to every log-F0 value; its sign acts as a binary voice attribute.
    pub pitch_offset: f64,
    /// Multiplicative duration factor in `[0.7, 1.3]`.
    pub rate: f64,
    /// Energy scale in `[0.6, 1.4]`.
    pub energy_scale: f64,
    /// Per-bin additive colouring in `[-0.3, 0.3]`.
    pub timbre: Vec<f64>,
    pub phase: f64,
}

pub const RATE_RANGE: (f64, f64) = (0.7, 1.3);
pub const ENERGY_RANGE: (f64, f64) = (0.6, 1.4);
pub const TIMBRE_BOUND: f64 = 0.3;
pub const PITCH_MAGNITUDE: (f64, f64) = (0.1, 0.5);

pub fn gen_speaker(corpus_seed: u64, label: &str, n_mel_bins: usize) -> SpeakerSpec {
    let mut rng = keyed_rng(corpus_seed, "speaker", label);
    let magnitude = rng.gen_range(PITCH_MAGNITUDE.0..=PITCH_MAGNITUDE.1);
    let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
    let rate = rng.gen_range(RATE_RANGE.0..=RATE_RANGE.1);
    let energy_scale = rng.gen_range(ENERGY_RANGE.0..=ENERGY_RANGE.1);
    let timbre = (0..n_mel_bins)
        .map(|_| rng.gen_range(-TIMBRE_BOUND..=TIMBRE_BOUND))
        .collect();
    let phase = rng.gen_range(0.0..2.0 * PI);
    SpeakerSpec {
        label: label.to_string(),
        pitch_offset: sign * magnitude,
        rate,
        energy_scale,
        timbre,
        phase,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSpec {
    /// Frames, in `[2, 8]`.
    pub base_duration: f64,
    pub base_pitch: f64,
    pub base_energy: f64,
    /// Non-negative spectral template.
    pub template: Vec<f64>,
}

pub fn gen_token(corpus_seed: u64, id: usize, n_mel_bins: usize) -> TokenSpec {
    let mut rng = keyed_rng(corpus_seed, "token", &id.to_string());
    let base_duration = rng.gen_range(2.0..=8.0);
    let base_pitch = rng.gen_range(4.5..=5.5);
    let base_energy = rng.gen_range(0.5..=1.5);
    // Two Gaussian bumps over the bins give formant-like structure.
    let b = n_mel_bins as f64;
    let bumps: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.gen_range(0.0..b),
                rng.gen_range(0.08 * b..0.25 * b),
                rng.gen_range(0.4..1.0),
            )
        })
        .collect();
    let template = (0..n_mel_bins)
        .map(|i| {
            bumps
                .iter()
                .map(|&(c, w, a)| a * (-((i as f64 - c) / w).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    TokenSpec {
        base_duration,
        base_pitch,
        base_energy,
        template,
    }
}

/// Token inventory of a corpus.
#[derive(Clone, Debug)]
pub struct TokenTable {
    pub specs: Vec<TokenSpec>,
    pub n_mel_bins: usize,
}

impl TokenTable {
    pub fn new(corpus_seed: u64, vocab_size: usize, n_mel_bins: usize) -> Self {
        Self {
            specs: (0..vocab_size).map(|id| gen_token(corpus_seed, id, n_mel_bins)).collect(),
            n_mel_bins,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.specs.len()
    }
}

/// One training example with ground-truth prosody and spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: String,
    pub tokens: Vec<u32>,
    pub durations: Vec<u32>,
    pub log_f0: Vec<f32>,
    pub energy: Vec<f32>,
    pub n_mel_bins: usize,
    /// Row-major `[frames, n_mel_bins]`.
    pub mel: Vec<f32>,
}

impl Utterance {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_frames(&self) -> usize {
        self.mel.len() / self.n_mel_bins.max(1)
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.tokens.iter().map(|&t| t as usize).collect()
    }

    pub fn log_durations(&self) -> Vec<f32> {
        self.durations.iter().map(|&d| (d as f32).ln()).collect()
    }

    /// Mean over frames of the spectrogram, `[n_mel_bins]`.
    pub fn mean_frame(&self) -> Vec<f32> {
        mean_frame(&self.mel, self.n_mel_bins)
    }

    /// Checks the structural invariants of a decoded record.
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |reason: String| DataError::Inconsistent {
            label: self.speaker.clone(),
            reason,
        };
        let n = self.tokens.len();
        if n == 0 {
            return Err(bad("no tokens".into()));
        }
        if self.durations.len() != n || self.log_f0.len() != n || self.energy.len() != n {
            return Err(bad("per-token arrays differ in length".into()));
        }
        if self.durations.iter().any(|&d| d == 0) {
            return Err(bad("zero duration".into()));
        }
        let total: u64 = self.durations.iter().map(|&d| d as u64).sum();
        if self.n_mel_bins == 0 || self.mel.len() as u64 != total * self.n_mel_bins as u64 {
            return Err(bad(format!(
                "{} mel values for {total} frames of {} bins",
                self.mel.len(),
                self.n_mel_bins
            )));
        }
        Ok(())
    }
}

pub fn mean_frame(mel: &[f32], n_mel_bins: usize) -> Vec<f32> {
    let frames = (mel.len() / n_mel_bins).max(1);
    let mut acc = vec![0.0f64; n_mel_bins];
    for row in mel.chunks_exact(n_mel_bins) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    acc.iter().map(|&a| (a / frames as f64) as f32).collect()
}

pub fn render_utterance(spec: &SpeakerSpec, table: &TokenTable, tokens: &[u32]) -> Result<Utterance, DataError> {
    if tokens.is_empty() {
        return Err(DataError::Config("an utterance needs at least one token".into()));
    }
    let b = table.n_mel_bins;
    let vocab = table.vocab_size();
    let mut durations = Vec::with_capacity(tokens.len());
    let mut log_f0 = Vec::with_capacity(tokens.len());
    let mut energy = Vec::with_capacity(tokens.len());
    let mut mel = Vec::new();
    let colour: Vec<f64> = (0..b)
        .map(|i| 1.0 + 0.3 * (2.0 * PI * i as f64 / b as f64 + 0.2 * spec.pitch_offset + spec.phase).sin())
        .collect();
    for &id in tokens {
        let tok = table.specs.get(id as usize).ok_or(DataError::Vocabulary {
            id: id as usize,
            vocab_size: vocab,
        })?;
        let d = ((tok.base_duration * spec.rate).round() as u32).max(1);
        durations.push(d);
        log_f0.push((tok.base_pitch + spec.pitch_offset) as f32);
        energy.push((spec.energy_scale * tok.base_energy) as f32);
        for _ in 0..d {
            for i in 0..b {
                let v = spec.energy_scale * tok.template[i] * colour[i] + spec.timbre[i];
                mel.push(v.max(0.0) as f32);
            }
        }
    }
    Ok(Utterance {
        speaker: spec.label.clone(),
        tokens: tokens.to_vec(),
        durations,
        log_f0,
        energy,
        n_mel_bins: b,
        mel,
    })
}

/// Token sequence for utterance `index` of `label`.
pub fn gen_tokens(corpus_seed: u64, label: &str, index: usize, vocab_size: usize, len_range: (usize, usize)) -> Vec<u32> {
    let mut rng = keyed_rng(corpus_seed, "tokens", &format!("{label}/{index}"));
    let n = rng.gen_range(len_range.0..=len_range.1);
    (0..n).map(|_| rng.gen_range(0..vocab_size as u32)).collect()
}

/// Label of backbone speaker `i`; the index is its speaker-table row.
pub fn backbone_label(i: usize) -> String {
    format!("spk{i}")
}

/// Label of held-out target speaker `i`.
pub fn target_label(i: usize) -> String {
    format!("tgt{i}")
}

/// Inverse of [`backbone_label`].
pub fn backbone_row(label: &str) -> Option<usize> {
    label.strip_prefix("spk")?.parse().ok()
}

crate::kv_config! {
    pub struct CorpusConfig {
        seed: u64 = 42 => "corpus seed",
        n_speakers: usize = 8 => "backbone speakers",
        n_targets: usize = 2 => "held-out target speakers",
        utts_per_speaker: usize = 100 => "utterances per speaker (split 80/10/10)",
        min_len: usize = 5 => "minimum tokens per utterance",
        max_len: usize = 20 => "maximum tokens per utterance",
        vocab_size: usize = 40 => "token vocabulary size",
        n_mel_bins: usize = 16 => "spectrogram bins",
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_speakers < 2 {
            return Err(DataError::Config(format!("need at least 2 speakers, got {}", self.n_speakers)));
        }
        if self.utts_per_speaker == 0 || self.vocab_size == 0 || self.n_mel_bins == 0 {
            return Err(DataError::Config("utterance count, vocabulary and mel bins must be positive".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(DataError::Config(format!("bad length range {}..={}", self.min_len, self.max_len)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.name() == s)
    }

    /// 80/10/10 by utterance index.
    pub fn of_index(index: usize, total: usize) -> Split {
        let train = total * 8 / 10;
        let val = total / 10;
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// A collection of utterances, in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn speakers(&self) -> Vec<String> {
        let mut s: Vec<String> = self.utterances.iter().map(|u| u.speaker.clone()).collect();
        s.sort();
        s.dedup();
        s
    }

    pub fn of_speaker(&self, label: &str) -> Dataset {
        Dataset {
            utterances: self.utterances.iter().filter(|u| u.speaker == label).cloned().collect(),
        }
    }

    pub fn first(&self, n: usize) -> Dataset {
        Dataset {
            utterances: self.utterances.iter().take(n).cloned().collect(),
        }
    }
}

/// All splits of one speaker group.
#[derive(Clone, Debug, Default)]
pub struct SplitSet {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl SplitSet {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Dataset {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// In-memory corpus: backbone speakers and held-out targets.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub backbone: SplitSet,
    pub target: SplitSet,
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, DataError> {
    config.validate()?;
    let table = TokenTable::new(config.seed, config.vocab_size, config.n_mel_bins);
    let mut backbone = SplitSet::default();
    let mut target = SplitSet::default();
    let groups: Vec<(String, bool)> = (0..config.n_speakers)
        .map(|i| (backbone_label(i), true))
        .chain((0..config.n_targets).map(|i| (target_label(i), false)))
        .collect();
    for (label, is_backbone) in groups {
        let spec = gen_speaker(config.seed, &label, config.n_mel_bins);
        for index in 0..config.utts_per_speaker {
            let tokens = gen_tokens(config.seed, &label, index, config.vocab_size, (config.min_len, config.max_len));
            let utt = render_utterance(&spec, &table, &tokens)?;
            let split = Split::of_index(index, config.utts_per_speaker);
            let set = if is_backbone { &mut backbone } else { &mut target };
            set.get_mut(split).utterances.push(utt);
        }
    }
    Ok(Corpus {
        config: config.clone(),
        backbone,
        target,
    })
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CORPUS_CONFIG_FILE: &str = "corpus.config";

pub fn dataset_file(group: &str, split: Split) -> String {
    format!("{group}.{}.sds", split.name())
}

/// Generates the corpus and writes `{backbone,target}.{train,val,test}.sds`
/// plus a manifest into `dir`.
pub fn make_corpus(config: &CorpusConfig, dir: &Path) -> Result<Corpus, DataError> {
    let corpus = generate_corpus(config)?;
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut manifest = Vec::new();
    for (group, set) in [("backbone", &corpus.backbone), ("target", &corpus.target)] {
        for split in Split::ALL {
            let ds = set.get(split);
            save_dataset(ds, &dir.join(dataset_file(group, split)))?;
            for (i, u) in ds.utterances.iter().enumerate() {
                manifest.push(ManifestEntry {
                    split: format!("{group}.{}", split.name()),
                    speaker: u.speaker.clone(),
                    record_index: i,
                });
            }
        }
    }
    write_manifest(&manifest, &dir.join(MANIFEST_FILE))?;
    let cfg_path = dir.join(CORPUS_CONFIG_FILE);
    std::fs::write(&cfg_path, render_kv(&config.pairs())).map_err(|e| DataError::io(&cfg_path, e))?;
    Ok(corpus)
}

/// Loads a corpus directory together with the configuration recorded in it.
pub fn open_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let cfg_path = dir.join(CORPUS_CONFIG_FILE);
    let text = std::fs::read_to_string(&cfg_path).map_err(|e| DataError::io(&cfg_path, e))?;
    let mut config = CorpusConfig::default();
    for (k, v) in parse_kv(&text).map_err(|e| DataError::Config(e.to_string()))? {
        if !config.set(&k, &v).map_err(|e| DataError::Config(e.to_string()))? {
            return Err(DataError::Config(format!("unknown corpus key `{k}`")));
        }
    }
    config.validate()?;
    load_corpus(dir, &config)
}

/// Loads every split written by [`make_corpus`].
pub fn load_corpus(dir: &Path, config: &CorpusConfig) -> Result<Corpus, DataError> {
    let mut backbone = SplitSet::default();
    let mut target = SplitSet::default();
    for split in Split::ALL {
        *backbone.get_mut(split) = load_dataset(&dir.join(dataset_file("backbone", split)))?;
        *target.get_mut(split) = load_dataset(&dir.join(dataset_file("target", split)))?;
    }
    Ok(Corpus {
        config: config.clone(),
        backbone,
        target,
    })
}

/// Which source a mixed draw came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Backbone,
    Target,
}

/// Endless stream of draws mixing two datasets at ratio `a:b`.
pub struct MixStream<'a, R: Rng> {
    backbone: &'a Dataset,
    target: &'a Dataset,
    p_backbone: f64,
    rng: R,
}

pub fn mix_stream<'a, R: Rng>(
    backbone: &'a Dataset,
    target: &'a Dataset,
    ratio: (u32, u32),
    rng: R,
) -> Result<MixStream<'a, R>, DataError> {
    let (a, b) = ratio;
    if a == 0 && b == 0 {
        return Err(DataError::Config("mixing ratio 0:0".into()));
    }
    if a > 0 && backbone.is_empty() {
        return Err(DataError::EmptySource("backbone"));
    }
    if b > 0 && target.is_empty() {
        return Err(DataError::EmptySource("target"));
    }
    Ok(MixStream {
        backbone,
        target,
        p_backbone: a as f64 / (a as f64 + b as f64),
        rng,
    })
}

impl<'a, R: Rng> Iterator for MixStream<'a, R> {
    type Item = (Source, &'a Utterance);

    fn next(&mut self) -> Option<Self::Item> {
        let (src, ds) = if self.rng.gen::<f64>() < self.p_backbone {
            (Source::Backbone, self.backbone)
        } else {
            (Source::Target, self.target)
        };
        let i = self.rng.gen_range(0..ds.len());
        Some((src, &ds.utterances[i]))
    }
}
