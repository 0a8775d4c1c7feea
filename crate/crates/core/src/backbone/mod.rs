//! Toy non-autoregressive acoustic model: token encoder, speaker conditioning,
//! variance heads, Gaussian upsampler and a Conformer-lite decoder.

mod forward;
mod mels;
mod model;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{parse_kv, render_kv, ConfigError};
use crate::tensorcore::{load_checkpoint, save_checkpoint, CheckpointError, ParamStore, Tensor, TensorError};

pub use forward::{BnUpdate, Forward, SpeakerRef};
pub use mels::{load_mels, mels_to_pgm, read_mels, save_mels, save_pgm, write_mels, Spectrogram, MELS_MAGIC, MELS_VERSION};
pub use model::{
    condition, decode, decode_batch, encode, gaussian_upsample, l1_l2, synthesize, teacher_forced, teacher_forced_batch,
    upsample_weights, variance_predict,
    LossValues, Losses, Prosody, Voice, VARIANCE_HEADS,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("data error: {0}")]
    Data(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("incompatible model: {0}")]
    Compatibility(String),
}

crate::kv_config! {
    pub struct BackboneConfig {
        vocab_size: usize = 40 => "token vocabulary size",
        d_model: usize = 32 => "encoder/decoder width",
        n_encoder_layers: usize = 2 => "transformer encoder layers",
        n_decoder_layers: usize = 3 => "Conformer-lite decoder blocks",
        n_heads: usize = 4 => "attention heads (must divide d_model)",
        conv_kernel: usize = 3 => "odd kernel size of variance and decoder convolutions",
        n_mel_bins: usize = 16 => "spectrogram bins",
        n_speakers: usize = 8 => "rows of the speaker table",
        variance_hidden: usize = 32 => "hidden width of the variance heads",
        upsampler_sigma: f64 = 1.0 => "Gaussian upsampler width in frames",
        frozen_encoder_layers: usize = 0 => "lowest encoder layers kept frozen during backbone training",
        aux_vocab_size: usize = 0 => "auxiliary per-token embedding table size (0 disables it)",
        bn_momentum: f64 = 0.1 => "batch-norm running-statistics momentum",
        loss_weight_mel: f64 = 1.0 => "weight of the mel loss in the total",
        loss_weight_dur: f64 = 1.0 => "weight of the log-duration loss in the total",
        loss_weight_f0: f64 = 1.0 => "weight of the log-F0 loss in the total",
        loss_weight_energy: f64 = 1.0 => "weight of the energy loss in the total",
    }
}

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

impl BackboneConfig {
    /// Speaker-embedding width, a quarter of the model width.
    pub fn d_spk(&self) -> usize {
        self.d_model / 4
    }

    /// Auxiliary-embedding width; 0 when the table is disabled.
    pub fn d_aux(&self) -> usize {
        if self.aux_vocab_size > 0 {
            self.d_model / 4
        } else {
            0
        }
    }

    /// Width of the conditioned encoder output.
    pub fn d_cond(&self) -> usize {
        self.d_model + self.d_spk() + self.d_aux()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("n_heads", self.n_heads),
            ("conv_kernel", self.conv_kernel),
            ("n_mel_bins", self.n_mel_bins),
            ("n_speakers", self.n_speakers),
            ("variance_hidden", self.variance_hidden),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ConfigError::Constraint(format!("`{k}` must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ConfigError::Constraint(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_spk() == 0 {
            return Err(ConfigError::Constraint(format!(
                "d_model {} gives an empty speaker embedding (needs d_model >= 4)",
                self.d_model
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(ConfigError::Constraint(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if self.frozen_encoder_layers > self.n_encoder_layers {
            return Err(ConfigError::Constraint(format!(
                "frozen_encoder_layers {} exceeds n_encoder_layers {}",
                self.frozen_encoder_layers, self.n_encoder_layers
            )));
        }
        if !(self.upsampler_sigma > 0.0 && self.upsampler_sigma.is_finite()) {
            return Err(ConfigError::Constraint("upsampler_sigma must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(ConfigError::Constraint("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical `key=value` rendering of every field that
    /// affects the parameter layout or inference. Training-only knobs (loss
    /// weights, batch-norm momentum) are left out.
    pub fn fingerprint(&self) -> [u8; 32] {
        let pairs: Vec<(String, String)> = self
            .pairs()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("loss_weight") && k != "bn_momentum")
            .collect();
        Sha256::digest(render_kv(&pairs).as_bytes()).into()
    }

    pub fn fingerprint_hex(&self) -> String {
        self.fingerprint().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.set(&k, &v)? {
                return Err(ConfigError::UnknownKey(k));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// An assembled backbone: configuration plus every parameter, including
/// batch-norm running statistics (non-trainable entries).
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub params: ParamStore,
}

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

fn zeros(shape: &[usize]) -> Tensor<f32> {
    Tensor::zeros(shape.to_vec()).expect("positive shape")
}

fn ones(shape: &[usize]) -> Tensor<f32> {
    Tensor::ones(shape.to_vec()).expect("positive shape")
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn put(&mut self, name: String, t: Tensor<f32>, trainable: bool) {
        self.store.insert(name, t, trainable).expect("unique parameter names");
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) {
        let w = xavier(self.rng, &[din, dout], din, dout);
        self.put(format!("{prefix}.w"), w, true);
        self.put(format!("{prefix}.b"), zeros(&[dout]), true);
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.put(format!("{prefix}.gain"), ones(&[d]), true);
        self.put(format!("{prefix}.bias"), zeros(&[d]), true);
    }

    fn attention(&mut self, prefix: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            let w = xavier(self.rng, &[d, d], d, d);
            self.put(format!("{prefix}.w{p}"), w, true);
            self.put(format!("{prefix}.b{p}"), zeros(&[d]), true);
        }
    }

    fn conv(&mut self, prefix: &str, k: usize, din: usize, dout: usize) {
        let w = xavier(self.rng, &[k, din, dout], k * din, k * dout);
        self.put(format!("{prefix}.kernel"), w, true);
        self.put(format!("{prefix}.bias"), zeros(&[dout]), true);
    }

    fn ffn(&mut self, prefix: &str, d: usize) {
        self.linear(&format!("{prefix}.fc1"), d, 2 * d);
        self.linear(&format!("{prefix}.fc2"), 2 * d, d);
    }
}

impl Backbone {
    /// Freshly initialized parameters: Xavier-uniform weights, zero biases,
    /// unit norm gains, running statistics at (0, 1).
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let c = config;
        let d = c.d_model;
        let k = c.conv_kernel;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };

        let embed = xavier(b.rng, &[c.vocab_size, d], c.vocab_size, d);
        b.put("encoder.embed".into(), embed, true);
        for i in 0..c.n_encoder_layers {
            let p = format!("encoder.layers.{i}");
            b.attention(&format!("{p}.attn"), d);
            b.norm(&format!("{p}.attn_ln"), d);
            b.ffn(&format!("{p}.ffn"), d);
            b.norm(&format!("{p}.ffn_ln"), d);
        }

        let spk = xavier(b.rng, &[c.n_speakers, c.d_spk()], c.n_speakers, c.d_spk());
        b.put("speaker_table".into(), spk, true);
        if c.aux_vocab_size > 0 {
            let aux = xavier(b.rng, &[c.aux_vocab_size, c.d_aux()], c.aux_vocab_size, c.d_aux());
            b.put("aux_table".into(), aux, true);
        }

        let vh = c.variance_hidden;
        for head in VARIANCE_HEADS {
            let p = format!("variance.{head}");
            b.conv(&format!("{p}.conv1"), k, c.d_cond(), vh);
            b.norm(&format!("{p}.ln1"), vh);
            b.conv(&format!("{p}.conv2"), k, vh, vh);
            b.norm(&format!("{p}.ln2"), vh);
            b.linear(&format!("{p}.out"), vh, 1);
        }

        b.linear("decoder.in_proj", c.d_cond() + 2, d);
        for i in 0..c.n_decoder_layers {
            let p = format!("decoder.blocks.{i}");
            b.norm(&format!("{p}.ff1.ln"), d);
            b.ffn(&format!("{p}.ff1"), d);
            b.norm(&format!("{p}.mha.ln"), d);
            b.attention(&format!("{p}.mha"), d);
            b.norm(&format!("{p}.conv.ln"), d);
            b.linear(&format!("{p}.conv.pw1"), d, 2 * d);
            let dw = xavier(b.rng, &[k, d], k, k);
            b.put(format!("{p}.conv.dw.kernel"), dw, true);
            b.put(format!("{p}.conv.dw.bias"), zeros(&[d]), true);
            b.norm(&format!("{p}.conv.bn"), d);
            b.put(format!("{p}.conv.bn.running_mean"), zeros(&[d]), false);
            b.put(format!("{p}.conv.bn.running_var"), ones(&[d]), false);
            b.linear(&format!("{p}.conv.pw2"), d, d);
            b.norm(&format!("{p}.ff2.ln"), d);
            b.ffn(&format!("{p}.ff2"), d);
            b.norm(&format!("{p}.final_ln"), d);
        }
        b.linear("mel_proj", d, c.n_mel_bins);

        let mut params = b.store;
        let frozen = c.frozen_encoder_layers;
        params.set_trainable_where(|n| is_trainable_by_default(n, frozen));
        Ok(Self {
            config: config.clone(),
            params,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    /// Digest of every backbone tensor, running statistics included.
    pub fn digest(&self) -> [u8; 32] {
        self.params.digest()
    }

    /// Writes the checkpoint and its `.config` sidecar.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        save_checkpoint(&self.params, path)?;
        let side = config_sidecar(path);
        std::fs::write(&side, render_kv(&self.config.pairs())).map_err(|e| ModelError::Io { path: side, source: e })
    }

    /// Loads a checkpoint with its sidecar and checks the parameter layout
    /// against the one the configuration implies.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let side = config_sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| ModelError::Io { path: side, source: e })?;
        let config = BackboneConfig::from_kv_text(&text)?;
        let params = load_checkpoint(path)?;
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: BackboneConfig, params: ParamStore) -> Result<Self, ModelError> {
        let reference = Self::init(&config, 0)?;
        params.check_layout(&reference.params)?;
        Ok(Self { config, params })
    }
}

/// `<checkpoint>.config`.
pub fn config_sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".config");
    PathBuf::from(s)
}

/// Batch-norm running statistics are never gradient-trained.
pub fn is_running_stat(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

fn is_trainable_by_default(name: &str, frozen_encoder_layers: usize) -> bool {
    if is_running_stat(name) {
        return false;
    }
    if let Some(rest) = name.strip_prefix("encoder.layers.") {
        let layer: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
        return layer >= frozen_encoder_layers;
    }
    true
}

/// The name prefixes that partition every backbone parameter.
pub const PARAM_PREFIXES: [&str; 6] = ["encoder.", "speaker_table", "aux_table", "variance.", "decoder.", "mel_proj."];

pub fn param_prefix(name: &str) -> Option<&'static str> {
    PARAM_PREFIXES.iter().copied().find(|p| name.starts_with(p))
}

pub fn encoder_layer_of(name: &str) -> Option<usize> {
    name.strip_prefix("encoder.layers.")?.split('.').next()?.parse().ok()
}
