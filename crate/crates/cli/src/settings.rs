//! Per-subcommand configuration: which key groups a command accepts, their
//! defaults, and the error type that maps failures to exit codes.

use std::fmt::Write as _;

use thiserror::Error;

use adaptts::adapters::AdapterError;
use adaptts::backbone::{BackboneConfig, ModelError};
use adaptts::config::ConfigError;
use adaptts::evaluation::EvalError;
use adaptts::serving::ServeError;
use adaptts::synthdata::{CorpusConfig, DataError};
use adaptts::training::{SpeakerEncoderConfig, TrainConfig, TrainError, Variant};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("training aborted: {0}")]
    Aborted(String),
    #[error("serve: {0}")]
    Serve(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Aborted(_) => 4,
            CliError::Serve(_) => 5,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Bottleneck { .. } => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Aborted(e.to_string()),
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Adapter(a) => a.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Train(t) => t.into(),
            EvalError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ServeError> for CliError {
    fn from(e: ServeError) -> Self {
        CliError::Serve(e.to_string())
    }
}

adaptts::kv_config! {
    pub struct PathConfig {
        data: String = String::new() => "corpus directory written by gen-data",
        backbone: String = String::new() => "backbone checkpoint",
        base_backbone: String = String::new() => "pre-adaptation backbone to check immutability against (defaults to backbone)",
        pack: String = String::new() => "adapter pack file",
        encoder: String = String::new() => "speaker-encoder checkpoint",
        speaker: String = "tgt0".to_string() => "target speaker label",
        tokens: String = String::new() => "comma-separated token ids",
        row: usize = 0 => "speaker-table row used when no pack is given",
        inputs: String = String::new() => "comma-separated eval.csv files",
        references: usize = 10 => "reference utterances for zero-shot conditioning",
    }
}

adaptts::kv_config! {
    pub struct ParamsConfig {
        d: usize = 32 => "adapter input width",
        r: usize = 4 => "adapter bottleneck width",
        sites: usize = 3 => "number of adapter sites",
        backbone_total: usize = 90803 => "backbone parameter count for the percentage",
    }
}

adaptts::kv_config! {
    pub struct ServeConfig {
        capacity: usize = 4 => "resident adapter packs before LRU eviction",
    }
}

pub const COMMANDS: [&str; 11] = [
    "gen-data",
    "pretrain",
    "adapt",
    "finetune",
    "embed-only",
    "train-spkenc",
    "synth",
    "eval",
    "report",
    "params",
    "serve",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Corpus,
    Model,
    Train,
    Spkenc,
    Paths,
    Params,
    Serve,
}

impl Group {
    fn prefix(self) -> &'static str {
        match self {
            Group::Corpus => "corpus.",
            Group::Spkenc => "spkenc.",
            _ => "",
        }
    }
}

/// Everything one subcommand can be configured with.
#[derive(Clone, Debug)]
pub struct Settings {
    pub command: &'static str,
    groups: &'static [Group],
    path_keys: &'static [&'static str],
    pub corpus: CorpusConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub spkenc: SpeakerEncoderConfig,
    pub paths: PathConfig,
    pub params: ParamsConfig,
    pub serve: ServeConfig,
}

impl Settings {
    pub fn for_command(command: &str) -> Self {
        use Group::*;
        let (command, groups, path_keys): (&'static str, &'static [Group], &'static [&'static str]) = match command {
            "gen-data" => ("gen-data", &[Corpus], &[]),
            "pretrain" => ("pretrain", &[Model, Train, Paths], &["data", "encoder"]),
            "adapt" => ("adapt", &[Train, Paths], &["data", "backbone", "speaker"]),
            "finetune" => ("finetune", &[Train, Paths], &["data", "backbone", "speaker"]),
            "embed-only" => ("embed-only", &[Train, Paths], &["data", "backbone", "speaker"]),
            "train-spkenc" => ("train-spkenc", &[Spkenc, Paths], &["data"]),
            "synth" => ("synth", &[Paths], &["backbone", "pack", "tokens", "row"]),
            "eval" => (
                "eval",
                &[Train, Paths],
                &["data", "backbone", "base_backbone", "pack", "encoder", "speaker", "references"],
            ),
            "report" => ("report", &[Paths], &["inputs"]),
            "params" => ("params", &[Params], &[]),
            "serve" => ("serve", &[Paths, Serve], &["backbone"]),
            other => panic!("unknown subcommand `{other}`"),
        };
        let mut train = if command == "pretrain" {
            TrainConfig::pretrain_default()
        } else {
            TrainConfig::default()
        };
        train.variant = match command {
            "finetune" => Variant::FinetuneFull,
            "embed-only" => Variant::FinetuneEmbedOnly,
            _ => Variant::Adapters,
        };
        Self {
            command,
            groups,
            path_keys,
            corpus: CorpusConfig::default(),
            model: BackboneConfig::default(),
            train,
            spkenc: SpeakerEncoderConfig::default(),
            paths: PathConfig::default(),
            params: ParamsConfig::default(),
            serve: ServeConfig::default(),
        }
    }

    fn keys(&self, g: Group) -> Vec<(&'static str, &'static str)> {
        let all: &[(&str, &str)] = match g {
            Group::Corpus => CorpusConfig::KEYS,
            Group::Model => BackboneConfig::KEYS,
            Group::Train => TrainConfig::KEYS,
            Group::Spkenc => SpeakerEncoderConfig::KEYS,
            Group::Paths => PathConfig::KEYS,
            Group::Params => ParamsConfig::KEYS,
            Group::Serve => ServeConfig::KEYS,
        };
        all.iter()
            .copied()
            .filter(|(k, _)| g != Group::Paths || self.path_keys.contains(k))
            .filter(|(k, _)| !self.fixed_variant() || *k != "variant")
            .collect()
    }

    fn fixed_variant(&self) -> bool {
        matches!(self.command, "adapt" | "finetune" | "embed-only")
    }

    fn group_pairs(&self, g: Group) -> Vec<(String, String)> {
        let all = match g {
            Group::Corpus => self.corpus.pairs(),
            Group::Model => self.model.pairs(),
            Group::Train => self.train.pairs(),
            Group::Spkenc => self.spkenc.pairs(),
            Group::Paths => self.paths.pairs(),
            Group::Params => self.params.pairs(),
            Group::Serve => self.serve.pairs(),
        };
        let keys = self.keys(g);
        all.into_iter()
            .filter(|(k, _)| keys.iter().any(|(kk, _)| kk == k))
            .map(|(k, v)| (format!("{}{k}", g.prefix()), v))
            .collect()
    }

    /// Applies one `key=value`; keys outside this command's groups are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        for &g in self.groups {
            let Some(k) = key.strip_prefix(g.prefix()) else { continue };
            if !self.keys(g).iter().any(|(kk, _)| *kk == k) {
                continue;
            }
            let known = match g {
                Group::Corpus => self.corpus.set(k, value)?,
                Group::Model => self.model.set(k, value)?,
                Group::Train => self.train.set(k, value)?,
                Group::Spkenc => self.spkenc.set(k, value)?,
                Group::Paths => self.paths.set(k, value)?,
                Group::Params => self.params.set(k, value)?,
                Group::Serve => self.serve.set(k, value)?,
            };
            if known {
                return Ok(());
            }
        }
        Err(ConfigError::UnknownKey(key.to_string()))
    }

    /// `--seed` targets the seed of whatever this command generates or trains.
    pub fn set_seed(&mut self, seed: u64) {
        if self.groups.contains(&Group::Corpus) {
            self.corpus.seed = seed;
        }
        if self.groups.contains(&Group::Spkenc) {
            self.spkenc.seed = seed;
        }
        if self.groups.contains(&Group::Train) {
            self.train.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for &g in self.groups {
            match g {
                Group::Corpus => self.corpus.validate()?,
                Group::Model => self.model.validate()?,
                Group::Train => self.train.validate()?,
                Group::Spkenc if self.spkenc.batch_size == 0 || self.spkenc.hidden == 0 => {
                    return Err(CliError::Config("spkenc.batch_size and spkenc.hidden must be positive".into()))
                }
                Group::Params if self.params.backbone_total == 0 => {
                    return Err(CliError::Config("backbone_total must be positive".into()))
                }
                Group::Params if self.params.r == 0 || self.params.r > self.params.d => {
                    return Err(CliError::Config(format!("r must be in 1..={}", self.params.d)))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Backbone shape must agree with the corpus it is trained on.
    pub fn check_model_against(&self, corpus: &CorpusConfig) -> Result<(), CliError> {
        let m = &self.model;
        if m.vocab_size != corpus.vocab_size || m.n_mel_bins != corpus.n_mel_bins || m.n_speakers != corpus.n_speakers {
            return Err(CliError::Config(format!(
                "model (vocab {}, bins {}, speakers {}) does not match corpus (vocab {}, bins {}, speakers {})",
                m.vocab_size, m.n_mel_bins, m.n_speakers, corpus.vocab_size, corpus.n_mel_bins, corpus.n_speakers
            )));
        }
        Ok(())
    }

    /// Effective configuration, one `key=value` per accepted key.
    /// Effective configuration, including the variant fixed by the command.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.groups.iter().flat_map(|&g| self.group_pairs(g)).collect();
        if self.fixed_variant() {
            out.push(("variant".into(), self.train.variant.tag().into()));
        }
        out
    }

    /// Key listing for `--help`.
    pub fn help(&self) -> String {
        let mut out = String::from("Configuration keys (--config file or --set key=value):\n");
        for &g in self.groups {
            let defaults = self.group_pairs(g);
            for ((key, value), (_, help)) in defaults.iter().zip(self.keys(g)) {
                let shown = if value.is_empty() { "<unset>" } else { value };
                let _ = writeln!(out, "  {key:<28} {help} [default: {shown}]");
            }
        }
        out
    }
}
