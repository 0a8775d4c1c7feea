//! Backbone pretraining, adapter adaptation and the baseline fine-tuning
//! families, all driven by one minibatch loop.

mod spkenc;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapters::{insert_adapters, AdapterError, AdapterPack};
use crate::backbone::{
    teacher_forced_batch, Backbone, BackboneConfig, BnUpdate, Forward, LossValues, ModelError, SpeakerRef,
};
use crate::config::{format_sig, ConfigError};
use crate::synthdata::{backbone_row, keyed_rng, mix_stream, DataError, Dataset, Source, Utterance};
use crate::tensorcore::{clip_global_norm, Adam, AdamConfig, LrSchedule, Mode, ParamStore, Tensor, TensorError};

pub use spkenc::{train_speaker_encoder, zero_shot_condition, SpeakerEncoder, SpeakerEncoderConfig, SPKENC_PREFIX};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}: total={} mel={} dur={} f0={} energy={}", .losses.total, .losses.mel, .losses.dur, .losses.f0, .losses.energy)]
    NonFinite { step: u64, losses: LossValues },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
    #[error("contract violated: {0}")]
    Contract(String),
}

/// Training variants, as tagged in configs and reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Adapters,
    FinetuneFull,
    FinetuneEmbedOnly,
    ZeroShotDvector,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Adapters,
        Variant::FinetuneFull,
        Variant::FinetuneEmbedOnly,
        Variant::ZeroShotDvector,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Adapters => "adapters",
            Variant::FinetuneFull => "finetune_full",
            Variant::FinetuneEmbedOnly => "finetune_embed_only",
            Variant::ZeroShotDvector => "zero_shot_dvector",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| format!("expected one of adapters, finetune_full, finetune_embed_only, zero_shot_dvector"))
    }
}

/// Backbone:target sampling ratio, or no mixing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixRatio(pub Option<(u32, u32)>);

impl fmt::Display for MixRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            None => f.write_str("none"),
            Some((a, b)) => write!(f, "{a}:{b}"),
        }
    }
}

impl FromStr for MixRatio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            return Ok(MixRatio(None));
        }
        let (a, b) = s.split_once(':').ok_or("expected `none` or `a:b`")?;
        let a: u32 = a.trim().parse().map_err(|e| format!("{e}"))?;
        let b: u32 = b.trim().parse().map_err(|e| format!("{e}"))?;
        if a == 0 && b == 0 {
            return Err("ratio 0:0".into());
        }
        Ok(MixRatio(Some((a, b))))
    }
}

crate::kv_config! {
    pub struct TrainConfig {
        steps: u64 = 1500 => "optimizer steps",
        batch_size: usize = 8 => "utterances per step",
        lr_init: f64 = 1e-3 => "cosine schedule start",
        lr_final: f64 = 1e-5 => "cosine schedule floor",
        decay_steps: u64 = 0 => "cosine decay length in steps (0 = 80% of steps)",
        constant_lr: f64 = 1e-4 => "constant rate for non-embedding weights in full fine-tuning",
        clip_norm: f64 = 1.0 => "global gradient-norm clip (0 disables)",
        seed: u64 = 42 => "training seed",
        mix: MixRatio = MixRatio(None) => "backbone:target data mixing ratio, e.g. 99:1, or none",
        eval_every: u64 = 100 => "log interval in steps",
        variant: Variant = Variant::Adapters => "adapters | finetune_full | finetune_embed_only | zero_shot_dvector",
        adapter_r: usize = 4 => "bottleneck width of decoder adapters",
        variance_sites: bool = false => "also insert adapters into the variance heads",
        variance_r: usize = 4 => "bottleneck width of variance-head adapters",
        adapter_dropout: f64 = 0.1 => "dropout inside adapters during training",
        target_utts: usize = 20 => "number of target-speaker training utterances",
    }
}

impl TrainConfig {
    /// Backbone pretraining budget: 3000 steps of 16 utterances.
    pub fn pretrain_default() -> Self {
        Self {
            steps: 3000,
            batch_size: 16,
            ..Self::default()
        }
    }

    pub fn effective_decay_steps(&self) -> u64 {
        if self.decay_steps == 0 {
            ((self.steps as f64) * 0.8).round() as u64
        } else {
            self.decay_steps
        }
    }

    pub fn cosine(&self) -> LrSchedule {
        LrSchedule::Cosine {
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            decay_steps: self.effective_decay_steps(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.batch_size == 0 {
            return Err(ConfigError::Constraint("batch_size must be positive".into()));
        }
        if self.decay_steps > self.steps {
            return Err(ConfigError::Constraint(format!(
                "decay_steps {} exceeds steps {}",
                self.decay_steps, self.steps
            )));
        }
        if self.eval_every == 0 {
            return Err(ConfigError::Constraint("eval_every must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adapter_dropout) {
            return Err(ConfigError::Constraint("adapter_dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// One step's learning rate and batch-mean losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub losses: LossValues,
}

impl LogRecord {
    pub fn line(&self) -> String {
        let s = |v: f64| format_sig(v, 6);
        format!(
            "step={} lr={} loss_total={} loss_mel={} loss_dur={} loss_f0={} loss_energy={}",
            self.step,
            s(self.lr),
            s(self.losses.total),
            s(self.losses.mel),
            s(self.losses.dur),
            s(self.losses.f0),
            s(self.losses.energy)
        )
    }
}

/// Every step's record plus the forward-only evaluation at step `steps`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn first(&self) -> Option<&LogRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }
}

/// A store updated by its own Adam instance on its own schedule.
struct Group {
    store: ParamStore,
    schedule: LrSchedule,
    adam: Adam,
}

impl Group {
    fn new(store: ParamStore, schedule: LrSchedule) -> Self {
        Self {
            store,
            schedule,
            adam: Adam::new(AdamConfig::default()),
        }
    }
}

struct Sample<'d> {
    utt: &'d Utterance,
    speaker: SpeakerRef<'d>,
}

struct LoopSpec<'c> {
    cfg: &'c BackboneConfig,
    tc: &'c TrainConfig,
    freeze_bn: bool,
    stream: &'static str,
}

/// Runs `tc.steps` optimizer steps, then one forward-only batch at step
/// `tc.steps` so the log ends with the loss of the final weights.
///
/// Each batch is one graph; its loss is the batch mean, gradients are clipped
/// jointly across groups, and batch-norm statistics pooled over the batch are
/// folded into whichever group owns them.
fn train_loop<'d>(
    spec: &LoopSpec<'_>,
    groups: &mut [Group],
    frozen: &[&ParamStore],
    mut draw: impl FnMut(&mut ChaCha8Rng) -> Sample<'d>,
    log: &mut dyn Write,
) -> Result<TrainLog, TrainError> {
    let tc = spec.tc;
    tc.validate()?;
    let mut sampler = keyed_rng(tc.seed, "train-sampler", spec.stream);
    let mut dropout_seeds = keyed_rng(tc.seed, "train-dropout", spec.stream);
    let mut out = TrainLog::default();

    for step in 0..=tc.steps {
        let update = step < tc.steps;
        let batch: Vec<Sample<'d>> = (0..tc.batch_size).map(|_| draw(&mut sampler)).collect();
        let stores: Vec<&ParamStore> = groups.iter().map(|g| &g.store).chain(frozen.iter().copied()).collect();
        let mut f = Forward::<f32>::new(stores, Mode::Train).with_seed(dropout_seeds.gen());
        f.freeze_bn = spec.freeze_bn || !update;
        f.adapter_dropout = tc.adapter_dropout;
        f.want_grads = update;
        let pairs: Vec<(&Utterance, SpeakerRef<'_>)> = batch.iter().map(|s| (s.utt, s.speaker)).collect();
        let per_utt = teacher_forced_batch(&mut f, spec.cfg, &pairs)?;
        let mut losses = LossValues::default();
        for l in &per_utt {
            let v = l.values(&f);
            if !v.is_finite() {
                return Err(TrainError::NonFinite { step, losses: v });
            }
            losses.add(&v);
        }
        let mut sums: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut bn_updates: Vec<BnUpdate> = Vec::new();
        if update {
            let mut total = per_utt[0].total;
            for l in &per_utt[1..] {
                total = f.g.add(total, l.total)?;
            }
            let mean = f.g.scale(total, 1.0 / tc.batch_size as f64);
            f.g.backward(mean)?;
            sums = f.grads();
            bn_updates = std::mem::take(&mut f.bn_updates);
        }
        drop(f);

        let losses = losses.scaled(1.0 / tc.batch_size as f64);
        let record = LogRecord {
            step,
            lr: groups[0].schedule.at(step),
            losses,
        };
        if step % tc.eval_every == 0 || step + 1 >= tc.steps {
            writeln!(log, "{}", record.line())?;
        }
        out.records.push(record);
        if !update {
            break;
        }

        clip_global_norm(&mut [&mut sums], tc.clip_norm);
        for group in groups.iter_mut() {
            for name in group.store.trainable_names() {
                let t = group.store.tensor_mut(&name)?;
                let g = sums.remove(&name).unwrap_or_else(|| vec![0.0; t.numel()]);
                t.set_grad(g)?;
            }
            let lr = group.schedule.at(step);
            group.adam.step(&mut group.store, lr)?;
        }
        for u in &bn_updates {
            let key = format!("{}.running_mean", u.prefix);
            if let Some(group) = groups.iter_mut().find(|g| g.store.contains(&key)) {
                u.apply(&mut group.store, spec.cfg.bn_momentum)?;
            }
        }
    }
    Ok(out)
}

fn uniform<'d>(data: &'d Dataset, speaker: impl Fn(&'d Utterance) -> SpeakerRef<'d>) -> impl FnMut(&mut ChaCha8Rng) -> Sample<'d> {
    move |rng| {
        let utt = &data.utterances[rng.gen_range(0..data.len())];
        Sample {
            utt,
            speaker: speaker(utt),
        }
    }
}

fn row_of(utt: &Utterance) -> Result<usize, TrainError> {
    backbone_row(&utt.speaker).ok_or_else(|| TrainError::Contract(format!("`{}` is not a backbone speaker", utt.speaker)))
}

fn check_backbone_corpus(data: &Dataset, cfg: &BackboneConfig) -> Result<(), TrainError> {
    let speakers = data.speakers();
    if speakers.len() < 2 {
        return Err(TrainError::Contract(format!("pretraining needs at least 2 speakers, found {}", speakers.len())));
    }
    for u in &data.utterances {
        let row = row_of(u)?;
        if row >= cfg.n_speakers {
            return Err(TrainError::Contract(format!(
                "speaker `{}` exceeds the {}-row speaker table",
                u.speaker, cfg.n_speakers
            )));
        }
    }
    Ok(())
}

/// Trains a fresh backbone (seeded by `tc.seed`) on backbone-speaker data,
/// each utterance conditioned on its speaker-table row. The lowest
/// `frozen_encoder_layers` encoder layers keep their initial values.
pub fn pretrain_backbone(
    data: &Dataset,
    cfg: &BackboneConfig,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(Backbone, TrainLog), TrainError> {
    check_backbone_corpus(data, cfg)?;
    let init = Backbone::init(cfg, tc.seed)?;
    let mut groups = [Group::new(init.params, tc.cosine())];
    let rows: Vec<usize> = data.utterances.iter().map(row_of).collect::<Result<_, _>>()?;
    let spec = LoopSpec {
        cfg,
        tc,
        freeze_bn: false,
        stream: "pretrain",
    };
    let draw = |rng: &mut ChaCha8Rng| {
        let i = rng.gen_range(0..data.len());
        Sample {
            utt: &data.utterances[i],
            speaker: SpeakerRef::Row(rows[i]),
        }
    };
    let trained = train_loop(&spec, &mut groups, &[], draw, log)?;
    let [g] = groups;
    Ok((Backbone::from_parts(cfg.clone(), g.store)?, trained))
}

/// Pretrains the zero-shot variant: every utterance is conditioned on its
/// own unit-norm speaker-encoder embedding instead of a table row, so the
/// speaker table stays untouched.
pub fn pretrain_zero_shot_backbone(
    data: &Dataset,
    cfg: &BackboneConfig,
    encoder: &SpeakerEncoder,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(Backbone, TrainLog), TrainError> {
    check_backbone_corpus(data, cfg)?;
    if encoder.d_spk() != cfg.d_spk() {
        return Err(TrainError::Contract(format!(
            "speaker encoder width {} differs from d_spk {}",
            encoder.d_spk(),
            cfg.d_spk()
        )));
    }
    let mut init = Backbone::init(cfg, tc.seed)?;
    init.params.set_trainable("speaker_table", false)?;
    let vectors: Vec<Vec<f32>> = data
        .utterances
        .iter()
        .map(|u| zero_shot_condition(encoder, &[u]))
        .collect::<Result<_, _>>()?;
    let mut groups = [Group::new(init.params, tc.cosine())];
    let spec = LoopSpec {
        cfg,
        tc,
        freeze_bn: false,
        stream: "pretrain-zero-shot",
    };
    let draw = |rng: &mut ChaCha8Rng| {
        let i = rng.gen_range(0..data.len());
        Sample {
            utt: &data.utterances[i],
            speaker: SpeakerRef::Vector(&vectors[i]),
        }
    };
    let trained = train_loop(&spec, &mut groups, &[], draw, log)?;
    let [g] = groups;
    let mut params = g.store;
    params.set_trainable("speaker_table", true)?;
    Ok((Backbone::from_parts(cfg.clone(), params)?, trained))
}

/// Mean of the backbone speaker-table rows.
pub fn mean_speaker_row(backbone: &Backbone) -> Result<Vec<f32>, TrainError> {
    let table = backbone.params.tensor("speaker_table")?;
    let (n, d) = table.dims2()?;
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(table.row(r)) {
            *m += v as f64;
        }
    }
    Ok(mean.iter().map(|m| (m / n as f64) as f32).collect())
}

/// Label of a single-speaker target set that is not in the backbone table.
fn target_label(target: &Dataset) -> Result<String, TrainError> {
    let speakers = target.speakers();
    match speakers.as_slice() {
        [] => Err(DataError::EmptySource("target").into()),
        [label] if backbone_row(label).is_some() => Err(TrainError::Contract(format!(
            "target speaker `{label}` is already in the backbone speaker table"
        ))),
        [label] => Ok(label.clone()),
        _ => Err(TrainError::Contract(format!("target data mixes speakers {speakers:?}"))),
    }
}

fn frozen_copy(backbone: &Backbone) -> ParamStore {
    let mut p = backbone.params.clone();
    p.freeze_all();
    p
}

fn speaker_store(backbone: &Backbone) -> Result<ParamStore, TrainError> {
    let init = mean_speaker_row(backbone)?;
    let mut s = ParamStore::new();
    s.insert("speaker_vec", Tensor::from_vec(init), true)?;
    Ok(s)
}

/// Target utterances, optionally mixed with backbone utterances at
/// `tc.mix`. Target draws use `speaker_vec`; backbone draws keep their own
/// table rows.
fn adaptation_draw<'d>(
    target: &'d Dataset,
    mix_with: Option<&'d Dataset>,
    tc: &TrainConfig,
) -> Result<Box<dyn FnMut(&mut ChaCha8Rng) -> Sample<'d> + 'd>, TrainError> {
    match (tc.mix.0, mix_with) {
        (None, _) => Ok(Box::new(uniform(target, |_| SpeakerRef::Param("speaker_vec")))),
        (Some(_), None) => Err(TrainError::Contract("mixing requested without backbone data".into())),
        (Some(ratio), Some(backbone)) => {
            for u in &backbone.utterances {
                row_of(u)?;
            }
            // Validates the sources; draws then reuse the caller's generator.
            mix_stream(backbone, target, ratio, ChaCha8Rng::seed_from_u64(0))?;
            let p_backbone = ratio.0 as f64 / (ratio.0 as f64 + ratio.1 as f64);
            Ok(Box::new(move |rng: &mut ChaCha8Rng| {
                let (src, ds) = if rng.gen::<f64>() < p_backbone {
                    (Source::Backbone, backbone)
                } else {
                    (Source::Target, target)
                };
                let utt = &ds.utterances[rng.gen_range(0..ds.len())];
                let speaker = match src {
                    Source::Backbone => SpeakerRef::Row(backbone_row(&utt.speaker).expect("checked above")),
                    Source::Target => SpeakerRef::Param("speaker_vec"),
                };
                Sample { utt, speaker }
            }))
        }
    }
}

fn check_target(backbone: &Backbone, target: &Dataset) -> Result<String, TrainError> {
    let label = target_label(target)?;
    for u in &target.utterances {
        if u.n_mel_bins != backbone.config.n_mel_bins {
            return Err(TrainError::Contract(format!(
                "target utterance has {} mel bins, backbone expects {}",
                u.n_mel_bins, backbone.config.n_mel_bins
            )));
        }
    }
    Ok(label)
}

/// Adapter adaptation: the backbone, batch-norm statistics included, stays
/// frozen; fresh adapters at every site plus a new speaker vector (the mean
/// of the backbone rows) are trained on the target speaker.
pub fn adapt_speaker(
    backbone: &Backbone,
    target: &Dataset,
    mix_with: Option<&Dataset>,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(AdapterPack, TrainLog), TrainError> {
    let label = check_target(backbone, target)?;
    let cfg = &backbone.config;
    let mut rng = keyed_rng(tc.seed, "adapter-init", &label);
    let (sites, mut overlay) = insert_adapters(cfg, tc.variance_sites, tc.adapter_r, tc.variance_r, &mut rng)?;
    overlay.merge(speaker_store(backbone)?)?;
    let frozen = frozen_copy(backbone);
    let mut groups = [Group::new(overlay, tc.cosine())];
    let spec = LoopSpec {
        cfg,
        tc,
        freeze_bn: true,
        stream: "adapt",
    };
    let draw = adaptation_draw(target, mix_with, tc)?;
    let trained = train_loop(&spec, &mut groups, &[&frozen], draw, log)?;
    let [g] = groups;
    let pack = AdapterPack {
        speaker_label: label,
        fingerprint: cfg.fingerprint(),
        sites,
        params: g.store,
    };
    pack.validate()?;
    Ok((pack, trained))
}

/// Embedding-only fine-tuning: only the new speaker vector trains. The result
/// is a pack without adapter sites.
pub fn finetune_embedding_only(
    backbone: &Backbone,
    target: &Dataset,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(AdapterPack, TrainLog), TrainError> {
    let label = check_target(backbone, target)?;
    let cfg = &backbone.config;
    let frozen = frozen_copy(backbone);
    let mut groups = [Group::new(speaker_store(backbone)?, tc.cosine())];
    let spec = LoopSpec {
        cfg,
        tc,
        freeze_bn: true,
        stream: "embed-only",
    };
    let mut plain = tc.clone();
    plain.mix = MixRatio(None);
    let draw = adaptation_draw(target, None, &plain)?;
    let trained = train_loop(&spec, &mut groups, &[&frozen], draw, log)?;
    let [g] = groups;
    let pack = AdapterPack {
        speaker_label: label,
        fingerprint: cfg.fingerprint(),
        sites: Vec::new(),
        params: g.store,
    };
    pack.validate()?;
    Ok((pack, trained))
}

/// Full fine-tuning result: a complete backbone copy plus the new speaker's
/// vector, stored as a pack without sites.
#[derive(Clone, Debug)]
pub struct FineTuned {
    pub backbone: Backbone,
    pub speaker: AdapterPack,
}

/// Full fine-tuning: every parameter outside `encoder.` trains at
/// `tc.constant_lr`, the new speaker vector on the cosine schedule, and
/// batch-norm statistics keep updating.
pub fn finetune_full(
    backbone: &Backbone,
    target: &Dataset,
    mix_with: Option<&Dataset>,
    tc: &TrainConfig,
    log: &mut dyn Write,
) -> Result<(FineTuned, TrainLog), TrainError> {
    let label = check_target(backbone, target)?;
    let cfg = &backbone.config;
    let mut params = backbone.params.clone();
    params.set_trainable_where(|n| !n.starts_with("encoder.") && !crate::backbone::is_running_stat(n));
    let mut groups = [
        Group::new(speaker_store(backbone)?, tc.cosine()),
        Group::new(params, LrSchedule::Constant(tc.constant_lr)),
    ];
    let spec = LoopSpec {
        cfg,
        tc,
        freeze_bn: false,
        stream: "finetune-full",
    };
    let draw = adaptation_draw(target, mix_with, tc)?;
    let trained = train_loop(&spec, &mut groups, &[], draw, log)?;
    let [spk, body] = groups;
    let mut params = body.store;
    params.set_trainable_where(|n| backbone.params.is_trainable(n));
    let speaker = AdapterPack {
        speaker_label: label,
        fingerprint: cfg.fingerprint(),
        sites: Vec::new(),
        params: spk.store,
    };
    speaker.validate()?;
    Ok((
        FineTuned {
            backbone: Backbone::from_parts(cfg.clone(), params)?,
            speaker,
        },
        trained,
    ))
}
