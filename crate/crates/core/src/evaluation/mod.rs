//! Objective metrics: embedding cosine similarity, held-out losses, backbone
//! immutability checks and report tables.

use std::cmp::Ordering;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::adapters::{insert_adapters, AdapterError};
use crate::backbone::{is_running_stat, Backbone, ModelError, SpeakerRef, Spectrogram, Voice};
use crate::config::format_sig;
use crate::synthdata::Utterance;
use crate::tensorcore::{ParamStore, Tensor};
use crate::training::{SpeakerEncoder, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric error: {0}")]
    Metric(String),
    #[error("comparison error: {0}")]
    Comparison(String),
    #[error("report error: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `dot(a, b) / (|a| |b|)`, accumulated in double precision.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Metric(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if !(na > 0.0 && nb > 0.0) {
        return Err(EvalError::Metric("zero-norm vector".into()));
    }
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

pub fn utterance_spectrogram(u: &Utterance) -> Spectrogram {
    Spectrogram {
        frames: u.n_frames(),
        bins: u.n_mel_bins,
        data: u.mel.clone(),
    }
}

/// Mean cosine similarity of encoder embeddings over every
/// `(synthesized, reference)` pair.
pub fn speaker_similarity(encoder: &SpeakerEncoder, synth: &[Spectrogram], refs: &[Spectrogram]) -> Result<f64, EvalError> {
    if synth.is_empty() || refs.is_empty() {
        return Err(EvalError::Metric("speaker similarity needs non-empty sets".into()));
    }
    let embed = |s: &Spectrogram| encoder.embed_mel(&s.data, s.bins);
    let a: Vec<Vec<f32>> = synth.iter().map(embed).collect::<Result<_, _>>()?;
    let b: Vec<Vec<f32>> = refs.iter().map(embed).collect::<Result<_, _>>()?;
    let mut sum = 0.0;
    for x in &a {
        for y in &b {
            sum += cosine_similarity(x, y)?;
        }
    }
    Ok(sum / (a.len() * b.len()) as f64)
}

/// Number of backbone-speaker synthesis probes compared by
/// [`verify_backbone_immutability`].
pub const PROBES: usize = 5;

/// Token sequences and speaker rows of the fixed probes.
pub fn probe_requests(backbone: &Backbone) -> Vec<(Vec<usize>, usize)> {
    let c = &backbone.config;
    (0..PROBES)
        .map(|i| {
            let len = 5 + 3 * i;
            let tokens = (0..len).map(|j| (7 * i + 3 * j + 1) % c.vocab_size).collect();
            (tokens, i % c.n_speakers)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Immutability {
    pub intact: bool,
    /// Backbone tensors whose bytes differ.
    pub changed: Vec<String>,
    /// Probe indices whose synthesis is not bit-identical.
    pub probe_mismatches: Vec<usize>,
}

fn is_overlay_name(name: &str) -> bool {
    name.starts_with("adapter.") || name == "speaker_vec"
}

/// Byte-compares every non-adapter tensor of `after` with `before`, then
/// synthesizes the fixed backbone-speaker probes with the original backbone
/// and with `after` under a freshly initialized adapter pack; both must match
/// bit for bit.
pub fn verify_backbone_immutability(before: &Backbone, after: &ParamStore) -> Result<Immutability, EvalError> {
    let base: Vec<&str> = after.names().filter(|n| !is_overlay_name(n)).collect();
    let expected: Vec<&str> = before.params.names().collect();
    if base != expected {
        let (missing, extra) = after.name_diff(&before.params);
        let extra: Vec<String> = extra.into_iter().filter(|n| !is_overlay_name(n)).collect();
        return Err(EvalError::Comparison(format!("parameter names differ: missing {missing:?}, extra {extra:?}")));
    }
    let old = before.params.tensor_digests();
    let new = after.tensor_digests();
    let changed: Vec<String> = expected.iter().filter(|n| old[**n] != new[**n]).map(|n| n.to_string()).collect();

    let cfg = &before.config;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = cfg.d_model.min(cfg.variance_hidden).min(4);
    let (_, mut fresh) = insert_adapters(cfg, true, r, r, &mut rng)?;
    fresh.insert("speaker_vec", Tensor::zeros(vec![cfg.d_spk()]).map_err(ModelError::from)?, false)
        .map_err(ModelError::from)?;
    let mut probe_mismatches = Vec::new();
    for (i, (tokens, row)) in probe_requests(before).into_iter().enumerate() {
        let bare = Voice::new(cfg, vec![&before.params], SpeakerRef::Row(row)).synthesize(&tokens)?;
        let attached = Voice::new(cfg, vec![&fresh, after], SpeakerRef::Row(row)).synthesize(&tokens)?;
        if !bare.bits_eq(&attached) {
            probe_mismatches.push(i);
        }
    }
    Ok(Immutability {
        intact: changed.is_empty() && probe_mismatches.is_empty(),
        changed,
        probe_mismatches,
    })
}

/// Digest of every batch-norm running statistic.
pub fn running_stats_digest(params: &ParamStore) -> [u8; 32] {
    params.digest_where(is_running_stat)
}

/// One evaluated run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub variant: String,
    pub speaker: String,
    /// Number of target training utterances.
    pub knob: usize,
    pub mel_loss: f64,
    pub cos_sim: f64,
    /// Per-speaker trained parameters.
    pub params: usize,
    pub params_pct: f64,
    pub backbone_intact: bool,
    pub corpus_seed: u64,
}

/// Variants whose runs must leave the backbone untouched.
pub const FROZEN_VARIANTS: [&str; 2] = ["adapters", "finetune_embed_only"];

/// Evaluates one voice on target validation data: teacher-forced mel loss,
/// and speaker similarity of syntheses of the validation token sequences
/// against the validation recordings.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_voice(
    voice: &Voice<'_>,
    encoder: &SpeakerEncoder,
    val: &[Utterance],
    variant: &str,
    knob: usize,
    params: usize,
    backbone_total: usize,
    backbone_intact: bool,
    corpus_seed: u64,
) -> Result<EvalReport, EvalError> {
    let speaker = match val.first() {
        Some(u) => u.speaker.clone(),
        None => return Err(EvalError::Metric("no validation utterances".into())),
    };
    let mel_loss = voice.mel_loss(val)?;
    let synth: Vec<Spectrogram> = val.iter().map(|u| voice.synthesize(&u.token_ids())).collect::<Result<_, _>>()?;
    let refs: Vec<Spectrogram> = val.iter().map(utterance_spectrogram).collect();
    let cos_sim = speaker_similarity(encoder, &synth, &refs)?;
    Ok(EvalReport {
        variant: variant.to_string(),
        speaker,
        knob,
        mel_loss,
        cos_sim,
        params,
        params_pct: 100.0 * params as f64 / backbone_total as f64,
        backbone_intact,
        corpus_seed,
    })
}

pub const REPORT_HEADER: [&str; 8] = [
    "variant",
    "speaker",
    "knob",
    "mel_loss",
    "cos_sim",
    "params",
    "params_pct",
    "backbone_intact",
];

/// Rendered report: the machine-readable CSV and an aligned text table.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub csv: String,
    pub table: String,
}

fn cells(r: &EvalReport) -> [String; 8] {
    [
        r.variant.clone(),
        r.speaker.clone(),
        r.knob.to_string(),
        format_sig(r.mel_loss, 4),
        format_sig(r.cos_sim, 4),
        r.params.to_string(),
        format_sig(r.params_pct, 4),
        r.backbone_intact.to_string(),
    ]
}

pub fn make_report(runs: &[EvalReport]) -> Result<Report, EvalError> {
    let first = runs.first().ok_or_else(|| EvalError::Report("no runs to report".into()))?;
    if let Some(r) = runs.iter().find(|r| r.corpus_seed != first.corpus_seed) {
        return Err(EvalError::Report(format!(
            "runs mix corpus seeds {} and {}",
            first.corpus_seed, r.corpus_seed
        )));
    }
    for r in runs {
        if !(r.mel_loss.is_finite() && r.cos_sim.is_finite() && r.params_pct.is_finite()) {
            return Err(EvalError::Report(format!("non-finite metric in {} / {}", r.variant, r.speaker)));
        }
        if FROZEN_VARIANTS.contains(&r.variant.as_str()) && !r.backbone_intact {
            return Err(EvalError::Report(format!("{} run for {} altered the backbone", r.variant, r.speaker)));
        }
    }
    let mut sorted: Vec<&EvalReport> = runs.iter().collect();
    sorted.sort_by(|a, b| {
        (a.variant.as_str(), a.speaker.as_str(), a.knob)
            .cmp(&(b.variant.as_str(), b.speaker.as_str(), b.knob))
            .then_with(|| a.mel_loss.partial_cmp(&b.mel_loss).unwrap_or(Ordering::Equal))
    });
    let rows: Vec<[String; 8]> = sorted.iter().map(|r| cells(r)).collect();

    let mut csv = REPORT_HEADER.join(",");
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.join(","));
        csv.push('\n');
    }

    let header: [String; 8] = REPORT_HEADER.map(str::to_string);
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let numeric = [false, false, true, true, true, true, true, false];
    let mut table = String::new();
    for row in std::iter::once(&header).chain(&rows) {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .zip(numeric)
            .map(|((c, w), num)| if num { format!("{c:>w$}") } else { format!("{c:<w$}") })
            .collect();
        table.push_str(line.join("  ").trim_end());
        table.push('\n');
    }
    Ok(Report { csv, table })
}

/// Writes `report.csv` and `report.txt` into `dir`.
pub fn write_report(report: &Report, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    let csv = dir.join("report.csv");
    let txt = dir.join("report.txt");
    for (path, body) in [(&csv, &report.csv), (&txt, &report.table)] {
        std::fs::write(path, body).map_err(|e| EvalError::Io {
            path: path.clone(),
            source: e,
        })?;
    }
    Ok((csv, txt))
}

/// Per-run evaluation file: the report columns plus `corpus_seed`.
pub fn eval_csv(runs: &[EvalReport]) -> String {
    let mut out = format!("{},corpus_seed\n", REPORT_HEADER.join(","));
    for r in runs {
        out.push_str(&cells(r).join(","));
        out.push_str(&format!(",{}\n", r.corpus_seed));
    }
    out
}

pub fn parse_eval_csv(text: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut lines = text.lines();
    if lines.next() != Some(format!("{},corpus_seed", REPORT_HEADER.join(",")).as_str()) {
        return Err(EvalError::Report("missing evaluation header".into()));
    }
    let bad = |l: &str| EvalError::Report(format!("malformed evaluation row `{l}`"));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 9 {
                return Err(bad(l));
            }
            Ok(EvalReport {
                variant: f[0].to_string(),
                speaker: f[1].to_string(),
                knob: f[2].parse().map_err(|_| bad(l))?,
                mel_loss: f[3].parse().map_err(|_| bad(l))?,
                cos_sim: f[4].parse().map_err(|_| bad(l))?,
                params: f[5].parse().map_err(|_| bad(l))?,
                params_pct: f[6].parse().map_err(|_| bad(l))?,
                backbone_intact: f[7].parse().map_err(|_| bad(l))?,
                corpus_seed: f[8].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - 0.70711).abs() < 1e-5);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert!(cosine_similarity(&[1.0], &[1.0, 0.0]).is_err());
    }
}
