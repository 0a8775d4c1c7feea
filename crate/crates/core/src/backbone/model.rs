use crate::adapters::apply_site;
use crate::synthdata::Utterance;
use crate::tensorcore::nn::{self, AttentionWeights};
use crate::tensorcore::{ParamStore, Scalar, TensorError, Var};

use super::{BackboneConfig, Forward, ModelError, Spectrogram, SpeakerRef, LN_EPS};

/// Variance heads in the order log-duration, log-F0, energy.
pub const VARIANCE_HEADS: [&str; 3] = ["log_duration", "log_f0", "energy"];

fn layer_norm<T: Scalar>(f: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let gain = f.param(&format!("{prefix}.gain"))?;
    let bias = f.param(&format!("{prefix}.bias"))?;
    Ok(f.g.layer_norm(x, gain, bias, LN_EPS)?)
}

fn linear<T: Scalar>(f: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let w = f.param(&format!("{prefix}.w"))?;
    let b = f.param(&format!("{prefix}.b"))?;
    Ok(nn::linear(&mut f.g, x, w, b)?)
}

fn attention<T: Scalar>(f: &mut Forward<'_, T>, prefix: &str, x: Var, heads: usize) -> Result<Var, ModelError> {
    let mut p = |s: &str| f.param(&format!("{prefix}.{s}"));
    let w = AttentionWeights {
        wq: p("wq")?,
        bq: p("bq")?,
        wk: p("wk")?,
        bk: p("bk")?,
        wv: p("wv")?,
        bv: p("bv")?,
        wo: p("wo")?,
        bo: p("bo")?,
    };
    Ok(nn::multi_head_attention(&mut f.g, x, &w, heads)?)
}

/// Two-layer feed-forward `fc2(act(fc1(x)))`; `swish` selects the activation.
fn ffn<T: Scalar>(f: &mut Forward<'_, T>, prefix: &str, x: Var, swish: bool) -> Result<Var, ModelError> {
    let h = linear(f, &format!("{prefix}.fc1"), x)?;
    let h = if swish { f.g.swish(h)? } else { f.g.relu(h) };
    linear(f, &format!("{prefix}.fc2"), h)
}

fn add_positions<T: Scalar>(f: &mut Forward<'_, T>, x: Var) -> Result<Var, ModelError> {
    let (n, d) = (f.g.shape(x)[0], f.g.shape(x)[1]);
    let pos = f.constant(vec![n, d], &nn::sinusoidal_positions(n, d))?;
    Ok(f.g.add(x, pos)?)
}

/// Token ids to `[n, d_model]`: embedding, sinusoidal positions, then post-norm
/// transformer layers.
pub fn encode<T: Scalar>(f: &mut Forward<'_, T>, cfg: &BackboneConfig, tokens: &[usize]) -> Result<Var, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::Data("empty token sequence".into()));
    }
    let table = f.param("encoder.embed")?;
    let x = f.g.embedding(table, tokens)?;
    let mut x = add_positions(f, x)?;
    for i in 0..cfg.n_encoder_layers {
        let p = format!("encoder.layers.{i}");
        let a = attention(f, &format!("{p}.attn"), x, cfg.n_heads)?;
        let s = f.g.add(x, a)?;
        x = layer_norm(f, &format!("{p}.attn_ln"), s)?;
        let h = ffn(f, &format!("{p}.ffn"), x, false)?;
        let s = f.g.add(x, h)?;
        x = layer_norm(f, &format!("{p}.ffn_ln"), s)?;
    }
    Ok(x)
}

fn speaker_var<T: Scalar>(f: &mut Forward<'_, T>, cfg: &BackboneConfig, spk: SpeakerRef<'_>) -> Result<Var, ModelError> {
    let d_spk = cfg.d_spk();
    let v = match spk {
        SpeakerRef::Row(i) => {
            if i >= cfg.n_speakers {
                return Err(ModelError::Data(format!(
                    "speaker row {i} out of range for {} speakers",
                    cfg.n_speakers
                )));
            }
            let table = f.param("speaker_table")?;
            f.g.embedding(table, &[i])?
        }
        SpeakerRef::Param(name) => f.param(name)?,
        SpeakerRef::Vector(v) => {
            let data: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            f.constant(vec![v.len()], &data)?
        }
    };
    if f.g.value(v).numel() != d_spk {
        return Err(TensorError::Dimension {
            op: "condition",
            lhs: vec![d_spk],
            rhs: f.g.shape(v).to_vec(),
        }
        .into());
    }
    Ok(v)
}

/// Concatenates the speaker vector (and the auxiliary embedding when enabled)
/// onto every token row. Without explicit `aux_ids` every token uses row 0.
pub fn condition<T: Scalar>(
    f: &mut Forward<'_, T>,
    cfg: &BackboneConfig,
    enc: Var,
    spk: SpeakerRef<'_>,
    aux_ids: Option<&[usize]>,
) -> Result<Var, ModelError> {
    let n = f.g.shape(enc)[0];
    let s = speaker_var(f, cfg, spk)?;
    let rows = f.g.repeat_rows(s, n)?;
    let mut parts = vec![enc, rows];
    if cfg.aux_vocab_size > 0 {
        let zeros = vec![0usize; n];
        let ids = aux_ids.unwrap_or(&zeros);
        if ids.len() != n {
            return Err(ModelError::Data(format!("{} auxiliary ids for {n} tokens", ids.len())));
        }
        let table = f.param("aux_table")?;
        parts.push(f.g.embedding(table, ids)?);
    }
    Ok(f.g.concat_last(&parts)?)
}

/// Per-token predictions, each `[n, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Prosody {
    pub log_duration: Var,
    pub log_f0: Var,
    pub energy: Var,
}

fn variance_head<T: Scalar>(f: &mut Forward<'_, T>, head: &str, cond: Var) -> Result<Var, ModelError> {
    let p = format!("variance.{head}");
    let k1 = f.param(&format!("{p}.conv1.kernel"))?;
    let b1 = f.param(&format!("{p}.conv1.bias"))?;
    let h = f.g.conv1d(cond, k1, b1)?;
    let h = f.g.relu(h);
    let h = layer_norm(f, &format!("{p}.ln1"), h)?;
    let h = apply_site(f, &format!("{p}.0"), h)?;
    let k2 = f.param(&format!("{p}.conv2.kernel"))?;
    let b2 = f.param(&format!("{p}.conv2.bias"))?;
    let h = f.g.conv1d(h, k2, b2)?;
    let h = f.g.relu(h);
    let h = layer_norm(f, &format!("{p}.ln2"), h)?;
    let h = apply_site(f, &format!("{p}.1"), h)?;
    linear(f, &format!("{p}.out"), h)
}

pub fn variance_predict<T: Scalar>(f: &mut Forward<'_, T>, cond: Var) -> Result<Prosody, ModelError> {
    Ok(Prosody {
        log_duration: variance_head(f, VARIANCE_HEADS[0], cond)?,
        log_f0: variance_head(f, VARIANCE_HEADS[1], cond)?,
        energy: variance_head(f, VARIANCE_HEADS[2], cond)?,
    })
}

/// Gaussian upsampling weights `[T, n]` and the frame count
/// `T = max(1, round(sum d))`. Token centres sit at `cumsum(d) - d/2`, frames
/// at `f + 0.5`, and each frame's weights are a softmax of
/// `-(t - c)^2 / (2 sigma^2)` over tokens.
pub fn upsample_weights(durations: &[f64], sigma: f64) -> Result<(Vec<f64>, usize), ModelError> {
    if durations.is_empty() {
        return Err(ModelError::Data("no durations".into()));
    }
    if let Some(d) = durations.iter().find(|d| !(**d > 0.0 && d.is_finite())) {
        return Err(ModelError::Data(format!("duration {d} is not positive")));
    }
    if !(sigma > 0.0) {
        return Err(ModelError::Data(format!("upsampler sigma {sigma} is not positive")));
    }
    let n = durations.len();
    let mut centres = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &d in durations {
        acc += d;
        centres.push(acc - d / 2.0);
    }
    let frames = (acc.round() as usize).max(1);
    let denom = 2.0 * sigma * sigma;
    let mut w = vec![0.0; frames * n];
    for fr in 0..frames {
        let t = fr as f64 + 0.5;
        let row = &mut w[fr * n..(fr + 1) * n];
        for (r, c) in row.iter_mut().zip(&centres) {
            *r = -(t - c) * (t - c) / denom;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for r in row.iter_mut() {
            *r = (*r - max).exp();
            sum += *r;
        }
        row.iter_mut().for_each(|r| *r /= sum);
    }
    Ok((w, frames))
}

/// Expands token rows `x: [n, c]` to `[T, c]`. Durations enter as constants,
/// so no gradient reaches them.
pub fn gaussian_upsample<T: Scalar>(
    f: &mut Forward<'_, T>,
    x: Var,
    durations: &[f64],
    sigma: f64,
) -> Result<Var, ModelError> {
    let n = f.g.shape(x)[0];
    if durations.len() != n {
        return Err(ModelError::Data(format!("{} durations for {n} tokens", durations.len())));
    }
    let (w, frames) = upsample_weights(durations, sigma)?;
    let w = f.constant(vec![frames, n], &w)?;
    Ok(f.g.matmul(w, x)?)
}

fn each<T: Scalar>(
    f: &mut Forward<'_, T>,
    xs: &[Var],
    mut op: impl FnMut(&mut Forward<'_, T>, Var) -> Result<Var, ModelError>,
) -> Result<Vec<Var>, ModelError> {
    xs.iter().map(|&x| op(f, x)).collect()
}

fn add_each<T: Scalar>(f: &mut Forward<'_, T>, xs: &[Var], hs: &[Var]) -> Result<Vec<Var>, ModelError> {
    xs.iter().zip(hs).map(|(&x, &h)| Ok(f.g.add(x, h)?)).collect()
}

fn conv_module<T: Scalar>(f: &mut Forward<'_, T>, prefix: &str, xs: &[Var], d: usize) -> Result<Vec<Var>, ModelError> {
    let hs = each(f, xs, |f, x| {
        let h = layer_norm(f, &format!("{prefix}.ln"), x)?;
        let h = linear(f, &format!("{prefix}.pw1"), h)?;
        let a = f.g.slice_last(h, 0, d)?;
        let b = f.g.slice_last(h, d, 2 * d)?;
        let gate = f.g.sigmoid(b);
        let h = f.g.mul(a, gate)?;
        let k = f.param(&format!("{prefix}.dw.kernel"))?;
        let kb = f.param(&format!("{prefix}.dw.bias"))?;
        Ok(f.g.depthwise_conv1d(h, k, kb)?)
    })?;
    let hs = f.batch_norm_rows(&format!("{prefix}.bn"), &hs)?;
    each(f, &hs, |f, h| {
        let h = f.g.swish(h)?;
        linear(f, &format!("{prefix}.pw2"), h)
    })
}

fn macaron_ffn<T: Scalar>(f: &mut Forward<'_, T>, prefix: &str, x: Var) -> Result<Var, ModelError> {
    let h = layer_norm(f, &format!("{prefix}.ln"), x)?;
    let h = ffn(f, prefix, h, true)?;
    let h = f.g.scale(h, 0.5);
    Ok(f.g.add(x, h)?)
}

fn conformer_block<T: Scalar>(f: &mut Forward<'_, T>, cfg: &BackboneConfig, i: usize, xs: &[Var]) -> Result<Vec<Var>, ModelError> {
    let p = format!("decoder.blocks.{i}");
    let xs = each(f, xs, |f, x| {
        let x = macaron_ffn(f, &format!("{p}.ff1"), x)?;
        let h = layer_norm(f, &format!("{p}.mha.ln"), x)?;
        let h = attention(f, &format!("{p}.mha"), h, cfg.n_heads)?;
        Ok(f.g.add(x, h)?)
    })?;
    let hs = conv_module(f, &format!("{p}.conv"), &xs, cfg.d_model)?;
    let xs = add_each(f, &xs, &hs)?;
    each(f, &xs, |f, x| {
        let x = macaron_ffn(f, &format!("{p}.ff2"), x)?;
        layer_norm(f, &format!("{p}.final_ln"), x)
    })
}

/// Frame features `[T, d_cond + 2]` to a spectrogram `[T, n_mel_bins]`; a
/// residual-adapter site follows every block.
pub fn decode<T: Scalar>(f: &mut Forward<'_, T>, cfg: &BackboneConfig, frames: Var) -> Result<Var, ModelError> {
    Ok(decode_batch(f, cfg, &[frames])?.remove(0))
}

/// [`decode`] over several utterances at once. Everything is per utterance
/// except batch norm, whose statistics pool the frames of the whole batch.
pub fn decode_batch<T: Scalar>(f: &mut Forward<'_, T>, cfg: &BackboneConfig, frames: &[Var]) -> Result<Vec<Var>, ModelError> {
    let mut xs = each(f, frames, |f, fr| {
        let x = linear(f, "decoder.in_proj", fr)?;
        add_positions(f, x)
    })?;
    for i in 0..cfg.n_decoder_layers {
        xs = conformer_block(f, cfg, i, &xs)?;
        let site = format!("decoder.{i}");
        xs = each(f, &xs, |f, x| apply_site(f, &site, x))?;
    }
    each(f, &xs, |f, x| linear(f, "mel_proj", x))
}

/// Loss nodes of one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: Var,
    pub mel: Var,
    pub dur: Var,
    pub f0: Var,
    pub energy: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mel: f64,
    pub dur: f64,
    pub f0: f64,
    pub energy: f64,
}

impl LossValues {
    pub fn is_finite(&self) -> bool {
        [self.total, self.mel, self.dur, self.f0, self.energy]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Elementwise sum, for averaging over a batch.
    pub fn add(&mut self, o: &LossValues) {
        self.total += o.total;
        self.mel += o.mel;
        self.dur += o.dur;
        self.f0 += o.f0;
        self.energy += o.energy;
    }

    pub fn scaled(&self, s: f64) -> LossValues {
        LossValues {
            total: self.total * s,
            mel: self.mel * s,
            dur: self.dur * s,
            f0: self.f0 * s,
            energy: self.energy * s,
        }
    }
}

impl Losses {
    pub fn values<T: Scalar>(&self, f: &Forward<'_, T>) -> LossValues {
        let v = |x: Var| f.g.data(x)[0].as_f64();
        LossValues {
            total: v(self.total),
            mel: v(self.mel),
            dur: v(self.dur),
            f0: v(self.f0),
            energy: v(self.energy),
        }
    }
}

/// `mean|p - t| + mean (p - t)^2`.
pub fn l1_l2<T: Scalar>(f: &mut Forward<'_, T>, pred: Var, target: Var) -> Result<Var, ModelError> {
    let e = f.g.sub(pred, target)?;
    let a = f.g.abs(e);
    let a = f.g.mean(a);
    let s = f.g.square(e);
    let s = f.g.mean(s);
    Ok(f.g.add(a, s)?)
}

fn l2<T: Scalar>(f: &mut Forward<'_, T>, pred: Var, target: Var) -> Result<Var, ModelError> {
    let e = f.g.sub(pred, target)?;
    let s = f.g.square(e);
    Ok(f.g.mean(s))
}

fn column<T: Scalar>(f: &mut Forward<'_, T>, v: &[f32]) -> Result<Var, ModelError> {
    let data: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    f.constant(vec![v.len(), 1], &data)
}

/// Teacher-forced pass: ground-truth durations, log-F0 and energy drive the
/// upsampler path while the variance heads are trained against them.
pub fn teacher_forced<T: Scalar>(
    f: &mut Forward<'_, T>,
    cfg: &BackboneConfig,
    utt: &Utterance,
    spk: SpeakerRef<'_>,
) -> Result<Losses, ModelError> {
    Ok(teacher_forced_batch(f, cfg, &[(utt, spk)])?.remove(0))
}

/// Teacher-forced losses for a batch sharing one graph, so batch norm sees
/// the frames of every utterance.
pub fn teacher_forced_batch<T: Scalar>(
    f: &mut Forward<'_, T>,
    cfg: &BackboneConfig,
    batch: &[(&Utterance, SpeakerRef<'_>)],
) -> Result<Vec<Losses>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::Data("empty batch".into()));
    }
    struct Front {
        pred: Prosody,
        log_dur: Var,
        log_f0: Var,
        energy: Var,
    }
    let mut fronts = Vec::with_capacity(batch.len());
    let mut frames = Vec::with_capacity(batch.len());
    for &(utt, spk) in batch {
        utt.validate().map_err(|e| ModelError::Data(e.to_string()))?;
        if utt.n_mel_bins != cfg.n_mel_bins {
            return Err(ModelError::Data(format!(
                "utterance has {} mel bins, model expects {}",
                utt.n_mel_bins, cfg.n_mel_bins
            )));
        }
        let enc = encode(f, cfg, &utt.token_ids())?;
        let cond = condition(f, cfg, enc, spk, None)?;
        let pred = variance_predict(f, cond)?;

        let log_dur = column(f, &utt.log_durations())?;
        let log_f0 = column(f, &utt.log_f0)?;
        let energy = column(f, &utt.energy)?;

        let x = f.g.concat_last(&[cond, log_f0, energy])?;
        let durations: Vec<f64> = utt.durations.iter().map(|&d| d as f64).collect();
        let fr = gaussian_upsample(f, x, &durations, cfg.upsampler_sigma)?;
        if f.g.shape(fr)[0] != utt.n_frames() {
            return Err(ModelError::Data(format!(
                "mel target has {} frames but durations sum to {}",
                utt.n_frames(),
                f.g.shape(fr)[0]
            )));
        }
        frames.push(fr);
        fronts.push(Front {
            pred,
            log_dur,
            log_f0,
            energy,
        });
    }
    let mel_preds = decode_batch(f, cfg, &frames)?;

    let mut out = Vec::with_capacity(batch.len());
    for ((&(utt, _), front), mel_pred) in batch.iter().zip(fronts).zip(mel_preds) {
        let mel_data: Vec<f64> = utt.mel.iter().map(|&x| x as f64).collect();
        let mel_target = f.constant(vec![utt.n_frames(), utt.n_mel_bins], &mel_data)?;

        let mel = l1_l2(f, mel_pred, mel_target)?;
        let dur = l2(f, front.pred.log_duration, front.log_dur)?;
        let f0 = l1_l2(f, front.pred.log_f0, front.log_f0)?;
        let en = l1_l2(f, front.pred.energy, front.energy)?;

        let parts = [
            (mel, cfg.loss_weight_mel),
            (dur, cfg.loss_weight_dur),
            (f0, cfg.loss_weight_f0),
            (en, cfg.loss_weight_energy),
        ];
        let mut total: Option<Var> = None;
        for (v, w) in parts {
            let term = if w == 1.0 { v } else { f.g.scale(v, w) };
            total = Some(match total {
                None => term,
                Some(t) => f.g.add(t, term)?,
            });
        }
        out.push(Losses {
            total: total.expect("four loss terms"),
            mel,
            dur,
            f0,
            energy: en,
        });
    }
    Ok(out)
}

/// Inference: predicted prosody replaces the targets; durations are
/// `max(1, exp(log_duration))` frames.
pub fn synthesize<T: Scalar>(
    f: &mut Forward<'_, T>,
    cfg: &BackboneConfig,
    tokens: &[usize],
    spk: SpeakerRef<'_>,
) -> Result<Spectrogram, ModelError> {
    let enc = encode(f, cfg, tokens)?;
    let cond = condition(f, cfg, enc, spk, None)?;
    let pred = variance_predict(f, cond)?;
    let durations: Vec<f64> = f
        .g
        .data(pred.log_duration)
        .iter()
        .map(|v| v.as_f64().exp().max(1.0))
        .collect();
    let x = f.g.concat_last(&[cond, pred.log_f0, pred.energy])?;
    let frames = gaussian_upsample(f, x, &durations, cfg.upsampler_sigma)?;
    let mel = decode(f, cfg, frames)?;
    let shape = f.g.shape(mel).to_vec();
    Ok(Spectrogram {
        frames: shape[0],
        bins: shape[1],
        data: f.g.data(mel).iter().map(|v| v.as_f32()).collect(),
    })
}

/// Inference view of one voice: parameter stores searched in order (an
/// adapter pack over the backbone, say) and the speaker that conditions them.
#[derive(Clone, Debug)]
pub struct Voice<'a> {
    pub config: &'a BackboneConfig,
    pub stores: Vec<&'a ParamStore>,
    pub speaker: SpeakerRef<'a>,
}

impl<'a> Voice<'a> {
    pub fn new(config: &'a BackboneConfig, stores: Vec<&'a ParamStore>, speaker: SpeakerRef<'a>) -> Self {
        Self { config, stores, speaker }
    }

    pub fn synthesize(&self, tokens: &[usize]) -> Result<Spectrogram, ModelError> {
        let mut f = Forward::<f32>::infer(self.stores.clone());
        synthesize(&mut f, self.config, tokens, self.speaker)
    }

    /// Teacher-forced losses averaged over `utts`, in inference mode.
    pub fn losses(&self, utts: &[Utterance]) -> Result<LossValues, ModelError> {
        if utts.is_empty() {
            return Err(ModelError::Data("no utterances to evaluate".into()));
        }
        let mut acc = LossValues::default();
        for u in utts {
            let mut f = Forward::<f32>::infer(self.stores.clone());
            let l = teacher_forced(&mut f, self.config, u, self.speaker)?;
            acc.add(&l.values(&f));
        }
        Ok(acc.scaled(1.0 / utts.len() as f64))
    }

    pub fn mel_loss(&self, utts: &[Utterance]) -> Result<f64, ModelError> {
        Ok(self.losses(utts)?.mel)
    }
}
