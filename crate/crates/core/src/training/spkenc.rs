//! Utterance-level speaker encoder: mean-pooled mel frame, two dense layers
//! to a `d_spk` embedding, and a speaker-classification head used only for
//! training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ConfigError;
use crate::synthdata::{backbone_row, keyed_rng, mean_frame, Dataset, Utterance};
use crate::tensorcore::{
    load_checkpoint, nn, save_checkpoint, Adam, AdamConfig, Graph, LrSchedule, ParamStore, Tensor, TensorError, Var,
};

use super::TrainError;

pub const SPKENC_PREFIX: &str = "spkenc.";

crate::kv_config! {
    pub struct SpeakerEncoderConfig {
        hidden: usize = 32 => "hidden width of the speaker encoder",
        d_spk: usize = 8 => "embedding width (must equal the backbone speaker width)",
        steps: u64 = 1500 => "optimizer steps",
        batch_size: usize = 64 => "utterances per step",
        lr_init: f64 = 3e-3 => "cosine schedule start",
        lr_final: f64 = 1e-5 => "cosine schedule floor",
        seed: u64 = 42 => "initialization and sampling seed",
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEncoder {
    pub params: ParamStore,
}

fn p(name: &str) -> String {
    format!("{SPKENC_PREFIX}{name}")
}

fn uniform(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Tensor<f32> {
    let bound = (6.0 / (din + dout) as f64).sqrt();
    let data = (0..din * dout).map(|_| rng.gen_range(-bound..bound) as f32).collect();
    Tensor::new(vec![din, dout], data).expect("positive shape")
}

impl SpeakerEncoder {
    pub fn init(n_mel_bins: usize, hidden: usize, d_spk: usize, n_speakers: usize, seed: u64) -> Result<Self, TrainError> {
        if n_mel_bins == 0 || hidden == 0 || d_spk == 0 || n_speakers < 2 {
            return Err(ConfigError::Constraint("speaker encoder needs positive widths and at least 2 speakers".into()).into());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, din, dout) in [("fc1", n_mel_bins, hidden), ("fc2", hidden, d_spk), ("head", d_spk, n_speakers)] {
            params.insert(p(&format!("{name}.w")), uniform(&mut rng, din, dout), true)?;
            params.insert(p(&format!("{name}.b")), Tensor::zeros(vec![dout])?, true)?;
        }
        Ok(Self { params })
    }

    fn dims(&self, name: &str) -> (usize, usize) {
        self.params
            .tensor(&p(&format!("{name}.w")))
            .and_then(|t| t.dims2())
            .expect("validated layout")
    }

    pub fn n_mel_bins(&self) -> usize {
        self.dims("fc1").0
    }

    pub fn d_spk(&self) -> usize {
        self.dims("fc2").1
    }

    pub fn n_speakers(&self) -> usize {
        self.dims("head").1
    }

    fn check_layout(&self) -> Result<(), TensorError> {
        let get = |n: &str| self.params.tensor(&p(n));
        let mut prev = None;
        for layer in ["fc1", "fc2", "head"] {
            let (din, dout) = get(&format!("{layer}.w"))?.dims2()?;
            if prev.is_some_and(|d| d != din) || get(&format!("{layer}.b"))?.shape() != [dout] {
                return Err(TensorError::Contract(format!("speaker encoder layer `{layer}` has inconsistent shapes")));
            }
            prev = Some(dout);
        }
        if self.params.len() != 6 {
            return Err(TensorError::Contract("unexpected speaker encoder entries".into()));
        }
        Ok(())
    }

    fn embed_graph(&self, g: &mut Graph<f32>, x: Var, train: bool) -> Result<Var, TensorError> {
        let leaf = |g: &mut Graph<f32>, n: &str| -> Result<Var, TensorError> {
            Ok(g.leaf(self.params.tensor(&p(n))?.clone().with_requires_grad(train)))
        };
        let (w1, b1) = (leaf(g, "fc1.w")?, leaf(g, "fc1.b")?);
        let (w2, b2) = (leaf(g, "fc2.w")?, leaf(g, "fc2.b")?);
        let h = nn::linear(g, x, w1, b1)?;
        let h = g.relu(h);
        nn::linear(g, h, w2, b2)
    }

    /// Raw (unnormalized) embedding of a `[frames, bins]` spectrogram.
    pub fn embed_mel(&self, mel: &[f32], bins: usize) -> Result<Vec<f32>, TrainError> {
        if bins != self.n_mel_bins() || mel.is_empty() || mel.len() % bins != 0 {
            return Err(TrainError::Contract(format!(
                "spectrogram of {} values with {bins} bins; encoder expects {} bins",
                mel.len(),
                self.n_mel_bins()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, bins], mean_frame(mel, bins))?);
        let e = self.embed_graph(&mut g, x, false)?;
        Ok(g.data(e).to_vec())
    }

    pub fn embed(&self, utt: &Utterance) -> Result<Vec<f32>, TrainError> {
        self.embed_mel(&utt.mel, utt.n_mel_bins)
    }

    /// Most likely backbone-speaker row.
    pub fn classify(&self, utt: &Utterance) -> Result<usize, TrainError> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, utt.n_mel_bins], utt.mean_frame())?);
        let e = self.embed_graph(&mut g, x, false)?;
        let logits = self.head(&mut g, e, false)?;
        let row = g.data(logits);
        Ok((0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best }))
    }

    fn head(&self, g: &mut Graph<f32>, e: Var, train: bool) -> Result<Var, TensorError> {
        let w = g.leaf(self.params.tensor(&p("head.w"))?.clone().with_requires_grad(train));
        let b = g.leaf(self.params.tensor(&p("head.b"))?.clone().with_requires_grad(train));
        nn::linear(g, e, w, b)
    }

    /// Fraction of `data` whose speaker row is predicted correctly.
    pub fn accuracy(&self, data: &Dataset) -> Result<f64, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Contract("no utterances to classify".into()));
        }
        let mut hits = 0usize;
        for u in &data.utterances {
            if Some(self.classify(u)?) == backbone_row(&u.speaker) {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        save_checkpoint(&self.params, path).map_err(crate::backbone::ModelError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let params = load_checkpoint(path).map_err(crate::backbone::ModelError::from)?;
        let enc = Self { params };
        enc.check_layout()?;
        Ok(enc)
    }
}

/// Cross-entropy speaker classification over backbone-speaker utterances,
/// Adam with a cosine schedule decaying over the whole run.
pub fn train_speaker_encoder(
    data: &Dataset,
    n_speakers: usize,
    cfg: &SpeakerEncoderConfig,
) -> Result<SpeakerEncoder, TrainError> {
    let first = data.utterances.first().ok_or_else(|| TrainError::Contract("empty speaker-encoder corpus".into()))?;
    let bins = first.n_mel_bins;
    let mut rows = Vec::with_capacity(data.len());
    let mut feats = Vec::with_capacity(data.len());
    for u in &data.utterances {
        let row = backbone_row(&u.speaker)
            .filter(|&r| r < n_speakers)
            .ok_or_else(|| TrainError::Contract(format!("`{}` is not one of {n_speakers} backbone speakers", u.speaker)))?;
        if u.n_mel_bins != bins {
            return Err(TrainError::Contract("mixed mel bin counts".into()));
        }
        rows.push(row);
        feats.push(u.mean_frame());
    }
    if cfg.batch_size == 0 {
        return Err(ConfigError::Constraint("batch_size must be positive".into()).into());
    }
    let mut enc = SpeakerEncoder::init(bins, cfg.hidden, cfg.d_spk, n_speakers, cfg.seed)?;
    let schedule = LrSchedule::Cosine {
        lr_init: cfg.lr_init,
        lr_final: cfg.lr_final,
        decay_steps: cfg.steps,
    };
    let mut adam = Adam::new(AdamConfig::default());
    let mut rng = keyed_rng(cfg.seed, "spkenc-sampler", "train");
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        let picks: Vec<usize> = (0..b).map(|_| rng.gen_range(0..feats.len())).collect();
        let x: Vec<f32> = picks.iter().flat_map(|&i| feats[i].iter().copied()).collect();
        let mut onehot = vec![0.0f32; b * n_speakers];
        for (k, &i) in picks.iter().enumerate() {
            onehot[k * n_speakers + rows[i]] = 1.0;
        }

        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![b, bins], x)?);
        let names: Vec<String> = enc.params.names().map(str::to_string).collect();
        let mut vars = Vec::with_capacity(names.len());
        for n in &names {
            vars.push(g.leaf(enc.params.tensor(n)?.clone().with_requires_grad(true)));
        }
        let var = |field: &str| vars[names.iter().position(|n| *n == p(field)).expect("known field")];
        let h = nn::linear(&mut g, x, var("fc1.w"), var("fc1.b"))?;
        let h = g.relu(h);
        let e = nn::linear(&mut g, h, var("fc2.w"), var("fc2.b"))?;
        let logits = nn::linear(&mut g, e, var("head.w"), var("head.b"))?;
        let logp = g.log_softmax_last(logits);
        let y = g.constant(Tensor::new(vec![b, n_speakers], onehot)?);
        let picked = g.mul(logp, y)?;
        let s = g.sum(picked);
        let loss = g.scale(s, -1.0 / b as f64);
        if !g.data(loss)[0].is_finite() {
            return Err(TrainError::Contract(format!("speaker encoder loss diverged at step {step}")));
        }
        g.backward(loss)?;
        for (n, &v) in names.iter().zip(&vars) {
            let grad = g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]);
            enc.params.tensor_mut(n)?.set_grad(grad)?;
        }
        adam.step(&mut enc.params, schedule.at(step))?;
    }
    Ok(enc)
}

/// Mean raw embedding of the references, scaled to unit norm.
pub fn zero_shot_condition(encoder: &SpeakerEncoder, references: &[&Utterance]) -> Result<Vec<f32>, TrainError> {
    if references.is_empty() {
        return Err(TrainError::Contract("zero-shot conditioning needs at least one reference".into()));
    }
    let d = encoder.d_spk();
    let mut mean = vec![0.0f64; d];
    for u in references {
        for (m, v) in mean.iter_mut().zip(encoder.embed(u)?) {
            *m += v as f64;
        }
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(TrainError::Contract("reference embeddings average to zero".into()));
    }
    Ok(mean.iter().map(|v| (v / norm) as f32).collect())
}
