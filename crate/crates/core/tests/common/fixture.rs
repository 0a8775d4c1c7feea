//! Desk-scale reference fixtures: the corpus, a pretrained backbone, the
//! speaker encoder and a zero-shot backbone, cached under the cargo target
//! tmp dir keyed by their full configuration. Set
//! `ADAPTTS_ACCEPTANCE_NO_CACHE=1` to rebuild them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Instant;

use adaptts::adapters::AdapterPack;
use adaptts::backbone::{Backbone, BackboneConfig, SpeakerRef, Voice};
use adaptts::config::render_kv;
use adaptts::evaluation::{evaluate_voice, EvalReport};
use adaptts::synthdata::{generate_corpus, target_label, Corpus, CorpusConfig, Dataset};
use adaptts::training::{
    adapt_speaker, pretrain_backbone, pretrain_zero_shot_backbone, train_speaker_encoder, SpeakerEncoder,
    SpeakerEncoderConfig, TrainConfig,
};
use sha2::{Digest, Sha256};

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub const SEEDS: [u64; 3] = [42, 43, 44];
pub const TARGETS: usize = 2;

pub struct Fixture {
    pub corpus: Corpus,
    pub backbone: Backbone,
    pub zero_shot: Backbone,
    pub encoder: SpeakerEncoder,
}

fn cache_dir() -> Option<PathBuf> {
    if std::env::var_os("ADAPTTS_ACCEPTANCE_NO_CACHE").is_some() {
        return None;
    }
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).ok()?;
    Some(dir)
}

fn cache_key(parts: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(env!("CARGO_PKG_VERSION"));
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn cached<T>(
    name: &str,
    key: &[String],
    load: impl Fn(&Path) -> Option<T>,
    save: impl Fn(&T, &Path),
    build: impl FnOnce() -> T,
) -> T {
    let Some(dir) = cache_dir() else { return build() };
    let path = dir.join(format!("{name}-{}.ckpt", cache_key(key)));
    if let Some(v) = load(&path) {
        eprintln!("[fixture] {name}: cached {}", path.display());
        return v;
    }
    let t = Instant::now();
    let v = build();
    save(&v, &path);
    eprintln!("[fixture] {name}: built in {:.0}s", t.elapsed().as_secs_f64());
    v
}

pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let corpus = generate_corpus(&CorpusConfig::default()).expect("corpus");
        let cfg = BackboneConfig::default();
        let tc = TrainConfig::pretrain_default();
        let base_key = vec![
            render_kv(&corpus.config.pairs()),
            cfg.fingerprint_hex(),
            render_kv(&tc.pairs()),
        ];
        let data = &corpus.backbone.train;
        let backbone = cached(
            "backbone",
            &base_key,
            |p| Backbone::load(p).ok(),
            |b, p| b.save(p).expect("save backbone"),
            || pretrain_backbone(data, &cfg, &tc, &mut std::io::sink()).expect("pretrain").0,
        );
        let ec = SpeakerEncoderConfig::default();
        let mut enc_key = base_key.clone();
        enc_key.push(render_kv(&ec.pairs()));
        let encoder = cached(
            "spkenc",
            &enc_key,
            |p| SpeakerEncoder::load(p).ok(),
            |enc, p| enc.save(p).expect("save encoder"),
            || train_speaker_encoder(data, corpus.config.n_speakers, &ec).expect("speaker encoder"),
        );
        let zero_shot = cached(
            "zero-shot-backbone",
            &enc_key,
            |p| Backbone::load(p).ok(),
            |b, p| b.save(p).expect("save backbone"),
            || pretrain_zero_shot_backbone(data, &cfg, &encoder, &tc, &mut std::io::sink()).expect("pretrain").0,
        );
        Fixture {
            corpus,
            backbone,
            zero_shot,
            encoder,
        }
    })
}

pub fn target_train(t: usize, utts: usize) -> Dataset {
    fixture().corpus.target.train.of_speaker(&target_label(t)).first(utts)
}

pub fn target_val(t: usize) -> Dataset {
    fixture().corpus.target.val.of_speaker(&target_label(t))
}

pub fn adapt_config(seed: u64, utts: usize) -> TrainConfig {
    TrainConfig {
        seed,
        target_utts: utts,
        ..TrainConfig::default()
    }
}

/// Memoized adaptation runs shared between criteria.
pub fn run_adapters(t: usize, seed: u64, utts: usize) -> Arc<AdapterPack> {
    static MEMO: OnceLock<Mutex<BTreeMap<(usize, u64, usize), Arc<AdapterPack>>>> = OnceLock::new();
    let memo = MEMO.get_or_init(Default::default);
    if let Some(p) = memo.lock().unwrap().get(&(t, seed, utts)) {
        return Arc::clone(p);
    }
    let f = fixture();
    let (pack, _) = adapt_speaker(&f.backbone, &target_train(t, utts), None, &adapt_config(seed, utts), &mut std::io::sink())
        .expect("adapt_speaker");
    let pack = Arc::new(pack);
    memo.lock().unwrap().insert((t, seed, utts), Arc::clone(&pack));
    pack
}

pub fn pack_voice<'a>(bb: &'a Backbone, pack: &'a AdapterPack) -> Voice<'a> {
    Voice::new(&bb.config, vec![&pack.params, &bb.params], SpeakerRef::Param("speaker_vec"))
}

pub fn best_row_loss(t: usize) -> Result<(usize, f64), String> {
    let bb = &fixture().backbone;
    let val = target_val(t);
    let mut best = (0, f64::INFINITY);
    for r in 0..bb.config.n_speakers {
        let l = Voice::new(&bb.config, vec![&bb.params], SpeakerRef::Row(r)).mel_loss(&val.utterances).map_err(e)?;
        if l < best.1 {
            best = (r, l);
        }
    }
    Ok(best)
}

pub fn evaluate(voice: &Voice<'_>, t: usize, variant: &str, params: usize) -> Result<EvalReport, String> {
    let f = fixture();
    evaluate_voice(
        voice,
        &f.encoder,
        &target_val(t).utterances,
        variant,
        20,
        params,
        f.backbone.num_params(),
        true,
        f.corpus.config.seed,
    )
    .map_err(e)
}
