//! Acceptance battery. Runs every criterion and prints one line per
//! criterion; exits non-zero if any fails.

mod common;

use common::fixture::*;

use std::time::Instant;

use adaptts::adapters::{
    count_adapter_params, insert_adapters, read_pack, write_pack, AdapterError, AdapterPack,
};
use adaptts::backbone::{
    decode, read_mels, upsample_weights, write_mels, Backbone, BackboneConfig, Forward, ModelError, SpeakerRef, Voice,
};
use adaptts::evaluation::{running_stats_digest, verify_backbone_immutability};
use adaptts::serving::{analytic_memory_report, Registry};
use adaptts::synthdata::{mix_stream, read_dataset, target_label, write_dataset, DataError, Source};
use adaptts::tensorcore::{
    cosine_lr, grad_check, read_checkpoint, write_checkpoint, CheckpointError, Differentiable, Graph, Mode, Scalar,
    Tensor, TensorError, Var,
};
use adaptts::training::{adapt_speaker, finetune_embedding_only, zero_shot_condition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)*) => {
        if !$cond {
            return Err(format!($($fmt)*));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn c1_parameter_counts() -> Outcome {
    let mut parts = Vec::new();
    for (r, count, pct) in [(16, 107_616, "0.12"), (128, 796_416, "0.89")] {
        let (c, p) = count_adapter_params(512, r, 6, 89_000_000);
        ensure!(c == count, "r={r}: count {c} != {count}");
        ensure!(format!("{p:.2}") == pct, "r={r}: {p:.2}% != {pct}%");
        parts.push(format!("r={r}: {c} ({p:.2}%)"));
    }
    Ok(parts.join(", "))
}

fn fresh_pack(bb: &Backbone, seed: u64, variance: bool) -> Result<AdapterPack, String> {
    let cfg = &bb.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sites, mut params) = insert_adapters(cfg, variance, 4, 4, &mut rng).map_err(e)?;
    let spk: Vec<f32> = (0..cfg.d_spk()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    params.insert("speaker_vec", Tensor::from_vec(spk), true).map_err(e)?;
    Ok(AdapterPack {
        speaker_label: format!("fresh{seed}"),
        fingerprint: cfg.fingerprint(),
        sites,
        params,
    })
}

fn c2_identity_at_init() -> Outcome {
    let bb = &fixture().backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..100u64 {
        let pack = fresh_pack(bb, i / 10, i % 2 == 0)?;
        let n = rng.gen_range(1..=20);
        let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..bb.config.vocab_size)).collect();
        let spk = pack.speaker_vec().to_vec();
        let bare = Voice::new(&bb.config, vec![&bb.params], SpeakerRef::Vector(&spk)).synthesize(&tokens).map_err(e)?;
        let adapted = pack_voice(bb, &pack).synthesize(&tokens).map_err(e)?;
        ensure!(bare.bits_eq(&adapted), "sequence {i} ({tokens:?}) differs");
    }
    Ok("100 sequences bit-identical over 10 fresh packs".into())
}

/// Backbone hash, running-statistics hash and immutability verdict after
/// `run` adapts against the fixture backbone.
fn freeze_check(pack: &AdapterPack, before_digest: [u8; 32], before_stats: [u8; 32]) -> Outcome {
    let f = fixture();
    ensure!(f.backbone.digest() == before_digest, "backbone digest changed");
    ensure!(running_stats_digest(&f.backbone.params) == before_stats, "running statistics changed");
    let mut attached = f.backbone.params.clone();
    attached.merge(pack.params.clone()).map_err(e)?;
    let reference = Backbone::from_parts(f.backbone.config.clone(), f.backbone.params.clone()).map_err(e)?;
    let v = verify_backbone_immutability(&reference, &attached).map_err(e)?;
    ensure!(v.intact, "immutability check failed: {v:?}");
    Ok("backbone and running-stat hashes unchanged, immutability verified".into())
}

fn c3_freeze_contract() -> Outcome {
    let f = fixture();
    let (d, s) = (f.backbone.digest(), running_stats_digest(&f.backbone.params));
    let pack = run_adapters(0, 42, 20);
    freeze_check(&pack, d, s)
}

/// Adapter-through-decoder composite: decoder input frames and the adapter
/// of one decoder site are the checked inputs.
struct Composite<'a> {
    backbone: &'a Backbone,
    overlay: &'a adaptts::tensorcore::ParamStore,
    site: String,
}

const ADAPTER_FIELDS: [&str; 6] = ["ln_gain", "ln_bias", "w_down", "b_down", "w_up", "b_up"];

impl Differentiable for Composite<'_> {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, v: &[Var]) -> Result<Var, TensorError> {
        let mut f = Forward::<T>::new(vec![self.overlay, &self.backbone.params], Mode::Infer);
        f.g = std::mem::take(g);
        for (field, &var) in ADAPTER_FIELDS.iter().zip(&v[1..]) {
            f.bind(format!("adapter.{}.{field}", self.site), var);
        }
        let out = decode(&mut f, &self.backbone.config, v[0]).map_err(|err| match err {
            ModelError::Tensor(t) => t,
            other => TensorError::Contract(other.to_string()),
        });
        *g = std::mem::take(&mut f.g);
        let out = out?;
        common::project(g, out)
    }
}

fn composite_error(double: bool) -> Result<f64, String> {
    let bb = &fixture().backbone;
    let overlay = fresh_pack(bb, 0, false)?.params;
    let site = "decoder.1".to_string();
    let frame_width = bb.params.tensor("decoder.in_proj.w").map_err(e)?.shape()[0];
    let shapes: Vec<Vec<usize>> = std::iter::once(vec![5, frame_width])
        .chain(ADAPTER_FIELDS.iter().map(|fld| overlay.tensor(&format!("adapter.{site}.{fld}")).unwrap().shape().to_vec()))
        .collect();
    let c = Composite {
        backbone: bb,
        overlay: &overlay,
        site,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| common::random_tensor(&mut rng, s, 0.5)).collect();
        let err = if double {
            grad_check::<f64, _>(&c, &inputs, 1e-3)
        } else {
            grad_check::<f32, _>(&c, &inputs, 1e-3)
        }
        .map_err(e)?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn c4_gradient_correctness() -> Outcome {
    let (mut w32, mut w64) = (0.0f64, 0.0f64);
    let cases = common::primitive_cases();
    for case in &cases {
        let single = common::run_case(case, 20, false, 11);
        let double = common::run_case(case, 20, true, 11);
        ensure!(single < 1e-3, "{}: single-precision error {single:.2e}", case.name);
        ensure!(double < 1e-6, "{}: double-precision error {double:.2e}", case.name);
        w32 = w32.max(single);
        w64 = w64.max(double);
    }
    let single = composite_error(false)?;
    let double = composite_error(true)?;
    ensure!(
        single < 1e-3 && double < 1e-6,
        "composite: single-precision error {single:.2e}, double-precision error {double:.2e}"
    );
    Ok(format!(
        "{} layer types + composite; worst f32 {:.1e}, f64 {:.1e}",
        cases.len(),
        w32.max(single),
        w64.max(double)
    ))
}

fn c5_upsampler() -> Outcome {
    let (w, t) = upsample_weights(&[2.0, 3.0], 1.0).map_err(e)?;
    ensure!(t == 5, "T = {t} for durations (2, 3)");
    ensure!(format!("{:.4}", w[0]) == "0.9876", "w[0][0] = {}", w[0]);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let n = rng.gen_range(1..15);
        let durs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..9.0)).collect();
        let sigma = rng.gen_range(0.3..3.0);
        let (w, t) = upsample_weights(&durs, sigma).map_err(e)?;
        let total: f64 = durs.iter().sum();
        ensure!(t == (total.round() as usize).max(1), "T = {t} for total {total}");
        for row in w.chunks(n) {
            let s: f64 = row.iter().sum();
            ensure!((s - 1.0).abs() <= 1e-6, "row sum {s}");
        }
    }
    Ok(format!("w = {:.4}, 500 random duration sets", w[0]))
}

/// Adapted target-val mel loss over the best frozen speaker row, per target.
fn loss_ratios(utts: usize, bound: f64) -> Outcome {
    let f = fixture();
    let mut parts = Vec::new();
    let mut ok = true;
    for t in 0..TARGETS {
        let pack = run_adapters(t, 42, utts);
        let (row, best) = best_row_loss(t)?;
        let loss = pack_voice(&f.backbone, &pack).mel_loss(&target_val(t).utterances).map_err(e)?;
        let ratio = loss / best;
        ok &= ratio <= bound;
        parts.push(format!("{} {loss:.4} vs row {row} {best:.4} = {ratio:.3}", target_label(t)));
    }
    let text = format!("{utts} utterances: {} (bound {bound})", parts.join(", "));
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn c6_adaptation_efficacy() -> Outcome {
    let f = fixture();
    let pack = run_adapters(0, 42, 20);
    let rep = evaluate(&pack_voice(&f.backbone, &pack), 0, "adapters", pack.num_params())?;
    let pct = 100.0 * pack.num_params() as f64 / f.backbone.num_params() as f64;
    ensure!(
        (rep.params_pct - pct).abs() < 1e-12,
        "reported {}% but pack holds {pct}%",
        rep.params_pct
    );
    ensure!(pct < 2.0, "trainable fraction {pct:.2}%");
    let ratios = loss_ratios(20, 0.6)?;
    Ok(format!("{ratios}; {} params = {pct:.2}%", pack.num_params()))
}

fn c7_similarity_ordering() -> Outcome {
    let f = fixture();
    let mut lines = Vec::new();
    let mut ok = true;
    for t in 0..TARGETS {
        let refs = target_train(t, 10);
        let refs: Vec<_> = refs.utterances.iter().collect();
        let cond = zero_shot_condition(&f.encoder, &refs).map_err(e)?;
        let zs_voice = Voice::new(&f.zero_shot.config, vec![&f.zero_shot.params], SpeakerRef::Vector(&cond));
        let zs = evaluate(&zs_voice, t, "zero_shot_dvector", 0)?.cos_sim;
        let (mut hi, mut lo) = (0, 0);
        let mut detail = Vec::new();
        for seed in SEEDS {
            let pack = run_adapters(t, seed, 20);
            let ad = evaluate(&pack_voice(&f.backbone, &pack), t, "adapters", pack.num_params())?.cos_sim;
            let (ep, _) = finetune_embedding_only(&f.backbone, &target_train(t, 20), &adapt_config(seed, 20), &mut std::io::sink())
                .map_err(e)?;
            let eo = evaluate(&pack_voice(&f.backbone, &ep), t, "finetune_embed_only", ep.num_params())?.cos_sim;
            hi += usize::from(ad >= zs);
            lo += usize::from(zs >= eo);
            detail.push(format!("s{seed} {ad:.3}/{eo:.3}"));
        }
        let pass = hi * 3 >= 2 * SEEDS.len() && lo * 3 >= 2 * SEEDS.len();
        ok &= pass;
        lines.push(format!(
            "{}: zs {zs:.3}, adapters/embed {} -> ad>=zs {hi}/3, zs>=emb {lo}/3",
            target_label(t),
            detail.join(" ")
        ));
    }
    let text = lines.join("; ");
    if ok {
        Ok(text)
    } else {
        Err(text)
    }
}

fn c8_data_scaling() -> Outcome {
    loss_ratios(4, 0.8)
}

fn c9_serving_cost() -> Outcome {
    let analytic = analytic_memory_report(89_000_000, 1000, 107_616);
    ensure!((2.0..=2.3).contains(&analytic.ratio), "analytic ratio {}", analytic.ratio);
    let bb = Backbone::init(&BackboneConfig::default(), 9).map_err(e)?;
    let digest = bb.digest();
    let reg = Registry::new(bb, 4);
    for i in 0..6 {
        let mut p = fresh_pack(reg.backbone(), i, false)?;
        p.speaker_label = format!("spk{i}");
        reg.load_pack(p).map_err(e)?;
    }
    let s = reg.stats();
    ensure!(s.evictions == 2, "{} evictions", s.evictions);
    ensure!(reg.backbone().digest() == digest && reg.backbone_intact(), "backbone hash changed");
    Ok(format!("analytic ratio {:.3}; 6 loads into capacity 4 -> {} evictions", analytic.ratio, s.evictions))
}

fn c10_mixing() -> Outcome {
    let f = fixture();
    let (bbt, tgt) = (&f.corpus.backbone.train, &target_train(0, 20));
    let draws = 25_600;
    let hits = mix_stream(bbt, tgt, (99, 1), ChaCha8Rng::seed_from_u64(10))
        .map_err(e)?
        .take(draws)
        .filter(|(s, _)| *s == Source::Target)
        .count();
    let frac = hits as f64 / draws as f64;
    ensure!((0.006..=0.014).contains(&frac), "target fraction {frac:.4}");

    let (d, s) = (f.backbone.digest(), running_stats_digest(&f.backbone.params));
    let plain = run_adapters(0, 42, 20);
    freeze_check(&plain, d, s).map_err(|m| format!("without mixing: {m}"))?;
    let mut tc = adapt_config(42, 20);
    tc.mix = "99:1".parse().map_err(e)?;
    let (mixed, _) = adapt_speaker(&f.backbone, tgt, Some(bbt), &tc, &mut std::io::sink()).map_err(e)?;
    freeze_check(&mixed, d, s).map_err(|m| format!("with mixing: {m}"))?;
    Ok(format!("target fraction {:.2}%; freeze holds with and without mixing", 100.0 * frac))
}

fn flip(bytes: &[u8], at: usize) -> Vec<u8> {
    let mut b = bytes.to_vec();
    b[at] ^= 0x20;
    b
}

fn c11_round_trips() -> Outcome {
    let f = fixture();
    let bits = |a: &[f32], b: &[f32]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());

    let ck = write_checkpoint(&f.backbone.params).map_err(e)?;
    let back = read_checkpoint(&ck).map_err(e)?;
    ensure!(back == f.backbone.params, "checkpoint differs after round trip");
    ensure!(
        matches!(read_checkpoint(&flip(&ck, ck.len() / 2)), Err(CheckpointError::Checksum)),
        "corrupted checkpoint not rejected with a checksum error"
    );

    let pack = run_adapters(0, 42, 20);
    let bytes = write_pack(&pack).map_err(e)?;
    let back = read_pack(&bytes).map_err(e)?;
    for (n, p) in pack.params.iter() {
        ensure!(bits(p.tensor.data(), back.params.tensor(n).map_err(e)?.data()), "pack tensor {n} differs");
    }
    ensure!(back.sites == pack.sites && back.fingerprint == pack.fingerprint, "pack metadata differs");
    ensure!(
        matches!(read_pack(&flip(&bytes, bytes.len() - 8)), Err(AdapterError::Container(_))),
        "corrupted pack not rejected"
    );

    let ds = &f.corpus.target.val;
    let bytes = write_dataset(ds).map_err(e)?;
    ensure!(&read_dataset(&bytes).map_err(e)? == ds, "dataset differs after round trip");
    ensure!(
        matches!(read_dataset(&flip(&bytes, bytes.len() / 2)), Err(DataError::Container(_))),
        "corrupted dataset not rejected"
    );

    let mel = pack_voice(&f.backbone, &pack).synthesize(&[1, 2, 3, 4]).map_err(e)?;
    let bytes = write_mels(&mel);
    ensure!(read_mels(&bytes).map_err(e)?.bits_eq(&mel), "spectrogram differs after round trip");
    ensure!(
        matches!(read_mels(&flip(&bytes, bytes.len() - 6)), Err(CheckpointError::Checksum)),
        "corrupted spectrogram not rejected"
    );
    Ok("checkpoint, pack, dataset and spectrogram bit-exact; corruption gives typed errors".into())
}

fn c12_schedule() -> Outcome {
    let s = 1200;
    let at = |step| cosine_lr(step, s, 1e-3, 1e-5);
    ensure!(at(0) == 1e-3, "eta(0) = {}", at(0));
    ensure!(at(s) == 1e-5, "eta(S) = {}", at(s));
    ensure!(at(s + 1) == 1e-5 && at(s + 500) == 1e-5, "eta past S drifts");
    ensure!(at(s / 2) == 5.05e-4, "eta(S/2) = {:e}", at(s / 2));
    Ok("eta(0)=1e-3, eta(S)=eta(S+k)=1e-5, eta(S/2)=5.05e-4".into())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("parameter counts", c1_parameter_counts),
        ("identity at init", c2_identity_at_init),
        ("freeze contract", c3_freeze_contract),
        ("gradient correctness", c4_gradient_correctness),
        ("upsampler contract", c5_upsampler),
        ("adaptation efficacy", c6_adaptation_efficacy),
        ("similarity ordering", c7_similarity_ordering),
        ("data scaling", c8_data_scaling),
        ("serving cost model", c9_serving_cost),
        ("mixing contract", c10_mixing),
        ("round-trip formats", c11_round_trips),
        ("schedule endpoints", c12_schedule),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL {name}: {detail} [{secs:.1}s]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
