//! `adaptts` command-line driver.

mod settings;

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use adaptts::adapters::{count_adapter_params, load_pack, save_pack, AdapterPack};
use adaptts::backbone::{is_running_stat, save_mels, save_pgm, Backbone, SpeakerRef, Voice};
use adaptts::config::{parse_kv, parse_override, render_kv};
use adaptts::evaluation::{eval_csv, evaluate_voice, make_report, parse_eval_csv, verify_backbone_immutability, write_report};
use adaptts::serving::{serve, synthesize_with_pack, Registry};
use adaptts::synthdata::{make_corpus, open_corpus, Corpus, Dataset, SplitSet, Utterance};
use adaptts::training::{
    adapt_speaker, finetune_embedding_only, finetune_full, pretrain_backbone, pretrain_zero_shot_backbone,
    train_speaker_encoder, zero_shot_condition, SpeakerEncoder, TrainLog, Variant,
};

use settings::{CliError, Settings};

#[derive(Parser)]
#[command(name = "adaptts", version, about = "Residual-adapter speaker adaptation laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// `key=value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for this run (overrides the command's seed key)
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "adaptts-out")]
    out: PathBuf,
}

#[derive(Subcommand, Clone, Debug)]
enum Cmd {
    /// Generate the synthetic corpus
    GenData(Common),
    /// Pretrain a backbone
    Pretrain(Common),
    /// Adapt residual adapters and a speaker vector to a target speaker
    Adapt(Common),
    /// Full fine-tuning baseline (everything but the encoder)
    Finetune(Common),
    /// Speaker-embedding-only baseline
    EmbedOnly(Common),
    /// Train the speaker encoder used for similarity and zero-shot conditioning
    TrainSpkenc(Common),
    /// Synthesize a spectrogram
    Synth(Common),
    /// Evaluate one trained variant on target validation data
    Eval(Common),
    /// Merge evaluation files into the report tables
    Report(Common),
    /// Adapter parameter accounting
    Params(Common),
    /// Serve adapter packs over TCP
    Serve {
        #[command(flatten)]
        common: Common,
        /// TCP port to listen on
        #[arg(long, default_value_t = 7878)]
        port: u16,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::GenData(_) => "gen-data",
            Cmd::Pretrain(_) => "pretrain",
            Cmd::Adapt(_) => "adapt",
            Cmd::Finetune(_) => "finetune",
            Cmd::EmbedOnly(_) => "embed-only",
            Cmd::TrainSpkenc(_) => "train-spkenc",
            Cmd::Synth(_) => "synth",
            Cmd::Eval(_) => "eval",
            Cmd::Report(_) => "report",
            Cmd::Params(_) => "params",
            Cmd::Serve { .. } => "serve",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Cmd::GenData(c)
            | Cmd::Pretrain(c)
            | Cmd::Adapt(c)
            | Cmd::Finetune(c)
            | Cmd::EmbedOnly(c)
            | Cmd::TrainSpkenc(c)
            | Cmd::Synth(c)
            | Cmd::Eval(c)
            | Cmd::Report(c)
            | Cmd::Params(c) => c,
            Cmd::Serve { common, .. } => common,
        }
    }
}

fn main() -> ExitCode {
    let mut command = Cli::command();
    for name in settings::COMMANDS {
        let help = Settings::for_command(name).help();
        command = command.mut_subcommand(name, |c| c.after_help(help));
    }
    let cli = match Cli::from_arg_matches(&command.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("adaptts {}: {e}", cli.cmd.name());
            ExitCode::from(e.exit_code())
        }
    }
}

fn load_settings(cmd: &Cmd) -> Result<Settings, CliError> {
    let common = cmd.common();
    let mut s = Settings::for_command(cmd.name());
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for (k, v) in parse_kv(&text)? {
            s.set(&k, &v)?;
        }
    }
    for o in &common.set {
        let (k, v) = parse_override(o)?;
        s.set(&k, &v)?;
    }
    if let Some(seed) = common.seed {
        s.set_seed(seed);
    }
    s.validate()?;
    Ok(s)
}

fn run(cmd: &Cmd) -> Result<(), CliError> {
    let s = load_settings(cmd)?;
    let out = cmd.common().out.clone();
    match cmd {
        Cmd::GenData(_) => gen_data(&s, &out),
        Cmd::Pretrain(_) => pretrain(&s, &out),
        Cmd::Adapt(_) | Cmd::Finetune(_) | Cmd::EmbedOnly(_) => adapt(cmd.name(), &s, &out),
        Cmd::TrainSpkenc(_) => train_spkenc(&s, &out),
        Cmd::Synth(_) => synth(&s, &out),
        Cmd::Eval(_) => eval(&s, &out),
        Cmd::Report(_) => report(&s, &out),
        Cmd::Params(_) => params(&s, &out),
        Cmd::Serve { port, .. } => serve_cmd(&s, &out, *port),
    }
}

fn create_out(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, body).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn snapshot(s: &Settings, out: &Path) -> Result<(), CliError> {
    write_file(&out.join(format!("{}.config", s.command)), render_kv(&s.pairs()))
}

/// An unset input path is a data error, like a missing file.
fn require<'a>(value: &'a str, key: &str) -> Result<&'a str, CliError> {
    if value.is_empty() {
        Err(CliError::Data(format!("`{key}` must be set")))
    } else {
        Ok(value)
    }
}

fn corpus(s: &Settings) -> Result<Corpus, CliError> {
    let dir = require(&s.paths.data, "data")?;
    Ok(open_corpus(Path::new(dir))?)
}

fn backbone(path: &str, key: &str) -> Result<Backbone, CliError> {
    Ok(Backbone::load(Path::new(require(path, key)?))?)
}

fn encoder(s: &Settings) -> Result<SpeakerEncoder, CliError> {
    Ok(SpeakerEncoder::load(Path::new(require(&s.paths.encoder, "encoder")?))?)
}

fn target_train(s: &Settings, c: &Corpus) -> Result<Dataset, CliError> {
    let all = c.target.train.of_speaker(&s.paths.speaker);
    if all.is_empty() {
        return Err(CliError::Data(format!("no training utterances for speaker `{}`", s.paths.speaker)));
    }
    Ok(all.first(s.train.target_utts))
}

/// Echoes log lines to stdout and keeps them for the log file.
struct Tee(Vec<u8>);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        io::stdout().write_all(buf)?;
        self.0.extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        io::stdout().flush()
    }
}

fn gen_data(s: &Settings, out: &Path) -> Result<(), CliError> {
    let c = make_corpus(&s.corpus, out)?;
    snapshot(s, out)?;
    let n = |set: &SplitSet| set.train.len() + set.val.len() + set.test.len();
    println!(
        "wrote {} backbone and {} target utterances to {}",
        n(&c.backbone),
        n(&c.target),
        out.display()
    );
    Ok(())
}

fn pretrain(s: &Settings, out: &Path) -> Result<(), CliError> {
    let c = corpus(s)?;
    s.check_model_against(&c.config)?;
    let mut log = Tee(Vec::new());
    let (bb, _) = if s.train.variant == Variant::ZeroShotDvector {
        let enc = encoder(s)?;
        pretrain_zero_shot_backbone(&c.backbone.train, &s.model, &enc, &s.train, &mut log)?
    } else {
        pretrain_backbone(&c.backbone.train, &s.model, &s.train, &mut log)?
    };
    create_out(out)?;
    bb.save(&out.join("backbone.ckpt"))?;
    write_file(&out.join("train.log"), &log.0)?;
    snapshot(s, out)?;
    println!("params={} checkpoint={}", bb.num_params(), out.join("backbone.ckpt").display());
    Ok(())
}

fn adapt(name: &str, s: &Settings, out: &Path) -> Result<(), CliError> {
    let c = corpus(s)?;
    let bb = backbone(&s.paths.backbone, "backbone")?;
    let target = target_train(s, &c)?;
    let mix = s.train.mix.0.map(|_| &c.backbone.train);
    let mut log = Tee(Vec::new());
    let (packs, full, _log): (AdapterPack, Option<Backbone>, TrainLog) = match name {
        "adapt" => {
            let (p, l) = adapt_speaker(&bb, &target, mix, &s.train, &mut log)?;
            (p, None, l)
        }
        "finetune" => {
            let (ft, l) = finetune_full(&bb, &target, mix, &s.train, &mut log)?;
            (ft.speaker, Some(ft.backbone), l)
        }
        _ => {
            let (p, l) = finetune_embedding_only(&bb, &target, &s.train, &mut log)?;
            (p, None, l)
        }
    };
    create_out(out)?;
    let pack_path = out.join(format!("{}.apk", packs.speaker_label));
    save_pack(&packs, &pack_path)?;
    if let Some(ft) = &full {
        ft.save(&out.join("finetuned.ckpt"))?;
    }
    write_file(&out.join("train.log"), &log.0)?;
    snapshot(s, out)?;
    println!(
        "speaker={} sites={} pack_params={} pack={}",
        packs.speaker_label,
        packs.sites.len(),
        packs.num_params(),
        pack_path.display()
    );
    Ok(())
}

fn train_spkenc(s: &Settings, out: &Path) -> Result<(), CliError> {
    let c = corpus(s)?;
    let enc = train_speaker_encoder(&c.backbone.train, c.config.n_speakers, &s.spkenc)?;
    let acc = enc.accuracy(&c.backbone.val)?;
    create_out(out)?;
    enc.save(&out.join("spkenc.ckpt"))?;
    snapshot(s, out)?;
    println!("val_accuracy={acc:.4} checkpoint={}", out.join("spkenc.ckpt").display());
    Ok(())
}

fn parse_tokens(text: &str) -> Result<Vec<usize>, CliError> {
    require(text, "tokens")?
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| CliError::Config(format!("bad token id `{t}`"))))
        .collect()
}

fn synth(s: &Settings, out: &Path) -> Result<(), CliError> {
    let bb = backbone(&s.paths.backbone, "backbone")?;
    let tokens = parse_tokens(&s.paths.tokens)?;
    if let Some(&t) = tokens.iter().find(|&&t| t >= bb.config.vocab_size) {
        return Err(CliError::Data(format!("token {t} outside vocabulary of {}", bb.config.vocab_size)));
    }
    let mel = if s.paths.pack.is_empty() {
        Voice::new(&bb.config, vec![&bb.params], SpeakerRef::Row(s.paths.row)).synthesize(&tokens)?
    } else {
        let pack = load_pack(Path::new(&s.paths.pack))?;
        pack.check_compatible(&bb.config)?;
        synthesize_with_pack(&bb, &pack, &tokens)?
    };
    create_out(out)?;
    save_mels(&mel, &out.join("synth.mels"))?;
    save_pgm(&mel, &out.join("synth.pgm"))?;
    snapshot(s, out)?;
    println!("frames={} bins={} out={}", mel.frames, mel.bins, out.join("synth.mels").display());
    Ok(())
}

fn eval(s: &Settings, out: &Path) -> Result<(), CliError> {
    let c = corpus(s)?;
    let enc = encoder(s)?;
    let bb = backbone(&s.paths.backbone, "backbone")?;
    let base = if s.paths.base_backbone.is_empty() {
        bb.clone()
    } else {
        backbone(&s.paths.base_backbone, "base_backbone")?
    };
    let val = c.target.val.of_speaker(&s.paths.speaker);
    if val.is_empty() {
        return Err(CliError::Data(format!("no validation utterances for speaker `{}`", s.paths.speaker)));
    }
    let intact = verify_backbone_immutability(&base, &bb.params)?.intact;
    let variant = s.train.variant;
    let knob = s.train.target_utts;
    let pack;
    let zero_shot;
    let (voice, params) = match variant {
        Variant::Adapters | Variant::FinetuneEmbedOnly | Variant::FinetuneFull => {
            pack = load_pack(Path::new(require(&s.paths.pack, "pack")?))?;
            pack.check_compatible(&bb.config)?;
            let trained = if variant == Variant::FinetuneFull {
                pack.num_params() + full_finetune_params(&base)
            } else {
                pack.num_params()
            };
            let v = Voice::new(&bb.config, vec![&pack.params, &bb.params], SpeakerRef::Param("speaker_vec"));
            (v, trained)
        }
        Variant::ZeroShotDvector => {
            let train = target_train(s, &c)?;
            let refs: Vec<&Utterance> = train.utterances.iter().take(s.paths.references).collect();
            zero_shot = zero_shot_condition(&enc, &refs)?;
            (Voice::new(&bb.config, vec![&bb.params], SpeakerRef::Vector(&zero_shot)), 0)
        }
    };
    let row = evaluate_voice(
        &voice,
        &enc,
        &val.utterances,
        variant.tag(),
        knob,
        params,
        base.num_params(),
        intact,
        c.config.seed,
    )?;
    create_out(out)?;
    write_file(&out.join("eval.csv"), eval_csv(std::slice::from_ref(&row)))?;
    snapshot(s, out)?;
    println!(
        "variant={} speaker={} mel_loss={:.6} cos_sim={:.6} params={} backbone_intact={}",
        row.variant, row.speaker, row.mel_loss, row.cos_sim, row.params, row.backbone_intact
    );
    Ok(())
}

/// Backbone weights a full fine-tune updates: everything outside the
/// encoder except batch-norm running statistics.
fn full_finetune_params(base: &Backbone) -> usize {
    base.params
        .iter()
        .filter(|(n, _)| !n.starts_with("encoder.") && !is_running_stat(n))
        .map(|(_, p)| p.tensor.numel())
        .sum()
}

fn report(s: &Settings, out: &Path) -> Result<(), CliError> {
    let inputs = require(&s.paths.inputs, "inputs")?;
    let mut runs = Vec::new();
    for p in inputs.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{p}: {e}")))?;
        runs.extend(parse_eval_csv(&text)?);
    }
    let rep = make_report(&runs)?;
    create_out(out)?;
    let paths = write_report(&rep, out)?;
    snapshot(s, out)?;
    print!("{}", rep.table);
    println!("wrote {} and {}", paths.0.display(), paths.1.display());
    Ok(())
}

fn params(s: &Settings, out: &Path) -> Result<(), CliError> {
    let p = &s.params;
    let (count, pct) = count_adapter_params(p.d, p.r, p.sites, p.backbone_total);
    create_out(out)?;
    snapshot(s, out)?;
    println!("count={count} pct={pct:.2}");
    Ok(())
}

fn serve_cmd(s: &Settings, out: &Path, port: u16) -> Result<(), CliError> {
    let bb = backbone(&s.paths.backbone, "backbone")?;
    let registry = Arc::new(Registry::new(bb, s.serve.capacity));
    let listener = TcpListener::bind(("127.0.0.1", port)).map_err(|e| CliError::Serve(format!("bind port {port}: {e}")))?;
    create_out(out)?;
    snapshot(s, out)?;
    println!("listening on 127.0.0.1:{port}");
    io::stdout().flush().ok();
    serve(registry, listener).map_err(|e| CliError::Serve(e.to_string()))
}
