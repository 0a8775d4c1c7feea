use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn adaptts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptts")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = adaptts(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY_CORPUS: [&str; 2] = ["--set", "corpus.utts_per_speaker=10"];

/// A tiny corpus, backbone, encoder and adapter pack shared by the
/// pipeline tests.
struct Pipeline {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Pipeline {
    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p)
    }
}

fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let data = root.join("data");
        let mut gen = vec!["gen-data", "--out", s(&data)];
        gen.extend(TINY_CORPUS);
        ok(&gen);
        let d = format!("data={}", s(&data));
        ok(&["pretrain", "--set", &d, "--set", "steps=3", "--set", "batch_size=4", "--out", s(&root.join("pre"))]);
        ok(&["train-spkenc", "--set", &d, "--set", "spkenc.steps=20", "--out", s(&root.join("enc"))]);
        let bb = format!("backbone={}", s(&root.join("pre/backbone.ckpt")));
        ok(&["adapt", "--set", &d, "--set", &bb, "--set", "steps=2", "--set", "batch_size=4", "--out", s(&root.join("adapt"))]);
        Pipeline { _dir: dir, root }
    })
}

#[test]
fn params_reproduces_the_accounting() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let text = ok(&["params", "--set", "d=512", "--set", "r=16", "--set", "sites=6", "--set", "backbone_total=89000000", "--out", s(&out)]);
    assert_eq!(text.trim(), "count=107616 pct=0.12");
    let text = ok(&["params", "--set", "d=512", "--set", "r=128", "--set", "sites=6", "--set", "backbone_total=89000000", "--out", s(&out)]);
    assert_eq!(text.trim(), "count=796416 pct=0.89");
    let snap = std::fs::read_to_string(out.join("params.config")).unwrap();
    assert!(snap.lines().any(|l| l == "r=128"), "{snap}");
}

#[test]
fn help_lists_every_key_with_defaults() {
    for (cmd, keys) in [
        ("adapt", &["steps", "adapter_r", "mix", "target_utts", "data", "backbone", "speaker"][..]),
        ("gen-data", &["corpus.seed", "corpus.utts_per_speaker"][..]),
        ("pretrain", &["d_model", "n_heads", "frozen_encoder_layers", "steps", "variant"][..]),
        ("serve", &["backbone", "capacity"][..]),
    ] {
        let text = ok(&[cmd, "--help"]);
        for k in keys {
            let line = text
                .lines()
                .find(|l| l.trim_start().starts_with(&format!("{k} ")))
                .unwrap_or_else(|| panic!("{cmd} --help lacks {k}\n{text}"));
            assert!(line.contains("[default: "), "{line}");
        }
    }
}

#[test]
fn config_errors_exit_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["params", "--set", "nope=1"],
        vec!["params", "--set", "r=0"],
        vec!["gen-data", "--set", "corpus.utts_per_speaker=ten"],
        vec!["adapt", "--set", "variant=finetune_full"],
        vec!["adapt", "--set", "mix=0:0"],
        vec!["adapt", "--set", "steps"],
    ] {
        let mut full = args.clone();
        full.extend(["--out", s(&out)]);
        let o = adaptts(&full);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
        assert!(!out.exists(), "{args:?} left output behind");
    }
    let cfg = dir.path().join("bad.config");
    std::fs::write(&cfg, "r=4\nunknown_key=1\n").unwrap();
    assert_eq!(adaptts(&["params", "--config", s(&cfg), "--out", s(&out)]).status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn data_errors_exit_3_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    for args in [
        vec!["pretrain", "--set", "data=/nonexistent"],
        vec!["adapt"],
        vec!["adapt", "--set", "data=/nonexistent", "--set", "backbone=/nonexistent"],
        vec!["synth", "--set", "backbone=/nonexistent", "--set", "tokens=1,2"],
        vec!["report", "--set", "inputs=/nonexistent.csv"],
    ] {
        let mut full = args.clone();
        full.extend(["--out", s(&out)]);
        assert_eq!(adaptts(&full).status.code(), Some(3), "{args:?}");
        assert!(!out.exists());
    }
    let bb = format!("backbone={}", s(&garbage));
    assert_eq!(adaptts(&["synth", "--set", &bb, "--set", "tokens=1", "--out", s(&out)]).status.code(), Some(3));
    assert!(!out.exists());
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["gen-data", "--out", s(out)];
        args.extend(TINY_CORPUS);
        ok(&args);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 3);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn pretraining_reruns_are_byte_identical() {
    let p = pipeline();
    let d = format!("data={}", s(&p.path("data")));
    let again = p.path("pre2");
    ok(&["pretrain", "--set", &d, "--set", "steps=3", "--set", "batch_size=4", "--out", s(&again)]);
    for f in ["backbone.ckpt", "train.log", "pretrain.config"] {
        assert_eq!(std::fs::read(p.path("pre").join(f)).unwrap(), std::fs::read(again.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(again.join("train.log")).unwrap();
    assert!(log.starts_with("step=0 lr=0.001 loss_total="));
    let other = p.path("pre3");
    ok(&["pretrain", "--set", &d, "--set", "steps=3", "--set", "batch_size=4", "--seed", "7", "--out", s(&other)]);
    assert_ne!(std::fs::read(p.path("pre/backbone.ckpt")).unwrap(), std::fs::read(other.join("backbone.ckpt")).unwrap());
}

#[test]
fn adapt_writes_a_pack_and_keeps_the_backbone() {
    let p = pipeline();
    let pack = p.path("adapt/tgt0.apk");
    assert!(pack.exists());
    assert!(std::fs::metadata(&pack).unwrap().len() < 8 * 1024);
    let snap = std::fs::read_to_string(p.path("adapt/adapt.config")).unwrap();
    assert!(snap.lines().any(|l| l == "variant=adapters"), "{snap}");

    let out = p.path("eval");
    let text = ok(&[
        "eval",
        "--set",
        &format!("data={}", s(&p.path("data"))),
        "--set",
        &format!("backbone={}", s(&p.path("pre/backbone.ckpt"))),
        "--set",
        &format!("pack={}", s(&pack)),
        "--set",
        &format!("encoder={}", s(&p.path("enc/spkenc.ckpt"))),
        "--set",
        "variant=adapters",
        "--out",
        s(&out),
    ]);
    assert!(!text.is_empty());
    let csv = std::fs::read_to_string(out.join("eval.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..3], ["adapters", "tgt0", "20"]);
    assert_eq!(row[7], "true");

    let rep = p.path("report");
    let text = ok(&["report", "--set", &format!("inputs={}", s(&out.join("eval.csv"))), "--out", s(&rep)]);
    assert!(text.starts_with("variant"));
    assert!(rep.join("report.csv").exists() && rep.join("report.txt").exists());
}

#[test]
fn synth_writes_mels_and_image() {
    let p = pipeline();
    let out = p.path("synth");
    let bb = format!("backbone={}", s(&p.path("pre/backbone.ckpt")));
    let pack = format!("pack={}", s(&p.path("adapt/tgt0.apk")));
    ok(&["synth", "--set", &bb, "--set", &pack, "--set", "tokens=1,2,3", "--out", s(&out)]);
    let first = std::fs::read(out.join("synth.mels")).unwrap();
    assert!(std::fs::read(out.join("synth.pgm")).unwrap().starts_with(b"P5"));
    ok(&["synth", "--set", &bb, "--set", &pack, "--set", "tokens=1,2,3", "--out", s(&out)]);
    assert_eq!(std::fs::read(out.join("synth.mels")).unwrap(), first);
    let o = adaptts(&["synth", "--set", &bb, "--set", "tokens=1,99", "--out", s(&p.path("synth_bad"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(!p.path("synth_bad").exists());
}
