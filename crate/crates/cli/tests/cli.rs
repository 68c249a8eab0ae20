use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use ipt_core::dataset::audio::write_wav;
use ipt_core::dataset::valid_frames;
use ipt_core::metrics::read_table_csv;

fn ipt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipt"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ipt")
}

fn ok(args: &[&str]) -> String {
    let out = ipt(args);
    assert!(
        out.status.success(),
        "ipt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn err(args: &[&str]) -> String {
    let out = ipt(args);
    assert!(!out.status.success(), "ipt {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn prepare(root: &Path) -> PathBuf {
    let prepared = root.join("prep");
    ok(&[
        "prepare", "--dataset", "toy", "--root", s(&root.join("raw")), "--output", s(&prepared),
        "--synthesize", "2,1,2", "--seconds", "6",
    ]);
    prepared
}

fn write_config(dir: &Path, corpus: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.toml");
    let text = format!(
        "seed = 0\noutput_dir = \"run\"\n[data]\ncorpus = \"{}\"\n[model]\nvariant = \"MERTech\"\n{extra}",
        s(corpus)
    );
    fs::write(&path, text).unwrap();
    path
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    corpus: PathBuf,
    config: PathBuf,
    run: PathBuf,
}

/// One prepared corpus and one short training run shared by the tests.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = prepare(&root);
        let config = write_config(&root, &corpus, "[train]\nepochs = 1\n");
        let run = root.join("run");
        ok(&["train", "--config", s(&config), "--output", s(&run), "--max-steps", "2"]);
        Fixture {
            _dir: dir,
            root,
            corpus,
            config,
            run,
        }
    })
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn prepare_reports_class_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&[
        "prepare", "--dataset", "toy", "--root", s(&dir.path().join("raw")), "--output",
        s(&dir.path().join("p")), "--synthesize", "1,1,1", "--seconds", "3",
    ]);
    for name in ["steady", "bright", "hollow", "buzz"] {
        assert!(out.contains(name), "{out}");
    }
    for f in ["corpus.json", "splits.json", "stats.json"] {
        assert!(dir.path().join("p").join(f).exists(), "{f}");
    }
}

#[test]
fn prepare_missing_root_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = err(&[
        "prepare", "--dataset", "toy", "--root", s(&dir.path().join("absent")), "--output",
        s(&dir.path().join("p")),
    ]);
    assert!(e.starts_with("error:"), "{e}");
}

#[test]
fn train_writes_checkpoint_and_log() {
    let f = fixture();
    assert!(f.run.join("checkpoint/checkpoint.json").exists());
    assert!(f.run.join("config.toml").exists());
    let log = fs::read_to_string(f.run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["variant"], "MERTech");
    assert_eq!(summary["steps"], 2);
}

#[test]
fn invalid_variant_is_rejected() {
    let f = fixture();
    let e = err(&["train", "--config", s(&f.config), "--variant", "Nope", "--max-steps", "1"]);
    assert!(e.contains("unknown variant"), "{e}");
}

#[test]
fn missing_key_is_named() {
    let f = fixture();
    let path = f.root.join("no_variant.toml");
    fs::write(&path, format!("seed = 0\noutput_dir = \"x\"\n[data]\ncorpus = \"{}\"\n", s(&f.corpus))).unwrap();
    let e = err(&["train", "--config", s(&path)]);
    assert!(e.contains("model.variant"), "{e}");
}

#[test]
fn unknown_key_is_rejected() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &f.corpus, "[train]\nlearning_rate = 0.1\n");
    let e = err(&["train", "--config", s(&path)]);
    assert!(e.contains("learning_rate"), "{e}");
}

#[test]
fn evaluate_writes_report_and_figure() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("test.json");
    let table = ok(&["evaluate", "--checkpoint", s(&f.run), "--tolerance", "0.2", "--output", s(&json)]);
    assert!(table.contains("frame MI-F1"), "{table}");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["tolerance"], 0.2);
    assert_eq!(report["recordings"], 2);
    assert!(dir.path().join("test_per_class.png").exists());
    assert!(dir.path().join("test_per_class.csv").exists());
}

#[test]
fn evaluate_missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    err(&["evaluate", "--checkpoint", s(&dir.path().join("none")), "--corpus", s(dir.path())]);
}

fn posterior_rows(dir: &Path) -> usize {
    fs::read_to_string(dir.join("ipt_posteriors.csv")).unwrap().lines().count() - 1
}

#[test]
fn predict_silence_is_deterministic() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("silence.wav");
    write_wav(&wav, &vec![0.0; 24_000 * 5], 24_000).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["predict", "--checkpoint", s(&f.run), "--audio", s(&wav), "--output", s(&a)]);
    ok(&["predict", "--checkpoint", s(&f.run), "--audio", s(&wav), "--output", s(&b)]);
    assert_eq!(snapshot(&a), snapshot(&b));
    assert_eq!(posterior_rows(&a), 375);
}

#[test]
fn predict_short_clip_stays_inside_the_audio() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("short.wav");
    let secs: f64 = 1.7;
    let n = (secs * 16_000.0) as usize;
    let tone: Vec<f32> = (0..n)
        .map(|i| 0.3 * (2.0 * std::f32::consts::PI * 440.0 * i as f32 / 16_000.0).sin())
        .collect();
    write_wav(&wav, &tone, 16_000).unwrap();
    let out = dir.path().join("pred");
    ok(&["predict", "--checkpoint", s(&f.run), "--audio", s(&wav), "--output", s(&out)]);
    let rows = posterior_rows(&out);
    assert_eq!(rows, valid_frames((secs * 24_000.0) as usize, usize::MAX, 75.0));
    let padded_from = rows as f64 / 75.0;
    let mut r = csv::Reader::from_path(out.join("events.csv")).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let offset: f64 = rec[1].parse().unwrap();
        assert!(offset <= padded_from + 1e-6, "event ends at {offset}");
    }
}

#[test]
fn predict_missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let wav = dir.path().join("x.wav");
    write_wav(&wav, &[0.0; 2400], 24_000).unwrap();
    let e = err(&[
        "predict", "--checkpoint", s(&dir.path().join("nothing")), "--audio", s(&wav), "--output",
        s(&dir.path().join("o")),
    ]);
    assert!(e.starts_with("error:"), "{e}");
}

fn eval_json(f: &Fixture) -> PathBuf {
    static J: OnceLock<PathBuf> = OnceLock::new();
    J.get_or_init(|| {
        let json = f.root.join("eval").join("test.json");
        ok(&["evaluate", "--checkpoint", s(&f.run), "--output", s(&json)]);
        json
    })
    .clone()
}

#[test]
fn report_five_variants_and_round_trip() {
    let f = fixture();
    let json = eval_json(f);
    let dir = tempfile::tempdir().unwrap();
    let names = "IPT_probing,IPT_finetune,IPT+Pitch,IPT+Pitch+Onset,MERTech";
    let j = s(&json);
    let table = ok(&["report", j, j, j, j, j, "--names", names, "--output", s(dir.path())]);
    assert_eq!(table.lines().count(), 2 + 5);
    let header = table.lines().next().unwrap();
    assert_eq!(header.matches("F1").count(), 4);
    let rows = read_table_csv(&dir.path().join("table.csv")).unwrap();
    assert_eq!(rows.len(), 5);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    for (row, name) in rows.iter().zip(names.split(',')) {
        assert_eq!(row.name, name);
        assert_eq!(row.frame_micro_f1, report["frame_micro_f1"].as_f64().unwrap());
        assert_eq!(row.event_macro_f1, report["event_macro_f1"].as_f64().unwrap());
    }
    assert!(dir.path().join("per_class_MERTech.png").exists());
}

#[test]
fn report_single_row() {
    let f = fixture();
    let json = eval_json(f);
    let dir = tempfile::tempdir().unwrap();
    ok(&["report", s(&json), "--output", s(dir.path())]);
    assert_eq!(read_table_csv(&dir.path().join("table.csv")).unwrap().len(), 1);
}

#[test]
fn report_class_mismatch_is_an_error() {
    let f = fixture();
    let json = eval_json(f);
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    v["per_class"][0]["name"] = "renamed".into();
    let other = dir.path().join("other.json");
    fs::write(&other, serde_json::to_string(&v).unwrap()).unwrap();
    let e = err(&["report", s(&json), s(&other), "--output", s(&dir.path().join("t"))]);
    assert!(e.contains("different classes"), "{e}");
}

#[test]
fn commands_are_idempotent() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let train = ["train", "--config", s(&f.config), "--output", s(&run), "--max-steps", "1"];
    ok(&train);
    let first = snapshot(&run);
    ok(&train);
    assert_eq!(first, snapshot(&run));

    let json = dir.path().join("e.json");
    let eval = ["evaluate", "--checkpoint", s(&run), "--output", s(&json)];
    ok(&eval);
    let a = fs::read(&json).unwrap();
    ok(&eval);
    assert_eq!(a, fs::read(&json).unwrap());

    let raw = f.root.join("raw");
    let (p1, p2) = (dir.path().join("p1"), dir.path().join("p2"));
    ok(&["prepare", "--dataset", "toy", "--root", s(&raw), "--output", s(&p1)]);
    ok(&["prepare", "--dataset", "toy", "--root", s(&raw), "--output", s(&p2)]);
    assert_eq!(snapshot(&p1), snapshot(&p2));
}
