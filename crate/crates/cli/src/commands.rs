use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ipt_core::config::RunConfig;
use ipt_core::dataset::write_events_csv;
use ipt_core::dataset::audio::load_audio_24k;
use ipt_core::dataset::corpus::{self, Corpus};
use ipt_core::dataset::toy::write_toy_corpus;
use ipt_core::dataset::{ClassMap, DatasetSchema, SplitTag};
use ipt_core::metrics::{
    aggregate, comparison_table, format_table, per_class_histogram, write_table_csv, Aggregation, EvalReport,
};
use ipt_core::postprocess::{DecodeConfig, RecordingPosteriors};
use ipt_core::trainer::{
    self, decode_for, evaluate_checkpoint, predict_recording, Model, TrainData, TrainJob, CHECKPOINT_META,
};
use ipt_core::{Error, Result};

const RUN_CONFIG: &str = "config.toml";

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

pub fn prepare(
    schema: DatasetSchema,
    root: &Path,
    output: &Path,
    seed: u64,
    synthesize: Option<&str>,
    seconds: f64,
) -> Result<()> {
    if let Some(spec) = synthesize {
        if schema != DatasetSchema::Toy {
            return Err(Error::Config("--synthesize only applies to the toy schema".into()));
        }
        let counts: Vec<usize> = spec
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("--synthesize expects TRAIN,VAL,TEST counts, got `{spec}`")))?;
        let [tr, va, te] = counts[..] else {
            return Err(Error::Config(format!("--synthesize expects three counts, got `{spec}`")));
        };
        write_toy_corpus(root, [(SplitTag::Train, tr), (SplitTag::Val, va), (SplitTag::Test, te)], seconds, seed)?;
        log::info!("wrote toy recordings to {}", root.display());
    }
    let stats = corpus::prepare(schema, root, output, seed)?;
    log::info!(
        "{} recordings, {} performers, {:.1} s",
        stats.recordings,
        stats.performers,
        stats.total_seconds
    );
    for c in &stats.per_class {
        println!("{:<16} {:>9} frames {:>6} events", c.name, c.frames, c.events);
    }
    println!("prepared {} recordings into {}", stats.recordings, output.display());
    Ok(())
}

/// Parses `key=value`; the value is read as TOML and falls back to a string.
fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not KEY=VALUE")))?;
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

pub fn train(
    config: &Path,
    variant: Option<String>,
    fold: Option<usize>,
    output: Option<PathBuf>,
    max_steps: Option<usize>,
    set: &[String],
) -> Result<()> {
    let mut overrides = set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(v) = variant {
        overrides.push(("model.variant".into(), toml::Value::String(v)));
    }
    if let Some(f) = fold {
        overrides.push(("train.fold".into(), toml::Value::Integer(f as i64)));
    }
    if let Some(n) = max_steps {
        overrides.push(("train.max_steps".into(), toml::Value::Integer(n as i64)));
    }
    let mut cfg = RunConfig::load(config, &overrides)?;
    if let Some(out) = output {
        cfg.output_dir = std::path::absolute(&out).map_err(|e| Error::io(&out, e))?;
    }
    cfg.validate()?;

    let corpus = Corpus::open(&cfg.data.corpus)?;
    let mut model = Model::build(&cfg.model_spec(corpus.class_map.clone()))?;
    let data = TrainData::from_corpus(&corpus, cfg.train.fold, model.n_time())?;
    if data.train.is_empty() {
        return Err(Error::EmptySplit(format!("train of fold {}", cfg.train.fold)));
    }
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(RUN_CONFIG), &cfg.to_toml()?)?;
    log::info!(
        "training {} on {} windows ({} validation)",
        cfg.model.variant,
        data.train.len(),
        data.val.len()
    );
    let job = TrainJob {
        train: cfg.train.clone(),
        loss: cfg.loss,
        frame_threshold: cfg.decode.frame_threshold,
        seed: cfg.seed,
        out_dir: cfg.output_dir.clone(),
    };
    let outcome = trainer::train(&mut model, &data, &job)?;
    write_json(&cfg.output_dir.join("summary.json"), &serde_json::json!({
        "variant": cfg.model.variant.as_str(),
        "fold": cfg.train.fold,
        "steps": outcome.steps,
        "total_steps": outcome.total_steps,
        "best_epoch": outcome.best_epoch,
        "best_val_frame_macro_f1": outcome.best_val_macro_f1,
        "class_weights": outcome.class_weights,
        "layer_weights": model.layer_weight_values()?,
        "epochs": outcome.epochs,
    }))?;
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!("log: {}", outcome.log.display());
    Ok(())
}

/// Accepts either a checkpoint directory or a run directory containing `checkpoint/`.
fn resolve_checkpoint(path: &Path) -> PathBuf {
    let nested = path.join("checkpoint");
    if !path.join(CHECKPOINT_META).exists() && nested.join(CHECKPOINT_META).exists() {
        nested
    } else {
        path.to_path_buf()
    }
}

/// The run configuration saved next to a checkpoint by `train`, if any.
fn run_config_near(checkpoint: &Path) -> Option<PathBuf> {
    checkpoint
        .ancestors()
        .take(3)
        .map(|d| d.join(RUN_CONFIG))
        .find(|p| p.exists())
}

pub fn evaluate(
    checkpoint: &Path,
    corpus_dir: Option<PathBuf>,
    config: Option<PathBuf>,
    split: SplitTag,
    fold: usize,
    tolerance: f64,
    output: Option<PathBuf>,
) -> Result<()> {
    let ckpt = resolve_checkpoint(checkpoint);
    let cfg = config
        .or_else(|| run_config_near(&ckpt))
        .map(|p| RunConfig::load(&p, &[]))
        .transpose()?;
    let corpus_dir = corpus_dir
        .or_else(|| cfg.as_ref().map(|c| c.data.corpus.clone()))
        .ok_or_else(|| Error::Config("no corpus given (use --corpus or --config)".into()))?;
    let decode = cfg.as_ref().map(|c| c.decode).unwrap_or_default();
    let model = Model::load(&ckpt)?;
    let corpus = Corpus::open(&corpus_dir)?;
    let report = evaluate_checkpoint(&model, &corpus, fold, split, &decode, tolerance)?;
    print!("{}", format_table(&comparison_table(&[(model.variant().to_string(), report.clone())])?));
    if let Some(out) = output {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        report.write_json(&out)?;
        let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        let (png, csv) = per_class_histogram(&report, &out.with_file_name(format!("{stem}_per_class")))?;
        println!("report: {}", out.display());
        println!("per-class: {} {}", png.display(), csv.display());
    } else {
        println!("{}", report.to_json()?);
    }
    Ok(())
}

fn write_matrix(path: &Path, header: &[String], rows: &ndarray::Array2<f64>, frame_rate: f64) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Contract(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut head = vec!["time".to_string()];
    head.extend(header.iter().cloned());
    w.write_record(&head).map_err(csv_err)?;
    for (t, row) in rows.rows().into_iter().enumerate() {
        let mut rec = vec![format!("{:.6}", t as f64 / frame_rate)];
        rec.extend(row.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_posteriors(dir: &Path, post: &RecordingPosteriors, class_map: &ClassMap) -> Result<()> {
    write_matrix(&dir.join("ipt_posteriors.csv"), &class_map.ipt_names, &post.y_ipt, post.frame_rate)?;
    if let Some(yp) = &post.y_pitch {
        let names: Vec<String> = (0..class_map.n_pitch())
            .map(|b| class_map.midi_of_bin(b).map(|m| format!("midi_{m}")).unwrap_or_else(|| format!("bin_{b}")))
            .collect();
        write_matrix(&dir.join("pitch_posteriors.csv"), &names, yp, post.frame_rate)?;
    }
    if let Some(on) = &post.onset {
        let col = ndarray::Array2::from_shape_vec((on.len(), 1), on.clone())
            .map_err(|e| Error::Contract(e.to_string()))?;
        write_matrix(&dir.join("onset_posteriors.csv"), &["onset".to_string()], &col, post.frame_rate)?;
    }
    Ok(())
}

pub fn predict(checkpoint: &Path, audio: &Path, output: &Path, posteriors: bool) -> Result<()> {
    let ckpt = resolve_checkpoint(checkpoint);
    let model = Model::load(&ckpt)?;
    let decode = run_config_near(&ckpt)
        .map(|p| RunConfig::load(&p, &[]))
        .transpose()?
        .map(|c| c.decode)
        .unwrap_or_else(DecodeConfig::default);
    let wave = load_audio_24k(audio)?;
    let post = predict_recording(&model, &wave, 8)?;
    let decoded = decode_for(&model, &post, &decode, None)?;
    create_dir(output)?;
    let events_path = output.join("events.csv");
    let file = File::create(&events_path).map_err(|e| Error::io(&events_path, e))?;
    write_events_csv(BufWriter::new(file), &decoded.events, model.class_map())?;
    if posteriors {
        write_posteriors(output, &post, model.class_map())?;
    }
    println!("{} events -> {}", decoded.events.len(), events_path.display());
    Ok(())
}

pub fn report(paths: &[PathBuf], output: &Path, names: &[String], mode: Option<Aggregation>) -> Result<()> {
    if !names.is_empty() && names.len() != paths.len() {
        return Err(Error::Config(format!("{} names for {} reports", names.len(), paths.len())));
    }
    let reports = paths.iter().map(|p| EvalReport::read_json(p)).collect::<Result<Vec<_>>>()?;
    let mut named: Vec<(String, EvalReport)> = reports
        .iter()
        .zip(paths)
        .enumerate()
        .map(|(i, (r, p))| {
            let name = names
                .get(i)
                .cloned()
                .or_else(|| r.variant.clone())
                .unwrap_or_else(|| p.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string());
            (name, r.clone())
        })
        .collect();
    if let Some(mode) = mode {
        let name = named[0].0.clone();
        named = vec![(name, aggregate(&reports, mode)?)];
    }
    let rows = comparison_table(&named)?;
    create_dir(output)?;
    let table = format_table(&rows);
    write_text(&output.join("table.txt"), &table)?;
    write_table_csv(&rows, &output.join("table.csv"))?;
    for (name, r) in &named {
        let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        per_class_histogram(r, &output.join(format!("per_class_{safe}")))?;
    }
    if mode.is_some() {
        named[0].1.write_json(&output.join("aggregate.json"))?;
    }
    print!("{table}");
    Ok(())
}
