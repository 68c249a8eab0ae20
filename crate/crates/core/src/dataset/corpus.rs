//! Prepared corpora: a directory of normalized annotations plus manifests
//! written by [`prepare`] and read back by [`Corpus::open`].
//!
//! ```text
//! <out>/corpus.json        schema, class map, recording list
//! <out>/splits.json        fold -> {train, val, test}
//! <out>/stats.json         per-class frame/event counts
//! <out>/annotations/*.csv  normalized annotations
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    audio, load_annotations, make_splits, rasterize, segment, write_annotations, ClassMap,
    DatasetSchema, IptEvent, RecordingMeta, Sample, SplitPlan, SplitTag,
};
use crate::{Error, Result};

const ANNOTATION_EXTS: &[&str] = &["csv", "txt", "tsv"];
const PERFORMER_FILES: &[&str] = &["performers.csv", "metadata.csv"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingEntry {
    pub id: String,
    /// Absolute path of the source audio.
    pub audio: PathBuf,
    /// Normalized annotation, relative to the corpus directory.
    pub annotation: PathBuf,
    pub performer: Option<String>,
    pub split: Option<SplitTag>,
    pub duration: f64,
}

impl RecordingEntry {
    pub fn meta(&self) -> RecordingMeta {
        RecordingMeta {
            id: self.id.clone(),
            performer: self.performer.clone(),
            split: self.split,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CorpusFile {
    schema: DatasetSchema,
    class_map: ClassMap,
    recordings: Vec<RecordingEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub name: String,
    pub frames: u64,
    pub events: u64,
}

/// Corpus summary; the per-class frame counts expose the label imbalance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub schema: DatasetSchema,
    pub recordings: usize,
    pub expected_recordings: Option<usize>,
    pub performers: usize,
    pub total_seconds: f64,
    pub total_frames: u64,
    pub per_class: Vec<ClassStats>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    pub schema: DatasetSchema,
    pub class_map: ClassMap,
    pub recordings: Vec<RecordingEntry>,
    pub plan: SplitPlan,
}

fn split_tag_of(rel: &Path) -> Option<SplitTag> {
    rel.components()
        .filter_map(|c| c.as_os_str().to_str())
        .find_map(SplitTag::from_dir_name)
}

fn looks_like_performer(s: &str) -> bool {
    let lower = s.to_lowercase();
    let rest = ["performer", "player", "p"]
        .iter()
        .find_map(|p| lower.strip_prefix(p))
        .map(|r| r.trim_start_matches(['_', '-', ' ']));
    matches!(rest, Some(r) if !r.is_empty() && r.chars().all(|c| c.is_ascii_digit()))
}

fn performer_from_path(rel: &Path) -> Option<String> {
    let parents = rel
        .parent()
        .into_iter()
        .flat_map(|p| p.components())
        .filter_map(|c| c.as_os_str().to_str().map(str::to_string));
    let stem_prefix = rel
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.split(['_', '-']).next())
        .map(str::to_string);
    parents
        .chain(stem_prefix)
        .find(|s| looks_like_performer(s))
}

fn read_performer_table(raw_root: &Path) -> Result<HashMap<String, String>> {
    let mut table = HashMap::new();
    for name in PERFORMER_FILES {
        let path = raw_root.join(name);
        if !path.exists() {
            continue;
        }
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(&path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let headers = reader
            .headers()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .clone();
        let col = |keys: &[&str]| {
            headers
                .iter()
                .position(|h| keys.contains(&super::normalize_name(h).as_str()))
        };
        let (Some(id_col), Some(perf_col)) = (
            col(&["recording", "recording_id", "id", "file", "filename"]),
            col(&["performer", "player", "performer_id", "player_id"]),
        ) else {
            return Err(Error::Config(format!(
                "{}: needs a recording id column and a performer column",
                path.display()
            )));
        };
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if let (Some(id), Some(p)) = (rec.get(id_col), rec.get(perf_col)) {
                let id = Path::new(id)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or(id)
                    .to_string();
                table.insert(id, p.to_string());
            }
        }
        break;
    }
    Ok(table)
}

/// Converts a raw dataset directory into a prepared corpus at `out_dir`.
pub fn prepare(
    schema: DatasetSchema,
    raw_root: &Path,
    out_dir: &Path,
    seed: u64,
) -> Result<CorpusStats> {
    if !raw_root.is_dir() {
        return Err(Error::MissingFiles(vec![format!(
            "dataset root {} does not exist",
            raw_root.display()
        )]));
    }
    let class_map = schema.class_map();
    let mut audio_files = Vec::new();
    let mut annotations: HashMap<String, Vec<PathBuf>> = HashMap::new();
    for entry in walkdir::WalkDir::new(raw_root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::Config(format!("walking {}: {e}", raw_root.display())))?;
        let path = entry.path();
        if !entry.file_type().is_file() {
            continue;
        }
        if audio::is_audio_file(path) {
            audio_files.push(path.to_path_buf());
        } else if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| ANNOTATION_EXTS.contains(&e.to_lowercase().as_str()))
        {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if PERFORMER_FILES.contains(&name) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                annotations.entry(stem.to_string()).or_default().push(path.to_path_buf());
            }
        }
    }
    if audio_files.is_empty() {
        return Err(Error::MissingFiles(vec![format!(
            "no WAV/FLAC files under {}",
            raw_root.display()
        )]));
    }
    let performers = read_performer_table(raw_root)?;

    let ann_dir = out_dir.join("annotations");
    std::fs::create_dir_all(&ann_dir).map_err(|e| Error::io(&ann_dir, e))?;

    let mut missing = Vec::new();
    let mut recordings: Vec<RecordingEntry> = Vec::new();
    let mut per_class = vec![(0u64, 0u64); class_map.n_ipt()];
    let mut total_frames = 0u64;
    let mut total_seconds = 0.0;
    for audio_path in &audio_files {
        let rel = audio_path.strip_prefix(raw_root).unwrap_or(audio_path);
        let stem = audio_path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let candidates = annotations.get(&stem).cloned().unwrap_or_default();
        let same_dir = candidates
            .iter()
            .find(|p| p.parent() == audio_path.parent())
            .or(candidates.first());
        let Some(ann_path) = same_dir else {
            missing.push(format!("annotation for {}", rel.display()));
            continue;
        };
        let mut id = stem.clone();
        if recordings.iter().any(|r| r.id == id) {
            id = rel.with_extension("").to_string_lossy().replace(['/', '\\'], "__");
        }
        let events = load_annotations(ann_path, schema, &class_map)?;
        let duration = audio::probe_duration(audio_path)?;
        let annotation = PathBuf::from("annotations").join(format!("{id}.csv"));
        write_annotations(&out_dir.join(&annotation), &events, &class_map)?;

        let n_frames = (duration * class_map.frame_rate).ceil().max(1.0) as usize;
        let clipped = clip_events(&events, n_frames as f64 / class_map.frame_rate);
        let grid = rasterize(&clipped, n_frames, &class_map)?;
        for (c, stat) in per_class.iter_mut().enumerate() {
            stat.0 += grid.ipt.column(c).iter().map(|&v| v as u64).sum::<u64>();
        }
        for ev in &events {
            per_class[ev.label].1 += 1;
        }
        total_frames += n_frames as u64;
        total_seconds += duration;

        let performer = performers
            .get(&stem)
            .cloned()
            .or_else(|| performer_from_path(rel));
        recordings.push(RecordingEntry {
            id,
            audio: std::fs::canonicalize(audio_path).unwrap_or_else(|_| audio_path.clone()),
            annotation,
            performer,
            split: split_tag_of(rel),
            duration,
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }

    let metas: Vec<RecordingMeta> = recordings.iter().map(RecordingEntry::meta).collect();
    let plan = make_splits(schema, &metas, seed)?;
    plan.write_manifest(&out_dir.join("splits.json"))?;

    let stats = CorpusStats {
        schema,
        recordings: recordings.len(),
        expected_recordings: schema.expected_recordings(),
        performers: recordings
            .iter()
            .filter_map(|r| r.performer.as_deref())
            .collect::<std::collections::BTreeSet<_>>()
            .len(),
        total_seconds,
        total_frames,
        per_class: class_map
            .ipt_names
            .iter()
            .zip(&per_class)
            .map(|(name, &(frames, events))| ClassStats {
                name: name.clone(),
                frames,
                events,
            })
            .collect(),
    };
    if let Some(expected) = stats.expected_recordings {
        if expected != stats.recordings {
            log::warn!(
                "{schema}: found {} recordings, the published corpus has {expected}",
                stats.recordings
            );
        }
    }
    write_json(&out_dir.join("stats.json"), &stats)?;
    write_json(
        &out_dir.join("corpus.json"),
        &CorpusFile {
            schema,
            class_map,
            recordings,
        },
    )?;
    Ok(stats)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

/// Drops or trims events that run past `limit` seconds.
pub fn clip_events(events: &[IptEvent], limit: f64) -> Vec<IptEvent> {
    events
        .iter()
        .filter(|e| e.onset < limit)
        .map(|e| IptEvent {
            offset: e.offset.min(limit),
            ..*e
        })
        .filter(|e| e.offset > e.onset)
        .collect()
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: CorpusFile = serde_json::from_str(&text)?;
        let plan = SplitPlan::read_manifest(&dir.join("splits.json"), file.schema)?;
        Ok(Corpus {
            dir: dir.to_path_buf(),
            schema: file.schema,
            class_map: file.class_map,
            recordings: file.recordings,
            plan,
        })
    }

    pub fn entry(&self, id: &str) -> Result<&RecordingEntry> {
        self.recordings
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Config(format!("recording `{id}` not in corpus")))
    }

    /// Recording ids of one split of one fold.
    pub fn split_ids(&self, fold: usize, tag: SplitTag) -> Result<Vec<String>> {
        Ok(self.plan.fold(fold)?.ids(tag).to_vec())
    }

    /// 24 kHz audio and events (clipped to the audio length) of a recording.
    pub fn load_recording(&self, id: &str) -> Result<(Vec<f32>, Vec<IptEvent>)> {
        let entry = self.entry(id)?;
        let wave = audio::load_audio_24k(&entry.audio)?;
        let events = load_annotations(&self.dir.join(&entry.annotation), self.schema, &self.class_map)?;
        let seconds = wave.len() as f64 / crate::encoder::SAMPLE_RATE as f64;
        Ok((wave, clip_events(&events, seconds)))
    }

    /// Segments every listed recording into windows of `n_frames` frames.
    pub fn samples(&self, ids: &[String], n_frames: usize) -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for id in ids {
            let (wave, events) = self.load_recording(id)?;
            out.extend(segment(&wave, &events, id, &self.class_map, n_frames)?);
        }
        Ok(out)
    }

    /// Number of recordings per performer, for reporting.
    pub fn performer_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.recordings {
            if let Some(p) = &r.performer {
                *counts.entry(p.clone()).or_insert(0) += 1;
            }
        }
        counts
    }
}
