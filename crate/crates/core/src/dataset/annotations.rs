//! Annotation files. Every loader reads into the normalized form
//! `onset_sec,offset_sec,technique,midi_pitch`; native files are accepted when
//! their columns can be identified by header name or position.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use super::{ClassMap, DatasetSchema, IptEvent};
use crate::{Error, Result};

pub const NORMALIZED_HEADER: [&str; 4] = ["onset_sec", "offset_sec", "technique", "midi_pitch"];

const ONSET_KEYS: &[&str] = &["onset_sec", "onset", "onset_time", "start", "start_time", "begin"];
const OFFSET_KEYS: &[&str] = &["offset_sec", "offset", "offset_time", "end", "end_time", "stop"];
const TECH_KEYS: &[&str] = &["technique", "ipt", "label", "tech", "class", "type"];
const PITCH_KEYS: &[&str] = &["midi_pitch", "pitch", "note", "midi"];

struct Columns {
    onset: usize,
    offset: usize,
    technique: usize,
    pitch: Option<usize>,
}

impl Columns {
    fn positional(width: usize) -> Self {
        Columns {
            onset: 0,
            offset: 1,
            technique: 2,
            pitch: (width > 3).then_some(3),
        }
    }

    fn from_header(fields: &[String]) -> Option<Self> {
        let find = |keys: &[&str]| {
            fields
                .iter()
                .position(|f| keys.contains(&super::normalize_name(f).as_str()))
        };
        Some(Columns {
            onset: find(ONSET_KEYS)?,
            offset: find(OFFSET_KEYS)?,
            technique: find(TECH_KEYS)?,
            pitch: find(PITCH_KEYS),
        })
    }
}

/// Loads an annotation file, maps technique names through `class_map` and
/// returns the events sorted by onset.
pub fn load_annotations(
    path: &Path,
    schema: DatasetSchema,
    class_map: &ClassMap,
) -> Result<Vec<IptEvent>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(&text, path, schema, class_map)
}

/// Parses annotation text. `origin` is only used in error messages.
pub fn parse_annotations(
    text: &str,
    origin: &Path,
    schema: DatasetSchema,
    class_map: &ClassMap,
) -> Result<Vec<IptEvent>> {
    let first_line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let delimiter = if first_line.contains('\t') {
        b'\t'
    } else if !first_line.contains(',') && first_line.contains(' ') {
        b' '
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .delimiter(delimiter)
        .from_reader(text.as_bytes());

    let parse_err = |row: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        row,
        message,
    };

    let mut columns: Option<Columns> = None;
    let mut events = Vec::new();
    let mut unknown = BTreeSet::new();
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| parse_err(idx + 1, e.to_string()))?;
        let row = record.position().map_or(idx + 1, |p| p.line() as usize);
        let fields: Vec<String> = record
            .iter()
            .filter(|f| delimiter != b' ' || !f.is_empty())
            .map(str::to_string)
            .collect();
        if fields.iter().all(|f| f.is_empty()) || fields[0].starts_with('#') {
            continue;
        }
        if columns.is_none() {
            if fields[0].parse::<f64>().is_err() {
                columns = Some(Columns::from_header(&fields).ok_or_else(|| {
                    parse_err(row, format!("unrecognized header {:?}", fields))
                })?);
                continue;
            }
            columns = Some(Columns::positional(fields.len()));
        }
        let cols = columns.as_ref().expect("columns resolved above");
        let get = |i: usize| fields.get(i).map(String::as_str);

        let onset = get(cols.onset)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| parse_err(row, "missing or malformed onset".into()))?;
        let offset = get(cols.offset)
            .and_then(|s| s.parse::<f64>().ok())
            .ok_or_else(|| parse_err(row, "missing or malformed offset".into()))?;
        let technique = get(cols.technique)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(row, "missing technique".into()))?;
        let pitch = match cols.pitch.and_then(get).filter(|s| !s.is_empty()) {
            None => None,
            Some(s) => {
                let v = s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite() && (0.0..=127.0).contains(&v.round()))
                    .ok_or_else(|| parse_err(row, format!("malformed MIDI pitch `{s}`")))?;
                Some(v.round() as u8)
            }
        };

        let Some(label) = class_map.label_of(technique, schema) else {
            unknown.insert(technique.to_string());
            continue;
        };
        let pitch = if class_map.pitch_enabled { pitch } else { None };
        if let Some(p) = pitch {
            if class_map.pitch_bin(p).is_none() {
                return Err(parse_err(
                    row,
                    format!(
                        "MIDI pitch {p} outside configured range {:?}",
                        class_map.pitch_range
                    ),
                ));
            }
        }
        let event =
            IptEvent::new(label, onset, offset, pitch).map_err(|e| parse_err(row, e.to_string()))?;
        events.push(event);
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownTechnique {
            schema: schema.to_string(),
            names: unknown.into_iter().collect(),
        });
    }
    sort_events(&mut events);
    Ok(events)
}

pub(crate) fn sort_events(events: &mut [IptEvent]) {
    events.sort_by(|a, b| {
        a.onset
            .total_cmp(&b.onset)
            .then(a.label.cmp(&b.label))
            .then(a.offset.total_cmp(&b.offset))
    });
}

/// Serializes events as normalized annotation CSV.
pub fn write_events_csv<W: Write>(out: W, events: &[IptEvent], class_map: &ClassMap) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Contract(format!("csv write failed: {e}"));
    writer.write_record(NORMALIZED_HEADER).map_err(csv_err)?;
    for ev in events {
        let name = class_map.ipt_names.get(ev.label).ok_or_else(|| {
            Error::Range(format!("label {} outside class map", ev.label))
        })?;
        writer
            .write_record([
                format!("{:.6}", ev.onset),
                format!("{:.6}", ev.offset),
                name.clone(),
                ev.pitch.map(|p| p.to_string()).unwrap_or_default(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush().map_err(|e| Error::Contract(format!("csv flush failed: {e}")))?;
    Ok(())
}

pub fn write_annotations(path: &Path, events: &[IptEvent], class_map: &ClassMap) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_events_csv(std::io::BufWriter::new(file), events, class_map)
}
