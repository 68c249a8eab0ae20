//! Annotated IPT corpora: event types, class maps, frame grids, and the
//! preparation steps that turn recordings into fixed-length training samples.

mod annotations;
pub mod audio;
pub mod corpus;
mod raster;
mod segment;
mod splits;
pub mod toy;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use annotations::{load_annotations, parse_annotations, write_annotations, write_events_csv};
pub use raster::rasterize;
pub use segment::{segment, valid_frames};
pub use splits::{make_splits, Fold, RecordingMeta, SplitPlan, SplitPolicy, SplitTag};

/// Frame rate of every label grid and encoder output, in Hz.
pub const FRAME_RATE: f64 = 75.0;

/// A labelled technique interval. Times are in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IptEvent {
    pub label: usize,
    pub onset: f64,
    pub offset: f64,
    pub pitch: Option<u8>,
}

impl IptEvent {
    pub fn new(label: usize, onset: f64, offset: f64, pitch: Option<u8>) -> Result<Self> {
        if !(onset.is_finite() && offset.is_finite()) || onset < 0.0 {
            return Err(Error::Range(format!(
                "event times must be finite and non-negative, got [{onset}, {offset})"
            )));
        }
        if offset <= onset {
            return Err(Error::Range(format!(
                "event offset {offset} must be greater than onset {onset}"
            )));
        }
        Ok(IptEvent {
            label,
            onset,
            offset,
            pitch,
        })
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }
}

/// Supported annotation schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSchema {
    GuzhengTech99,
    EgSolo,
    Cbf,
    /// Synthetic corpus used for smoke runs and capacity checks.
    Toy,
}

impl DatasetSchema {
    pub fn as_str(&self) -> &'static str {
        match self {
            DatasetSchema::GuzhengTech99 => "guzheng_tech99",
            DatasetSchema::EgSolo => "eg_solo",
            DatasetSchema::Cbf => "cbf",
            DatasetSchema::Toy => "toy",
        }
    }

    /// Number of recordings in the published corpus.
    pub fn expected_recordings(&self) -> Option<usize> {
        match self {
            DatasetSchema::GuzhengTech99 => Some(99),
            DatasetSchema::EgSolo => Some(76),
            DatasetSchema::Cbf => Some(80),
            DatasetSchema::Toy => None,
        }
    }

    pub fn class_map(&self) -> ClassMap {
        let names: &[&str] = match self {
            DatasetSchema::GuzhengTech99 => &[
                "vibrato",
                "point_note",
                "upward_portamento",
                "downward_portamento",
                "glissando",
                "tremolo",
                "plucks",
            ],
            DatasetSchema::EgSolo => &[
                "normal", "slide", "bend", "vibrato", "mute", "pull", "harmonic", "hammer", "tap",
            ],
            DatasetSchema::Cbf => &[
                "vibrato",
                "tremolo",
                "trill",
                "flutter_tongue",
                "acciaccatura",
                "portamento",
                "glissando",
            ],
            DatasetSchema::Toy => &["steady", "bright", "hollow", "buzz"],
        };
        let (pitch_range, pitch_enabled) = match self {
            DatasetSchema::GuzhengTech99 => ((38, 86), true),
            DatasetSchema::EgSolo => ((40, 88), true),
            DatasetSchema::Cbf => ((0, 0), false),
            DatasetSchema::Toy => ((72, 83), true),
        };
        ClassMap {
            ipt_names: names.iter().map(|s| s.to_string()).collect(),
            pitch_range,
            pitch_enabled,
            frame_rate: FRAME_RATE,
        }
    }

    fn aliases(&self) -> &'static [(&'static str, &'static str)] {
        match self {
            DatasetSchema::GuzhengTech99 => &[
                ("point", "point_note"),
                ("pointnote", "point_note"),
                ("up_portamento", "upward_portamento"),
                ("upward", "upward_portamento"),
                ("down_portamento", "downward_portamento"),
                ("downward", "downward_portamento"),
                ("pluck", "plucks"),
                ("gliss", "glissando"),
            ],
            DatasetSchema::EgSolo => &[
                ("trill", "vibrato"),
                ("pull_off", "pull"),
                ("pulloff", "pull"),
                ("hammer_on", "hammer"),
                ("hammeron", "hammer"),
                ("tapping", "tap"),
                ("palm_mute", "mute"),
                ("harmonics", "harmonic"),
                ("bending", "bend"),
            ],
            DatasetSchema::Cbf => &[
                ("flutter", "flutter_tongue"),
                ("flutter_tonguing", "flutter_tongue"),
                ("flutter-tongue", "flutter_tongue"),
                ("acciacatura", "acciaccatura"),
                ("trills", "trill"),
            ],
            DatasetSchema::Toy => &[],
        }
    }
}

impl fmt::Display for DatasetSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DatasetSchema {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match normalize_name(s).as_str() {
            "guzheng_tech99" | "guzheng" => Ok(DatasetSchema::GuzhengTech99),
            "eg_solo" | "egsolo" => Ok(DatasetSchema::EgSolo),
            "cbf" | "cbfdataset" => Ok(DatasetSchema::Cbf),
            "toy" => Ok(DatasetSchema::Toy),
            other => Err(Error::Config(format!(
                "unknown dataset schema `{other}` (expected guzheng_tech99, eg_solo, cbf or toy)"
            ))),
        }
    }
}

pub(crate) fn normalize_name(name: &str) -> String {
    name.trim()
        .to_lowercase()
        .chars()
        .map(|c| if c == ' ' || c == '-' { '_' } else { c })
        .collect()
}

/// Class vocabulary of a dataset: IPT names in index order plus the MIDI
/// range spanned by the pitch axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap {
    pub ipt_names: Vec<String>,
    /// Inclusive MIDI range `[min, max]`.
    pub pitch_range: (u8, u8),
    /// When false the pitch grid stays all-zero and the pitch loss is skipped.
    pub pitch_enabled: bool,
    pub frame_rate: f64,
}

impl ClassMap {
    pub fn n_ipt(&self) -> usize {
        self.ipt_names.len()
    }

    pub fn n_pitch(&self) -> usize {
        if self.pitch_enabled {
            (self.pitch_range.1 - self.pitch_range.0) as usize + 1
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ipt_names.is_empty() {
            return Err(Error::Config("class map has no IPT classes".into()));
        }
        if self.pitch_range.1 < self.pitch_range.0 {
            return Err(Error::Config(format!(
                "pitch range {:?} is empty",
                self.pitch_range
            )));
        }
        if self.frame_rate.is_nan() || self.frame_rate <= 0.0 {
            return Err(Error::Config("frame rate must be positive".into()));
        }
        Ok(())
    }

    /// Pitch-axis bin of a MIDI note, `None` when out of range or disabled.
    pub fn pitch_bin(&self, midi: u8) -> Option<usize> {
        if !self.pitch_enabled || midi < self.pitch_range.0 || midi > self.pitch_range.1 {
            None
        } else {
            Some((midi - self.pitch_range.0) as usize)
        }
    }

    pub fn midi_of_bin(&self, bin: usize) -> Option<u8> {
        if self.pitch_enabled && bin < self.n_pitch() {
            Some(self.pitch_range.0 + bin as u8)
        } else {
            None
        }
    }

    /// Resolves a technique name, accepting the schema's known spelling variants.
    pub fn label_of(&self, name: &str, schema: DatasetSchema) -> Option<usize> {
        let key = normalize_name(name);
        let find = |k: &str| {
            self.ipt_names
                .iter()
                .position(|n| normalize_name(n) == k)
        };
        find(&key).or_else(|| {
            schema
                .aliases()
                .iter()
                .find(|(alias, _)| normalize_name(alias) == key)
                .and_then(|(_, canonical)| find(canonical))
        })
    }
}

/// Per-frame binary targets (or thresholded predictions).
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrid {
    /// `n_time x n_ipt`
    pub ipt: Array2<u8>,
    /// `n_time x n_pitch`
    pub pitch: Array2<u8>,
    pub onset: Array1<u8>,
    /// 1 for frames backed by real audio, 0 for padding.
    pub mask: Array1<u8>,
    pub frame_rate: f64,
}

impl FrameGrid {
    pub fn zeros(n_time: usize, n_ipt: usize, n_pitch: usize, frame_rate: f64) -> Self {
        FrameGrid {
            ipt: Array2::zeros((n_time, n_ipt)),
            pitch: Array2::zeros((n_time, n_pitch)),
            onset: Array1::zeros(n_time),
            mask: Array1::ones(n_time),
            frame_rate,
        }
    }

    pub fn n_time(&self) -> usize {
        self.onset.len()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Checks the structural invariants. `ground_truth` additionally requires
    /// every onset frame to carry an active IPT class.
    pub fn check_invariants(&self, ground_truth: bool) -> Result<()> {
        let n = self.n_time();
        if self.ipt.nrows() != n || self.pitch.nrows() != n || self.mask.len() != n {
            return Err(Error::Contract("frame grid rows disagree".into()));
        }
        let binary = |v: &u8| *v <= 1;
        if !(self.ipt.iter().all(binary)
            && self.pitch.iter().all(binary)
            && self.onset.iter().all(binary)
            && self.mask.iter().all(binary))
        {
            return Err(Error::Contract("frame grid holds non-binary values".into()));
        }
        for t in 0..n {
            let any_ipt = self.ipt.row(t).iter().any(|&v| v == 1);
            let any_pitch = self.pitch.row(t).iter().any(|&v| v == 1);
            if self.mask[t] == 0 && (any_ipt || any_pitch || self.onset[t] == 1) {
                return Err(Error::Contract(format!("padded frame {t} carries labels")));
            }
            if ground_truth && self.onset[t] == 1 && !any_ipt {
                return Err(Error::Contract(format!(
                    "onset at frame {t} without an active class"
                )));
            }
        }
        Ok(())
    }
}

/// One fixed-length training or inference window.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Mono 24 kHz audio, always exactly [`crate::encoder::WINDOW_SAMPLES`] long.
    pub waveform: Vec<f32>,
    pub labels: FrameGrid,
    /// Window-local events used to build `labels`.
    pub events: Vec<IptEvent>,
    pub source_id: String,
    /// Window start within the source recording, seconds.
    pub window_offset: f64,
}

/// Positive-class weights for the IPT loss: `clamp(neg / max(pos, 1), 1, 100)`
/// counted over valid frames.
pub fn class_weights(train_grids: &[FrameGrid]) -> Vec<f64> {
    let n_ipt = train_grids.first().map_or(0, |g| g.ipt.ncols());
    let mut pos = vec![0u64; n_ipt];
    let mut valid = 0u64;
    for grid in train_grids {
        for t in 0..grid.n_time() {
            if grid.mask[t] == 0 {
                continue;
            }
            valid += 1;
            for (c, p) in pos.iter_mut().enumerate() {
                *p += grid.ipt[[t, c]] as u64;
            }
        }
    }
    if valid == 0 {
        log::warn!("class_weights: no valid frames, using unit weights");
        return vec![1.0; n_ipt];
    }
    pos.iter()
        .map(|&p| {
            let neg = (valid - p) as f64;
            (neg / (p.max(1) as f64)).clamp(1.0, 100.0)
        })
        .collect()
}
