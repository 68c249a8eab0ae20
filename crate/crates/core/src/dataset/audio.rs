//! WAV/FLAC decoding and resampling to the encoder's 24 kHz mono input.

use std::path::Path;

use rubato::{FftFixedIn, Resampler};

use crate::encoder::SAMPLE_RATE;
use crate::{Error, Result};

/// Decoded audio, channels averaged to mono.
#[derive(Debug, Clone)]
pub struct Audio {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Audio {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_lowercase()
}

pub fn is_audio_file(path: &Path) -> bool {
    matches!(extension(path).as_str(), "wav" | "flac")
}

fn downmix(interleaved: impl Iterator<Item = f32>, channels: usize) -> Vec<f32> {
    let mut out = Vec::new();
    let mut acc = 0.0f32;
    for (i, s) in interleaved.enumerate() {
        acc += s;
        if (i + 1) % channels == 0 {
            out.push(acc / channels as f32);
            acc = 0.0;
        }
    }
    out
}

/// Reads a WAV or FLAC file.
pub fn load_audio(path: &Path) -> Result<Audio> {
    let audio_err = |msg: String| Error::Audio(format!("{}: {msg}", path.display()));
    match extension(path).as_str() {
        "wav" => {
            let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
            let spec = reader.spec();
            let channels = spec.channels.max(1) as usize;
            let samples: Vec<f32> = match spec.sample_format {
                hound::SampleFormat::Float => reader
                    .samples::<f32>()
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| audio_err(e.to_string()))?,
                hound::SampleFormat::Int => {
                    let scale = (1i64 << (spec.bits_per_sample - 1)) as f32;
                    reader
                        .samples::<i32>()
                        .map(|s| s.map(|v| v as f32 / scale))
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| audio_err(e.to_string()))?
                }
            };
            Ok(Audio {
                samples: downmix(samples.into_iter(), channels),
                sample_rate: spec.sample_rate,
            })
        }
        "flac" => {
            let mut reader =
                claxon::FlacReader::open(path).map_err(|e| audio_err(e.to_string()))?;
            let info = reader.streaminfo();
            let channels = info.channels.max(1) as usize;
            let scale = (1i64 << (info.bits_per_sample - 1)) as f32;
            let samples: Vec<f32> = reader
                .samples()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| audio_err(e.to_string()))?;
            Ok(Audio {
                samples: downmix(samples.into_iter(), channels),
                sample_rate: info.sample_rate,
            })
        }
        other => Err(audio_err(format!("unsupported audio format `{other}`"))),
    }
}

/// Duration in seconds read from the file header without decoding.
pub fn probe_duration(path: &Path) -> Result<f64> {
    let audio_err = |msg: String| Error::Audio(format!("{}: {msg}", path.display()));
    match extension(path).as_str() {
        "wav" => {
            let reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
            Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
        }
        "flac" => {
            let reader = claxon::FlacReader::open(path).map_err(|e| audio_err(e.to_string()))?;
            let info = reader.streaminfo();
            let frames = info
                .samples
                .ok_or_else(|| audio_err("stream length missing from header".into()))?;
            Ok(frames as f64 / info.sample_rate as f64)
        }
        other => Err(audio_err(format!("unsupported audio format `{other}`"))),
    }
}

/// Band-limited resampling. The output holds `round(len * to / from)` samples
/// aligned with the input (the resampler delay is removed).
pub fn resample(samples: &[f32], from: u32, to: u32) -> Result<Vec<f32>> {
    if from == to || samples.is_empty() {
        return Ok(samples.to_vec());
    }
    let chunk = 1024;
    let mut resampler = FftFixedIn::<f32>::new(from as usize, to as usize, chunk, 2, 1)
        .map_err(|e| Error::Audio(format!("resampler {from} -> {to} Hz: {e}")))?;
    let delay = resampler.output_delay();
    let expected = (samples.len() as f64 * to as f64 / from as f64).round() as usize;
    let mut out = Vec::with_capacity(expected + delay + chunk);
    let run_err = |e: rubato::ResampleError| Error::Audio(format!("resampling failed: {e}"));

    let mut pos = 0;
    while samples.len() - pos >= resampler.input_frames_next() {
        let n = resampler.input_frames_next();
        let block = resampler
            .process(&[&samples[pos..pos + n]], None)
            .map_err(run_err)?;
        out.extend_from_slice(&block[0]);
        pos += n;
    }
    let tail = resampler
        .process_partial(Some(&[&samples[pos..]]), None)
        .map_err(run_err)?;
    out.extend_from_slice(&tail[0]);
    while out.len() < expected + delay {
        let flush = resampler
            .process_partial::<&[f32]>(None, None)
            .map_err(run_err)?;
        if flush[0].is_empty() {
            break;
        }
        out.extend_from_slice(&flush[0]);
    }
    let mut out = out.split_off(delay.min(out.len()));
    out.resize(expected, 0.0);
    Ok(out)
}

/// Loads a file as 24 kHz mono.
pub fn load_audio_24k(path: &Path) -> Result<Vec<f32>> {
    let audio = load_audio(path)?;
    resample(&audio.samples, audio.sample_rate, SAMPLE_RATE)
}

/// Writes 16-bit mono PCM.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| Error::Audio(format!("{}: {e}", path.display()));
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in samples {
        writer
            .write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f32) as i16)
            .map_err(err)?;
    }
    writer.finalize().map_err(err)
}
