//! Synthetic corpus with four timbre-defined techniques over twelve pitches.
//! Each technique is a fixed harmonic recipe, so the classes are separable
//! from per-frame spectra; events are separated by short silences so that
//! every onset is an audible attack.

use std::f32::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{audio, segment, write_annotations, DatasetSchema, IptEvent, Sample, SplitTag};
use crate::encoder::{frames_for_samples, SAMPLE_RATE, WINDOW_SAMPLES};
use crate::{Error, Result};

/// (harmonic number, relative amplitude) per class.
const RECIPES: [&[(f32, f32)]; 4] = [
    &[(1.0, 1.0)],
    &[(1.0, 1.0), (2.0, 0.7), (3.0, 0.5)],
    &[(1.0, 1.0), (3.0, 0.6), (5.0, 0.4)],
    &[(1.0, 1.0), (4.0, 0.7), (5.0, 0.6)],
];

fn midi_to_hz(m: u8) -> f32 {
    440.0 * 2f32.powf((m as f32 - 69.0) / 12.0)
}

/// Renders one recording of `seconds` length and its annotations.
pub fn toy_recording(seed: u64, seconds: f64) -> (Vec<f32>, Vec<IptEvent>) {
    let class_map = DatasetSchema::Toy.class_map();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sr = SAMPLE_RATE as f32;
    let n = (seconds * SAMPLE_RATE as f64).round() as usize;
    let mut wave: Vec<f32> = (0..n).map(|_| rng.random_range(-1e-4..1e-4)).collect();
    let mut events = Vec::new();

    let mut t = rng.random_range(0.05..0.2);
    loop {
        let dur = rng.random_range(0.25..0.7);
        if t + dur > seconds - 0.05 {
            break;
        }
        let label = rng.random_range(0..class_map.n_ipt());
        let pitch = rng.random_range(class_map.pitch_range.0..=class_map.pitch_range.1);
        let f0 = midi_to_hz(pitch);
        let start = (t * SAMPLE_RATE as f64) as usize;
        let end = ((t + dur) * SAMPLE_RATE as f64) as usize;
        let ramp = (0.005 * sr) as usize;
        for (i, s) in wave[start..end].iter_mut().enumerate() {
            let env = (i.min(end - start - 1 - i) as f32 / ramp as f32).min(1.0);
            let phase = 2.0 * PI * f0 * i as f32 / sr;
            let tone: f32 = RECIPES[label]
                .iter()
                .map(|(h, a)| a * (phase * h).sin())
                .sum();
            *s += 0.25 * env * tone;
        }
        events.push(IptEvent {
            label,
            onset: t,
            offset: t + dur,
            pitch: Some(pitch),
        });
        t += dur + rng.random_range(0.05..0.15);
    }
    (wave, events)
}

/// `count` single-window samples, each a fresh 5 s recording.
pub fn toy_samples(count: usize, seed: u64) -> Result<Vec<Sample>> {
    let class_map = DatasetSchema::Toy.class_map();
    let n_frames = frames_for_samples(WINDOW_SAMPLES);
    let seconds = WINDOW_SAMPLES as f64 / SAMPLE_RATE as f64;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let (wave, events) = toy_recording(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), seconds);
        let id = format!("toy{i:03}");
        out.extend(segment(&wave, &events, &id, &class_map, n_frames)?);
    }
    Ok(out)
}

/// Writes a raw toy corpus laid out as `<root>/<split>/<id>.{wav,csv}`.
pub fn write_toy_corpus(
    root: &Path,
    counts: [(SplitTag, usize); 3],
    seconds: f64,
    seed: u64,
) -> Result<()> {
    let class_map = DatasetSchema::Toy.class_map();
    let mut index = 0u64;
    for (tag, count) in counts {
        let dir = root.join(match tag {
            SplitTag::Train => "train",
            SplitTag::Val => "valid",
            SplitTag::Test => "test",
        });
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for _ in 0..count {
            let (wave, events) = toy_recording(seed.wrapping_mul(7919).wrapping_add(index), seconds);
            let stem = format!("toy{index:03}");
            audio::write_wav(&dir.join(format!("{stem}.wav")), &wave, SAMPLE_RATE)?;
            write_annotations(&dir.join(format!("{stem}.csv")), &events, &class_map)?;
            index += 1;
        }
    }
    Ok(())
}
