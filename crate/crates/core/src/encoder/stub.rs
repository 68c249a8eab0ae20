//! Parameter-free stand-in for the pre-trained backbone.
//!
//! Per frame it measures log band energies (semitone bands from a 1024-point
//! spectrum plus coarse bands from a 480-point spectrum and their positive
//! frame-to-frame changes), centres them on a fixed reference level,
//! projects them to `dim` with a seeded Gaussian
//! matrix, and derives each layer from that base with a seeded per-layer
//! gain and offset.

use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use super::{frames_for_samples, normal_vec, SAMPLES_PER_FRAME, SAMPLE_RATE};
use crate::Result;

const LONG_WIN: usize = 1024;
const SHORT_WIN: usize = 480;
const MIDI_LO: u32 = 36;
const MIDI_HI: u32 = 107;
const N_COARSE: usize = 16;
const LAYER_GAIN: f32 = 0.1;
const LAYER_SHIFT: f32 = 0.02;
/// Projection gain. Large enough that the default head fits the toy corpus
/// within a few hundred SGD steps at the standard learning rate.
const PROJECTION_GAIN: f32 = 40.0;
/// Typical feature level, removed before projection so the base is centred.
const LEVEL_CENTRE: f32 = 0.125;

fn n_semitones() -> usize {
    (MIDI_HI - MIDI_LO + 1) as usize
}

fn n_features() -> usize {
    n_semitones() + 2 * N_COARSE
}

fn hann(n: usize) -> Vec<f32> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f32::consts::PI * i as f32 / n as f32).cos())
        .collect()
}

struct Spectrum {
    fft: Arc<dyn Fft<f32>>,
    window: Vec<f32>,
    norm: f32,
}

impl Spectrum {
    fn new(planner: &mut FftPlanner<f32>, n: usize) -> Self {
        let window = hann(n);
        let norm = window.iter().sum::<f32>().powi(2);
        Spectrum {
            fft: planner.plan_fft_forward(n),
            window,
            norm,
        }
    }

    /// Normalized power spectrum of the window centred at `center`.
    fn power(&self, wave: &[f32], center: isize) -> Vec<f32> {
        let n = self.window.len();
        let start = center - n as isize / 2;
        let mut buf: Vec<Complex32> = (0..n)
            .map(|i| {
                let idx = start + i as isize;
                let s = if idx >= 0 && (idx as usize) < wave.len() {
                    wave[idx as usize]
                } else {
                    0.0
                };
                Complex32::new(s * self.window[i], 0.0)
            })
            .collect();
        self.fft.process(&mut buf);
        buf[..n / 2 + 1]
            .iter()
            .map(|c| c.norm_sqr() / self.norm)
            .collect()
    }
}

fn to_level(power: f32) -> f32 {
    ((power + 1e-8).log10() + 8.0) / 4.0
}

fn bin_of(freq: f32, n: usize) -> f32 {
    freq * n as f32 / SAMPLE_RATE as f32
}

/// Deterministic encoder with the backbone's output shape.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    seed: u64,
    n_layers: usize,
    dim: usize,
    /// `n_features x dim`, row-major.
    projection: Vec<f32>,
    gains: Vec<f32>,
    shifts: Vec<f32>,
}

impl StubEncoder {
    pub fn new(seed: u64, n_layers: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_57ab);
        let nf = n_features();
        let scale = PROJECTION_GAIN / (nf as f32).sqrt();
        let projection = normal_vec(&mut rng, nf * dim)
            .into_iter()
            .map(|v| v * scale)
            .collect();
        let gains = normal_vec(&mut rng, n_layers * dim)
            .into_iter()
            .map(|v| 1.0 + LAYER_GAIN * v)
            .collect();
        let shifts = normal_vec(&mut rng, n_layers * dim)
            .into_iter()
            .map(|v| LAYER_SHIFT * v)
            .collect();
        StubEncoder {
            seed,
            n_layers,
            dim,
            projection,
            gains,
            shifts,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Per-frame energy features, `n_time x n_features`.
    pub fn frame_features(&self, wave: &[f32]) -> Vec<Vec<f32>> {
        let n_time = frames_for_samples(wave.len());
        let mut planner = FftPlanner::new();
        let long = Spectrum::new(&mut planner, LONG_WIN);
        let short = Spectrum::new(&mut planner, SHORT_WIN);
        let semis: Vec<(usize, usize)> = (MIDI_LO..=MIDI_HI)
            .map(|m| {
                let f = 440.0 * 2f32.powf((m as f32 - 69.0) / 12.0);
                let lo = bin_of(f * 2f32.powf(-1.0 / 24.0), LONG_WIN).round() as usize;
                let hi = bin_of(f * 2f32.powf(1.0 / 24.0), LONG_WIN).round() as usize;
                (lo, hi.max(lo))
            })
            .collect();
        let n_short_bins = SHORT_WIN / 2 + 1;
        let coarse_edges: Vec<usize> = (0..=N_COARSE)
            .map(|i| {
                // log-spaced from ~50 Hz up to Nyquist
                let lo = (bin_of(50.0, SHORT_WIN)).max(1.0);
                let hi = (n_short_bins - 1) as f32;
                (lo * (hi / lo).powf(i as f32 / N_COARSE as f32)).round() as usize
            })
            .collect();

        let mut prev_coarse = vec![0.0f32; N_COARSE];
        let mut out = Vec::with_capacity(n_time);
        for t in 0..n_time {
            let center = (t * SAMPLES_PER_FRAME + SAMPLES_PER_FRAME / 2) as isize;
            let p_long = long.power(wave, center);
            let p_short = short.power(wave, center);
            let mut feat = Vec::with_capacity(n_features());
            for &(lo, hi) in &semis {
                let peak = p_long[lo..=hi.min(p_long.len() - 1)]
                    .iter()
                    .copied()
                    .fold(0.0f32, f32::max);
                feat.push(to_level(peak));
            }
            let coarse: Vec<f32> = coarse_edges
                .windows(2)
                .map(|e| {
                    let hi = e[1].max(e[0] + 1).min(n_short_bins);
                    to_level(p_short[e[0]..hi].iter().sum())
                })
                .collect();
            for (c, p) in coarse.iter().zip(&prev_coarse) {
                feat.push(*c);
                feat.push((c - p).max(0.0) * 4.0);
            }
            prev_coarse = coarse;
            out.push(feat);
        }
        out
    }

    /// `(n_layers, n_time, dim)` for one waveform, as f32 values.
    pub fn encode_values(&self, wave: &[f32]) -> Vec<f32> {
        let feats = self.frame_features(wave);
        let n_time = feats.len();
        let nf = n_features();
        let mut base = vec![0.0f32; n_time * self.dim];
        for (t, f) in feats.iter().enumerate() {
            let row = &mut base[t * self.dim..(t + 1) * self.dim];
            for (i, &x) in f.iter().enumerate().take(nf) {
                let x = x - LEVEL_CENTRE;
                let proj = &self.projection[i * self.dim..(i + 1) * self.dim];
                for (r, p) in row.iter_mut().zip(proj) {
                    *r += x * p;
                }
            }
        }
        let mut out = Vec::with_capacity(self.n_layers * n_time * self.dim);
        for k in 0..self.n_layers {
            let gain = &self.gains[k * self.dim..(k + 1) * self.dim];
            let shift = &self.shifts[k * self.dim..(k + 1) * self.dim];
            for t in 0..n_time {
                let row = &base[t * self.dim..(t + 1) * self.dim];
                out.extend(row.iter().zip(gain).zip(shift).map(|((b, g), s)| b * g + s));
            }
        }
        out
    }

    pub fn encode_batch(&self, waves: &Tensor, dtype: DType) -> Result<Tensor> {
        let waves = waves.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let device: &Device = &Device::Cpu;
        let mut stacks = Vec::with_capacity(waves.len());
        for w in &waves {
            let n_time = frames_for_samples(w.len());
            let values = self.encode_values(w);
            stacks.push(Tensor::from_vec(values, (self.n_layers, n_time, self.dim), device)?);
        }
        Ok(Tensor::stack(&stacks, 0)?.to_dtype(dtype)?)
    }
}
