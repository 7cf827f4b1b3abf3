//! Log mel filterbank features.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FbankConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub stride_ms: f64,
    pub n_mels: usize,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 25.0,
            stride_ms: 10.0,
            n_mels: 80,
            log_floor: 1e-10,
        }
    }
}

impl FbankConfig {
    pub fn window_samples(&self) -> usize {
        (self.sample_rate as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn stride_samples(&self) -> usize {
        (self.sample_rate as f64 * self.stride_ms / 1000.0).round() as usize
    }

    /// Smallest power of two holding one window.
    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    pub fn n_frames(&self, n_samples: usize) -> usize {
        let w = self.window_samples();
        if n_samples < w {
            0
        } else {
            1 + (n_samples - w) / self.stride_samples()
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters, evenly spaced on the
/// HTK mel scale between 0 Hz and Nyquist.
pub fn filter_centers(cfg: &FbankConfig) -> Vec<f64> {
    let edges = filter_edges(cfg);
    edges[1..=cfg.n_mels].to_vec()
}

fn filter_edges(cfg: &FbankConfig) -> Vec<f64> {
    let top = hz_to_mel(cfg.sample_rate as f64 / 2.0);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Filterbank matrix `[n_mels × (n_fft/2 + 1)]`.
pub fn mel_filterbank(cfg: &FbankConfig) -> Vec<Vec<f64>> {
    let n_fft = cfg.fft_size();
    let bins = n_fft / 2 + 1;
    let edges = filter_edges(cfg);
    let bin_hz = cfg.sample_rate as f64 / n_fft as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect()
        })
        .collect()
}

/// Hann window → |FFT| → mel filters → natural log with floor. Output `[n_mels×T]`.
pub fn compute_fbank(wave: &[f64], cfg: &FbankConfig) -> Result<Tensor> {
    let w = cfg.window_samples();
    let t = cfg.n_frames(wave.len());
    if t == 0 {
        return Err(Error::SequenceTooShort {
            len: wave.len(),
            min: w,
        });
    }
    let n_fft = cfg.fft_size();
    let hop = cfg.stride_samples();
    let window: Vec<f64> = (0..w)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (w - 1) as f64).cos())
        .collect();
    let bank = mel_filterbank(cfg);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = vec![0.0; cfg.n_mels * t];
    let mut mag = vec![0.0; n_fft / 2 + 1];
    for frame in 0..t {
        let start = frame * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            *c = if i < w {
                Complex::new(wave[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for (m, filt) in bank.iter().enumerate() {
            let e: f64 = filt.iter().zip(&mag).map(|(a, b)| a * b).sum();
            out[m * t + frame] = e.max(cfg.log_floor).ln();
        }
    }
    Tensor::new([cfg.n_mels, t], out)
}

/// Reads 16-bit PCM mono WAV, scaled to `[-1, 1)`.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Audio(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s) at {} bits",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    Ok((samples, spec.sample_rate))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count() {
        let cfg = FbankConfig::default();
        assert_eq!(cfg.n_frames(16_000), 98);
        assert_eq!(cfg.n_frames(399), 0);
        assert_eq!(cfg.n_frames(400), 1);
        assert_eq!(cfg.fft_size(), 512);
    }

    #[test]
    fn silence_hits_floor() {
        let cfg = FbankConfig::default();
        let f = compute_fbank(&vec![0.0; 4000], &cfg).unwrap();
        let floor = cfg.log_floor.ln();
        assert!(f.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short() {
        let err = compute_fbank(&[0.0; 100], &FbankConfig::default()).unwrap_err();
        assert!(matches!(err, Error::SequenceTooShort { .. }));
    }

    #[test]
    fn tone_peaks_at_nearest_filter() {
        let cfg = FbankConfig::default();
        let wave: Vec<f64> = (0..16_000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let f = compute_fbank(&wave, &cfg).unwrap();
        let centers = filter_centers(&cfg);
        let expected = centers
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - 1000.0)
                    .abs()
                    .partial_cmp(&(b.1 - 1000.0).abs())
                    .unwrap()
            })
            .unwrap()
            .0;
        let t = f.dim(1);
        let col: Vec<f64> = (0..cfg.n_mels).map(|m| f.data()[m * t + t / 2]).collect();
        let argmax = (0..cfg.n_mels)
            .max_by(|&a, &b| col[a].partial_cmp(&col[b]).unwrap())
            .unwrap();
        assert!(
            argmax.abs_diff(expected) <= 1,
            "argmax {argmax}, nearest center {expected}"
        );
    }
}
