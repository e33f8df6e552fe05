use std::f64::consts::PI;

use nalgebra::DMatrix;
use rustfft::{num_complex::Complex, FftPlanner};

use super::{AudioClip, FeatureSequence};
use crate::error::{Error, Result};

/// Windowed analysis frames cut from one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedFrames {
    pub frames: Vec<Vec<f64>>,
    pub frame_len: usize,
    pub frame_shift: usize,
}

pub fn frame_count(n_samples: usize, frame_len: usize, frame_shift: usize) -> usize {
    if frame_len == 0 || frame_shift == 0 || n_samples < frame_len {
        return 0;
    }
    (n_samples - frame_len) / frame_shift + 1
}

/// First-order pre-emphasis `y[n] = x[n] - a*x[n-1]`, with `y[0] = x[0]`.
pub fn preemphasize(samples: &[f64], coefficient: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = None;
    for &x in samples {
        out.push(match prev {
            Some(p) => x - coefficient * p,
            None => x,
        });
        prev = Some(x);
    }
    out
}

pub fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let denom = (len - 1) as f64;
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos())
        .collect()
}

/// Cuts `clip` into overlapping frames, pre-emphasizes each and applies a Hamming window.
pub fn frame_signal(
    clip: &AudioClip,
    frame_len: usize,
    frame_shift: usize,
    preemphasis: f64,
) -> Result<WindowedFrames> {
    if frame_len == 0 || frame_shift == 0 {
        return Err(Error::Config(
            "frame length and shift must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&preemphasis) {
        return Err(Error::Config(format!(
            "pre-emphasis coefficient {preemphasis} outside [0, 1)"
        )));
    }
    let n = clip.samples.len();
    if n < frame_len {
        return Err(Error::Data(format!(
            "clip `{}` has {n} samples, shorter than one {frame_len}-sample frame",
            clip.source_id
        )));
    }
    let window = hamming(frame_len);
    let frames = (0..frame_count(n, frame_len, frame_shift))
        .map(|i| {
            let start = i * frame_shift;
            preemphasize(&clip.samples[start..start + frame_len], preemphasis)
                .into_iter()
                .zip(&window)
                .map(|(x, w)| x * w)
                .collect()
        })
        .collect();
    Ok(WindowedFrames {
        frames,
        frame_len,
        frame_shift,
    })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters spaced uniformly on the mel scale between 0 Hz and Nyquist.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// `n_mels` rows of weights over the `n_fft/2 + 1` non-negative frequency bins.
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
    n_fft: usize,
}

impl MelFilterbank {
    pub fn new(sample_rate_hz: u32, n_fft: usize, n_mels: usize) -> Result<Self> {
        if n_mels == 0 || n_fft < 2 {
            return Err(Error::Config("filterbank needs n_mels ≥ 1 and n_fft ≥ 2".into()));
        }
        let sr = f64::from(sample_rate_hz);
        let nyquist = sr / 2.0;
        let mel_max = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sr / n_fft as f64;
        let mut weights = Vec::with_capacity(n_mels);
        for j in 0..n_mels {
            let (lo, mid, hi) = (edges[j], edges[j + 1], edges[j + 2]);
            let row: Vec<f64> = (0..n_bins)
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
                .collect();
            if row.iter().all(|&w| w == 0.0) {
                return Err(Error::Config(format!(
                    "{n_mels} mel filters are too many for a {n_fft}-point transform at {sample_rate_hz} Hz \
                     (filter {j} covers no frequency bin)"
                )));
            }
            weights.push(row);
        }
        Ok(MelFilterbank {
            weights,
            centers_hz: edges[1..=n_mels].to_vec(),
            n_fft,
        })
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccConfig {
    pub n_mels: usize,
    pub n_ceps: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            n_mels: 26,
            n_ceps: 12,
            log_floor: 1e-10,
        }
    }
}

/// Reusable MFCC analyzer for one (sample rate, frame length) pair.
pub struct MfccExtractor {
    config: MfccConfig,
    filterbank: MelFilterbank,
    fft: std::sync::Arc<dyn rustfft::Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(sample_rate_hz: u32, frame_len: usize, config: MfccConfig) -> Result<Self> {
        if config.n_ceps == 0 || config.n_ceps > config.n_mels {
            return Err(Error::Config(format!(
                "n_ceps = {} must be in 1..={}",
                config.n_ceps, config.n_mels
            )));
        }
        if !(config.log_floor > 0.0) {
            return Err(Error::Config("log floor must be positive".into()));
        }
        let n_fft = frame_len.max(2).next_power_of_two();
        let filterbank = MelFilterbank::new(sample_rate_hz, n_fft, config.n_mels)?;
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(MfccExtractor {
            config,
            filterbank,
            fft,
        })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Power spectrum `|X_k|^2` over the non-negative bins, zero-padding to the transform size.
    pub fn power_spectrum(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let n_fft = self.filterbank.n_fft;
        if frame.len() > n_fft {
            return Err(Error::DimensionMismatch {
                context: "mfcc frame length",
                expected: n_fft,
                actual: frame.len(),
            });
        }
        if frame.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite sample in MFCC input".into()));
        }
        let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
        buf.resize(n_fft, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        Ok(buf[..n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect())
    }

    pub fn filterbank_energies(&self, frame: &[f64]) -> Result<Vec<f64>> {
        Ok(self.filterbank.apply(&self.power_spectrum(frame)?))
    }

    /// Cepstral coefficients 1..=n_ceps of one windowed frame.
    pub fn cepstra(&self, frame: &[f64]) -> Result<Vec<f64>> {
        let log_energies: Vec<f64> = self
            .filterbank_energies(frame)?
            .into_iter()
            .map(|e| e.max(self.config.log_floor).ln())
            .collect();
        Ok(dct2(&log_energies, 1..self.config.n_ceps + 1))
    }
}

/// Orthonormal type-II DCT restricted to the coefficient indices in `range`.
pub fn dct2(input: &[f64], range: std::ops::Range<usize>) -> Vec<f64> {
    let m = input.len() as f64;
    range
        .map(|k| {
            let scale = if k == 0 { (1.0 / m).sqrt() } else { (2.0 / m).sqrt() };
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(n, &x)| x * (PI * k as f64 * (2 * n + 1) as f64 / (2.0 * m)).cos())
                    .sum::<f64>()
        })
        .collect()
}

/// MFCCs for every frame. The VAD mask starts all-voiced; callers attach a real mask.
pub fn compute_mfcc(
    frames: &WindowedFrames,
    sample_rate_hz: u32,
    config: MfccConfig,
) -> Result<FeatureSequence> {
    if frames.frames.is_empty() {
        return Err(Error::Data("no frames to analyze".into()));
    }
    let extractor = MfccExtractor::new(sample_rate_hz, frames.frame_len, config)?;
    let rows = frames
        .frames
        .iter()
        .map(|f| extractor.cepstra(f))
        .collect::<Result<Vec<_>>>()?;
    let t = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(FeatureSequence {
        frames: DMatrix::from_row_slice(t, config.n_ceps, &flat),
        frame_length_samples: frames.frame_len,
        frame_shift_samples: frames.frame_shift,
        vad_mask: vec![true; t],
        normalized: false,
    })
}
