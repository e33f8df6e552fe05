//! Audio front-end: WAV input, framing, MFCC analysis, energy VAD and CMVN.

mod mfcc;
mod wav;

use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Decoder, Encoder, FORMAT_VERSION};
use crate::error::{Error, Result};

pub use mfcc::{
    compute_mfcc, dct2, frame_count, frame_signal, hamming, hz_to_mel, mel_to_hz, preemphasize,
    MelFilterbank, MfccConfig, MfccExtractor, WindowedFrames,
};
pub use wav::{read_wav, write_wav};

const FEATURE_MAGIC: &[u8; 4] = b"IVXF";

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32, source_id: impl Into<String>) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Data("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::Data("audio clip is empty".into()));
        }
        if let Some(bad) = samples.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::Data(format!("sample {bad} outside [-1, 1]")));
        }
        Ok(AudioClip {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

/// Per-utterance cepstral frames (T×D) with a voice-activity mask.
///
/// `frame_length_samples` and `frame_shift_samples` are 0 when the sequence
/// was loaded from a feature file, which does not record them.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: DMatrix<f64>,
    pub frame_length_samples: usize,
    pub frame_shift_samples: usize,
    pub vad_mask: Vec<bool>,
    pub normalized: bool,
}

impl FeatureSequence {
    /// Builds a sequence from raw parts, checking shape and finiteness.
    pub fn from_parts(frames: DMatrix<f64>, vad_mask: Vec<bool>, normalized: bool) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Data("feature sequence must have T ≥ 1 and D ≥ 1".into()));
        }
        if vad_mask.len() != frames.nrows() {
            return Err(Error::DimensionMismatch {
                context: "vad mask length",
                expected: frames.nrows(),
                actual: vad_mask.len(),
            });
        }
        binio::check_finite_matrix(&frames, "feature frames")?;
        Ok(FeatureSequence {
            frames,
            frame_length_samples: 0,
            frame_shift_samples: 0,
            vad_mask,
            normalized,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn voiced_count(&self) -> usize {
        self.vad_mask.iter().filter(|&&v| v).count()
    }

    /// The voiced rows as a new matrix.
    pub fn voiced_frames(&self) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..self.n_frames()).filter(|&t| self.vad_mask[t]).collect();
        self.frames.select_rows(&idx)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(FEATURE_MAGIC);
        e.u32(FORMAT_VERSION)
            .len(self.n_frames())
            .len(self.dim())
            .matrix(&self.frames);
        let mask: Vec<u8> = self.vad_mask.iter().map(|&v| u8::from(v)).collect();
        e.bytes(&mask);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, FEATURE_MAGIC, context)?;
        d.version()?;
        let t = d.len()?;
        let dim = d.len()?;
        let frames = d.matrix(t, dim)?;
        let mask_bytes = d.bytes(t)?;
        d.finish()?;
        let mask = mask_bytes
            .iter()
            .map(|&b| match b {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::format(context, format!("vad byte {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        FeatureSequence::from_parts(frames, mask, false)
    }
}

pub fn write_features(path: &Path, fs: &FeatureSequence) -> Result<()> {
    binio::write_file(path, &fs.to_bytes())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    FeatureSequence::from_bytes(&binio::read_file(path)?, &path.display().to_string())
}

/// Per-frame log energy in dB of the raw (unwindowed) samples.
pub fn frame_energies_db(clip: &AudioClip, frame_len: usize, frame_shift: usize) -> Vec<f64> {
    (0..frame_count(clip.samples.len(), frame_len, frame_shift))
        .map(|i| {
            let start = i * frame_shift;
            let energy: f64 = clip.samples[start..start + frame_len]
                .iter()
                .map(|x| x * x)
                .sum();
            10.0 * (energy + 1e-10).log10()
        })
        .collect()
}

/// Marks a frame voiced iff its energy exceeds `max - threshold_db`.
///
/// The loudest frame is always voiced, and uniform energy leaves every frame voiced.
pub fn energy_vad(energies_db: &[f64], threshold_db: f64) -> Result<Vec<bool>> {
    if energies_db.is_empty() {
        return Err(Error::Data("VAD needs at least one frame".into()));
    }
    if !(threshold_db > 0.0) {
        return Err(Error::Config(format!(
            "VAD threshold must be positive, got {threshold_db}"
        )));
    }
    let peak = energies_db
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(energies_db.iter().map(|&e| e > peak - threshold_db).collect())
}

/// Result of CMVN: the normalized voiced frames plus any columns whose variance
/// was zero (their divisor was replaced with 1).
#[derive(Debug, Clone)]
pub struct Cmvn {
    pub features: FeatureSequence,
    pub zero_variance_columns: Vec<usize>,
}

/// Per-utterance mean and variance normalization over voiced frames.
///
/// Unvoiced frames are dropped; the output mask is all-voiced.
pub fn cmvn_normalize(fs: &FeatureSequence) -> Result<Cmvn> {
    let voiced = fs.voiced_frames();
    let n = voiced.nrows();
    if n < 2 {
        return Err(Error::Data(format!(
            "CMVN needs at least 2 voiced frames, got {n}"
        )));
    }
    let mut out = voiced;
    let mut zero_variance_columns = Vec::new();
    for c in 0..out.ncols() {
        let mut col = out.column_mut(c);
        let mean = col.sum() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = if var > 1e-24 {
            var.sqrt()
        } else {
            zero_variance_columns.push(c);
            1.0
        };
        for v in col.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    if !zero_variance_columns.is_empty() {
        warn!("CMVN: zero-variance coefficient(s) {zero_variance_columns:?}, divisor set to 1");
    }
    Ok(Cmvn {
        features: FeatureSequence {
            frames: out,
            frame_length_samples: fs.frame_length_samples,
            frame_shift_samples: fs.frame_shift_samples,
            vad_mask: vec![true; n],
            normalized: true,
        },
        zero_variance_columns,
    })
}

/// Truncates or cyclically pads the voiced frames to exactly `count` rows.
pub fn fit_frame_count(fs: &FeatureSequence, count: usize) -> Result<FeatureSequence> {
    let voiced = fs.voiced_frames();
    if voiced.nrows() == 0 || count == 0 {
        return Err(Error::Data("cannot resize an empty feature sequence".into()));
    }
    let idx: Vec<usize> = (0..count).map(|i| i % voiced.nrows()).collect();
    Ok(FeatureSequence {
        frames: voiced.select_rows(&idx),
        frame_length_samples: fs.frame_length_samples,
        frame_shift_samples: fs.frame_shift_samples,
        vad_mask: vec![true; count],
        normalized: fs.normalized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendConfig {
    pub frame_len: usize,
    /// Defaults to half the frame length.
    pub frame_shift: Option<usize>,
    pub preemphasis: f64,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub log_floor: f64,
    pub vad_threshold_db: f64,
    /// When set, every utterance is truncated or padded to this many frames
    /// instead of keeping its natural length.
    pub frames_per_utterance: Option<usize>,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            frame_len: 256,
            frame_shift: None,
            preemphasis: 0.97,
            n_mels: 26,
            n_ceps: 12,
            log_floor: 1e-10,
            vad_threshold_db: 30.0,
            frames_per_utterance: None,
        }
    }
}

impl FrontendConfig {
    pub fn shift(&self) -> usize {
        self.frame_shift.unwrap_or((self.frame_len / 2).max(1))
    }

    pub fn mfcc(&self) -> MfccConfig {
        MfccConfig {
            n_mels: self.n_mels,
            n_ceps: self.n_ceps,
            log_floor: self.log_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len < 2 || self.shift() == 0 {
            return Err(Error::Config("frame length must be ≥ 2 and shift ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return Err(Error::Config("pre-emphasis must lie in [0, 1)".into()));
        }
        if self.n_ceps == 0 || self.n_ceps > self.n_mels {
            return Err(Error::Config("need 1 ≤ n_ceps ≤ n_mels".into()));
        }
        if !(self.vad_threshold_db > 0.0) || !(self.log_floor > 0.0) {
            return Err(Error::Config("VAD threshold and log floor must be positive".into()));
        }
        if self.frames_per_utterance == Some(0) {
            return Err(Error::Config("frames_per_utterance must be positive".into()));
        }
        Ok(())
    }
}

/// Raw MFCCs with the energy-VAD mask attached (not yet normalized).
pub fn extract_features(clip: &AudioClip, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    let shift = cfg.shift();
    let frames = frame_signal(clip, cfg.frame_len, shift, cfg.preemphasis)?;
    let mut fs = compute_mfcc(&frames, clip.sample_rate_hz, cfg.mfcc())?;
    fs.vad_mask = energy_vad(&frame_energies_db(clip, cfg.frame_len, shift), cfg.vad_threshold_db)?;
    Ok(fs)
}

/// Normalizes a stored sequence for modeling, applying the frame-count mode if configured.
pub fn prepare_for_modeling(fs: &FeatureSequence, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    let normalized = cmvn_normalize(fs)?.features;
    match cfg.frames_per_utterance {
        Some(n) => fit_frame_count(&normalized, n),
        None => Ok(normalized),
    }
}
