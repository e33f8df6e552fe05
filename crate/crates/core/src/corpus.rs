//! Synthetic source-filter speaker corpus with controllable channels.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::error::{Error, Result};
use crate::frontend::write_wav;
use crate::frontend::AudioClip;

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::Male => "male",
            Gender::Female => "female",
        })
    }
}

/// F1–F3 of the open vowel /a/ per gender, the anchor for every vowel below.
fn base_formants(g: Gender) -> [f64; 3] {
    match g {
        Gender::Male => [730.0, 1090.0, 2440.0],
        Gender::Female => [850.0, 1220.0, 2810.0],
    }
}

/// Vowel formants relative to /a/ (a, i, u, e, o).
const VOWELS: [[f64; 3]; 5] = [
    [1.0, 1.0, 1.0],
    [270.0 / 730.0, 2290.0 / 1090.0, 3010.0 / 2440.0],
    [300.0 / 730.0, 870.0 / 1090.0, 2240.0 / 2440.0],
    [530.0 / 730.0, 1840.0 / 1090.0, 2480.0 / 2440.0],
    [570.0 / 730.0, 840.0 / 1090.0, 2410.0 / 2440.0],
];

const BANDWIDTHS_HZ: [f64; 3] = [80.0, 100.0, 140.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub gender: Gender,
    pub f0_hz: f64,
    /// Formants of this speaker's /a/, strictly increasing.
    pub formants_hz: [f64; 3],
    /// Standard deviation of the per-utterance f0 factor.
    pub jitter: f64,
    /// Pole of the one-pole glottal low-pass, in (0, 1).
    pub tilt: f64,
}

impl SpeakerProfile {
    pub fn validate(&self) -> Result<()> {
        if !(60.0..=400.0).contains(&self.f0_hz) {
            return Err(Error::Config(format!("{}: f0 {} Hz outside [60, 400]", self.speaker_id, self.f0_hz)));
        }
        let f = self.formants_hz;
        if !(f[0] > 0.0 && f[0] < f[1] && f[1] < f[2] && f[2] < SAMPLE_RATE as f64 / 2.0) {
            return Err(Error::Config(format!("{}: formants {f:?} not increasing below Nyquist", self.speaker_id)));
        }
        if !(0.0..1.0).contains(&self.tilt) || !(self.jitter >= 0.0) {
            return Err(Error::Config(format!("{}: bad tilt or jitter", self.speaker_id)));
        }
        Ok(())
    }

    fn vowel_formants(&self, v: usize) -> [f64; 3] {
        let mut f = [0.0; 3];
        for i in 0..3 {
            f[i] = self.formants_hz[i] * VOWELS[v][i];
        }
        f
    }
}

/// `n` profiles; male if rounding `i·ratio` steps up, which interleaves genders.
pub fn sample_speakers(n: usize, male_ratio: f64, seed: u64, prefix: &str) -> Result<Vec<SpeakerProfile>> {
    if n == 0 {
        return Err(Error::Config("at least one speaker is required".into()));
    }
    if !(0.0..=1.0).contains(&male_ratio) {
        return Err(Error::Config(format!("gender ratio {male_ratio} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    (0..n)
        .map(|i| {
            let male = ((i + 1) as f64 * male_ratio).round() > (i as f64 * male_ratio).round();
            let gender = if male { Gender::Male } else { Gender::Female };
            let mean_f0: f64 = if male { 120.0 } else { 210.0 };
            let f0_hz = (mean_f0 + 20.0 * unit.sample(&mut rng)).clamp(60.0, 400.0);
            // vocal-tract length scales every formant; each formant also moves on its own
            let vtl = 1.0 + 0.06 * unit.sample(&mut rng);
            let base = base_formants(gender);
            let mut formants_hz = [0.0; 3];
            for (k, slot) in formants_hz.iter_mut().enumerate() {
                *slot = base[k] * vtl * (1.0 + 0.04 * unit.sample(&mut rng));
            }
            formants_hz[1] = formants_hz[1].max(formants_hz[0] * 1.2);
            formants_hz[2] = formants_hz[2].max(formants_hz[1] * 1.2);
            let p = SpeakerProfile {
                speaker_id: format!("{prefix}{i:03}"),
                gender,
                f0_hz,
                formants_hz,
                jitter: rng.random_range(0.02..0.05),
                tilt: rng.random_range(0.88..0.97),
            };
            p.validate()?;
            Ok(p)
        })
        .collect()
}

/// A linear filter b(z)/a(z) with a[0] = 1, plus additive white noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelProfile {
    pub channel_id: String,
    pub b: Vec<f64>,
    pub a: Vec<f64>,
    pub noise_snr_db: f64,
}

/// Step-down recursion: stable iff every reflection coefficient has |k| < 1.
pub fn is_stable(a: &[f64]) -> bool {
    if a.is_empty() || a[0] == 0.0 || a.iter().any(|v| !v.is_finite()) {
        return false;
    }
    let mut poly: Vec<f64> = a.iter().map(|v| v / a[0]).collect();
    while poly.len() > 1 {
        let m = poly.len() - 1;
        let k = poly[m];
        if k.abs() >= 1.0 {
            return false;
        }
        let den = 1.0 - k * k;
        let next: Vec<f64> = (0..m).map(|i| (poly[i] - k * poly[m - i]) / den).collect();
        poly = next;
    }
    true
}

impl ChannelProfile {
    pub fn new(channel_id: impl Into<String>, b: Vec<f64>, a: Vec<f64>, noise_snr_db: f64) -> Result<Self> {
        let channel_id = channel_id.into();
        if b.is_empty() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!("channel {channel_id}: invalid numerator")));
        }
        if a.first() != Some(&1.0) {
            return Err(Error::Config(format!("channel {channel_id}: denominator must start with 1")));
        }
        if !is_stable(&a) {
            return Err(Error::Config(format!("channel {channel_id}: filter {a:?} has a pole outside the unit circle")));
        }
        if !(noise_snr_db >= 0.0) {
            return Err(Error::Config(format!("channel {channel_id}: SNR must be ≥ 0 dB")));
        }
        Ok(ChannelProfile { channel_id, b, a, noise_snr_db })
    }

    /// Pass-through channel without noise.
    pub fn clean(channel_id: impl Into<String>) -> Self {
        ChannelProfile { channel_id: channel_id.into(), b: vec![1.0], a: vec![1.0], noise_snr_db: f64::INFINITY }
    }

    /// A second-order pole/zero colouring with random resonance and notch.
    pub fn random(channel_id: impl Into<String>, rng: &mut impl Rng) -> Result<Self> {
        let (rp, tp) = (rng.random_range(0.2..0.7), rng.random_range(0.1..0.9) * PI);
        let (rz, tz) = (rng.random_range(0.0..0.6), rng.random_range(0.0..1.0) * PI);
        let a = vec![1.0, -2.0 * rp * tp.cos(), rp * rp];
        let b = vec![1.0, -2.0 * rz * tz.cos(), rz * rz];
        Self::new(channel_id, b, a, rng.random_range(15.0..30.0))
    }
}

/// Direct-form filter; `a[0]` is 1.
pub fn lfilter(b: &[f64], a: &[f64], x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for n in 0..x.len() {
        let mut acc = 0.0;
        for (k, bk) in b.iter().enumerate() {
            if n >= k {
                acc += bk * x[n - k];
            }
        }
        for (k, ak) in a.iter().enumerate().skip(1) {
            if n >= k {
                acc -= ak * y[n - k];
            }
        }
        y[n] = acc;
    }
    y
}

struct Segment {
    len: usize,
    vowel: Option<usize>,
}

fn plan_segments(total: usize, sr: f64, rng: &mut impl Rng) -> Vec<Segment> {
    let mut segs = vec![Segment { len: (rng.random_range(0.08..0.16) * sr) as usize, vowel: None }];
    let mut used = segs[0].len;
    while used < total {
        let v = Segment { len: (rng.random_range(0.12..0.35) * sr) as usize, vowel: Some(rng.random_range(0..VOWELS.len())) };
        let p = Segment { len: (rng.random_range(0.04..0.15) * sr) as usize, vowel: None };
        used += v.len + p.len;
        segs.push(v);
        segs.push(p);
    }
    segs
}

/// Two-pole resonator coefficients with unit gain at DC.
fn resonator(f: f64, bw: f64, sr: f64) -> (f64, f64, f64) {
    let r = (-PI * bw / sr).exp();
    let a1 = -2.0 * r * (2.0 * PI * f / sr).cos();
    let a2 = r * r;
    (1.0 + a1 + a2, a1, a2)
}

/// Harmonic source, glottal tilt, formant cascade, channel, noise, peak 0.9.
pub fn synth_utterance(sp: &SpeakerProfile, ch: &ChannelProfile, duration_s: f64, seed: u64) -> Result<AudioClip> {
    if !(duration_s >= 0.5) {
        return Err(Error::Config(format!("duration {duration_s} s is below the 0.5 s minimum")));
    }
    sp.validate()?;
    if !is_stable(&ch.a) {
        return Err(Error::Config(format!("channel {} is unstable", ch.channel_id)));
    }
    let sr = SAMPLE_RATE as f64;
    let total = (duration_s * sr).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    let f0 = (sp.f0_hz * (1.0 + sp.jitter * unit.sample(&mut rng))).clamp(60.0, 400.0);
    let harmonics = (sr / 2.0 / f0).floor();
    let m = 2.0 * harmonics + 1.0;

    let segments = plan_segments(total, sr, &mut rng);
    let ramp = (0.01 * sr) as usize;
    let mut source = Vec::with_capacity(total);
    let mut formants = Vec::with_capacity(total);
    let mut phase: f64 = 0.0;
    for seg in &segments {
        for i in 0..seg.len {
            if source.len() == total {
                break;
            }
            // Dirichlet kernel: the sum of harmonics 1..H of f0 with the DC term removed
            let s = (PI * phase).sin();
            let pulse = if s.abs() < 1e-12 { 1.0 } else { (PI * m * phase).sin() / (m * s) } - 1.0 / m;
            phase = (phase + f0 / sr).fract();
            let env = match seg.vowel {
                None => 0.0,
                Some(_) => {
                    let edge = i.min(seg.len - 1 - i);
                    if edge < ramp {
                        0.5 - 0.5 * (PI * edge as f64 / ramp as f64).cos()
                    } else {
                        1.0
                    }
                }
            };
            source.push(pulse * env);
            formants.push(seg.vowel);
        }
    }

    let mut tilted = vec![0.0; total];
    let mut prev = 0.0;
    for (o, x) in tilted.iter_mut().zip(&source) {
        prev = x + sp.tilt * prev;
        *o = prev;
    }

    let mut signal = tilted;
    for k in 0..3 {
        let (mut y1, mut y2) = (0.0, 0.0);
        let mut current = usize::MAX;
        let mut coef = (1.0, 0.0, 0.0);
        for (n, v) in formants.iter().enumerate() {
            // pauses keep the last vowel's resonances so the tail rings down
            if let Some(v) = v {
                if *v != current {
                    current = *v;
                    let f = sp.vowel_formants(*v)[k];
                    coef = resonator(f, BANDWIDTHS_HZ[k], sr);
                }
            }
            let y = coef.0 * signal[n] - coef.1 * y1 - coef.2 * y2;
            y2 = y1;
            y1 = y;
            signal[n] = y;
        }
    }

    let mut out = lfilter(&ch.b, &ch.a, &signal);
    let power = out.iter().map(|v| v * v).sum::<f64>() / total as f64;
    if ch.noise_snr_db.is_finite() && power > 0.0 {
        let sigma = (power / 10f64.powf(ch.noise_snr_db / 10.0)).sqrt();
        for v in &mut out {
            *v += sigma * unit.sample(&mut rng);
        }
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v *= 0.9 / peak;
        }
    }
    AudioClip::new(out, SAMPLE_RATE, format!("{}@{}", sp.speaker_id, ch.channel_id))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Ubm,
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Ubm => "ubm",
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub utterance_id: String,
    pub speaker_id: String,
    pub channel_id: String,
    pub gender: Gender,
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub ubm_speakers: usize,
    pub ubm_utts_per_speaker: usize,
    pub task_speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterances per enrolled task speaker reserved for the test split.
    pub test_utts_per_speaker: usize,
    /// Task speakers whose every utterance goes to test (unseen speakers).
    pub heldout_speakers: usize,
    pub duration_s: f64,
    pub male_ratio: f64,
    pub channels: usize,
    /// Enrollment and test draw from disjoint channel sets.
    pub cross_channel: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            ubm_speakers: 20,
            ubm_utts_per_speaker: 4,
            task_speakers: 20,
            utts_per_speaker: 10,
            test_utts_per_speaker: 3,
            heldout_speakers: 0,
            duration_s: 3.0,
            male_ratio: 0.5,
            channels: 4,
            cross_channel: false,
            seed: 42,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.task_speakers == 0 {
            return Err(Error::Config("corpus needs at least one enrollment speaker".into()));
        }
        if self.utts_per_speaker == 0 {
            return Err(Error::Config("utts_per_speaker must be positive".into()));
        }
        if self.test_utts_per_speaker >= self.utts_per_speaker && self.heldout_speakers < self.task_speakers {
            return Err(Error::Config(format!(
                "test_utts_per_speaker ({}) leaves no enrollment utterances out of {}",
                self.test_utts_per_speaker, self.utts_per_speaker
            )));
        }
        if self.heldout_speakers >= self.task_speakers {
            return Err(Error::Config(format!(
                "heldout_speakers ({}) must be fewer than task_speakers ({})",
                self.heldout_speakers, self.task_speakers
            )));
        }
        if !(self.duration_s >= 0.5) {
            return Err(Error::Config(format!("duration {} s is below 0.5 s", self.duration_s)));
        }
        if self.channels == 0 || (self.cross_channel && self.channels < 2) {
            return Err(Error::Config("cross-channel mode needs at least two channels".into()));
        }
        Ok(())
    }
}

/// Everything needed to render a corpus, without the audio.
#[derive(Debug, Clone)]
pub struct CorpusPlan {
    pub spec: CorpusSpec,
    pub speakers: BTreeMap<String, SpeakerProfile>,
    pub channels: BTreeMap<String, ChannelProfile>,
    pub manifest: Manifest,
    /// Synthesis seed per utterance, parallel to the manifest records.
    pub seeds: Vec<u64>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed.wrapping_add(salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn plan_corpus(spec: &CorpusSpec) -> Result<CorpusPlan> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 1));
    let channels: Vec<ChannelProfile> = (0..spec.channels)
        .map(|i| ChannelProfile::random(format!("ch{i:02}"), &mut rng))
        .collect::<Result<_>>()?;
    let ubm = if spec.ubm_speakers > 0 {
        sample_speakers(spec.ubm_speakers, spec.male_ratio, mix(spec.seed, 2), "ubm")?
    } else {
        Vec::new()
    };
    let task = sample_speakers(spec.task_speakers, spec.male_ratio, mix(spec.seed, 3), "spk")?;
    let half = spec.channels.div_ceil(2);
    let (enroll_ch, test_ch): (Vec<usize>, Vec<usize>) = if spec.cross_channel {
        ((0..half).collect(), (half..spec.channels).collect())
    } else {
        ((0..spec.channels).collect(), (0..spec.channels).collect())
    };
    let all_ch: Vec<usize> = (0..spec.channels).collect();

    let mut records = Vec::new();
    let mut seeds = Vec::new();
    let mut push = |sp: &SpeakerProfile, u: usize, split: Split, pool: &[usize], rng: &mut ChaCha8Rng| {
        let ch = &channels[pool[rng.random_range(0..pool.len())]];
        let utterance_id = format!("{}_{u:03}", sp.speaker_id);
        records.push(ManifestRecord {
            path: PathBuf::from("wav").join(format!("{utterance_id}.wav")),
            utterance_id,
            speaker_id: sp.speaker_id.clone(),
            channel_id: ch.channel_id.clone(),
            gender: sp.gender,
            split,
        });
        seeds.push(rng.random::<u64>());
    };
    for sp in &ubm {
        for u in 0..spec.ubm_utts_per_speaker {
            push(sp, u, Split::Ubm, &all_ch, &mut rng);
        }
    }
    let enrolled = spec.task_speakers - spec.heldout_speakers;
    for (i, sp) in task.iter().enumerate() {
        for u in 0..spec.utts_per_speaker {
            let test = i >= enrolled || u >= spec.utts_per_speaker - spec.test_utts_per_speaker;
            if test {
                push(sp, u, Split::Test, &test_ch, &mut rng);
            } else {
                push(sp, u, Split::Train, &enroll_ch, &mut rng);
            }
        }
    }
    let manifest = Manifest { records, seed: Some(spec.seed) };
    manifest.validate()?;
    Ok(CorpusPlan {
        spec: spec.clone(),
        speakers: ubm.into_iter().chain(task).map(|s| (s.speaker_id.clone(), s)).collect(),
        channels: channels.into_iter().map(|c| (c.channel_id.clone(), c)).collect(),
        manifest,
        seeds,
    })
}

impl CorpusPlan {
    pub fn render(&self, index: usize) -> Result<AudioClip> {
        let r = &self.manifest.records[index];
        let mut clip = synth_utterance(
            &self.speakers[&r.speaker_id],
            &self.channels[&r.channel_id],
            self.spec.duration_s,
            self.seeds[index],
        )?;
        clip.source_id = r.utterance_id.clone();
        Ok(clip)
    }
}

/// Plans the corpus, writes one WAV per record plus `manifest.csv` and `corpus.json`.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Manifest> {
    let plan = plan_corpus(spec)?;
    (0..plan.manifest.records.len()).into_par_iter().try_for_each(|i| {
        let clip = plan.render(i)?;
        write_wav(&out_dir.join(&plan.manifest.records[i].path), &clip)
    })?;
    let manifest_path = out_dir.join("manifest.csv");
    plan.manifest.write(&manifest_path)?;
    let profile = CorpusDescription {
        spec: plan.spec.clone(),
        speakers: plan.speakers.values().cloned().collect(),
        channels: plan.channels.values().cloned().collect(),
    };
    let json = serde_json::to_string_pretty(&profile).expect("corpus description serialises");
    binio::write_file(&out_dir.join("corpus.json"), json.as_bytes())?;
    info!("wrote {} utterances to {}", plan.manifest.records.len(), out_dir.display());
    let mut manifest = plan.manifest;
    for r in &mut manifest.records {
        r.path = out_dir.join(&r.path);
    }
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusDescription {
    pub spec: CorpusSpec,
    pub speakers: Vec<SpeakerProfile>,
    pub channels: Vec<ChannelProfile>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub seed: Option<u64>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.utterance_id.as_str()) {
                return Err(Error::Data(format!("duplicate utterance id {}", r.utterance_id)));
            }
        }
        let ubm: BTreeSet<&str> = self.speakers_in(Split::Ubm);
        let task: BTreeSet<&str> = self
            .speakers_in(Split::Train)
            .union(&self.speakers_in(Split::Test))
            .copied()
            .collect();
        if let Some(s) = ubm.intersection(&task).next() {
            return Err(Error::Data(format!("speaker {s} appears in both the UBM and the task splits")));
        }
        Ok(())
    }

    pub fn speakers_in(&self, split: Split) -> BTreeSet<&str> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.speaker_id.as_str()).collect()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// True when no test utterance shares a channel with an enrollment utterance.
    pub fn is_cross_channel(&self) -> bool {
        let train: BTreeSet<&str> = self.split(Split::Train).map(|r| r.channel_id.as_str()).collect();
        self.split(Split::Test).all(|r| !train.contains(r.channel_id.as_str()))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Data(format!("manifest row {}: {e}", r.utterance_id)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        binio::write_file(path, self.to_csv()?.as_bytes())
    }

    /// Reads a manifest CSV; relative paths resolve against the file's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in rdr.deserialize::<ManifestRecord>() {
            let mut r = row.map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
            if r.path.is_relative() {
                r.path = base.join(&r.path);
            }
            records.push(r);
        }
        let m = Manifest { records, seed: None };
        m.validate()?;
        Ok(m)
    }
}
