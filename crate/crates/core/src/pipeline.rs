//! End-to-end orchestration: configuration, content-addressed stages and run records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::BaselineBackend;
use crate::binio::{self, hash64, hash_hex};
use crate::classify::{
    argmax, train_linear_margin, train_mlp, Classifier, ClassifierKind, LabelCodec, LinearConfig, MlpConfig,
};
use crate::corpus::{generate_corpus, CorpusSpec, Manifest, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_binary, evaluate_multiclass, EvalReport, Provenance};
use crate::frontend::{extract_features, prepare_for_modeling, read_features, read_wav, write_features, FeatureSequence, FrontendConfig};
use crate::gmm::{em_fit, kmeans_init, variance_floor, DiagonalGmm, EmConfig, EmFit};
use crate::labels::{LabelTable, Target};
use crate::sae::{train_sae, SaeArtifact, TrainConfig};
use crate::tvspace::{
    accumulate_stats, center_stats, extract_with, read_ivectors, train_tv, write_ivectors, IVector, PosteriorEngine,
    TotalVariabilityModel, TvConfig, UtteranceStats,
};

pub const SEED_ENV: &str = "IVX_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UbmConfig {
    pub components: usize,
    pub max_iters: usize,
    pub rel_tolerance: f64,
    /// Variance floor as a fraction of the global per-dimension variance.
    pub var_floor_factor: f64,
    pub seed: u64,
    /// Evenly subsample the pooled frames down to this many, if set.
    pub max_frames: Option<usize>,
}

impl Default for UbmConfig {
    fn default() -> Self {
        UbmConfig {
            components: 64,
            max_iters: 25,
            rel_tolerance: 1e-5,
            var_floor_factor: 1e-3,
            seed: 0x0b5e,
            max_frames: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    /// Hidden sizes down to the code layer, e.g. [200, 40].
    pub layers: Vec<usize>,
    pub train: TrainConfig,
}

impl Default for SaeSection {
    fn default() -> Self {
        SaeSection { layers: vec![200, 40], train: TrainConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    pub kind: ClassifierKind,
    pub svm: LinearConfig,
    pub mlp: MlpConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    /// LDA output dimension; defaults to min(classes − 1, 200).
    pub lda_dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub workdir: PathBuf,
    /// Existing corpus manifest; when absent the `[corpus]` section is synthesised.
    pub manifest: Option<PathBuf>,
    pub target: Target,
    pub corpus: Option<CorpusSpec>,
    pub frontend: FrontendConfig,
    pub ubm: UbmConfig,
    pub tv: TvConfig,
    pub sae: SaeSection,
    pub classifier: ClassifierSection,
    pub baseline: BaselineSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workdir: PathBuf::from("ivx-work"),
            manifest: None,
            target: Target::Speaker,
            corpus: None,
            frontend: FrontendConfig::default(),
            ubm: UbmConfig::default(),
            tv: TvConfig::default(),
            sae: SaeSection::default(),
            classifier: ClassifierSection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str, context: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("{context}: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Reads the file, applies `IVX_SEED` if set, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        if cfg.manifest.as_ref().is_some_and(|m| m.is_relative()) {
            if let Some(base) = path.parent() {
                cfg.manifest = cfg.manifest.map(|m| base.join(m));
            }
        }
        cfg.apply_env_seed()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed: u64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
            self.override_seeds(seed);
        }
        Ok(())
    }

    /// Sets every seed in the configuration to `seed`.
    pub fn override_seeds(&mut self, seed: u64) {
        if let Some(c) = &mut self.corpus {
            c.seed = seed;
        }
        self.ubm.seed = seed;
        self.tv.seed = seed;
        self.sae.train.seed = seed;
        self.classifier.svm.seed = seed;
        self.classifier.mlp.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        let cd = self.ubm.components * self.frontend.n_ceps;
        if self.ubm.components == 0 {
            return Err(Error::Config("ubm.components must be positive".into()));
        }
        if self.tv.rank == 0 || self.tv.rank > cd {
            return Err(Error::Config(format!(
                "tv.rank = {} exceeds C·D = {}·{} = {cd}",
                self.tv.rank, self.ubm.components, self.frontend.n_ceps
            )));
        }
        if self.sae.layers.is_empty() {
            return Err(Error::Config("sae.layers must list at least one hidden size".into()));
        }
        let mut prev = self.tv.rank;
        for &h in &self.sae.layers {
            if h == 0 || h >= prev {
                return Err(Error::Config(format!(
                    "sae.layers {:?} must strictly decrease below the i-vector rank {}",
                    self.sae.layers, self.tv.rank
                )));
            }
            prev = h;
        }
        self.sae.train.validate()?;
        if self.manifest.is_none() && self.corpus.is_none() {
            return Err(Error::Config("set either `manifest` or a `[corpus]` section".into()));
        }
        if let Some(c) = &self.corpus {
            c.validate()?;
            if self.target == Target::Speaker && c.heldout_speakers > 0 {
                return Err(Error::Config(
                    "speaker identification is closed-set; corpus.heldout_speakers must be 0".into(),
                ));
            }
        }
        Ok(())
    }

    /// Hash of everything that influences results (the work directory excluded).
    pub fn content_hash(&self) -> u64 {
        let mut c = self.clone();
        c.workdir = PathBuf::new();
        hash64(&serde_json::to_vec(&c).expect("config serialises"))
    }
}

fn json_hash<T: Serialize>(v: &T) -> u64 {
    hash64(&serde_json::to_vec(v).expect("serialisable"))
}

fn combine(parts: &[u64]) -> u64 {
    let bytes: Vec<u8> = parts.iter().flat_map(|p| p.to_le_bytes()).collect();
    hash64(&bytes)
}

/// Hash of the manifest content and every referenced WAV, independent of where the corpus lives.
pub fn manifest_hash(m: &Manifest) -> Result<u64> {
    let parts = m
        .records
        .par_iter()
        .map(|r| {
            let wav = binio::read_file(&r.path)?;
            Ok(format!(
                "{},{},{},{},{},{:016x}\n",
                r.utterance_id,
                r.speaker_id,
                r.channel_id,
                r.gender,
                r.split,
                hash64(&wav)
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hash64(parts.concat().as_bytes()))
}

/// Named feature sequences, sorted by utterance id.
pub type FeatureSet = Vec<(String, FeatureSequence)>;

/// Raw MFCC + VAD for each `(utterance_id, wav path)` pair, written as `<id>.ivxf`.
pub fn extract_to_dir(inputs: &[(String, PathBuf)], out_dir: &Path, cfg: &FrontendConfig) -> Result<()> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    inputs.par_iter().try_for_each(|(id, path)| {
        let clip = read_wav(path)?;
        let fs = extract_features(&clip, cfg)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        write_features(&out_dir.join(format!("{id}.ivxf")), &fs)
    })
}

pub fn load_feature_dir(dir: &Path) -> Result<FeatureSet> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ivxf"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .ivxf files in {}", dir.display())));
    }
    paths
        .par_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((id, read_features(p)?))
        })
        .collect()
}

/// CMVN (and the frame-count mode) for every sequence.
pub fn prepare_all(set: &FeatureSet, cfg: &FrontendConfig) -> Result<FeatureSet> {
    set.par_iter()
        .map(|(id, fs)| {
            prepare_for_modeling(fs, cfg)
                .map(|p| (id.clone(), p))
                .map_err(|e| Error::Data(format!("{id}: {e}")))
        })
        .collect()
}

/// Voiced frames of all sequences stacked row-wise, evenly thinned to `max_frames`.
pub fn pool_frames(set: &[&FeatureSequence], max_frames: Option<usize>) -> Result<DMatrix<f64>> {
    let dim = set.first().map_or(0, |f| f.dim());
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0;
    for fs in set {
        let v = fs.voiced_frames();
        for r in 0..v.nrows() {
            rows.extend(v.row(r).iter());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Data("no voiced frames to train on".into()));
    }
    let stride = match max_frames {
        Some(m) if m > 0 && count > m => count.div_ceil(m),
        _ => 1,
    };
    let kept: Vec<usize> = (0..count).step_by(stride).collect();
    Ok(DMatrix::from_fn(kept.len(), dim, |r, c| rows[kept[r] * dim + c]))
}

pub fn train_ubm(frames: &DMatrix<f64>, cfg: &UbmConfig) -> Result<EmFit> {
    if cfg.components == 0 {
        return Err(Error::Config("UBM needs at least one component".into()));
    }
    let init = kmeans_init(frames, cfg.components, cfg.seed)?;
    let em = EmConfig {
        max_iters: cfg.max_iters,
        rel_tolerance: cfg.rel_tolerance,
        var_floor: variance_floor(frames, cfg.var_floor_factor),
    };
    em_fit(&init, frames, &em)
}

/// Baum-Welch statistics per utterance, ids filled from `labels` when given.
pub fn collect_stats(ubm: &DiagonalGmm, set: &[(String, FeatureSequence)], labels: Option<&LabelTable>) -> Result<Vec<UtteranceStats>> {
    set.par_iter()
        .map(|(id, fs)| {
            let s = accumulate_stats(ubm, fs).map_err(|e| Error::Data(format!("{id}: {e}")))?;
            let (spk, ch) = match labels.map(|l| l.get(id)) {
                Some(Ok(r)) => (r.speaker_id.clone(), r.channel_id.clone()),
                _ => (String::new(), String::new()),
            };
            Ok(s.with_ids(id.clone(), spk, ch))
        })
        .collect()
}

/// Centers statistics that are not yet centered, then extracts every i-vector.
pub fn extract_all(model: &TotalVariabilityModel, stats: &[UtteranceStats]) -> Result<Vec<IVector>> {
    let engine = PosteriorEngine::new(model);
    stats
        .par_iter()
        .map(|s| {
            if s.centered {
                extract_with(&engine, s)
            } else {
                extract_with(&engine, &center_stats(s, model.ubm())?)
            }
        })
        .collect()
}

pub fn encode_all(sae: &SaeArtifact, ivecs: &[IVector]) -> Result<Vec<IVector>> {
    ivecs
        .iter()
        .map(|v| {
            Ok(IVector {
                w: sae.encode(&v.w)?,
                utterance_id: v.utterance_id.clone(),
                speaker_id: v.speaker_id.clone(),
                channel_id: v.channel_id.clone(),
            })
        })
        .collect()
}

pub fn targets_for(vecs: &[IVector], labels: &LabelTable, target: Target) -> Result<Vec<String>> {
    vecs.iter().map(|v| labels.target(&v.utterance_id, target)).collect()
}

pub fn train_classifier(codes: &[IVector], targets: &[String], section: &ClassifierSection) -> Result<Classifier> {
    let data: Vec<DVector<f64>> = codes.iter().map(|c| c.w.clone()).collect();
    match section.kind {
        ClassifierKind::Svm => Ok(Classifier::Linear(train_linear_margin(&data, targets, &section.svm)?.model)),
        ClassifierKind::Mlp => Ok(Classifier::Mlp(train_mlp(&data, targets, &section.mlp)?.model)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub utterance_id: String,
    pub predicted: String,
    pub scores: Vec<f64>,
}

pub fn predict_all(clf: &Classifier, codes: &[IVector]) -> Result<Vec<Prediction>> {
    codes
        .iter()
        .map(|c| {
            let s = clf.score(&c.w)?;
            Ok(Prediction {
                utterance_id: c.utterance_id.clone(),
                predicted: clf.codec().classes()[argmax(s.as_slice())].clone(),
                scores: s.iter().copied().collect(),
            })
        })
        .collect()
}

/// CSV `utterance_id,predicted,score:<class>...`.
pub fn predictions_csv(classes: &[String], preds: &[Prediction]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["utterance_id".to_string(), "predicted".to_string()];
    header.extend(classes.iter().map(|c| format!("score:{c}")));
    w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
    for p in preds {
        let mut row = vec![p.utterance_id.clone(), p.predicted.clone()];
        row.extend(p.scores.iter().map(|s| s.to_string()));
        w.write_record(&row).map_err(|e| Error::Data(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8"))
}

pub fn read_predictions(path: &Path) -> Result<(Vec<String>, Vec<Prediction>)> {
    let ctx = path.display().to_string();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(&ctx, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::format(&ctx, e.to_string()))?.clone();
    if header.get(0) != Some("utterance_id") || header.get(1) != Some("predicted") {
        return Err(Error::format(&ctx, "expected header utterance_id,predicted,score:<class>..."));
    }
    let classes: Vec<String> = header
        .iter()
        .skip(2)
        .map(|h| {
            h.strip_prefix("score:")
                .map(str::to_string)
                .ok_or_else(|| Error::format(&ctx, format!("column `{h}` is not score:<class>")))
        })
        .collect::<Result<_>>()?;
    let mut preds = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::format(&ctx, e.to_string()))?;
        let scores = row
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().map_err(|_| Error::format(&ctx, format!("bad score `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if scores.len() != classes.len() {
            return Err(Error::format(&ctx, "row width does not match header"));
        }
        preds.push(Prediction { utterance_id: row[0].to_string(), predicted: row[1].to_string(), scores });
    }
    Ok((classes, preds))
}

/// Scores predictions against the truth table. Binary tasks use the second
/// (sorted) class as positive and its score column for the ROC.
pub fn evaluate_predictions(classes: &[String], preds: &[Prediction], truth: &LabelTable, target: Target, binary: bool) -> Result<EvalReport> {
    let codec = LabelCodec::from_classes(classes.to_vec())?;
    let truth_labels: Vec<String> = preds.iter().map(|p| truth.target(&p.utterance_id, target)).collect::<Result<_>>()?;
    let predicted: Vec<String> = preds.iter().map(|p| p.predicted.clone()).collect();
    if binary {
        if codec.len() != 2 {
            return Err(Error::Data(format!("binary evaluation needs 2 classes, got {}", codec.len())));
        }
        let positive = codec.classes()[1].clone();
        let scores: Vec<f64> = preds.iter().map(|p| p.scores[1] - p.scores[0]).collect();
        evaluate_binary(&truth_labels, &predicted, &scores, &positive)
    } else {
        evaluate_multiclass(&truth_labels, &predicted, &codec)
    }
}

/// LDA/WCCN/cosine back-end trained on `train` and evaluated on `test`.
pub fn baseline_report(train: &[IVector], test: &[IVector], labels: &LabelTable, target: Target, lda_dim: Option<usize>) -> Result<EvalReport> {
    let data: Vec<DVector<f64>> = train.iter().map(|v| v.w.clone()).collect();
    let y = targets_for(train, labels, target)?;
    let backend = BaselineBackend::fit(&data, &y, lda_dim)?;
    let classes = backend.classes();
    let preds = test
        .iter()
        .map(|v| {
            let s = backend.score(&v.w)?;
            Ok(Prediction {
                utterance_id: v.utterance_id.clone(),
                predicted: classes[argmax(&s)].clone(),
                scores: s,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&classes, &preds, labels, target, target == Target::Gender)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    pub key: String,
    pub output_hash: String,
    pub cached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub manifest_hash: String,
    pub stages: Vec<StageEntry>,
    pub report_path: PathBuf,
    pub started_unix_s: u64,
    pub finished_unix_s: u64,
}

fn now_s() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Exclusive lock on a work directory, released on drop.
pub struct WorkdirLock {
    path: PathBuf,
}

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
        let path = workdir.join(".ivx.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(WorkdirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run; delete {} if no run is active",
                workdir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

const COMPLETE: &str = ".complete.json";

fn hash_dir_files(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name == COMPLETE {
            continue;
        }
        if p.is_dir() {
            for (k, v) in hash_dir_files(&p)? {
                out.insert(format!("{name}/{k}"), v);
            }
        } else {
            out.insert(name, hash_hex(&binio::read_file(&p)?));
        }
    }
    Ok(out)
}

/// Content-addressed stage directories under `<workdir>/stages`.
pub struct StageStore {
    root: PathBuf,
    pub entries: Vec<StageEntry>,
}

impl StageStore {
    pub fn new(workdir: &Path) -> Self {
        StageStore { root: workdir.join("stages"), entries: Vec::new() }
    }

    /// Returns the stage directory, producing it unless a verified copy exists.
    pub fn run(&mut self, name: &str, key: u64, produce: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let key_hex = format!("{key:016x}");
        let dir = self.root.join(format!("{name}-{key_hex}"));
        let marker = dir.join(COMPLETE);
        if marker.exists() {
            let recorded: BTreeMap<String, String> = serde_json::from_slice(&binio::read_file(&marker)?).unwrap_or_default();
            if hash_dir_files(&dir)? == recorded {
                info!("stage {name}: cached ({key_hex})");
                self.entries.push(StageEntry {
                    name: name.into(),
                    key: key_hex,
                    output_hash: hash_hex(&binio::read_file(&marker)?),
                    cached: true,
                });
                return Ok(dir);
            }
            warn!("stage {name}: cached outputs do not match their hashes; recomputing");
        }
        let tmp = self.root.join(format!("{name}-{key_hex}.partial"));
        for d in [&dir, &tmp] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        info!("stage {name}: running ({key_hex})");
        produce(&tmp).map_err(|e| Error::Stage { stage: name.into(), inputs: key_hex.clone(), source: Box::new(e) })?;
        let files = hash_dir_files(&tmp)?;
        let json = serde_json::to_vec_pretty(&files).expect("serialisable");
        binio::write_file(&tmp.join(COMPLETE), &json)?;
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        self.entries.push(StageEntry { name: name.into(), key: key_hex, output_hash: hash_hex(&json), cached: false });
        Ok(dir)
    }
}

/// Artifacts of a completed pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub record: RunRecord,
    pub report: EvalReport,
    pub labels: LabelTable,
    pub manifest: Manifest,
    pub ivectors: Vec<IVector>,
    pub ivector_key: u64,
}

fn ids_in(manifest: &Manifest, splits: &[Split]) -> std::collections::BTreeSet<String> {
    manifest.records.iter().filter(|r| splits.contains(&r.split)).map(|r| r.utterance_id.clone()).collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable");
    s.push('\n');
    binio::write_file(path, s.as_bytes())
}

/// synth → features → UBM → statistics → T → i-vectors → SAE → classifier → evaluate.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let started = now_s();
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    let mut stages = StageStore::new(&cfg.workdir);
    let config_hash = cfg.content_hash();

    let manifest = match (&cfg.manifest, &cfg.corpus) {
        (Some(path), _) => Manifest::read(path)?,
        (None, Some(spec)) => {
            let dir = stages.run("corpus", json_hash(spec), |out| generate_corpus(spec, out).map(|_| ()))?;
            Manifest::read(&dir.join("manifest.csv"))?
        }
        (None, None) => return Err(Error::Config("no manifest and no corpus section".into())),
    };
    let labels = LabelTable::from_manifest(&manifest)?;
    let m_hash = manifest_hash(&manifest)?;

    let feat_key = combine(&[m_hash, json_hash(&cfg.frontend)]);
    let feat_dir = stages.run("features", feat_key, |out| {
        let inputs: Vec<(String, PathBuf)> = manifest.records.iter().map(|r| (r.utterance_id.clone(), r.path.clone())).collect();
        extract_to_dir(&inputs, out, &cfg.frontend)
    })?;
    let raw = load_feature_dir(&feat_dir)?;
    let prepared = prepare_all(&raw, &cfg.frontend)?;

    let ubm_ids = {
        let ids = ids_in(&manifest, &[Split::Ubm]);
        if ids.is_empty() {
            ids_in(&manifest, &[Split::Train])
        } else {
            ids
        }
    };
    let ubm_key = combine(&[feat_key, json_hash(&cfg.ubm)]);
    let ubm_dir = stages.run("ubm", ubm_key, |out| {
        let seqs: Vec<&FeatureSequence> = prepared.iter().filter(|(id, _)| ubm_ids.contains(id)).map(|(_, f)| f).collect();
        let frames = pool_frames(&seqs, cfg.ubm.max_frames)?;
        let fit = train_ubm(&frames, &cfg.ubm)?;
        fit.gmm.save(&out.join("ubm.ivxg"))?;
        write_json(&out.join("em_trace.json"), &fit.trace)
    })?;
    let ubm = DiagonalGmm::load(&ubm_dir.join("ubm.ivxg"))?;

    let tv_key = combine(&[ubm_key, json_hash(&cfg.tv)]);
    let mut all_stats: Option<Vec<UtteranceStats>> = None;
    let mut stats = || -> Result<Vec<UtteranceStats>> {
        if all_stats.is_none() {
            all_stats = Some(collect_stats(&ubm, &prepared, Some(&labels))?);
        }
        Ok(all_stats.clone().expect("filled"))
    };
    let tv_dir = stages.run("tv", tv_key, |out| {
        let ids = ids_in(&manifest, &[Split::Ubm, Split::Train]);
        let subset: Vec<UtteranceStats> = stats()?.into_iter().filter(|s| ids.contains(&s.utterance_id)).collect();
        let trained = train_tv(&ubm, &subset, &cfg.tv)?;
        trained.model.save(&out.join("tv.ivxt"))?;
        write_json(&out.join("tv_trace.json"), &(trained.objective_trace, trained.evidence_trace))
    })?;
    let tv = TotalVariabilityModel::load(&tv_dir.join("tv.ivxt"), ubm.clone())?;

    let ivec_key = combine(&[tv_key, 1]);
    let ivec_dir = stages.run("ivectors", ivec_key, |out| {
        let s = stats()?;
        write_ivectors(&out.join("ivectors.ivxv"), &extract_all(&tv, &s)?)
    })?;
    let ivectors = read_ivectors(&ivec_dir.join("ivectors.ivxv"))?;
    let train_ids = ids_in(&manifest, &[Split::Train]);
    let test_ids = ids_in(&manifest, &[Split::Test]);
    let train_iv: Vec<IVector> = ivectors.iter().filter(|v| train_ids.contains(&v.utterance_id)).cloned().collect();
    let test_iv: Vec<IVector> = ivectors.iter().filter(|v| test_ids.contains(&v.utterance_id)).cloned().collect();
    if train_iv.is_empty() || test_iv.is_empty() {
        return Err(Error::Data(format!(
            "need train and test utterances, got {} and {}",
            train_iv.len(),
            test_iv.len()
        )));
    }

    let sae_key = combine(&[ivec_key, json_hash(&cfg.sae)]);
    let sae_dir = stages.run("sae", sae_key, |out| {
        let data: Vec<DVector<f64>> = train_iv.iter().map(|v| v.w.clone()).collect();
        let trained = train_sae(&data, &cfg.sae.layers, &cfg.sae.train)?;
        trained.artifact.save(&out.join("sae.ivxa"))?;
        write_json(&out.join("loss_trace.json"), &trained.loss_trace)
    })?;
    let sae = SaeArtifact::load(&sae_dir.join("sae.ivxa"))?;

    let clf_key = combine(&[sae_key, json_hash(&cfg.classifier), json_hash(&cfg.target)]);
    let clf_dir = stages.run("classifier", clf_key, |out| {
        let codes = encode_all(&sae, &train_iv)?;
        let y = targets_for(&codes, &labels, cfg.target)?;
        train_classifier(&codes, &y, &cfg.classifier)?.save(&out.join("classifier.bin"))
    })?;
    let clf = Classifier::load(&clf_dir.join("classifier.bin"))?;

    let test_codes = encode_all(&sae, &test_iv)?;
    let preds = predict_all(&clf, &test_codes)?;
    let classes = clf.codec().classes().to_vec();
    binio::write_file(&cfg.workdir.join("predictions.csv"), predictions_csv(&classes, &preds)?.as_bytes())?;
    let mut model_hashes = BTreeMap::new();
    model_hashes.insert("ubm".to_string(), format!("{:016x}", ubm.content_hash()));
    model_hashes.insert("tv".to_string(), hash_hex(&tv.to_bytes()));
    model_hashes.insert("sae".to_string(), format!("{:016x}", sae.content_hash()));
    model_hashes.insert("classifier".to_string(), format!("{:016x}", clf.content_hash()));
    let report = evaluate_predictions(&classes, &preds, &labels, cfg.target, cfg.target == Target::Gender)?
        .with_provenance(Provenance { config_hash: Some(format!("{config_hash:016x}")), model_hashes });
    let report_path = cfg.workdir.join("report.json");
    report.write(&report_path)?;

    let record = RunRecord {
        config_hash: format!("{config_hash:016x}"),
        manifest_hash: format!("{m_hash:016x}"),
        stages: stages.entries,
        report_path,
        started_unix_s: started,
        finished_unix_s: now_s(),
    };
    write_json(&cfg.workdir.join("run.json"), &record)?;
    info!("accuracy {:.4}", report.accuracy());
    Ok(PipelineOutcome { record, report, labels, manifest, ivectors, ivector_key: ivec_key })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResult {
    pub accuracy: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub target: Target,
    pub cross_channel: bool,
    pub sae: BackendResult,
    pub baseline: BackendResult,
}

impl ComparisonReport {
    /// Assembles a comparison from two report files, naming whichever is missing.
    pub fn from_reports(target: Target, cross_channel: bool, sae: Option<&Path>, baseline: Option<&Path>) -> Result<Self> {
        let load = |stage: &str, p: Option<&Path>| -> Result<EvalReport> {
            let p = p.filter(|p| p.exists()).ok_or_else(|| Error::Data(format!("missing artifact for stage `{stage}`")))?;
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            EvalReport::from_json(&text, &p.display().to_string())
        };
        let sae = load("sae", sae)?;
        let baseline = load("baseline", baseline)?;
        Ok(ComparisonReport {
            target,
            cross_channel,
            sae: BackendResult { accuracy: sae.accuracy(), report: sae },
            baseline: BackendResult { accuracy: baseline.accuracy(), report: baseline },
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serialisable");
        s.push('\n');
        s
    }
}

/// Runs the pipeline, then the LDA/WCCN/cosine baseline on the same i-vectors.
pub fn compare_backends(cfg: &PipelineConfig) -> Result<ComparisonReport> {
    let outcome = run_pipeline(cfg)?;
    let _lock = WorkdirLock::acquire(&cfg.workdir)?;
    let mut stages = StageStore::new(&cfg.workdir);
    let key = combine(&[outcome.ivector_key, json_hash(&cfg.baseline), json_hash(&cfg.target)]);
    let train_ids = ids_in(&outcome.manifest, &[Split::Train]);
    let test_ids = ids_in(&outcome.manifest, &[Split::Test]);
    let dir = stages.run("baseline", key, |out| {
        let train: Vec<IVector> = outcome.ivectors.iter().filter(|v| train_ids.contains(&v.utterance_id)).cloned().collect();
        let test: Vec<IVector> = outcome.ivectors.iter().filter(|v| test_ids.contains(&v.utterance_id)).cloned().collect();
        baseline_report(&train, &test, &outcome.labels, cfg.target, cfg.baseline.lda_dim)?.write(&out.join("baseline.json"))
    })?;
    let cmp = ComparisonReport::from_reports(
        cfg.target,
        outcome.manifest.is_cross_channel(),
        Some(&outcome.record.report_path),
        Some(&dir.join("baseline.json")),
    )?;
    binio::write_file(&cfg.workdir.join("comparison.json"), cmp.to_json().as_bytes())?;
    Ok(cmp)
}
