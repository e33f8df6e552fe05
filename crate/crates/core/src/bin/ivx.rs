use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DVector;

use ivx_core::binio;
use ivx_core::classify::{Classifier, ClassifierKind};
use ivx_core::corpus::{generate_corpus, CorpusSpec, Manifest};
use ivx_core::error::{Error, Result};
use ivx_core::gmm::DiagonalGmm;
use ivx_core::labels::{LabelTable, Target};
use ivx_core::pipeline::{
    self, baseline_report, collect_stats, encode_all, evaluate_predictions, extract_all, extract_to_dir,
    load_feature_dir, pool_frames, predict_all, predictions_csv, read_predictions, targets_for, train_classifier,
    train_ubm, PipelineConfig,
};
use ivx_core::sae::{train_sae, SaeArtifact};
use ivx_core::tvspace::{read_ivectors, train_tv, write_ivectors, TotalVariabilityModel};

#[derive(Parser)]
#[command(name = "ivx", version, about = "i-vector speaker recognition with stacked auto-encoder back-ends")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Pipeline TOML; only the sections relevant to the subcommand are used.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a manifest.
    Synth {
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        utts_per_speaker: usize,
        #[arg(long, default_value_t = 3)]
        test_utts: usize,
        #[arg(long, default_value_t = 20)]
        ubm_speakers: usize,
        #[arg(long, default_value_t = 4)]
        ubm_utts: usize,
        #[arg(long, default_value_t = 0)]
        heldout_speakers: usize,
        /// Seconds per utterance.
        #[arg(long, default_value_t = 3.0)]
        duration: f64,
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 0.5)]
        male_ratio: f64,
        #[arg(long)]
        cross_channel: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Extract MFCC + VAD feature files from a WAV, a directory of WAVs or a manifest.
    Features {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    TrainUbm {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        components: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    TrainTv {
        #[arg(long)]
        ubm: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Extract i-vectors for every feature file (optionally one split only).
    Extract {
        #[arg(long)]
        tv: PathBuf,
        /// Defaults to ubm.ivxg next to the T matrix.
        #[arg(long)]
        ubm: Option<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        /// Labels or manifest CSV used to fill speaker/channel ids.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Keep only utterances of this split (requires --labels).
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    TrainSae {
        #[arg(long)]
        ivecs: PathBuf,
        /// Hidden sizes down to the code layer.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        pretrain_epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    Encode {
        #[arg(long)]
        sae: PathBuf,
        #[arg(long)]
        ivecs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    TrainClf {
        #[arg(long, value_parser = parse_kind)]
        kind: Option<ClassifierKind>,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_parser = parse_target)]
        target: Option<Target>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Score codes with a classifier and write utterance_id,predicted,score:<class>... rows.
    Predict {
        #[arg(long)]
        clf: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// LDA + WCCN + cosine scoring on raw i-vectors.
    Baseline {
        #[arg(long)]
        ivecs: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_parser = parse_target, default_value = "speaker")]
        target: Target,
        #[arg(long)]
        lda_dim: Option<usize>,
        #[arg(long)]
        report: PathBuf,
    },
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, value_parser = ["binary", "multiclass"])]
        task: String,
        /// Label column compared against; defaults to gender for binary tasks.
        #[arg(long, value_parser = parse_target)]
        target: Option<Target>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage with caching under the configured work directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
    /// Run the pipeline and the LDA/WCCN baseline on the same i-vectors.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        workdir: Option<PathBuf>,
    },
}

fn parse_target(s: &str) -> std::result::Result<Target, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_kind(s: &str) -> std::result::Result<ClassifierKind, String> {
    match s {
        "svm" => Ok(ClassifierKind::Svm),
        "mlp" => Ok(ClassifierKind::Mlp),
        _ => Err(format!("unknown classifier `{s}` (svm|mlp)")),
    }
}

/// Config sections for single-stage commands, with `IVX_SEED` applied.
fn sections(arg: &ConfigArg) -> Result<PipelineConfig> {
    let mut cfg = match &arg.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            PipelineConfig::from_toml(&text, &p.display().to_string())?
        }
        None => PipelineConfig::default(),
    };
    cfg.apply_env_seed()?;
    cfg.frontend.validate()?;
    Ok(cfg)
}

fn env_seed(flag: u64) -> Result<u64> {
    match std::env::var(pipeline::SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{}={v} is not an unsigned integer", pipeline::SEED_ENV))),
        Err(_) => Ok(flag),
    }
}

fn wav_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_dir() {
        let mut wavs: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
            .collect();
        wavs.sort();
        if wavs.is_empty() {
            return Err(Error::Data(format!("no .wav files in {}", input.display())));
        }
        Ok(wavs.into_iter().map(|p| (stem(&p), p)).collect())
    } else if input.extension().is_some_and(|x| x == "csv") {
        let m = Manifest::read(input)?;
        Ok(m.records.into_iter().map(|r| (r.utterance_id, r.path)).collect())
    } else {
        Ok(vec![(stem(input), input.to_path_buf())])
    }
}

fn vectors(ivecs: &[ivx_core::tvspace::IVector]) -> Vec<DVector<f64>> {
    ivecs.iter().map(|v| v.w.clone()).collect()
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            speakers,
            utts_per_speaker,
            test_utts,
            ubm_speakers,
            ubm_utts,
            heldout_speakers,
            duration,
            channels,
            male_ratio,
            cross_channel,
            out,
            seed,
        } => {
            let spec = CorpusSpec {
                ubm_speakers,
                ubm_utts_per_speaker: ubm_utts,
                task_speakers: speakers,
                utts_per_speaker,
                test_utts_per_speaker: test_utts,
                heldout_speakers,
                duration_s: duration,
                male_ratio,
                channels,
                cross_channel,
                seed: env_seed(seed)?,
            };
            let m = generate_corpus(&spec, &out)?;
            println!("{} utterances written to {}", m.records.len(), out.display());
        }
        Command::Features { input, out, config } => {
            let cfg = sections(&config)?;
            let inputs = wav_inputs(&input)?;
            extract_to_dir(&inputs, &out, &cfg.frontend)?;
            println!("{} feature files written to {}", inputs.len(), out.display());
        }
        Command::TrainUbm { features, components, max_iters, seed, out, config } => {
            let mut cfg = sections(&config)?;
            if let Some(c) = components {
                cfg.ubm.components = c;
            }
            if let Some(m) = max_iters {
                cfg.ubm.max_iters = m;
            }
            if let Some(s) = seed {
                cfg.ubm.seed = env_seed(s)?;
            }
            let set = pipeline::prepare_all(&load_feature_dir(&features)?, &cfg.frontend)?;
            let frames = pool_frames(&set.iter().map(|(_, f)| f).collect::<Vec<_>>(), cfg.ubm.max_frames)?;
            info!("training {}-component UBM on {} frames", cfg.ubm.components, frames.nrows());
            let fit = train_ubm(&frames, &cfg.ubm)?;
            fit.gmm.save(&out)?;
            println!(
                "UBM written to {} ({} iterations, final log-likelihood {:.6})",
                out.display(),
                fit.trace.len(),
                fit.trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::TrainTv { ubm, features, rank, iters, seed, out, config } => {
            let mut cfg = sections(&config)?;
            if let Some(r) = rank {
                cfg.tv.rank = r;
            }
            if let Some(i) = iters {
                cfg.tv.iters = i;
            }
            if let Some(s) = seed {
                cfg.tv.seed = env_seed(s)?;
            }
            let ubm = DiagonalGmm::load(&ubm)?;
            let set = pipeline::prepare_all(&load_feature_dir(&features)?, &cfg.frontend)?;
            let stats = collect_stats(&ubm, &set, None)?;
            let trained = train_tv(&ubm, &stats, &cfg.tv)?;
            trained.model.save(&out)?;
            println!("T matrix (rank {}) written to {}", trained.model.rank(), out.display());
        }
        Command::Extract { tv, ubm, features, labels, split, out, config } => {
            let cfg = sections(&config)?;
            let ubm_path = ubm.unwrap_or_else(|| tv.with_file_name("ubm.ivxg"));
            let ubm = DiagonalGmm::load(&ubm_path)?;
            let model = TotalVariabilityModel::load(&tv, ubm.clone())?;
            let labels = labels.map(|p| LabelTable::read(&p)).transpose()?;
            let mut set = load_feature_dir(&features)?;
            if let Some(split) = &split {
                let table = labels.as_ref().ok_or_else(|| Error::Config("--split needs --labels".into()))?;
                set.retain(|(id, _)| table.get(id).is_ok_and(|r| &r.split == split));
                if set.is_empty() {
                    return Err(Error::Data(format!("no utterances in split `{split}`")));
                }
            }
            let set = pipeline::prepare_all(&set, &cfg.frontend)?;
            let stats = collect_stats(&ubm, &set, labels.as_ref())?;
            let ivecs = extract_all(&model, &stats)?;
            write_ivectors(&out, &ivecs)?;
            println!("{} i-vectors written to {}", ivecs.len(), out.display());
        }
        Command::TrainSae { ivecs, layers, epochs, pretrain_epochs, learning_rate, seed, out, config } => {
            let mut cfg = sections(&config)?;
            if let Some(l) = layers {
                cfg.sae.layers = l;
            }
            let t = &mut cfg.sae.train;
            if let Some(e) = epochs {
                t.epochs = e;
            }
            if let Some(e) = pretrain_epochs {
                t.pretrain_epochs = e;
            }
            if let Some(lr) = learning_rate {
                t.learning_rate = lr;
            }
            if let Some(s) = seed {
                t.seed = env_seed(s)?;
            }
            let data = vectors(&read_ivectors(&ivecs)?);
            let trained = train_sae(&data, &cfg.sae.layers, &cfg.sae.train)?;
            trained.artifact.save(&out)?;
            println!(
                "SAE {:?} written to {} (final loss {:.6})",
                trained.artifact.model.architecture(),
                out.display(),
                trained.loss_trace.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Encode { sae, ivecs, out } => {
            let sae = SaeArtifact::load(&sae)?;
            let codes = encode_all(&sae, &read_ivectors(&ivecs)?)?;
            write_ivectors(&out, &codes)?;
            println!("{} codes written to {}", codes.len(), out.display());
        }
        Command::TrainClf { kind, codes, labels, target, epochs, seed, out, config } => {
            let mut cfg = sections(&config)?;
            if let Some(k) = kind {
                cfg.classifier.kind = k;
            }
            if let Some(e) = epochs {
                cfg.classifier.svm.epochs = e;
                cfg.classifier.mlp.epochs = e;
            }
            if let Some(s) = seed {
                let s = env_seed(s)?;
                cfg.classifier.svm.seed = s;
                cfg.classifier.mlp.seed = s;
            }
            let target = target.unwrap_or(cfg.target);
            let codes = read_ivectors(&codes)?;
            let table = LabelTable::read(&labels)?;
            let y = targets_for(&codes, &table, target)?;
            let clf = train_classifier(&codes, &y, &cfg.classifier)?;
            clf.save(&out)?;
            println!("{}-class classifier written to {}", clf.codec().len(), out.display());
        }
        Command::Predict { clf, codes, out } => {
            let clf = Classifier::load(&clf)?;
            let preds = predict_all(&clf, &read_ivectors(&codes)?)?;
            binio::write_file(&out, predictions_csv(clf.codec().classes(), &preds)?.as_bytes())?;
            println!("{} predictions written to {}", preds.len(), out.display());
        }
        Command::Baseline { ivecs, labels, test, target, lda_dim, report } => {
            let table = LabelTable::read(&labels)?;
            let r = baseline_report(&read_ivectors(&ivecs)?, &read_ivectors(&test)?, &table, target, lda_dim)?;
            r.write(&report)?;
            println!("baseline accuracy {:.4}; report written to {}", r.accuracy(), report.display());
        }
        Command::Evaluate { pred, truth, task, target, out } => {
            let binary = task == "binary";
            let target = target.unwrap_or(if binary { Target::Gender } else { Target::Speaker });
            let (classes, preds) = read_predictions(&pred)?;
            let table = LabelTable::read(&truth)?;
            let r = evaluate_predictions(&classes, &preds, &table, target, binary)?;
            r.write(&out)?;
            println!("accuracy {:.4}; report written to {}", r.accuracy(), out.display());
        }
        Command::Run { config, workdir } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(w) = workdir {
                cfg.workdir = w;
            }
            let outcome = pipeline::run_pipeline(&cfg)?;
            for s in &outcome.record.stages {
                println!("{:<11} {} {}", s.name, s.key, if s.cached { "cached" } else { "computed" });
            }
            println!("accuracy {:.4}; report written to {}", outcome.report.accuracy(), outcome.record.report_path.display());
        }
        Command::Compare { config, workdir } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(w) = workdir {
                cfg.workdir = w;
            }
            let cmp = pipeline::compare_backends(&cfg)?;
            println!(
                "{} channel: SAE accuracy {:.4}, baseline accuracy {:.4}",
                if cmp.cross_channel { "cross" } else { "matched" },
                cmp.sae.accuracy,
                cmp.baseline.accuracy
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ivx: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_status() as u8)
        }
    }
}
