//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Run with `cargo test -p ivx-core --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use ivx_core::corpus::CorpusSpec;
use ivx_core::eval::{mcc, roc_auc, BinaryCounts};
use ivx_core::gmm::{em_fit, kmeans_init, posterior_responsibilities, variance_floor, DiagonalGmm, EmConfig};
use ivx_core::labels::Target;
use ivx_core::pipeline::{compare_backends, run_pipeline, PipelineConfig};
use ivx_core::sae::{finetune, pretrain_layerwise, Activation, LayerSpec, SaeModel, TrainConfig};
use ivx_core::tvspace::{extract_ivector, tv_m_step, MStepRule, TotalVariabilityModel, TvAccumulators, UtteranceStats};

type Outcome = Result<(bool, String), String>;

struct Suite {
    failed: Vec<u8>,
}

impl Suite {
    fn check(&mut self, id: u8, title: &str, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match result {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failed.push(id);
        }
        println!("criterion {id:>2} {} {title}: {detail} ({secs:.2}s)", if pass { "PASS" } else { "FAIL" });
    }
}

fn within(limit_s: f64, start: Instant) -> (bool, String) {
    let e = start.elapsed();
    (e <= Duration::from_secs_f64(limit_s), format!("{:.2}s of {limit_s}s", e.as_secs_f64()))
}

fn normal() -> Normal<f64> {
    Normal::new(0.0, 1.0).unwrap()
}

fn random_gmm(c: usize, d: usize, rng: &mut ChaCha8Rng) -> DiagonalGmm {
    let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
    let total: f64 = raw.iter().sum();
    DiagonalGmm::new(
        DVector::from_iterator(c, raw.iter().map(|w| w / total)),
        DMatrix::from_fn(c, d, |_, _| rng.random_range(-4.0..4.0)),
        DMatrix::from_fn(c, d, |_, _| rng.random_range(0.3..2.0)),
    )
    .unwrap()
}

fn sample_frames(g: &DiagonalGmm, n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let unit = normal();
    let mut rows = Vec::with_capacity(n * g.dim());
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = g.components() - 1;
        for (i, w) in g.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        for j in 0..g.dim() {
            rows.push(g.means()[(k, j)] + g.variances()[(k, j)].sqrt() * unit.sample(rng));
        }
    }
    DMatrix::from_row_slice(n, g.dim(), &rows)
}

fn em_monotonicity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let truth = random_gmm(8, 4, &mut rng);
    let frames = sample_frames(&truth, 2000, &mut rng);
    let start = Instant::now();
    let init = kmeans_init(&frames, 8, 3).map_err(|e| e.to_string())?;
    let cfg = EmConfig { max_iters: 25, rel_tolerance: 0.0, var_floor: variance_floor(&frames, 1e-3) };
    let fit = em_fit(&init, &frames, &cfg).map_err(|e| e.to_string())?;
    let (fast, time) = within(5.0, start);
    let worst = fit
        .trace
        .windows(2)
        .map(|w| ((w[0] - w[1]) / w[0].abs().max(1.0)).max(0.0))
        .fold(0.0, f64::max);
    let iters = fit.trace.len() - 1;
    Ok((
        worst <= 1e-6 && iters == 25 && fast,
        format!("{iters} iterations, largest relative drop {worst:.2e} (slack 1e-6), {time}"),
    ))
}

fn responsibilities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = random_gmm(16, 12, &mut rng);
    let frames = DMatrix::from_fn(1000, 12, |_, _| rng.random_range(-10.0..10.0));
    let gamma = posterior_responsibilities(&g, &frames).map_err(|e| e.to_string())?.gamma;
    let worst = gamma.row_iter().map(|r| (r.sum() - 1.0).abs()).fold(0.0, f64::max);
    Ok((worst <= 1e-10, format!("max |Σγ − 1| = {worst:.2e} over 1000 frames (tolerance 1e-10)")))
}

fn ivector_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let ubm = random_gmm(2, 2, &mut rng);
        let t = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-2.0..2.0));
        let model = TotalVariabilityModel::new(t.clone(), ubm.clone()).map_err(|e| e.to_string())?;
        let n = DVector::from_fn(2, |_, _| rng.random_range(0.5..50.0));
        let f = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-20.0..20.0));
        let stats = UtteranceStats {
            n: n.clone(),
            f: f.clone(),
            centered: true,
            utterance_id: String::new(),
            speaker_id: String::new(),
            channel_id: String::new(),
        };
        let w = extract_ivector(&model, &stats).map_err(|e| e.to_string())?.w;

        // dense supervector form: (I + TᵀΣ⁻¹NT)⁻¹ TᵀΣ⁻¹F
        let mut sigma_inv = DMatrix::zeros(4, 4);
        let mut big_n = DMatrix::zeros(4, 4);
        let mut fsv = DVector::zeros(4);
        for c in 0..2 {
            for d in 0..2 {
                let i = c * 2 + d;
                sigma_inv[(i, i)] = 1.0 / ubm.variances()[(c, d)];
                big_n[(i, i)] = n[c];
                fsv[i] = f[(c, d)];
            }
        }
        let precision = DMatrix::identity(2, 2) + t.transpose() * &sigma_inv * &big_n * &t;
        let rhs = t.transpose() * &sigma_inv * fsv;
        let oracle = precision.lu().solve(&rhs).ok_or("oracle system singular")?;
        worst = worst.max((w - oracle).amax());
    }
    let (fast, time) = within(1.0, start);
    Ok((worst <= 1e-8 && fast, format!("max deviation {worst:.2e} over 50 instances (tolerance 1e-8), {time}")))
}

fn t_recovery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (c, d, r) = (4, 3, 5);
    let t = DMatrix::from_fn(c * d, r, |_, _| rng.random_range(-1.0..1.0));
    let mut acc = TvAccumulators::new(c, d, r, MStepRule::FullMoment);
    let zero = DMatrix::zeros(r, r);
    for _ in 0..40 {
        let w = DVector::from_fn(r, |_, _| normal().sample(&mut rng));
        let n = DVector::from_fn(c, |_, _| rng.random_range(1.0..30.0));
        let offset = &t * &w;
        let f = DMatrix::from_fn(c, d, |k, j| n[k] * offset[k * d + j]);
        let stats = UtteranceStats {
            n,
            f,
            centered: true,
            utterance_id: String::new(),
            speaker_id: String::new(),
            channel_id: String::new(),
        };
        acc.add(&stats, &zero, &w).map_err(|e| e.to_string())?;
    }
    let out = tv_m_step(&acc).map_err(|e| e.to_string())?;
    let worst = (&out.t_matrix - &t).amax();
    Ok((worst <= 1e-6, format!("max |T̂ − T| = {worst:.2e} (tolerance 1e-6)")))
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (input, hidden) in [(10, vec![8]), (20, vec![10, 4])] {
        let specs = LayerSpec::chain(input, &hidden, Activation::Sigmoid);
        let mut model = SaeModel::random(&specs, false, 9).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = model.parameters();
        for (i, p) in params.iter().enumerate() {
            model.set_parameter(i, p + rng.random_range(-0.3..0.3));
        }
        let batch: Vec<DVector<f64>> = (0..8).map(|_| DVector::from_fn(input, |_, _| rng.random_range(-1.5..1.5))).collect();
        let analytic = model.gradient(&batch).map_err(|e| e.to_string())?.flatten();
        let params = model.parameters();
        let h = 1e-5;
        for (i, p) in params.iter().enumerate() {
            let mut plus = model.clone();
            plus.set_parameter(i, p + h);
            let mut minus = model.clone();
            minus.set_parameter(i, p - h);
            let numeric = (plus.reconstruction_loss(&batch).unwrap() - minus.reconstruction_loss(&batch).unwrap()) / (2.0 * h);
            let a = analytic[i];
            // relative error, with an absolute floor for gradients that vanish
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let (fast, time) = within(10.0, start);
    Ok((worst < 1e-4 && fast, format!("{checked} parameters, max relative error {worst:.2e} (limit 1e-4), {time}")))
}

fn linear_ae_pca() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let unit = normal();
    let basis = DMatrix::from_fn(10, 3, |_, _| unit.sample(&mut rng));
    let scales = [3.0, 2.0, 1.5];
    let shift = DVector::from_fn(10, |_, _| rng.random_range(-1.0..1.0));
    let data: Vec<DVector<f64>> = (0..200)
        .map(|_| {
            let z = DVector::from_fn(3, |k, _| scales[k] * unit.sample(&mut rng));
            &basis * z + &shift + DVector::from_fn(10, |_, _| 0.2 * unit.sample(&mut rng))
        })
        .collect();

    let mean = data.iter().fold(DVector::zeros(10), |a, x| a + x) / 200.0;
    let cov = data.iter().fold(DMatrix::zeros(10, 10), |a, x| {
        let c = x - &mean;
        a + &c * c.transpose()
    }) / 200.0;
    let mut eig: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().copied().collect();
    eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pca_residual: f64 = eig[..7].iter().sum();

    let start = Instant::now();
    let cfg = TrainConfig {
        learning_rate: 0.002,
        epochs: 1500,
        batch_size: 20,
        seed: 8,
        pretrain_epochs: 100,
        tied: false,
        activation: Activation::Identity,
    };
    let specs = LayerSpec::chain(10, &[3], Activation::Identity);
    let model = pretrain_layerwise(&specs, &data, &cfg).map_err(|e| e.to_string())?;
    let tuned = finetune(model, &data, &cfg).map_err(|e| e.to_string())?;
    let mse = tuned.model.reconstruction_loss(&data).map_err(|e| e.to_string())?;
    let rel = (mse - pca_residual) / pca_residual;
    let (fast, time) = within(30.0, start);
    Ok((
        rel.abs() <= 0.05 && fast,
        format!("AE residual {mse:.5}, PCA residual {pca_residual:.5}, relative gap {rel:+.4} (limit 0.05), {time}"),
    ))
}

fn pairwise_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_definitions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut worst: f64 = 0.0;
    for set in 0..100 {
        let n = rng.random_range(4..60);
        let mut positive: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        positive[0] = true;
        positive[1] = false;
        // every other set uses coarse scores so ties occur
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random();
                if set % 2 == 0 { (s * 5.0).round() / 5.0 } else { s }
            })
            .collect();
        let sweep = roc_auc(&scores, &positive).map_err(|e| e.to_string())?.auc;
        worst = worst.max((sweep - pairwise_auc(&scores, &positive)).abs());
    }
    let hand = roc_auc(&[0.9, 0.4, 0.5, 0.1], &[true, true, false, false]).map_err(|e| e.to_string())?.auc;
    Ok((
        worst <= 1e-12 && hand == 0.75,
        format!("max sweep/pairwise gap {worst:.2e} over 100 sets (tolerance 1e-12), hand case {hand}"),
    ))
}

fn mcc_formula() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = BinaryCounts {
            tp: rng.random_range(0..200),
            fp: rng.random_range(0..200),
            tn: rng.random_range(0..200),
            fn_: rng.random_range(0..200),
        };
        let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
        let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        let direct = if den == 0.0 { 0.0 } else { (tp * tn - fp * fn_) / den };
        worst = worst.max((mcc(&c) - direct).abs());
    }
    let perfect = mcc(&BinaryCounts { tp: 7, fp: 0, tn: 9, fn_: 0 });
    let inverted = mcc(&BinaryCounts { tp: 0, fp: 9, tn: 0, fn_: 7 });
    let degenerate = [
        BinaryCounts { tp: 5, fp: 5, tn: 0, fn_: 0 },
        BinaryCounts { tp: 0, fp: 0, tn: 4, fn_: 6 },
        BinaryCounts { tp: 0, fp: 0, tn: 0, fn_: 0 },
    ]
    .iter()
    .all(|c| mcc(c) == 0.0);
    Ok((
        worst <= 1e-12 && perfect == 1.0 && inverted == -1.0 && degenerate,
        format!("max deviation {worst:.2e} over 1000 quadruples, perfect {perfect}, inverted {inverted}, zero-denominator cases 0: {degenerate}"),
    ))
}

fn base_config(workdir: &std::path::Path, corpus: CorpusSpec) -> PipelineConfig {
    let mut cfg = PipelineConfig { workdir: workdir.to_path_buf(), corpus: Some(corpus), ..PipelineConfig::default() };
    cfg.ubm.components = 16;
    cfg.tv.rank = 50;
    cfg
}

fn gender_detection() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = CorpusSpec {
        ubm_speakers: 20,
        ubm_utts_per_speaker: 4,
        task_speakers: 40,
        utts_per_speaker: 10,
        test_utts_per_speaker: 3,
        heldout_speakers: 0,
        duration_s: 10.0,
        channels: 1,
        male_ratio: 0.5,
        ..CorpusSpec::default()
    };
    let mut cfg = base_config(dir.path(), corpus);
    cfg.target = Target::Gender;
    cfg.sae.layers = vec![32, 8];
    let start = Instant::now();
    let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let (fast, time) = within(600.0, start);
    let b = out.report.binary.as_ref().ok_or("no binary metrics")?;
    let acc = out.report.accuracy();
    Ok((
        b.auc >= 0.95 && acc >= 0.90 && fast,
        format!("AUC {:.4} (need 0.95), ACC {acc:.4} (need 0.90), MCC {:.4}, {} test utterances, {time}", b.auc, b.mcc, out.report.samples),
    ))
}

fn speaker_id() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = CorpusSpec {
        ubm_speakers: 20,
        ubm_utts_per_speaker: 5,
        task_speakers: 20,
        utts_per_speaker: 15,
        test_utts_per_speaker: 5,
        duration_s: 5.0,
        channels: 1,
        ..CorpusSpec::default()
    };
    let mut cfg = base_config(dir.path(), corpus);
    cfg.ubm.components = 32;
    cfg.tv.rank = 100;
    cfg.sae.layers = vec![64, 32];
    let start = Instant::now();
    let out = run_pipeline(&cfg).map_err(|e| e.to_string())?;
    let (fast, time) = within(900.0, start);
    let m = out.report.multiclass.as_ref().ok_or("no multiclass metrics")?;
    let rows_ok = m.confusion.classes.len() == 20 && m.confusion.row_sums().iter().all(|&s| s == 5);
    let rate = out.report.accuracy();
    Ok((
        rate >= 0.50 && rows_ok && fast,
        format!("recognition rate {rate:.4} (need 0.50, chance 0.05), 20 rows of 5 test utterances: {rows_ok}, {time}"),
    ))
}

fn cross_channel() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = CorpusSpec {
        ubm_speakers: 10,
        ubm_utts_per_speaker: 4,
        task_speakers: 10,
        utts_per_speaker: 8,
        test_utts_per_speaker: 3,
        duration_s: 3.0,
        channels: 4,
        cross_channel: true,
        ..CorpusSpec::default()
    };
    let mut cfg = base_config(dir.path(), corpus);
    cfg.sae.layers = vec![32, 16];
    let cmp = compare_backends(&cfg).map_err(|e| e.to_string())?;
    let written = dir.path().join("comparison.json").exists();
    let ok = cmp.cross_channel && written && cmp.sae.accuracy.is_finite() && cmp.baseline.accuracy.is_finite();
    Ok((
        ok,
        format!(
            "cross-channel report written: {written}; SAE accuracy {:.4}, LDA/WCCN accuracy {:.4} (measurement, not a gate)",
            cmp.sae.accuracy, cmp.baseline.accuracy
        ),
    ))
}

fn determinism() -> Outcome {
    let corpus = CorpusSpec {
        ubm_speakers: 4,
        ubm_utts_per_speaker: 3,
        task_speakers: 6,
        utts_per_speaker: 5,
        test_utts_per_speaker: 2,
        duration_s: 2.0,
        ..CorpusSpec::default()
    };
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let mut cfg = base_config(dir.path(), corpus.clone());
        cfg.ubm.components = 8;
        cfg.tv.rank = 20;
        cfg.sae.layers = vec![12, 6];
        run_pipeline(&cfg).map_err(|e| e.to_string())?;
        reports.push(std::fs::read(dir.path().join("report.json")).map_err(|e| e.to_string())?);
    }
    let same = reports[0] == reports[1];
    Ok((same, format!("two independent runs, report.json byte-identical: {same} ({} bytes)", reports[0].len())))
}

fn main() {
    let mut suite = Suite { failed: Vec::new() };
    suite.check(1, "EM monotonicity", em_monotonicity);
    suite.check(2, "responsibility normalization", responsibilities);
    suite.check(3, "i-vector oracle equivalence", ivector_oracle);
    suite.check(4, "T recovery", t_recovery);
    suite.check(5, "SAE gradient check", gradient_check);
    suite.check(6, "linear AE matches PCA", linear_ae_pca);
    suite.check(7, "AUC dual definition", auc_definitions);
    suite.check(8, "MCC formula", mcc_formula);
    suite.check(9, "desk-scale gender detection", gender_detection);
    suite.check(10, "desk-scale speaker identification", speaker_id);
    suite.check(11, "cross-channel comparison", cross_channel);
    suite.check(12, "end-to-end determinism", determinism);
    if suite.failed.is_empty() {
        println!("acceptance: all 12 criteria pass");
    } else {
        println!("acceptance: failing criteria {:?}", suite.failed);
        std::process::exit(1);
    }
}
