//! Baum-Welch statistics, total-variability training and i-vector extraction.
//!
//! Supervectors are component-major: block `c` occupies rows `c*D .. c*D + D`.

use std::path::Path;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Decoder, Encoder, FORMAT_VERSION};
use crate::error::{check_dim, Error, Result};
use crate::frontend::FeatureSequence;
use crate::gmm::{posterior_responsibilities, DiagonalGmm};

const TV_MAGIC: &[u8; 4] = b"IVXT";
const IVEC_MAGIC: &[u8; 4] = b"IVXV";

/// Zero- and first-order Baum-Welch statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceStats {
    /// N_c, length C.
    pub n: DVector<f64>,
    /// F_c stacked as a C×D matrix.
    pub f: DMatrix<f64>,
    pub centered: bool,
    pub utterance_id: String,
    pub speaker_id: String,
    pub channel_id: String,
}

impl UtteranceStats {
    pub fn components(&self) -> usize {
        self.n.len()
    }

    pub fn dim(&self) -> usize {
        self.f.ncols()
    }

    /// F flattened component-major into a C·D supervector.
    pub fn f_supervector(&self) -> DVector<f64> {
        DVector::from_row_slice(self.f.transpose().as_slice())
    }

    pub fn with_ids(
        mut self,
        utterance_id: impl Into<String>,
        speaker_id: impl Into<String>,
        channel_id: impl Into<String>,
    ) -> Self {
        self.utterance_id = utterance_id.into();
        self.speaker_id = speaker_id.into();
        self.channel_id = channel_id.into();
        self
    }
}

/// N_c = Σ_t γ_ct and F_c = Σ_t γ_ct o_t for given responsibilities.
pub fn stats_from_responsibilities(gamma: &DMatrix<f64>, frames: &DMatrix<f64>) -> Result<UtteranceStats> {
    check_dim("responsibility rows", frames.nrows(), gamma.nrows())?;
    Ok(UtteranceStats {
        n: DVector::from_iterator(gamma.ncols(), gamma.column_iter().map(|c| c.sum())),
        f: gamma.transpose() * frames,
        centered: false,
        utterance_id: String::new(),
        speaker_id: String::new(),
        channel_id: String::new(),
    })
}

/// Statistics over the voiced frames of a normalized feature sequence.
pub fn accumulate_stats(gmm: &DiagonalGmm, fs: &FeatureSequence) -> Result<UtteranceStats> {
    if !fs.normalized {
        return Err(Error::Data(
            "Baum-Welch statistics expect CMVN-normalized features".into(),
        ));
    }
    check_dim("feature dimension vs UBM", gmm.dim(), fs.dim())?;
    let voiced = fs.voiced_frames();
    if voiced.nrows() == 0 {
        return Err(Error::Data("utterance has no voiced frames".into()));
    }
    let resp = posterior_responsibilities(gmm, &voiced)?;
    stats_from_responsibilities(&resp.gamma, &voiced)
}

/// F_c ← F_c − N_c m_c.
pub fn center_stats(stats: &UtteranceStats, gmm: &DiagonalGmm) -> Result<UtteranceStats> {
    if stats.centered {
        return Err(Error::Data(format!(
            "statistics of `{}` are already centered",
            stats.utterance_id
        )));
    }
    check_dim("stats components vs UBM", gmm.components(), stats.components())?;
    check_dim("stats dimension vs UBM", gmm.dim(), stats.dim())?;
    let mut out = stats.clone();
    for c in 0..stats.components() {
        let n = stats.n[c];
        for d in 0..stats.dim() {
            out.f[(c, d)] -= n * gmm.means()[(c, d)];
        }
    }
    out.centered = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalVariabilityModel {
    t_matrix: DMatrix<f64>,
    ubm: DiagonalGmm,
}

impl TotalVariabilityModel {
    pub fn new(t_matrix: DMatrix<f64>, ubm: DiagonalGmm) -> Result<Self> {
        check_dim("T rows vs C·D", ubm.components() * ubm.dim(), t_matrix.nrows())?;
        if t_matrix.ncols() == 0 {
            return Err(Error::Config("total-variability rank must be ≥ 1".into()));
        }
        binio::check_finite_matrix(&t_matrix, "T matrix")?;
        Ok(TotalVariabilityModel { t_matrix, ubm })
    }

    pub fn t_matrix(&self) -> &DMatrix<f64> {
        &self.t_matrix
    }

    pub fn ubm(&self) -> &DiagonalGmm {
        &self.ubm
    }

    pub fn rank(&self) -> usize {
        self.t_matrix.ncols()
    }

    /// IVXT layout; the UBM is referenced by content hash only.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(TV_MAGIC);
        e.u32(FORMAT_VERSION)
            .len(self.t_matrix.nrows())
            .len(self.rank())
            .matrix(&self.t_matrix)
            .u64(self.ubm.content_hash());
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], ubm: DiagonalGmm, context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, TV_MAGIC, context)?;
        d.version()?;
        let rows = d.len()?;
        let rank = d.len()?;
        let t = d.matrix(rows, rank)?;
        let hash = d.u64()?;
        d.finish()?;
        if hash != ubm.content_hash() {
            return Err(Error::Data(format!(
                "{context}: T matrix was trained against UBM {hash:016x}, got {:016x}",
                ubm.content_hash()
            )));
        }
        TotalVariabilityModel::new(t, ubm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path, ubm: DiagonalGmm) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, ubm, &path.display().to_string())
    }
}

/// Latent posterior of one utterance: precision `l`, its inverse, and mean `y`.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub precision: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// ½ bᵀ l⁻¹ b − ½ log|l|, the T-dependent part of the marginal log-likelihood.
    pub log_evidence: f64,
}

/// Caches TᵀΣ_c⁻¹T_c per component and Σ⁻¹T so each posterior costs O(C·R² + R³).
pub struct PosteriorEngine<'a> {
    model: &'a TotalVariabilityModel,
    component_gram: Vec<DMatrix<f64>>,
    sigma_inv_t: DMatrix<f64>,
}

impl<'a> PosteriorEngine<'a> {
    pub fn new(model: &'a TotalVariabilityModel) -> Self {
        let (c, d) = (model.ubm.components(), model.ubm.dim());
        let t = &model.t_matrix;
        let mut sigma_inv_t = t.clone();
        for k in 0..c {
            for j in 0..d {
                let iv = 1.0 / model.ubm.variances()[(k, j)];
                sigma_inv_t.row_mut(k * d + j).scale_mut(iv);
            }
        }
        let component_gram = (0..c)
            .into_par_iter()
            .map(|k| {
                let tk = t.rows(k * d, d);
                let sk = sigma_inv_t.rows(k * d, d);
                tk.transpose() * sk
            })
            .collect();
        PosteriorEngine {
            model,
            component_gram,
            sigma_inv_t,
        }
    }

    pub fn posterior(&self, stats: &UtteranceStats) -> Result<Posterior> {
        let ubm = &self.model.ubm;
        check_dim("stats components vs UBM", ubm.components(), stats.components())?;
        check_dim("stats dimension vs UBM", ubm.dim(), stats.dim())?;
        let r = self.model.rank();
        let mut precision = DMatrix::identity(r, r);
        for (k, gram) in self.component_gram.iter().enumerate() {
            let n = stats.n[k];
            if n != 0.0 {
                precision.zip_apply(gram, |p, g| *p += n * g);
            }
        }
        // symmetrize away accumulation rounding
        let precision = (&precision + precision.transpose()) * 0.5;
        let b = self.sigma_inv_t.tr_mul(&stats.f_supervector());
        let chol = Cholesky::<f64, Dyn>::new(precision.clone()).ok_or_else(|| {
            let diag = precision.diagonal();
            Error::Numeric(format!(
                "posterior precision of `{}` is not positive definite (diagonal range {:.3e}..{:.3e})",
                stats.utterance_id,
                diag.min(),
                diag.max()
            ))
        })?;
        let mean = chol.solve(&b);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let log_evidence = 0.5 * b.dot(&mean) - 0.5 * log_det;
        Ok(Posterior {
            covariance: chol.inverse(),
            precision,
            mean,
            log_evidence,
        })
    }
}

/// E-step for one utterance: l = I + TᵀΣ⁻¹N T, y = l⁻¹TᵀΣ⁻¹F.
pub fn tv_e_step(model: &TotalVariabilityModel, stats: &UtteranceStats) -> Result<Posterior> {
    PosteriorEngine::new(model).posterior(stats)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub w: DVector<f64>,
    pub utterance_id: String,
    pub speaker_id: String,
    pub channel_id: String,
}

/// Posterior mean of the latent factor; same path as [`tv_e_step`].
pub fn extract_ivector(model: &TotalVariabilityModel, stats: &UtteranceStats) -> Result<IVector> {
    extract_with(&PosteriorEngine::new(model), stats)
}

pub fn extract_with(engine: &PosteriorEngine<'_>, stats: &UtteranceStats) -> Result<IVector> {
    Ok(IVector {
        w: engine.posterior(stats)?.mean,
        utterance_id: stats.utterance_id.clone(),
        speaker_id: stats.speaker_id.clone(),
        channel_id: stats.channel_id.clone(),
    })
}

/// How the M-step second moment is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MStepRule {
    /// A_c = Σ_s N_c(s) (l⁻¹(s) + y(s)y(s)ᵀ), the maximum-likelihood update.
    #[default]
    FullMoment,
    /// A_c = Σ_s N_c(s) l⁻¹(s), without the outer-product term.
    CovarianceOnly,
}

/// M-step sufficient statistics summed over utterances.
#[derive(Debug, Clone)]
pub struct TvAccumulators {
    pub rule: MStepRule,
    pub dim: usize,
    /// Σ_s N_c(s), length C.
    pub n: DVector<f64>,
    /// One R×R matrix per component.
    pub a: Vec<DMatrix<f64>>,
    /// Σ_s F(s) y(s)ᵀ, (C·D)×R.
    pub c: DMatrix<f64>,
    pub utterances: usize,
}

impl TvAccumulators {
    pub fn new(components: usize, dim: usize, rank: usize, rule: MStepRule) -> Self {
        TvAccumulators {
            rule,
            dim,
            n: DVector::zeros(components),
            a: vec![DMatrix::zeros(rank, rank); components],
            c: DMatrix::zeros(components * dim, rank),
            utterances: 0,
        }
    }

    /// Adds one utterance given its posterior covariance l⁻¹ and mean y.
    pub fn add(&mut self, stats: &UtteranceStats, covariance: &DMatrix<f64>, mean: &DVector<f64>) -> Result<()> {
        check_dim("accumulator components", self.n.len(), stats.components())?;
        check_dim("accumulator dimension", self.dim, stats.dim())?;
        check_dim("accumulator rank", self.c.ncols(), mean.len())?;
        let moment = match self.rule {
            MStepRule::FullMoment => covariance + mean * mean.transpose(),
            MStepRule::CovarianceOnly => covariance.clone(),
        };
        for (k, a) in self.a.iter_mut().enumerate() {
            let n = stats.n[k];
            if n != 0.0 {
                a.zip_apply(&moment, |p, m| *p += n * m);
            }
        }
        self.n += &stats.n;
        self.c.ger(1.0, &stats.f_supervector(), mean, 1.0);
        self.utterances += 1;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MStepOutcome {
    pub t_matrix: DMatrix<f64>,
    /// Components whose A_c needed a ridge before it could be factored.
    pub regularized: Vec<usize>,
}

/// Solves T_c A_c = C_c for every component block.
pub fn tv_m_step(acc: &TvAccumulators) -> Result<MStepOutcome> {
    let d = acc.dim;
    let r = acc.c.ncols();
    let solved: Vec<(DMatrix<f64>, bool)> = acc
        .a
        .par_iter()
        .enumerate()
        .map(|(k, a)| {
            let a = (a + a.transpose()) * 0.5;
            let rhs = acc.c.rows(k * d, d).transpose();
            if let Some(chol) = Cholesky::new(a.clone()) {
                let x = chol.solve(&rhs);
                if x.iter().all(|v| v.is_finite()) {
                    return Ok((x.transpose(), false));
                }
            }
            let trace = a.trace();
            let lambda = if trace > 0.0 { 1e-6 * trace / r as f64 } else { 1e-6 };
            let ridge = &a + DMatrix::identity(r, r) * lambda;
            let chol = Cholesky::new(ridge).ok_or_else(|| {
                Error::Numeric(format!("M-step system for component {k} is not positive definite"))
            })?;
            Ok((chol.solve(&rhs).transpose(), true))
        })
        .collect::<Result<_>>()?;
    let mut t = DMatrix::zeros(acc.c.nrows(), r);
    let mut regularized = Vec::new();
    for (k, (block, reg)) in solved.into_iter().enumerate() {
        t.rows_mut(k * d, d).copy_from(&block);
        if reg {
            regularized.push(k);
        }
    }
    if !regularized.is_empty() {
        warn!("M-step: regularized singular A_c for components {regularized:?}");
    }
    binio::check_finite_matrix(&t, "updated T")?;
    Ok(MStepOutcome {
        t_matrix: t,
        regularized,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvConfig {
    pub rank: usize,
    pub iters: usize,
    pub seed: u64,
    /// Standard deviation of the random initial T entries.
    pub init_std: f64,
    pub mstep: MStepRule,
    /// Center first-order statistics around the UBM means before use.
    pub center: bool,
}

impl Default for TvConfig {
    fn default() -> Self {
        TvConfig {
            rank: 400,
            iters: 5,
            seed: 0x1f5a,
            init_std: 0.1,
            mstep: MStepRule::FullMoment,
            center: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TvTraining {
    pub model: TotalVariabilityModel,
    /// Σ_s Σ_c (1/N_c)‖F_c − N_c T_c y‖²_{Σ_c⁻¹} under each successive T (initial first).
    pub objective_trace: Vec<f64>,
    /// Σ_s (½ bᵀl⁻¹b − ½ log|l|) under each successive T.
    pub evidence_trace: Vec<f64>,
}

/// Data-fit residual of the statistics against their posterior means.
pub fn proxy_objective(model: &TotalVariabilityModel, stats: &[UtteranceStats], means: &[DVector<f64>]) -> f64 {
    let (c, d) = (model.ubm.components(), model.ubm.dim());
    stats
        .iter()
        .zip(means)
        .map(|(s, y)| {
            let ty = &model.t_matrix * y;
            let mut total = 0.0;
            for k in 0..c {
                let n = s.n[k];
                if n <= 0.0 {
                    continue;
                }
                for j in 0..d {
                    let resid = s.f[(k, j)] - n * ty[k * d + j];
                    total += resid * resid / (n * model.ubm.variances()[(k, j)]);
                }
            }
            total
        })
        .sum()
}

fn e_pass(model: &TotalVariabilityModel, ordered: &[&UtteranceStats]) -> Result<Vec<Posterior>> {
    let engine = PosteriorEngine::new(model);
    ordered.par_iter().map(|s| engine.posterior(s)).collect()
}

/// Alternating E/M training of T from a random start.
pub fn train_tv(ubm: &DiagonalGmm, stats: &[UtteranceStats], cfg: &TvConfig) -> Result<TvTraining> {
    let cd = ubm.components() * ubm.dim();
    if cfg.rank == 0 || cfg.rank > cd {
        return Err(Error::Config(format!(
            "rank {} must lie in 1..={cd} (C·D)",
            cfg.rank
        )));
    }
    if stats.len() < 2 {
        return Err(Error::Data(format!(
            "T training needs at least 2 utterances, got {}",
            stats.len()
        )));
    }
    let prepared: Vec<UtteranceStats> = stats
        .iter()
        .map(|s| {
            if cfg.center && !s.centered {
                center_stats(s, ubm)
            } else {
                Ok(s.clone())
            }
        })
        .collect::<Result<_>>()?;
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    order.sort_by(|&a, &b| prepared[a].utterance_id.cmp(&prepared[b].utterance_id).then(a.cmp(&b)));
    let ordered: Vec<&UtteranceStats> = order.iter().map(|&i| &prepared[i]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.init_std)
        .map_err(|e| Error::Config(format!("init_std: {e}")))?;
    let t0 = DMatrix::from_fn(cd, cfg.rank, |_, _| normal.sample(&mut rng));
    let mut model = TotalVariabilityModel::new(t0, ubm.clone())?;

    let owned: Vec<UtteranceStats> = ordered.iter().map(|s| (*s).clone()).collect();
    let mut posts = e_pass(&model, &ordered)?;
    let means = |p: &[Posterior]| p.iter().map(|q| q.mean.clone()).collect::<Vec<_>>();
    let mut objective_trace = vec![proxy_objective(&model, &owned, &means(&posts))];
    let mut evidence_trace = vec![posts.iter().map(|p| p.log_evidence).sum()];
    for _ in 0..cfg.iters {
        let mut acc = TvAccumulators::new(ubm.components(), ubm.dim(), cfg.rank, cfg.mstep);
        for (s, p) in ordered.iter().zip(&posts) {
            acc.add(s, &p.covariance, &p.mean)?;
        }
        let outcome = tv_m_step(&acc)?;
        model = TotalVariabilityModel::new(outcome.t_matrix, ubm.clone())?;
        posts = e_pass(&model, &ordered)?;
        objective_trace.push(proxy_objective(&model, &owned, &means(&posts)));
        evidence_trace.push(posts.iter().map(|p| p.log_evidence).sum());
    }
    Ok(TvTraining {
        model,
        objective_trace,
        evidence_trace,
    })
}

/// IVXV layout: count, dim, then per record three length-prefixed UTF-8 ids and the vector.
pub fn ivectors_to_bytes(ivecs: &[IVector]) -> Result<Vec<u8>> {
    let dim = ivecs.first().map_or(0, |v| v.w.len());
    let mut e = Encoder::new(IVEC_MAGIC);
    e.len(ivecs.len()).len(dim);
    for v in ivecs {
        check_dim("i-vector length", dim, v.w.len())?;
        e.str(&v.utterance_id)
            .str(&v.speaker_id)
            .str(&v.channel_id)
            .f64s(v.w.iter());
    }
    Ok(e.finish())
}

pub fn ivectors_from_bytes(bytes: &[u8], context: &str) -> Result<Vec<IVector>> {
    let mut d = Decoder::new(bytes, IVEC_MAGIC, context)?;
    let count = d.len()?;
    let dim = d.len()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let utterance_id = d.string()?;
        let speaker_id = d.string()?;
        let channel_id = d.string()?;
        let w = d.vector(dim)?;
        if w.iter().any(|v| !v.is_finite()) {
            return Err(d.fail(format!("non-finite entry in `{utterance_id}`")));
        }
        out.push(IVector {
            w,
            utterance_id,
            speaker_id,
            channel_id,
        });
    }
    d.finish()?;
    Ok(out)
}

pub fn write_ivectors(path: &Path, ivecs: &[IVector]) -> Result<()> {
    binio::write_file(path, &ivectors_to_bytes(ivecs)?)
}

pub fn read_ivectors(path: &Path) -> Result<Vec<IVector>> {
    ivectors_from_bytes(&binio::read_file(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_ubm(rng: &mut ChaCha8Rng, c: usize, d: usize) -> DiagonalGmm {
        let mut w = DVector::from_fn(c, |_, _| rng.random_range(0.2..1.0));
        w /= w.sum();
        DiagonalGmm::new(
            w,
            DMatrix::from_fn(c, d, |_, _| rng.random_range(-1.0..1.0)),
            DMatrix::from_fn(c, d, |_, _| rng.random_range(0.5..2.0)),
        )
        .unwrap()
    }

    fn random_stats(rng: &mut ChaCha8Rng, c: usize, d: usize, id: &str) -> UtteranceStats {
        UtteranceStats {
            n: DVector::from_fn(c, |_, _| rng.random_range(0.0..30.0)),
            f: DMatrix::from_fn(c, d, |_, _| rng.random_range(-10.0..10.0)),
            centered: true,
            utterance_id: id.into(),
            speaker_id: String::new(),
            channel_id: String::new(),
        }
    }

    /// Explicit (C·D)×(C·D) construction and dense solve.
    fn dense_oracle(model: &TotalVariabilityModel, s: &UtteranceStats) -> (DMatrix<f64>, DVector<f64>) {
        let ubm = model.ubm();
        let (c, d) = (ubm.components(), ubm.dim());
        let t = model.t_matrix();
        let mut sigma_inv = DMatrix::zeros(c * d, c * d);
        let mut nn = DMatrix::zeros(c * d, c * d);
        let mut f = DVector::zeros(c * d);
        for k in 0..c {
            for j in 0..d {
                sigma_inv[(k * d + j, k * d + j)] = 1.0 / ubm.variances()[(k, j)];
                nn[(k * d + j, k * d + j)] = s.n[k];
                f[k * d + j] = s.f[(k, j)];
            }
        }
        let r = t.ncols();
        let l = DMatrix::identity(r, r) + t.transpose() * &sigma_inv * &nn * t;
        let y = l.clone().lu().solve(&(t.transpose() * &sigma_inv * f)).unwrap();
        (l, y)
    }

    #[test]
    fn single_component_stats_are_counts_and_sums() {
        let frames = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 0.0, 4.0]);
        let gamma = DMatrix::from_element(3, 1, 1.0);
        let s = stats_from_responsibilities(&gamma, &frames).unwrap();
        assert_eq!(s.n[0], 3.0);
        assert_eq!(s.f.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 6.5]);
    }

    #[test]
    fn one_hot_responsibilities_give_per_component_sums() {
        let frames = DMatrix::from_row_slice(4, 1, &[1.0, 2.0, 3.0, 4.0]);
        let gamma = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        let s = stats_from_responsibilities(&gamma, &frames).unwrap();
        assert_eq!(s.n.as_slice(), &[3.0, 1.0]);
        assert_eq!(s.f.as_slice(), &[8.0, 2.0]);
    }

    #[test]
    fn accumulated_stats_match_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ubm = random_ubm(&mut rng, 3, 2);
        let frames = DMatrix::from_fn(25, 2, |_, _| rng.random_range(-2.0..2.0));
        let fs = FeatureSequence::from_parts(frames.clone(), vec![true; 25], true).unwrap();
        let s = accumulate_stats(&ubm, &fs).unwrap();
        let gamma = posterior_responsibilities(&ubm, &frames).unwrap().gamma;
        for c in 0..3 {
            let mut n = 0.0;
            let mut f = [0.0; 2];
            for t in 0..25 {
                n += gamma[(t, c)];
                for d in 0..2 {
                    f[d] += gamma[(t, c)] * frames[(t, d)];
                }
            }
            assert!((s.n[c] - n).abs() < 1e-10);
            for d in 0..2 {
                assert!((s.f[(c, d)] - f[d]).abs() < 1e-10);
            }
        }
        assert!((s.n.sum() - 25.0).abs() < 1e-10);
    }

    #[test]
    fn unvoiced_only_or_unnormalized_input_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ubm = random_ubm(&mut rng, 2, 2);
        let fs = FeatureSequence::from_parts(DMatrix::zeros(3, 2), vec![false; 3], true).unwrap();
        assert!(matches!(accumulate_stats(&ubm, &fs), Err(Error::Data(_))));
        let raw = FeatureSequence::from_parts(DMatrix::zeros(3, 2), vec![true; 3], false).unwrap();
        assert!(accumulate_stats(&ubm, &raw).is_err());
    }

    #[test]
    fn centering_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ubm = random_ubm(&mut rng, 2, 3);
        let mut s = random_stats(&mut rng, 2, 3, "u");
        s.centered = false;
        let centered = center_stats(&s, &ubm).unwrap();
        for c in 0..2 {
            for d in 0..3 {
                assert_eq!(centered.f[(c, d)], s.f[(c, d)] - s.n[c] * ubm.means()[(c, d)]);
            }
        }
        assert_eq!(centered.n, s.n);
        assert!(matches!(center_stats(&centered, &ubm), Err(Error::Data(_))));

        let mut empty = s.clone();
        empty.n.fill(0.0);
        assert_eq!(center_stats(&empty, &ubm).unwrap().f, empty.f);

        // one frame at the mean of component 0 with γ = 1
        let at_mean = UtteranceStats {
            n: DVector::from_vec(vec![1.0, 0.0]),
            f: DMatrix::from_fn(2, 3, |c, d| if c == 0 { ubm.means()[(0, d)] } else { 0.0 }),
            ..s
        };
        assert!(center_stats(&at_mean, &ubm).unwrap().f.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_loading_or_zero_counts_give_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ubm = random_ubm(&mut rng, 2, 2);
        let zero_t = TotalVariabilityModel::new(DMatrix::zeros(4, 3), ubm.clone()).unwrap();
        let s = random_stats(&mut rng, 2, 2, "a");
        let p = tv_e_step(&zero_t, &s).unwrap();
        assert_eq!(p.precision, DMatrix::identity(3, 3));
        assert!(p.mean.iter().all(|&v| v == 0.0));

        let model = TotalVariabilityModel::new(DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)), ubm).unwrap();
        let empty = UtteranceStats {
            n: DVector::zeros(2),
            f: DMatrix::zeros(2, 2),
            ..s.clone()
        };
        let p = tv_e_step(&model, &empty).unwrap();
        assert_eq!(p.precision, DMatrix::identity(3, 3));
        assert!(p.mean.iter().all(|&v| v == 0.0));
        let zero_f = UtteranceStats {
            f: DMatrix::zeros(2, 2),
            ..s
        };
        assert!(extract_ivector(&model, &zero_f).unwrap().w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn posterior_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for i in 0..20 {
            let ubm = random_ubm(&mut rng, 2, 2);
            let t = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
            let model = TotalVariabilityModel::new(t, ubm).unwrap();
            let s = random_stats(&mut rng, 2, 2, &format!("u{i}"));
            let (l, y) = dense_oracle(&model, &s);
            let p = tv_e_step(&model, &s).unwrap();
            assert!((&p.precision - &l).amax() < 1e-8);
            assert!((&p.mean - &y).amax() < 1e-8);
            let w = extract_ivector(&model, &s).unwrap().w;
            assert_eq!(w, p.mean);
        }
    }

    #[test]
    fn m_step_zero_cross_moment_gives_zero_t() {
        let mut acc = TvAccumulators::new(2, 2, 2, MStepRule::FullMoment);
        let s = UtteranceStats {
            n: DVector::from_vec(vec![3.0, 5.0]),
            f: DMatrix::zeros(2, 2),
            centered: true,
            utterance_id: "a".into(),
            speaker_id: String::new(),
            channel_id: String::new(),
        };
        acc.add(&s, &DMatrix::identity(2, 2), &DVector::zeros(2)).unwrap();
        let out = tv_m_step(&acc).unwrap();
        assert!(out.t_matrix.iter().all(|&v| v == 0.0));
        assert!(out.regularized.is_empty());
    }

    #[test]
    fn m_step_identity_system_copies_cross_moment() {
        let mut acc = TvAccumulators::new(2, 3, 2, MStepRule::FullMoment);
        acc.a = vec![DMatrix::identity(2, 2); 2];
        acc.c = DMatrix::from_fn(6, 2, |i, j| (i * 2 + j) as f64 - 3.5);
        let out = tv_m_step(&acc).unwrap();
        assert!((&out.t_matrix - &acc.c).amax() < 1e-14);
    }

    #[test]
    fn m_step_regularizes_singular_systems() {
        let mut acc = TvAccumulators::new(1, 1, 2, MStepRule::FullMoment);
        acc.a[0] = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        acc.c = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let out = tv_m_step(&acc).unwrap();
        assert_eq!(out.regularized, vec![0]);
        assert!(out.t_matrix.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn rank_above_supervector_size_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ubm = random_ubm(&mut rng, 2, 2);
        let stats = vec![random_stats(&mut rng, 2, 2, "a"), random_stats(&mut rng, 2, 2, "b")];
        let cfg = TvConfig { rank: 5, ..TvConfig::default() };
        assert!(matches!(train_tv(&ubm, &stats, &cfg), Err(Error::Config(_))));
        let cfg = TvConfig { rank: 2, ..TvConfig::default() };
        assert!(matches!(train_tv(&ubm, &stats[..1], &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn zero_iterations_returns_the_seeded_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ubm = random_ubm(&mut rng, 2, 2);
        let stats = vec![random_stats(&mut rng, 2, 2, "a"), random_stats(&mut rng, 2, 2, "b")];
        let cfg = TvConfig { rank: 3, iters: 0, seed: 99, ..TvConfig::default() };
        let a = train_tv(&ubm, &stats, &cfg).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let expected = DMatrix::from_fn(4, 3, |_, _| normal.sample(&mut r));
        assert_eq!(a.model.t_matrix(), &expected);
        assert_eq!(a.objective_trace.len(), 1);
    }

    #[test]
    fn default_model_shape() {
        let ubm = DiagonalGmm::new(
            DVector::from_element(64, 1.0 / 64.0),
            DMatrix::zeros(64, 12),
            DMatrix::from_element(64, 12, 1.0),
        )
        .unwrap();
        let cfg = TvConfig::default();
        let t = DMatrix::zeros(64 * 12, cfg.rank);
        let model = TotalVariabilityModel::new(t, ubm).unwrap();
        assert_eq!(model.t_matrix().shape(), (768, 400));
    }

    #[test]
    fn model_file_checks_ubm_hash() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ubm = random_ubm(&mut rng, 2, 2);
        let other = random_ubm(&mut rng, 2, 2);
        let model = TotalVariabilityModel::new(DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)), ubm.clone()).unwrap();
        let bytes = model.to_bytes();
        assert_eq!(&bytes[..4], b"IVXT");
        assert_eq!(TotalVariabilityModel::from_bytes(&bytes, ubm, "t").unwrap(), model);
        assert!(matches!(TotalVariabilityModel::from_bytes(&bytes, other, "t"), Err(Error::Data(_))));
    }

    #[test]
    fn ivector_file_layout() {
        let v = vec![
            IVector { w: DVector::from_vec(vec![1.0, -2.0]), utterance_id: "u1".into(), speaker_id: "s1".into(), channel_id: "ch0".into() },
            IVector { w: DVector::from_vec(vec![0.5, 0.25]), utterance_id: "ü2".into(), speaker_id: "s2".into(), channel_id: String::new() },
        ];
        let bytes = ivectors_to_bytes(&v).unwrap();
        assert_eq!(&bytes[..4], b"IVXV");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(ivectors_from_bytes(&bytes, "t").unwrap(), v);
        let mut ragged = v.clone();
        ragged[1].w = DVector::from_vec(vec![1.0]);
        assert!(ivectors_to_bytes(&ragged).is_err());
    }

    fn synthetic_corpus(seed: u64, c: usize, d: usize, r: usize, utts: usize) -> (DiagonalGmm, DMatrix<f64>, Vec<UtteranceStats>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ubm = random_ubm(&mut rng, c, d);
        let true_t = DMatrix::from_fn(c * d, r, |_, _| rng.random_range(-1.5..1.5));
        let unit = Normal::new(0.0, 1.0).unwrap();
        let stats = (0..utts)
            .map(|u| {
                let w = DVector::from_fn(r, |_, _| unit.sample(&mut rng));
                let offset = &true_t * &w;
                let n = DVector::from_fn(c, |_, _| rng.random_range(5.0..40.0));
                let f = DMatrix::from_fn(c, d, |k, j| {
                    let sd = (n[k] * ubm.variances()[(k, j)]).sqrt();
                    n[k] * offset[k * d + j] + sd * unit.sample(&mut rng)
                });
                UtteranceStats {
                    n,
                    f,
                    centered: true,
                    utterance_id: format!("utt{u:03}"),
                    speaker_id: String::new(),
                    channel_id: String::new(),
                }
            })
            .collect();
        (ubm, true_t, stats)
    }

    #[test]
    fn desk_scale_training_traces() {
        let (ubm, _, stats) = synthetic_corpus(12, 4, 2, 2, 40);
        let cfg = TvConfig { rank: 2, iters: 10, seed: 3, ..TvConfig::default() };
        let run = train_tv(&ubm, &stats, &cfg).unwrap();
        assert_eq!(run.objective_trace.len(), 11);
        for w in run.objective_trace.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9), "proxy objective rose: {:?}", run.objective_trace);
        }
        for w in run.evidence_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9 * w[0].abs(), "evidence fell: {:?}", run.evidence_trace);
        }
        let again = train_tv(&ubm, &stats, &cfg).unwrap();
        assert_eq!(again.model, run.model);
    }

    #[test]
    fn covariance_only_rule_is_selectable() {
        let (ubm, _, stats) = synthetic_corpus(13, 4, 2, 2, 20);
        let cfg = TvConfig { rank: 2, iters: 2, mstep: MStepRule::CovarianceOnly, ..TvConfig::default() };
        let run = train_tv(&ubm, &stats, &cfg).unwrap();
        assert_eq!(run.model.rank(), 2);
    }

    #[test]
    fn m_step_recovers_t_from_noiseless_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (c, d, r) = (3, 2, 3);
        let true_t = DMatrix::from_fn(c * d, r, |_, _| rng.random_range(-2.0..2.0));
        let mut acc = TvAccumulators::new(c, d, r, MStepRule::FullMoment);
        for u in 0..12 {
            let y = DVector::from_fn(r, |_, _| rng.random_range(-1.0..1.0));
            let n = DVector::from_fn(c, |_, _| rng.random_range(1.0..20.0));
            let offset = &true_t * &y;
            let s = UtteranceStats {
                f: DMatrix::from_fn(c, d, |k, j| n[k] * offset[k * d + j]),
                n,
                centered: true,
                utterance_id: format!("{u}"),
                speaker_id: String::new(),
                channel_id: String::new(),
            };
            acc.add(&s, &DMatrix::zeros(r, r), &y).unwrap();
        }
        let t = tv_m_step(&acc).unwrap().t_matrix;
        assert!((&t - &true_t).amax() < 1e-6);
    }

    proptest! {
        #[test]
        fn precision_is_symmetric_positive_definite(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ubm = random_ubm(&mut rng, 3, 2);
            let model = TotalVariabilityModel::new(DMatrix::from_fn(6, 4, |_, _| rng.random_range(-2.0..2.0)), ubm).unwrap();
            let s = random_stats(&mut rng, 3, 2, "p");
            let p = tv_e_step(&model, &s).unwrap();
            prop_assert!((&p.precision - p.precision.transpose()).amax() < 1e-10);
            let eig = p.precision.clone().symmetric_eigen();
            prop_assert!(eig.eigenvalues.iter().all(|&e| e > 0.0));
        }

        #[test]
        fn ivector_norm_shrinks_with_evidence(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ubm = random_ubm(&mut rng, 2, 2);
            let model = TotalVariabilityModel::new(DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0)), ubm).unwrap();
            let s = random_stats(&mut rng, 2, 2, "p");
            let norms: Vec<f64> = [1e-6, 1.0, 1e6].iter().map(|&a| {
                let scaled = UtteranceStats { n: &s.n * a, f: &s.f * a, ..s.clone() };
                extract_ivector(&model, &scaled).unwrap().w.norm()
            }).collect();
            prop_assert!(norms[0] <= norms[1] && norms[1] <= norms[2]);
            prop_assert!(norms[0] < 1e-4 * norms[2].max(1e-300) || norms[2] == 0.0);
        }
    }
}
