//! Diagonal-covariance Gaussian mixture used as the universal background model.

use std::f64::consts::PI;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::binio::{self, Decoder, Encoder, FORMAT_VERSION};
use crate::error::{check_dim, Error, Result};

const MODEL_MAGIC: &[u8; 4] = b"IVXG";
/// Frames per E-step block. Blocks are reduced in index order, so results do
/// not depend on the thread count.
const BLOCK: usize = 2048;
const MIN_VARIANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    weights: DVector<f64>,
    means: DMatrix<f64>,
    variances: DMatrix<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: DVector<f64>, means: DMatrix<f64>, variances: DMatrix<f64>) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.ncols() == 0 {
            return Err(Error::Data("GMM needs at least one component and dimension".into()));
        }
        check_dim("gmm means rows", c, means.nrows())?;
        check_dim("gmm variance rows", c, variances.nrows())?;
        check_dim("gmm variance cols", means.ncols(), variances.ncols())?;
        binio::check_finite_matrix(&means, "gmm means")?;
        binio::check_finite_matrix(&variances, "gmm variances")?;
        if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Data("GMM weights must be finite and non-negative".into()));
        }
        if (weights.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::Data(format!(
                "GMM weights sum to {}, not 1",
                weights.sum()
            )));
        }
        if variances.iter().any(|&v| v <= 0.0) {
            return Err(Error::Data("GMM variances must be strictly positive".into()));
        }
        Ok(DiagonalGmm {
            weights,
            means,
            variances,
        })
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    /// C×D, one row per component.
    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    /// C×D per-dimension variances.
    pub fn variances(&self) -> &DMatrix<f64> {
        &self.variances
    }

    /// Component-major mean supervector of length C·D.
    pub fn mean_supervector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.components() * self.dim(),
            (0..self.components()).flat_map(|c| (0..self.dim()).map(move |d| (c, d)))
                .map(|(c, d)| self.means[(c, d)]),
        )
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MODEL_MAGIC);
        e.u32(FORMAT_VERSION)
            .len(self.components())
            .len(self.dim())
            .f64s(self.weights.iter())
            .matrix(&self.means)
            .matrix(&self.variances);
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, MODEL_MAGIC, context)?;
        d.version()?;
        let c = d.len()?;
        let dim = d.len()?;
        let weights = d.vector(c)?;
        let means = d.matrix(c, dim)?;
        let variances = d.matrix(c, dim)?;
        d.finish()?;
        DiagonalGmm::new(weights, means, variances)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, &path.display().to_string())
    }

    pub fn content_hash(&self) -> u64 {
        binio::hash64(&self.to_bytes())
    }
}

/// Precomputed per-component constants for log-density evaluation.
struct Scorer {
    c: usize,
    d: usize,
    /// log w_c - ½ Σ_d log(2π σ²_cd)
    offsets: Vec<f64>,
    means: Vec<f64>,
    inv_vars: Vec<f64>,
}

impl Scorer {
    fn new(gmm: &DiagonalGmm) -> Self {
        let (c, d) = (gmm.components(), gmm.dim());
        let mut means = Vec::with_capacity(c * d);
        let mut inv_vars = Vec::with_capacity(c * d);
        let mut offsets = Vec::with_capacity(c);
        for k in 0..c {
            let mut log_det = 0.0;
            for j in 0..d {
                let v = gmm.variances[(k, j)];
                means.push(gmm.means[(k, j)]);
                inv_vars.push(1.0 / v);
                log_det += (2.0 * PI * v).ln();
            }
            offsets.push(gmm.weights[k].ln() - 0.5 * log_det);
        }
        Scorer {
            c,
            d,
            offsets,
            means,
            inv_vars,
        }
    }

    /// Fills `out` with log(w_c N(x; m_c, Σ_c)) and returns their log-sum-exp.
    fn joint(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for k in 0..self.c {
            let m = &self.means[k * self.d..(k + 1) * self.d];
            let iv = &self.inv_vars[k * self.d..(k + 1) * self.d];
            let mut q = 0.0;
            for j in 0..self.d {
                let z = x[j] - m[j];
                q += z * z * iv[j];
            }
            let v = self.offsets[k] - 0.5 * q;
            out[k] = v;
            max = max.max(v);
        }
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + out.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
    }
}

/// Row-major copy of a T×D frame matrix.
fn row_major(frames: &DMatrix<f64>) -> Vec<f64> {
    frames.transpose().as_slice().to_vec()
}

/// Total log-likelihood Σ_t log Σ_c w_c N(o_t; m_c, Σ_c).
pub fn log_likelihood(gmm: &DiagonalGmm, frames: &DMatrix<f64>) -> Result<f64> {
    if frames.nrows() == 0 {
        return Ok(0.0);
    }
    check_dim("log_likelihood frame dimension", gmm.dim(), frames.ncols())?;
    let scorer = Scorer::new(gmm);
    let rows = row_major(frames);
    let d = gmm.dim();
    let partial: Vec<f64> = rows
        .par_chunks(BLOCK * d)
        .map(|block| {
            let mut buf = vec![0.0; scorer.c];
            block.chunks(d).map(|x| scorer.joint(x, &mut buf)).sum::<f64>()
        })
        .collect();
    Ok(partial.into_iter().sum())
}

/// Per-frame component posteriors γ (T×C); each row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub gamma: DMatrix<f64>,
}

pub fn posterior_responsibilities(gmm: &DiagonalGmm, frames: &DMatrix<f64>) -> Result<Responsibilities> {
    let t = frames.nrows();
    let c = gmm.components();
    if t > 0 {
        check_dim("responsibilities frame dimension", gmm.dim(), frames.ncols())?;
    }
    let scorer = Scorer::new(gmm);
    let rows = row_major(frames);
    let d = gmm.dim();
    let mut gamma_rows = vec![0.0; t * c];
    gamma_rows
        .par_chunks_mut(c)
        .zip(rows.par_chunks(d))
        .for_each(|(g, x)| {
            let total = scorer.joint(x, g);
            for v in g.iter_mut() {
                *v = (*v - total).exp();
            }
            // renormalize away exp/ln rounding
            let s: f64 = g.iter().sum();
            for v in g.iter_mut() {
                *v /= s;
            }
        });
    Ok(Responsibilities {
        gamma: DMatrix::from_row_slice(t, c, &gamma_rows),
    })
}

/// Per-dimension population variance of the frames.
pub fn global_variance(frames: &DMatrix<f64>) -> DVector<f64> {
    let n = frames.nrows().max(1) as f64;
    DVector::from_iterator(
        frames.ncols(),
        frames.column_iter().map(|col| {
            let mean = col.sum() / n;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        }),
    )
}

/// `factor` times the global per-dimension variance, bounded below by a tiny constant.
pub fn variance_floor(frames: &DMatrix<f64>, factor: f64) -> DVector<f64> {
    global_variance(frames).map(|v| (factor * v).max(MIN_VARIANCE))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ seeding followed by at most 20 Lloyd iterations.
pub fn kmeans_init(frames: &DMatrix<f64>, components: usize, seed: u64) -> Result<DiagonalGmm> {
    let (t, d) = frames.shape();
    if components == 0 {
        return Err(Error::Config("component count must be positive".into()));
    }
    if t < components {
        return Err(Error::Data(format!(
            "k-means needs at least {components} frames, got {t}"
        )));
    }
    let rows = row_major(frames);
    let row = |i: usize| &rows[i * d..(i + 1) * d];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut centers: Vec<f64> = Vec::with_capacity(components * d);
    centers.extend_from_slice(row(rng.random_range(0..t)));
    let mut nearest: Vec<f64> = (0..t).map(|i| sq_dist(row(i), &centers[..d])).collect();
    for _ in 1..components {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut chosen = t - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..t)
        };
        let start = centers.len();
        centers.extend_from_slice(row(pick));
        for (i, n) in nearest.iter_mut().enumerate() {
            *n = n.min(sq_dist(row(i), &centers[start..start + d]));
        }
    }

    let mut assign = vec![usize::MAX; t];
    for _ in 0..20 {
        let mut changed = false;
        for i in 0..t {
            let best = (0..components)
                .map(|k| (k, sq_dist(row(i), &centers[k * d..(k + 1) * d])))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap();
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = vec![0.0; components * d];
        let mut counts = vec![0usize; components];
        for i in 0..t {
            counts[assign[i]] += 1;
            for j in 0..d {
                sums[assign[i] * d + j] += row(i)[j];
            }
        }
        for k in 0..components {
            if counts[k] == 0 {
                // re-seed at the point farthest from its own center
                let far = (0..t)
                    .filter(|&i| counts[assign[i]] > 1)
                    .max_by(|&a, &b| {
                        let da = sq_dist(row(a), &centers[assign[a] * d..(assign[a] + 1) * d]);
                        let db = sq_dist(row(b), &centers[assign[b] * d..(assign[b] + 1) * d]);
                        da.total_cmp(&db)
                    })
                    .unwrap_or(0);
                warn!("k-means: empty cluster {k}, re-seeding at frame {far}");
                let old = assign[far];
                counts[old] -= 1;
                for j in 0..d {
                    sums[old * d + j] -= row(far)[j];
                    sums[k * d + j] = row(far)[j];
                }
                counts[k] = 1;
                assign[far] = k;
                changed = true;
            }
        }
        for k in 0..components {
            for j in 0..d {
                centers[k * d + j] = sums[k * d + j] / counts[k] as f64;
            }
        }
        if !changed {
            break;
        }
    }

    let floor = variance_floor(frames, 1e-3);
    let mut counts = vec![0usize; components];
    let mut sq = vec![0.0; components * d];
    for i in 0..t {
        let k = assign[i];
        counts[k] += 1;
        for j in 0..d {
            sq[k * d + j] += (row(i)[j] - centers[k * d + j]).powi(2);
        }
    }
    let weights = DVector::from_iterator(components, counts.iter().map(|&n| n as f64 / t as f64));
    let means = DMatrix::from_row_slice(components, d, &centers);
    let variances = DMatrix::from_fn(components, d, |k, j| {
        (sq[k * d + j] / counts[k].max(1) as f64).max(floor[j])
    });
    let weights = &weights / weights.sum();
    DiagonalGmm::new(weights, means, variances)
}

#[derive(Debug, Clone)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative log-likelihood improvement drops below this.
    pub rel_tolerance: f64,
    pub var_floor: DVector<f64>,
}

impl EmConfig {
    /// Defaults: 25 iterations, tolerance 1e-5, floor 1e-3 × global variance.
    pub fn for_frames(frames: &DMatrix<f64>) -> Self {
        EmConfig {
            max_iters: 25,
            rel_tolerance: 1e-5,
            var_floor: variance_floor(frames, 1e-3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmFit {
    pub gmm: DiagonalGmm,
    /// Log-likelihood of the initial model followed by one entry per iteration.
    pub trace: Vec<f64>,
    /// Components that were re-initialized after their weight underflowed.
    pub reinitialized: Vec<usize>,
}

struct Suff {
    ll: f64,
    n: Vec<f64>,
    f: Vec<f64>,
    s: Vec<f64>,
    /// (log-likelihood, frame index) of the worst-explained frame
    worst: (f64, usize),
}

impl Suff {
    fn zeros(c: usize, d: usize) -> Self {
        Suff {
            ll: 0.0,
            n: vec![0.0; c],
            f: vec![0.0; c * d],
            s: vec![0.0; c * d],
            worst: (f64::INFINITY, usize::MAX),
        }
    }

    fn merge(mut self, other: Suff) -> Suff {
        self.ll += other.ll;
        for (a, b) in self.n.iter_mut().zip(other.n) {
            *a += b;
        }
        for (a, b) in self.f.iter_mut().zip(other.f) {
            *a += b;
        }
        for (a, b) in self.s.iter_mut().zip(other.s) {
            *a += b;
        }
        if other.worst.0 < self.worst.0 {
            self.worst = other.worst;
        }
        self
    }
}

fn e_step(gmm: &DiagonalGmm, rows: &[f64]) -> Suff {
    let scorer = Scorer::new(gmm);
    let (c, d) = (scorer.c, scorer.d);
    let blocks: Vec<Suff> = rows
        .par_chunks(BLOCK * d)
        .enumerate()
        .map(|(b, block)| {
            let mut acc = Suff::zeros(c, d);
            let mut post = vec![0.0; c];
            for (i, x) in block.chunks(d).enumerate() {
                let total = scorer.joint(x, &mut post);
                acc.ll += total;
                if total < acc.worst.0 {
                    acc.worst = (total, b * BLOCK + i);
                }
                for k in 0..c {
                    let g = (post[k] - total).exp();
                    acc.n[k] += g;
                    for j in 0..d {
                        acc.f[k * d + j] += g * x[j];
                        acc.s[k * d + j] += g * x[j] * x[j];
                    }
                }
            }
            acc
        })
        .collect();
    blocks
        .into_iter()
        .fold(Suff::zeros(c, d), Suff::merge)
}

/// Standard diagonal-GMM EM with variance flooring.
pub fn em_fit(init: &DiagonalGmm, frames: &DMatrix<f64>, cfg: &EmConfig) -> Result<EmFit> {
    let (t, d) = frames.shape();
    let c = init.components();
    check_dim("em_fit frame dimension", init.dim(), d)?;
    check_dim("em_fit variance floor", d, cfg.var_floor.len())?;
    if t < c {
        return Err(Error::Data(format!("EM needs at least {c} frames, got {t}")));
    }
    if cfg.var_floor.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Config("variance floor must be positive".into()));
    }
    let rows = row_major(frames);
    let global_var = global_variance(frames);
    let mut model = init.clone();
    let mut acc = e_step(&model, &rows);
    let mut trace = vec![acc.ll];
    let mut reinitialized = Vec::new();

    for _ in 0..cfg.max_iters {
        let mut weights = DVector::zeros(c);
        let mut means = DMatrix::zeros(c, d);
        let mut variances = DMatrix::zeros(c, d);
        for k in 0..c {
            let n = acc.n[k];
            if n < 1e-8 * t as f64 {
                warn!("EM: component {k} weight underflowed ({n:.3e} frames); re-initializing");
                reinitialized.push(k);
                let w = acc.worst.1.min(t - 1);
                for j in 0..d {
                    means[(k, j)] = rows[w * d + j];
                    variances[(k, j)] = global_var[j].max(cfg.var_floor[j]);
                }
                weights[k] = 1.0 / c as f64;
                continue;
            }
            weights[k] = n / t as f64;
            for j in 0..d {
                let m = acc.f[k * d + j] / n;
                means[(k, j)] = m;
                variances[(k, j)] = (acc.s[k * d + j] / n - m * m).max(cfg.var_floor[j]);
            }
        }
        let weights = &weights / weights.sum();
        model = DiagonalGmm::new(weights, means, variances)?;
        let prev = acc.ll;
        acc = e_step(&model, &rows);
        trace.push(acc.ll);
        if !acc.ll.is_finite() {
            return Err(Error::Numeric("EM log-likelihood became non-finite".into()));
        }
        if (acc.ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < cfg.rel_tolerance {
            break;
        }
    }
    Ok(EmFit {
        gmm: model,
        trace,
        reinitialized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn gmm1(mean: f64, var: f64) -> DiagonalGmm {
        DiagonalGmm::new(
            DVector::from_element(1, 1.0),
            DMatrix::from_element(1, 1, mean),
            DMatrix::from_element(1, 1, var),
        )
        .unwrap()
    }

    fn random_gmm(rng: &mut ChaCha8Rng, c: usize, d: usize) -> DiagonalGmm {
        let mut w = DVector::from_fn(c, |_, _| rng.random_range(0.1..1.0));
        w /= w.sum();
        DiagonalGmm::new(
            w,
            DMatrix::from_fn(c, d, |_, _| rng.random_range(-2.0..2.0)),
            DMatrix::from_fn(c, d, |_, _| rng.random_range(0.3..2.0)),
        )
        .unwrap()
    }

    fn naive_density(gmm: &DiagonalGmm, x: &[f64]) -> Vec<f64> {
        (0..gmm.components())
            .map(|k| {
                let mut p = gmm.weights()[k];
                for (j, &xj) in x.iter().enumerate() {
                    let v = gmm.variances()[(k, j)];
                    let z = xj - gmm.means()[(k, j)];
                    p *= (-(z * z) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
                }
                p
            })
            .collect()
    }

    #[test]
    fn standard_normal_at_mode() {
        let ll = log_likelihood(&gmm1(0.0, 1.0), &DMatrix::zeros(1, 1)).unwrap();
        assert!((ll + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn empty_frame_set_has_zero_likelihood() {
        assert_eq!(log_likelihood(&gmm1(0.0, 1.0), &DMatrix::zeros(0, 1)).unwrap(), 0.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            log_likelihood(&gmm1(0.0, 1.0), &DMatrix::zeros(3, 2)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(posterior_responsibilities(&gmm1(0.0, 1.0), &DMatrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn invalid_models_are_rejected() {
        let bad_w = DiagonalGmm::new(
            DVector::from_vec(vec![0.7, 0.7]),
            DMatrix::zeros(2, 1),
            DMatrix::from_element(2, 1, 1.0),
        );
        assert!(bad_w.is_err());
        let bad_v = DiagonalGmm::new(
            DVector::from_vec(vec![1.0]),
            DMatrix::zeros(1, 1),
            DMatrix::zeros(1, 1),
        );
        assert!(bad_v.is_err());
    }

    #[test]
    fn likelihood_matches_naive_density_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = rng.random_range(1..=4);
            let d = rng.random_range(1..=3);
            let t = rng.random_range(1..=50);
            let gmm = random_gmm(&mut rng, c, d);
            let frames = DMatrix::from_fn(t, d, |_, _| rng.random_range(-2.5..2.5));
            let oracle: f64 = (0..t)
                .map(|i| {
                    let x: Vec<f64> = frames.row(i).iter().copied().collect();
                    naive_density(&gmm, &x).iter().sum::<f64>().ln()
                })
                .sum();
            let ll = log_likelihood(&gmm, &frames).unwrap();
            assert!((ll - oracle).abs() < 1e-10 * oracle.abs().max(1.0), "{ll} vs {oracle}");
        }
    }

    #[test]
    fn responsibilities_match_direct_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gmm = random_gmm(&mut rng, 3, 2);
        let frames = DMatrix::from_fn(30, 2, |_, _| rng.random_range(-2.0..2.0));
        let r = posterior_responsibilities(&gmm, &frames).unwrap();
        for t in 0..30 {
            let x: Vec<f64> = frames.row(t).iter().copied().collect();
            let p = naive_density(&gmm, &x);
            let s: f64 = p.iter().sum();
            for k in 0..3 {
                assert!((r.gamma[(t, k)] - p[k] / s).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn single_component_responsibilities_are_one() {
        let frames = DMatrix::from_row_slice(3, 1, &[-4.0, 0.0, 9.0]);
        let r = posterior_responsibilities(&gmm1(1.0, 2.0), &frames).unwrap();
        assert!(r.gamma.iter().all(|&g| g == 1.0));
    }

    #[test]
    fn symmetric_components_split_evenly() {
        let gmm = DiagonalGmm::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, 0.0]),
            DMatrix::from_element(2, 2, 1.0),
        )
        .unwrap();
        let r = posterior_responsibilities(&gmm, &DMatrix::from_row_slice(1, 2, &[0.0, 3.0])).unwrap();
        assert!((r.gamma[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((r.gamma[(0, 1)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn far_frames_do_not_produce_nan() {
        let gmm = DiagonalGmm::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DMatrix::from_element(2, 1, 1e-3),
        )
        .unwrap();
        let r = posterior_responsibilities(&gmm, &DMatrix::from_element(1, 1, 1e6)).unwrap();
        assert!(r.gamma.iter().all(|g| g.is_finite()));
        assert!((r.gamma.row(0).sum() - 1.0).abs() < 1e-12);
        assert!(log_likelihood(&gmm, &DMatrix::from_element(1, 1, 1e6)).unwrap().is_finite());
    }

    #[test]
    fn kmeans_single_cluster_is_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = DMatrix::from_fn(40, 3, |_, _| rng.random_range(-1.0..1.0));
        let gmm = kmeans_init(&frames, 1, 9).unwrap();
        assert_eq!(gmm.weights()[0], 1.0);
        for j in 0..3 {
            let mean = frames.column(j).sum() / 40.0;
            assert!((gmm.means()[(0, j)] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_separates_two_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let centers = [[-5.0, 0.0], [5.0, 2.0]];
        let mut data = Vec::new();
        let mut truth = Vec::new();
        for i in 0..200 {
            let c = i % 2;
            truth.push(c);
            data.push(centers[c][0] + noise.sample(&mut rng));
            data.push(centers[c][1] + noise.sample(&mut rng));
        }
        let frames = DMatrix::from_row_slice(200, 2, &data);
        let gmm = kmeans_init(&frames, 2, 3).unwrap();
        // exhaustive-assignment oracle: true cloud means
        for c in 0..2 {
            let idx: Vec<usize> = (0..200).filter(|&i| truth[i] == c).collect();
            let m: Vec<f64> = (0..2)
                .map(|j| idx.iter().map(|&i| frames[(i, j)]).sum::<f64>() / idx.len() as f64)
                .collect();
            let best = (0..2)
                .map(|k| sq_dist(&m, &[gmm.means()[(k, 0)], gmm.means()[(k, 1)]]))
                .fold(f64::INFINITY, f64::min);
            assert!(best.sqrt() < 0.9, "cloud {c} center off by {}", best.sqrt());
        }
    }

    #[test]
    fn kmeans_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames = DMatrix::from_fn(100, 2, |_, _| rng.random_range(-3.0..3.0));
        assert_eq!(kmeans_init(&frames, 4, 77).unwrap(), kmeans_init(&frames, 4, 77).unwrap());
        assert!(kmeans_init(&frames, 101, 0).is_err());
    }

    #[test]
    fn one_iteration_single_gaussian_is_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(2.0, 1.5).unwrap();
        let data: Vec<f64> = (0..500).map(|_| normal.sample(&mut rng)).collect();
        let frames = DMatrix::from_row_slice(500, 1, &data);
        let mut cfg = EmConfig::for_frames(&frames);
        cfg.max_iters = 1;
        let fit = em_fit(&gmm1(0.0, 1.0), &frames, &cfg).unwrap();
        let mean = data.iter().sum::<f64>() / 500.0;
        let var = data.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 500.0;
        assert!((fit.gmm.means()[(0, 0)] - mean).abs() < 1e-10);
        assert!((fit.gmm.variances()[(0, 0)] - var).abs() < 1e-9);
        assert_eq!(fit.trace.len(), 2);
    }

    #[test]
    fn em_recovers_two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let true_means = [[-3.0, 1.0], [4.0, -2.0]];
        let noise = Normal::new(0.0, 0.7).unwrap();
        let data: Vec<f64> = (0..2000)
            .flat_map(|i| {
                let m = true_means[i % 2];
                [m[0] + noise.sample(&mut rng), m[1] + noise.sample(&mut rng)]
            })
            .collect();
        let frames = DMatrix::from_row_slice(2000, 2, &data);
        let init = kmeans_init(&frames, 2, 1).unwrap();
        let mut cfg = EmConfig::for_frames(&frames);
        cfg.max_iters = 20;
        let fit = em_fit(&init, &frames, &cfg).unwrap();
        for m in true_means {
            let best = (0..2)
                .map(|k| sq_dist(&m, &[fit.gmm.means()[(k, 0)], fit.gmm.means()[(k, 1)]]).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(best < 0.1, "mean {m:?} recovered within {best}");
        }
        for w in fit.trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs());
        }
    }

    #[test]
    fn variances_respect_the_floor() {
        let frames = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 1.0, 5.0]);
        let init = kmeans_init(&frames, 2, 0).unwrap();
        let cfg = EmConfig {
            max_iters: 5,
            rel_tolerance: 0.0,
            var_floor: DVector::from_element(1, 0.25),
        };
        let fit = em_fit(&init, &frames, &cfg).unwrap();
        assert!(fit.gmm.variances().iter().all(|&v| v >= 0.25));
    }

    #[test]
    fn underflowing_component_is_reinitialized() {
        let frames = DMatrix::from_row_slice(6, 1, &[0.0, 0.1, -0.1, 0.05, -0.05, 0.02]);
        let init = DiagonalGmm::new(
            DVector::from_vec(vec![0.5, 0.5]),
            DMatrix::from_row_slice(2, 1, &[0.0, 1e4]),
            DMatrix::from_element(2, 1, 0.01),
        )
        .unwrap();
        let cfg = EmConfig {
            max_iters: 1,
            rel_tolerance: 0.0,
            var_floor: DVector::from_element(1, 1e-4),
        };
        let fit = em_fit(&init, &frames, &cfg).unwrap();
        assert_eq!(fit.reinitialized, vec![1]);
        assert!(fit.gmm.means()[(1, 0)].abs() < 1.0);
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let gmm = random_gmm(&mut rng, 3, 2);
        let bytes = gmm.to_bytes();
        assert_eq!(&bytes[..4], b"IVXG");
        assert_eq!(bytes.len(), 16 + 8 * (3 + 6 + 6));
        assert_eq!(DiagonalGmm::from_bytes(&bytes, "t").unwrap(), gmm);
        assert!(DiagonalGmm::from_bytes(&bytes[..bytes.len() - 1], "t").is_err());
    }
}
