//! LDA + WCCN + cosine scoring over i-vectors.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector};

use crate::binio::{self, Decoder, Encoder, FORMAT_VERSION};
use crate::error::{check_dim, Error, Result};

const TRANSFORM_MAGIC: &[u8; 4] = b"IVXL";

/// Rows of `data` grouped by label, in label order.
fn group<'a>(data: &'a [DVector<f64>], labels: &'a [String]) -> Result<BTreeMap<&'a str, Vec<&'a DVector<f64>>>> {
    check_dim("labels vs vectors", data.len(), labels.len())?;
    let dim = data.first().map(|v| v.len()).unwrap_or(0);
    let mut groups: BTreeMap<&str, Vec<&DVector<f64>>> = BTreeMap::new();
    for (v, l) in data.iter().zip(labels) {
        check_dim("vector length", dim, v.len())?;
        groups.entry(l.as_str()).or_default().push(v);
    }
    Ok(groups)
}

fn mean_of(vs: &[&DVector<f64>]) -> DVector<f64> {
    let mut m = DVector::zeros(vs[0].len());
    for v in vs {
        m += *v;
    }
    m / vs.len() as f64
}

/// Pooled within-class scatter Σ_k Σ_i (x − μ_k)(x − μ_k)ᵀ divided by N.
fn within_class_covariance(groups: &BTreeMap<&str, Vec<&DVector<f64>>>, dim: usize) -> DMatrix<f64> {
    let mut sw = DMatrix::zeros(dim, dim);
    let mut n = 0usize;
    for members in groups.values() {
        let mu = mean_of(members);
        for v in members {
            let z = *v - &mu;
            sw.ger(1.0, &z, &z, 1.0);
        }
        n += members.len();
    }
    sw / n.max(1) as f64
}

fn ridge(m: &DMatrix<f64>) -> f64 {
    let t = m.trace();
    if t > 0.0 {
        1e-6 * t / m.nrows() as f64
    } else {
        1e-12
    }
}

fn canonical_sign(mut col: nalgebra::DVectorViewMut<'_, f64>) {
    let pivot = col
        .iter()
        .copied()
        .max_by(|a, b| a.abs().total_cmp(&b.abs()))
        .unwrap_or(0.0);
    if pivot < 0.0 {
        col.neg_mut();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdaProjection {
    /// R×K, unit-norm columns ordered by decreasing discriminability.
    pub basis: DMatrix<f64>,
    pub class_means_used: usize,
}

/// Fisher LDA: top generalized eigenvectors of (S_b, S_w + εI).
pub fn lda_fit(data: &[DVector<f64>], labels: &[String], out_dim: usize) -> Result<LdaProjection> {
    let groups = group(data, labels)?;
    let classes = groups.len();
    if classes < 2 {
        return Err(Error::Data(format!("LDA needs at least 2 classes, got {classes}")));
    }
    let dim = data[0].len();
    if out_dim == 0 || out_dim > (classes - 1).min(dim) {
        return Err(Error::Config(format!(
            "LDA output dimension {out_dim} must lie in 1..={}",
            (classes - 1).min(dim)
        )));
    }
    let n = data.len() as f64;
    let all: Vec<&DVector<f64>> = data.iter().collect();
    let global = mean_of(&all);
    let mut sb = DMatrix::zeros(dim, dim);
    for members in groups.values() {
        let d = mean_of(members) - &global;
        sb.ger(members.len() as f64 / n, &d, &d, 1.0);
    }
    let mut sw = within_class_covariance(&groups, dim);
    let eps = ridge(&sw);
    for i in 0..dim {
        sw[(i, i)] += eps;
    }
    let chol = Cholesky::new(sw).ok_or_else(|| {
        Error::Numeric("regularized within-class scatter is not positive definite".into())
    })?;
    let l = chol.l();
    // M = L⁻¹ S_b L⁻ᵀ
    let left = l
        .solve_lower_triangular(&sb)
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    let m = l
        .solve_lower_triangular(&left.transpose())
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    let m = (&m + m.transpose()) * 0.5;
    let eig = m.symmetric_eigen();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = DMatrix::from_fn(dim, out_dim, |r, c| eig.eigenvectors[(r, order[c])]);
    let mut basis = l
        .transpose()
        .solve_upper_triangular(&top)
        .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;
    for mut col in basis.column_iter_mut() {
        let norm = col.norm();
        if norm > 0.0 {
            col /= norm;
        }
    }
    for c in 0..out_dim {
        canonical_sign(basis.column_mut(c));
    }
    Ok(LdaProjection {
        basis,
        class_means_used: classes,
    })
}

pub fn lda_project(p: &LdaProjection, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("LDA input", p.basis.nrows(), v.len())?;
    Ok(p.basis.tr_mul(v))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WccnTransform {
    /// Lower-triangular B with B·Bᵀ = W⁻¹.
    pub cholesky_factor: DMatrix<f64>,
    /// Whether W had to be ridged before inversion.
    pub regularized: bool,
}

/// Fits B from the pooled within-class covariance W; every class needs ≥ 2 samples.
pub fn wccn_fit(data: &[DVector<f64>], labels: &[String]) -> Result<WccnTransform> {
    let groups = group(data, labels)?;
    if let Some((label, members)) = groups.iter().find(|(_, m)| m.len() < 2) {
        return Err(Error::Data(format!(
            "WCCN needs ≥ 2 samples per class; `{label}` has {}",
            members.len()
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("WCCN needs data".into()));
    }
    let dim = data[0].len();
    let w = within_class_covariance(&groups, dim);
    let (chol, regularized) = match Cholesky::new(w.clone()) {
        Some(c) if c.l().diagonal().min() > 1e-12 * w.diagonal().max().sqrt() => (c, false),
        _ => {
            let eps = ridge(&w);
            warn!("WCCN: within-class covariance is singular, adding ridge {eps:.3e}");
            let ridged = &w + DMatrix::identity(dim, dim) * eps;
            let c = Cholesky::new(ridged)
                .ok_or_else(|| Error::Numeric("ridged within-class covariance not SPD".into()))?;
            (c, true)
        }
    };
    let w_inv = chol.inverse();
    let w_inv = (&w_inv + w_inv.transpose()) * 0.5;
    let b = Cholesky::new(w_inv)
        .ok_or_else(|| Error::Numeric("inverse within-class covariance not SPD".into()))?
        .l();
    Ok(WccnTransform {
        cholesky_factor: b,
        regularized,
    })
}

/// v ↦ Bᵀv, which whitens the within-class covariance.
pub fn wccn_apply(t: &WccnTransform, v: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("WCCN input", t.cholesky_factor.nrows(), v.len())?;
    Ok(t.cholesky_factor.tr_mul(v))
}

pub fn cosine_score(a: &DVector<f64>, b: &DVector<f64>) -> Result<f64> {
    check_dim("cosine operands", a.len(), b.len())?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Data("cosine score of a zero vector".into()));
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// The LDA basis and WCCN factor, persisted as IVXL.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineTransform {
    pub lda: LdaProjection,
    pub wccn: WccnTransform,
}

impl BaselineTransform {
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        wccn_apply(&self.wccn, &lda_project(&self.lda, v)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.lda.basis.ncols();
        let mut e = Encoder::new(TRANSFORM_MAGIC);
        e.u32(FORMAT_VERSION)
            .len(self.lda.basis.nrows())
            .len(k)
            .len(self.lda.class_means_used)
            .matrix(&self.lda.basis)
            .matrix(&self.wccn.cholesky_factor)
            .u8(u8::from(self.wccn.regularized));
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, TRANSFORM_MAGIC, context)?;
        d.version()?;
        let r = d.len()?;
        let k = d.len()?;
        let classes = d.len()?;
        let basis = d.matrix(r, k)?;
        let factor = d.matrix(k, k)?;
        let regularized = d.u8()? != 0;
        d.finish()?;
        Ok(BaselineTransform {
            lda: LdaProjection {
                basis,
                class_means_used: classes,
            },
            wccn: WccnTransform {
                cholesky_factor: factor,
                regularized,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, &path.display().to_string())
    }
}

/// Complete cosine back-end: LDA → WCCN → global centering → per-class mean models.
#[derive(Debug, Clone)]
pub struct BaselineBackend {
    pub transform: BaselineTransform,
    pub center: DVector<f64>,
    /// (class label, model vector) sorted by label.
    pub class_models: Vec<(String, DVector<f64>)>,
}

impl BaselineBackend {
    /// `out_dim = None` picks min(classes − 1, 200).
    pub fn fit(data: &[DVector<f64>], labels: &[String], out_dim: Option<usize>) -> Result<Self> {
        let classes = group(data, labels)?.len();
        let dim = data.first().map_or(0, |v| v.len());
        let k = out_dim.unwrap_or_else(|| classes.saturating_sub(1).min(200).min(dim));
        let lda = lda_fit(data, labels, k)?;
        let projected = data
            .iter()
            .map(|v| lda_project(&lda, v))
            .collect::<Result<Vec<_>>>()?;
        let wccn = wccn_fit(&projected, labels)?;
        let transform = BaselineTransform { lda, wccn };
        let mapped = projected
            .iter()
            .map(|v| wccn_apply(&transform.wccn, v))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&DVector<f64>> = mapped.iter().collect();
        let center = mean_of(&refs);
        let centered: Vec<DVector<f64>> = mapped.iter().map(|v| v - &center).collect();
        let class_models = group(&centered, labels)?
            .into_iter()
            .map(|(label, members)| (label.to_string(), mean_of(&members)))
            .collect();
        Ok(BaselineBackend {
            transform,
            center,
            class_models,
        })
    }

    pub fn classes(&self) -> Vec<String> {
        self.class_models.iter().map(|(l, _)| l.clone()).collect()
    }

    /// Cosine score against every class model, in class order.
    pub fn score(&self, v: &DVector<f64>) -> Result<Vec<f64>> {
        let x = self.transform.apply(v)? - &self.center;
        self.class_models
            .iter()
            .map(|(_, m)| cosine_score(&x, m).or(Ok(0.0)))
            .collect()
    }
}
