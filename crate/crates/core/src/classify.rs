//! Back-end classifiers over auto-encoder codes.

use std::path::Path;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Decoder, Encoder, FORMAT_VERSION};
use crate::error::{check_dim, Error, Result};

const LINEAR_MAGIC: &[u8; 4] = b"IVXC";
const MLP_MAGIC: &[u8; 4] = b"IVXM";

/// Sorted unique class names with one-hot conversion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCodec {
    classes: Vec<String>,
}

impl LabelCodec {
    pub fn fit<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut classes: Vec<String> = labels.iter().map(|l| l.as_ref().to_string()).collect();
        classes.sort();
        classes.dedup();
        LabelCodec { classes }
    }

    pub fn from_classes(classes: Vec<String>) -> Result<Self> {
        let codec = Self::fit(&classes);
        if codec.classes.len() != classes.len() {
            return Err(Error::Data("duplicate class names".into()));
        }
        Ok(codec)
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index(&self, label: &str) -> Result<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(label))
            .map_err(|_| Error::Data(format!("unknown label `{label}`; known: {}", self.classes.join(", "))))
    }

    pub fn one_hot(&self, label: &str) -> Result<DVector<f64>> {
        let mut v = DVector::zeros(self.len());
        v[self.index(label)?] = 1.0;
        Ok(v)
    }

    /// Class of the unique maximum; a tied maximum is an error.
    pub fn decode(&self, v: &DVector<f64>) -> Result<&str> {
        check_dim("one-hot vector", self.len(), v.len())?;
        let best = argmax(v.as_slice());
        let top = v[best];
        if v.iter().enumerate().any(|(i, s)| i != best && *s == top) {
            return Err(Error::Data(format!("ambiguous one-hot vector: maximum {top} is tied")));
        }
        Ok(&self.classes[best])
    }
}

/// Index of the largest score, lowest index on ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

fn check_training_set(data: &[DVector<f64>], labels: &[String]) -> Result<(LabelCodec, Vec<usize>, usize)> {
    check_dim("labels vs codes", data.len(), labels.len())?;
    let codec = LabelCodec::fit(labels);
    if codec.len() < 2 {
        return Err(Error::Data(format!(
            "classifier needs at least 2 classes, got {}",
            codec.len()
        )));
    }
    let dim = data[0].len();
    for v in data {
        check_dim("code length", dim, v.len())?;
    }
    let targets = labels.iter().map(|l| codec.index(l)).collect::<Result<Vec<_>>>()?;
    Ok((codec, targets, dim))
}

/// One-vs-rest linear max-margin model. Two classes are stored as one row `m`
/// with scores `[-m, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMarginModel {
    pub codec: LabelCodec,
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub reg_c: f64,
}

#[derive(Debug, Clone)]
pub struct LinearTraining {
    pub model: LinearMarginModel,
    /// Objective per row, recorded before training and after each epoch.
    pub objective_traces: Vec<Vec<f64>>,
}

/// ½‖w‖² + C · Σ hinge for one binary sub-problem.
fn hinge_objective(w: &DVector<f64>, b: f64, x: &DMatrix<f64>, y: &[f64], c: f64) -> f64 {
    let margins = x.tr_mul(w);
    let hinge: f64 = margins
        .iter()
        .zip(y)
        .map(|(m, yi)| (1.0 - yi * (m + b)).max(0.0))
        .sum::<f64>();
    0.5 * w.norm_squared() + c * hinge
}

fn train_binary(
    x: &DMatrix<f64>,
    y: &[f64],
    c: f64,
    epochs: usize,
    rng: &mut ChaCha8Rng,
) -> (DVector<f64>, f64, Vec<f64>) {
    let mut w = DVector::from_fn(x.nrows(), |_, _| rng.random_range(-1e-3..1e-3));
    let mut b = 0.0;
    let mut obj = hinge_objective(&w, b, x, y, c);
    let mut trace = vec![obj];
    for t in 1..=epochs {
        let margins = x.tr_mul(&w);
        let mut gw = w.clone();
        let mut gb = 0.0;
        for (i, yi) in y.iter().enumerate() {
            if yi * (margins[i] + b) < 1.0 {
                gw.axpy(-c * yi, &x.column(i), 1.0);
                gb -= c * yi;
            }
        }
        // 1/t step, halved until the objective does not increase
        let mut step = 1.0 / t as f64;
        for _ in 0..50 {
            let w_new = &w - &gw * step;
            let b_new = b - gb * step;
            let o = hinge_objective(&w_new, b_new, x, y, c);
            if o <= obj {
                w = w_new;
                b = b_new;
                obj = o;
                break;
            }
            step *= 0.5;
        }
        trace.push(obj);
    }
    (w, b, trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearConfig {
    pub reg_c: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig { reg_c: 1.0, epochs: 200, seed: 0xc1a5 }
    }
}

pub fn train_linear_margin(data: &[DVector<f64>], labels: &[String], cfg: &LinearConfig) -> Result<LinearTraining> {
    if !(cfg.reg_c > 0.0 && cfg.reg_c.is_finite()) {
        return Err(Error::Config(format!("reg_c must be positive, got {}", cfg.reg_c)));
    }
    let (codec, targets, dim) = check_training_set(data, labels)?;
    let x = DMatrix::from_columns(data);
    let rows = if codec.len() == 2 { 1 } else { codec.len() };
    let mut weights = DMatrix::zeros(rows, dim);
    let mut bias = DVector::zeros(rows);
    let mut traces = Vec::with_capacity(rows);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for k in 0..rows {
        // in the binary case the single row separates class 1 from class 0
        let positive = if rows == 1 { 1 } else { k };
        let y: Vec<f64> = targets.iter().map(|t| if *t == positive { 1.0 } else { -1.0 }).collect();
        let (w, b, trace) = train_binary(&x, &y, cfg.reg_c, cfg.epochs, &mut rng);
        weights.set_row(k, &w.transpose());
        bias[k] = b;
        traces.push(trace);
    }
    Ok(LinearTraining {
        model: LinearMarginModel { codec, weights, bias, reg_c: cfg.reg_c },
        objective_traces: traces,
    })
}

impl LinearMarginModel {
    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("code length", self.weights.ncols(), x.len())?;
        let raw = &self.weights * x + &self.bias;
        if self.codec.len() == 2 {
            Ok(DVector::from_vec(vec![-raw[0], raw[0]]))
        } else {
            Ok(raw)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(LINEAR_MAGIC);
        e.u32(FORMAT_VERSION).len(self.codec.len());
        for c in self.codec.classes() {
            e.str(c);
        }
        e.len(self.weights.nrows())
            .len(self.weights.ncols())
            .f64(self.reg_c)
            .matrix(&self.weights)
            .f64s(self.bias.iter());
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, LINEAR_MAGIC, context)?;
        d.version()?;
        let codec = read_classes(&mut d)?;
        let rows = d.len()?;
        let dim = d.len()?;
        let expected = if codec.len() == 2 { 1 } else { codec.len() };
        if rows != expected {
            return Err(d.fail(format!("{rows} weight rows for {} classes", codec.len())));
        }
        let reg_c = d.f64()?;
        let weights = d.matrix(rows, dim)?;
        let bias = d.vector(rows)?;
        d.finish()?;
        Ok(LinearMarginModel { codec, weights, bias, reg_c })
    }
}

fn read_classes(d: &mut Decoder<'_>) -> Result<LabelCodec> {
    let k = d.len()?;
    if k < 2 {
        return Err(d.fail(format!("{k} classes")));
    }
    let names = (0..k).map(|_| d.string()).collect::<Result<Vec<_>>>()?;
    let codec = LabelCodec::fit(&names);
    if codec.classes() != names.as_slice() {
        return Err(d.fail("class names are not sorted and unique"));
    }
    Ok(codec)
}

fn sigmoid_inplace(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = 1.0 / (1.0 + (-*v).exp()));
}

fn softmax_columns(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let top = col.max();
        col.apply(|v| *v = (*v - top).exp());
        let s = col.sum();
        col /= s;
    }
}

fn add_bias(m: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut col in m.column_iter_mut() {
        col += b;
    }
}

/// One sigmoid hidden layer followed by a softmax output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub codec: LabelCodec,
    /// hidden × input
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    /// classes × hidden
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradient {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_dim: 32,
            learning_rate: 0.1,
            epochs: 2000,
            batch_size: 32,
            seed: 0x3a1b,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MlpTraining {
    pub model: MlpModel,
    pub loss_trace: Vec<f64>,
}

impl MlpModel {
    pub fn random(codec: LabelCodec, input: usize, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 || input == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r1 = (6.0 / (input + hidden) as f64).sqrt();
        let w1 = DMatrix::from_fn(hidden, input, |_, _| rng.random_range(-r1..=r1));
        let k = codec.len();
        let r2 = (6.0 / (hidden + k) as f64).sqrt();
        let w2 = DMatrix::from_fn(k, hidden, |_, _| rng.random_range(-r2..=r2));
        Ok(MlpModel {
            codec,
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(k),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    fn hidden(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = &self.w1 * x;
        add_bias(&mut h, &self.b1);
        sigmoid_inplace(&mut h);
        h
    }

    fn probabilities(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut o = &self.w2 * h;
        add_bias(&mut o, &self.b2);
        softmax_columns(&mut o);
        o
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("code length", self.w1.ncols(), x.len())?;
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.probabilities(&self.hidden(&m)).column(0).into_owned())
    }

    /// Mean cross-entropy of `targets` (class indices) over the columns of `x`.
    pub fn loss(&self, x: &DMatrix<f64>, targets: &[usize]) -> f64 {
        let p = self.probabilities(&self.hidden(x));
        let total: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, t)| -p[(*t, i)].max(1e-300).ln())
            .sum();
        total / targets.len() as f64
    }

    pub fn gradient(&self, x: &DMatrix<f64>, targets: &[usize]) -> MlpGradient {
        let h = self.hidden(x);
        let mut delta2 = self.probabilities(&h);
        for (i, t) in targets.iter().enumerate() {
            delta2[(*t, i)] -= 1.0;
        }
        delta2 /= targets.len() as f64;
        let w2 = &delta2 * h.transpose();
        let b2 = delta2.column_sum();
        let mut delta1 = self.w2.tr_mul(&delta2);
        delta1.zip_apply(&h, |d, a| *d *= a * (1.0 - a));
        let w1 = &delta1 * x.transpose();
        let b1 = delta1.column_sum();
        MlpGradient { w1, b1, w2, b2 }
    }

    fn step(&mut self, g: &MlpGradient, lr: f64) {
        self.w1.zip_apply(&g.w1, |w, d| *w -= lr * d);
        self.b1.zip_apply(&g.b1, |w, d| *w -= lr * d);
        self.w2.zip_apply(&g.w2, |w, d| *w -= lr * d);
        self.b2.zip_apply(&g.b2, |w, d| *w -= lr * d);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MLP_MAGIC);
        e.u32(FORMAT_VERSION).len(self.codec.len());
        for c in self.codec.classes() {
            e.str(c);
        }
        e.len(self.w1.ncols())
            .len(self.w1.nrows())
            .matrix(&self.w1)
            .f64s(self.b1.iter())
            .matrix(&self.w2)
            .f64s(self.b2.iter());
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, MLP_MAGIC, context)?;
        d.version()?;
        let codec = read_classes(&mut d)?;
        let input = d.len()?;
        let hidden = d.len()?;
        if hidden == 0 {
            return Err(d.fail("hidden dimension 0"));
        }
        let w1 = d.matrix(hidden, input)?;
        let b1 = d.vector(hidden)?;
        let w2 = d.matrix(codec.len(), hidden)?;
        let b2 = d.vector(codec.len())?;
        d.finish()?;
        Ok(MlpModel { codec, w1, b1, w2, b2 })
    }
}

pub fn train_mlp(data: &[DVector<f64>], labels: &[String], cfg: &MlpConfig) -> Result<MlpTraining> {
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) || cfg.batch_size == 0 {
        return Err(Error::Config(format!(
            "MLP needs learning rate ≥ 0 and batch size ≥ 1, got {} and {}",
            cfg.learning_rate, cfg.batch_size
        )));
    }
    let (codec, targets, dim) = check_training_set(data, labels)?;
    let x = DMatrix::from_columns(data);
    let mut model = MlpModel::random(codec, dim, cfg.hidden_dim, cfg.seed)?;
    let initial = model.loss(&x, &targets);
    let mut trace = vec![initial];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..targets.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_columns(chunk);
            let tb: Vec<usize> = chunk.iter().map(|i| targets[*i]).collect();
            let g = model.gradient(&xb, &tb);
            model.step(&g, cfg.learning_rate);
        }
        let loss = model.loss(&x, &targets);
        if !loss.is_finite() || loss > 1e6 * initial {
            return Err(Error::Numeric(format!(
                "MLP training diverged at epoch {}: loss {loss:.4e} from {initial:.4e}; lower the learning rate",
                epoch + 1
            )));
        }
        trace.push(loss);
    }
    debug!("MLP cross-entropy {:.4} → {:.4}", initial, trace.last().copied().unwrap_or(initial));
    Ok(MlpTraining { model, loss_trace: trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    Svm,
    #[default]
    Mlp,
}

/// Either back-end behind one scoring interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Classifier {
    Linear(LinearMarginModel),
    Mlp(MlpModel),
}

impl Classifier {
    pub fn codec(&self) -> &LabelCodec {
        match self {
            Classifier::Linear(m) => &m.codec,
            Classifier::Mlp(m) => &m.codec,
        }
    }

    pub fn score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let s = match self {
            Classifier::Linear(m) => m.score(x)?,
            Classifier::Mlp(m) => m.score(x)?,
        };
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("classifier produced non-finite scores".into()));
        }
        Ok(s)
    }

    pub fn predict(&self, x: &DVector<f64>) -> Result<&str> {
        let s = self.score(x)?;
        Ok(&self.codec().classes()[argmax(s.as_slice())])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Classifier::Linear(m) => m.to_bytes(),
            Classifier::Mlp(m) => m.to_bytes(),
        }
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        match bytes.get(..4) {
            Some(m) if m == LINEAR_MAGIC => Ok(Classifier::Linear(LinearMarginModel::from_bytes(bytes, context)?)),
            Some(m) if m == MLP_MAGIC => Ok(Classifier::Mlp(MlpModel::from_bytes(bytes, context)?)),
            _ => Err(Error::format(context, "not an IVXC or IVXM classifier file")),
        }
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
