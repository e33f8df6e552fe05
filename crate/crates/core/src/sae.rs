//! Undercomplete stacked auto-encoder over i-vectors.

use std::path::Path;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::{self, Decoder, Encoder, FORMAT_VERSION};
use crate::error::{check_dim, Error, Result};

const MAGIC: &[u8; 4] = b"IVXA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Sigmoid,
    Identity,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Identity => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Activation::Sigmoid),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }

    fn apply(self, z: &mut DMatrix<f64>) {
        if self == Activation::Sigmoid {
            z.apply(|v| *v = 1.0 / (1.0 + (-*v).exp()));
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec { in_dim, out_dim, activation }
    }

    /// Encoder specs for an input dim and a list of hidden sizes, e.g. 400 and [200, 40].
    pub fn chain(input: usize, hidden: &[usize], activation: Activation) -> Vec<LayerSpec> {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.windows(2).map(|w| LayerSpec::new(w[0], w[1], activation)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// out × in
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(spec: LayerSpec) -> Self {
        DenseLayer {
            weights: DMatrix::zeros(spec.out_dim, spec.in_dim),
            bias: DVector::zeros(spec.out_dim),
            activation: spec.activation,
        }
    }

    /// Uniform ±sqrt(6 / (fan_in + fan_out)), zero bias.
    pub fn glorot(spec: LayerSpec, rng: &mut impl Rng) -> Self {
        let r = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
        let mut l = DenseLayer::zeros(spec);
        // column-major fill keeps the draw order fixed for a given shape
        l.weights.iter_mut().for_each(|w| *w = rng.random_range(-r..=r));
        l
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    fn forward(&self, input: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.weights * input;
        for mut col in z.column_iter_mut() {
            col += &self.bias;
        }
        self.activation.apply(&mut z);
        z
    }
}

/// Full symmetric stack: `layers[..code_layer]` is the encoder, the rest the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    layers: Vec<DenseLayer>,
    code_layer: usize,
    tied: bool,
}

impl SaeModel {
    pub fn new(encoder: Vec<DenseLayer>, decoder: Vec<DenseLayer>, tied: bool) -> Result<Self> {
        let l = encoder.len();
        if l == 0 || decoder.len() != l {
            return Err(Error::Config(format!(
                "auto-encoder needs matching non-empty halves, got {} encoder and {} decoder layers",
                l,
                decoder.len()
            )));
        }
        let mut layers = encoder;
        layers.extend(decoder);
        for pair in layers.windows(2) {
            check_dim("auto-encoder layer chaining", pair[0].out_dim(), pair[1].in_dim())?;
        }
        let n = layers.len();
        for i in 0..l {
            let (e, d) = (&layers[i], &layers[n - 1 - i]);
            if e.in_dim() != d.out_dim() || e.out_dim() != d.in_dim() {
                return Err(Error::Config(format!(
                    "decoder layer {} ({}→{}) does not mirror encoder layer {i} ({}→{})",
                    n - 1 - i,
                    d.in_dim(),
                    d.out_dim(),
                    e.in_dim(),
                    e.out_dim()
                )));
            }
            if tied && d.weights != e.weights.transpose() {
                return Err(Error::Config(format!("tied model: decoder layer {} is not the transpose", n - 1 - i)));
            }
        }
        let input = layers[0].in_dim();
        let code = layers[l - 1].out_dim();
        if code >= input {
            return Err(Error::Config(format!(
                "code dimension {code} must be smaller than input dimension {input}"
            )));
        }
        for layer in &layers {
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numeric("auto-encoder weights contain non-finite values".into()));
            }
        }
        Ok(SaeModel { layers, code_layer: l, tied })
    }

    /// Decoder activations mirror the encoder; the reconstruction layer is linear.
    pub fn mirrored_decoder_specs(encoder: &[LayerSpec]) -> Vec<LayerSpec> {
        (0..encoder.len())
            .rev()
            .map(|i| {
                let act = if i == 0 { Activation::Identity } else { encoder[i - 1].activation };
                LayerSpec::new(encoder[i].out_dim, encoder[i].in_dim, act)
            })
            .collect()
    }

    /// Fresh Glorot-initialised model.
    pub fn random(encoder: &[LayerSpec], tied: bool, seed: u64) -> Result<Self> {
        validate_specs(encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc: Vec<DenseLayer> = encoder.iter().map(|s| DenseLayer::glorot(*s, &mut rng)).collect();
        let mut dec: Vec<DenseLayer> = Self::mirrored_decoder_specs(encoder)
            .into_iter()
            .map(|s| DenseLayer::glorot(s, &mut rng))
            .collect();
        if tied {
            let n = dec.len();
            for (i, d) in dec.iter_mut().enumerate() {
                d.weights = enc[n - 1 - i].weights.transpose();
            }
        }
        SaeModel::new(enc, dec, tied)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn encoder(&self) -> &[DenseLayer] {
        &self.layers[..self.code_layer]
    }

    pub fn decoder(&self) -> &[DenseLayer] {
        &self.layers[self.code_layer..]
    }

    pub fn tied(&self) -> bool {
        self.tied
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.layers[self.code_layer - 1].out_dim()
    }

    /// Layer widths from input through code back to reconstruction.
    pub fn architecture(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.out_dim()));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Activations of every layer for a D×B batch; index 0 is the input.
    fn activations(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.clone());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }

    fn encode_batch(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x.clone();
        for layer in self.encoder() {
            a = layer.forward(&a);
        }
        a
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        check_dim("auto-encoder input", self.input_dim(), x.len())?;
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let acts = self.activations(&m);
        let z = acts[self.code_layer].column(0).into_owned();
        let out = acts.last().expect("non-empty").column(0).into_owned();
        Ok((z, out))
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("auto-encoder input", self.input_dim(), x.len())?;
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        Ok(self.encode_batch(&m).column(0).into_owned())
    }

    fn batch_loss(&self, x: &DMatrix<f64>) -> f64 {
        let acts = self.activations(x);
        let out = acts.last().expect("non-empty");
        (out - x).norm_squared() / x.ncols() as f64
    }

    /// Mean over samples of the squared reconstruction distance.
    pub fn reconstruction_loss(&self, batch: &[DVector<f64>]) -> Result<f64> {
        let x = to_columns(batch, self.input_dim())?;
        Ok(self.batch_loss(&x))
    }

    fn batch_gradient(&self, x: &DMatrix<f64>) -> SaeGradient {
        let acts = self.activations(x);
        let n = self.layers.len();
        let b = x.ncols() as f64;
        let mut grads = vec![(DMatrix::zeros(0, 0), DVector::zeros(0)); n];
        let mut delta = (&acts[n] - x) * (2.0 / b);
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            if layer.activation != Activation::Identity {
                delta.zip_apply(&acts[l + 1], |d, a| *d *= layer.activation.derivative_from_output(a));
            }
            let gw = &delta * acts[l].transpose();
            let gb = delta.column_sum();
            let next = if l > 0 { Some(layer.weights.tr_mul(&delta)) } else { None };
            grads[l] = (gw, gb);
            if let Some(d) = next {
                delta = d;
            }
        }
        if self.tied {
            for i in 0..self.code_layer {
                let j = n - 1 - i;
                let gd = grads[j].0.transpose();
                grads[i].0 += gd;
                grads[j].0.fill(0.0);
            }
        }
        SaeGradient { layers: grads }
    }

    /// Exact gradient of `reconstruction_loss`. For tied models the shared
    /// weight gradient is reported on the encoder layer and the decoder slot is zero.
    pub fn gradient(&self, batch: &[DVector<f64>]) -> Result<SaeGradient> {
        let x = to_columns(batch, self.input_dim())?;
        Ok(self.batch_gradient(&x))
    }

    fn step(&mut self, g: &SaeGradient, lr: f64) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(&g.layers) {
            layer.weights.zip_apply(gw, |w, d| *w -= lr * d);
            layer.bias.zip_apply(gb, |w, d| *w -= lr * d);
        }
        if self.tied {
            let n = self.layers.len();
            for i in 0..self.code_layer {
                self.layers[n - 1 - i].weights = self.layers[i].weights.transpose();
            }
        }
    }

    /// Flattened parameters in layer order: weights (column-major) then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    /// Overwrites one entry of the `parameters()` layout. Panics when out of range.
    pub fn set_parameter(&mut self, mut index: usize, value: f64) {
        for l in &mut self.layers {
            if index < l.weights.len() {
                l.weights.as_mut_slice()[index] = value;
                return;
            }
            index -= l.weights.len();
            if index < l.bias.len() {
                l.bias[index] = value;
                return;
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC);
        write_model(&mut e, self);
        e.u8(0);
        e.finish()
    }
}

fn write_model(e: &mut Encoder, m: &SaeModel) {
    e.u32(FORMAT_VERSION)
        .len(m.layers.len())
        .len(m.code_layer)
        .u8(u8::from(m.tied));
    for l in &m.layers {
        e.len(l.in_dim())
            .len(l.out_dim())
            .u8(l.activation.tag())
            .matrix(&l.weights)
            .f64s(l.bias.iter());
    }
}

fn read_model(d: &mut Decoder<'_>) -> Result<SaeModel> {
    d.version()?;
    let n = d.len()?;
    let code_layer = d.len()?;
    let tied = d.u8()? != 0;
    if n == 0 || code_layer * 2 != n {
        return Err(d.fail(format!("{n} layers with code layer {code_layer} is not symmetric")));
    }
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = d.len()?;
        let out_dim = d.len()?;
        let tag = d.u8()?;
        let activation = Activation::from_tag(tag).ok_or_else(|| d.fail(format!("unknown activation tag {tag}")))?;
        let weights = d.matrix(out_dim, in_dim)?;
        let bias = d.vector(out_dim)?;
        layers.push(DenseLayer { weights, bias, activation });
    }
    let decoder = layers.split_off(code_layer);
    SaeModel::new(layers, decoder, tied).map_err(|e| d.fail(e.to_string()))
}

fn validate_specs(specs: &[LayerSpec]) -> Result<()> {
    if specs.is_empty() {
        return Err(Error::Config("auto-encoder needs at least one layer".into()));
    }
    for (i, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::Config(format!("layer {i} has a zero dimension")));
        }
        if s.out_dim >= s.in_dim {
            return Err(Error::Config(format!(
                "layer {i} maps {}→{}; layer sizes must strictly decrease",
                s.in_dim, s.out_dim
            )));
        }
        if i > 0 && specs[i - 1].out_dim != s.in_dim {
            return Err(Error::Config(format!(
                "layer {i} input {} does not match previous output {}",
                s.in_dim,
                specs[i - 1].out_dim
            )));
        }
    }
    Ok(())
}

fn to_columns(batch: &[DVector<f64>], dim: usize) -> Result<DMatrix<f64>> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    for v in batch {
        check_dim("auto-encoder input", dim, v.len())?;
    }
    Ok(DMatrix::from_columns(batch))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradient {
    /// (∂W, ∂b) per layer, same order and shapes as the model layers.
    pub layers: Vec<(DMatrix<f64>, DVector<f64>)>,
}

impl SaeGradient {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in &self.layers {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pretrain_epochs: usize,
    pub tied: bool,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            epochs: 200,
            batch_size: 32,
            seed: 0x5ae,
            pretrain_epochs: 100,
            tied: false,
            activation: Activation::Sigmoid,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Mini-batch gradient descent with a seeded shuffle per epoch. The trace holds
/// the full-data loss before training and after each epoch.
fn descend(model: &mut SaeModel, x: &DMatrix<f64>, epochs: usize, cfg: &TrainConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = x.ncols();
    let initial = model.batch_loss(x);
    let mut trace = vec![initial];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = x.select_columns(chunk);
            let g = model.batch_gradient(&batch);
            model.step(&g, cfg.learning_rate);
        }
        let loss = model.batch_loss(x);
        if !loss.is_finite() || loss > 1e6 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Numeric(format!(
                "auto-encoder training diverged at epoch {}: loss {loss:.4e} from initial {initial:.4e}; lower the learning rate (now {})",
                epoch + 1,
                cfg.learning_rate
            )));
        }
        trace.push(loss);
    }
    debug!("auto-encoder loss {:.6e} → {:.6e} over {epochs} epochs", initial, trace.last().copied().unwrap_or(initial));
    Ok(trace)
}

/// Greedy training: each layer learns to reconstruct the previous layer's codes.
pub fn pretrain_layerwise(specs: &[LayerSpec], data: &[DVector<f64>], cfg: &TrainConfig) -> Result<SaeModel> {
    validate_specs(specs)?;
    let mut codes = to_columns(data, specs[0].in_dim)?;
    let decoder_specs = SaeModel::mirrored_decoder_specs(specs);
    let l = specs.len();
    let mut encoder = Vec::with_capacity(l);
    let mut decoder = vec![None; l];
    for (k, spec) in specs.iter().enumerate() {
        let layer_seed = cfg.seed.wrapping_add(k as u64 + 1);
        let mut single = SaeModel::random(&[*spec], cfg.tied, layer_seed)?;
        // the single-layer decoder takes the activation its mirror has in the full stack
        single.layers[1].activation = decoder_specs[l - 1 - k].activation;
        descend(&mut single, &codes, cfg.pretrain_epochs, cfg, layer_seed ^ 0x9e37_79b9)?;
        codes = single.encode_batch(&codes);
        let mut parts = single.layers.into_iter();
        encoder.push(parts.next().expect("encoder layer"));
        decoder[l - 1 - k] = parts.next();
    }
    let decoder = decoder.into_iter().map(|d| d.expect("every layer trained")).collect();
    SaeModel::new(encoder, decoder, cfg.tied)
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub model: SaeModel,
    pub loss_trace: Vec<f64>,
}

pub fn finetune(model: SaeModel, data: &[DVector<f64>], cfg: &TrainConfig) -> Result<Finetuned> {
    let x = to_columns(data, model.input_dim())?;
    let mut model = model;
    let loss_trace = descend(&mut model, &x, cfg.epochs, cfg, cfg.seed)?;
    Ok(Finetuned { model, loss_trace })
}

/// Per-dimension standardisation fitted on training i-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: DVector<f64>,
    pub scale: DVector<f64>,
}

impl Standardizer {
    pub fn fit(data: &[DVector<f64>]) -> Result<Self> {
        let first = data.first().ok_or_else(|| Error::Data("cannot standardise an empty set".into()))?;
        let dim = first.len();
        let n = data.len() as f64;
        let mut mean = DVector::zeros(dim);
        for v in data {
            check_dim("standardiser input", dim, v.len())?;
            mean += v;
        }
        mean /= n;
        let mut var = DVector::<f64>::zeros(dim);
        for v in data {
            let d = v - &mean;
            var += d.component_mul(&d);
        }
        var /= n;
        let mut flat = 0;
        let scale = var.map(|s| {
            if s > 1e-24 {
                s.sqrt()
            } else {
                flat += 1;
                1.0
            }
        });
        if flat > 0 {
            warn!("standardiser: {flat} constant dimension(s) left unscaled");
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("standardiser input", self.mean.len(), v.len())?;
        Ok((v - &self.mean).component_div(&self.scale))
    }
}

/// A trained network plus the input scaling it expects; this is what IVXA files hold.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeArtifact {
    pub model: SaeModel,
    pub scaler: Option<Standardizer>,
}

#[derive(Debug, Clone)]
pub struct SaeTraining {
    pub artifact: SaeArtifact,
    pub loss_trace: Vec<f64>,
}

impl SaeArtifact {
    pub fn encode(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.scaler {
            Some(s) => self.model.encode(&s.apply(v)?),
            None => self.model.encode(v),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new(MAGIC);
        write_model(&mut e, &self.model);
        match &self.scaler {
            None => {
                e.u8(0);
            }
            Some(s) => {
                e.u8(1).len(s.mean.len()).f64s(s.mean.iter()).f64s(s.scale.iter());
            }
        }
        e.finish()
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut d = Decoder::new(bytes, MAGIC, context)?;
        let model = read_model(&mut d)?;
        let scaler = match d.u8()? {
            0 => None,
            1 => {
                let dim = d.len()?;
                if dim != model.input_dim() {
                    return Err(d.fail(format!("scaler dim {dim} vs. model input {}", model.input_dim())));
                }
                let mean = d.vector(dim)?;
                let scale = d.vector(dim)?;
                if scale.iter().any(|s| !(*s > 0.0)) {
                    return Err(d.fail("non-positive scale"));
                }
                Some(Standardizer { mean, scale })
            }
            t => return Err(d.fail(format!("unknown scaler flag {t}"))),
        };
        d.finish()?;
        Ok(SaeArtifact { model, scaler })
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

/// Standardise, pretrain layer by layer, then fine-tune the whole stack.
pub fn train_sae(data: &[DVector<f64>], hidden: &[usize], cfg: &TrainConfig) -> Result<SaeTraining> {
    let scaler = Standardizer::fit(data)?;
    let scaled = data.iter().map(|v| scaler.apply(v)).collect::<Result<Vec<_>>>()?;
    let specs = LayerSpec::chain(scaler.mean.len(), hidden, cfg.activation);
    let model = pretrain_layerwise(&specs, &scaled, cfg)?;
    let tuned = finetune(model, &scaled, cfg)?;
    Ok(SaeTraining {
        artifact: SaeArtifact { model: tuned.model, scaler: Some(scaler) },
        loss_trace: tuned.loss_trace,
    })
}
