//! Two-logit detectors, input gradients, class activation maps and the
//! flooding-regularised Adam training step.
//!
//! Everything runs in `f64` on the CPU. A detector consumes `C x H x W` tensors
//! holding pixels scaled to `[0, 1]` and produces one [`LogitPair`] per image.
//! A single [`Detector::backward`] call is one forward plus one backward pass
//! over the whole batch; the upstream closure sees every logit before any
//! gradient is propagated, so batch-level losses need no second forward.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{resize_planes, Image};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("batch shape error: {0}")]
    BatchShape(String),
    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),
    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),
    #[error("training diverged at loss {loss}: {detail}")]
    TrainingDiverged { loss: f64, detail: String },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint checksum error: {0}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DetectorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Real => "real",
            Label::Fake => "fake",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "0" => Ok(Label::Real),
            "fake" | "1" => Ok(Label::Fake),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogitPair {
    pub real: f64,
    pub fake: f64,
}

impl LogitPair {
    /// Argmax of the two logits; ties resolve to `Real`.
    pub fn predicted(&self) -> Label {
        if self.fake > self.real {
            Label::Fake
        } else {
            Label::Real
        }
    }

    /// Softmax probability of the fake class.
    pub fn fake_score(&self) -> f64 {
        1.0 / (1.0 + (self.real - self.fake).exp())
    }

    pub fn get(&self, label: Label) -> f64 {
        match label {
            Label::Real => self.real,
            Label::Fake => self.fake,
        }
    }
}

/// Scalar whose input gradient is requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitCombination {
    FakeMinusReal,
    Real,
    Fake,
}

impl LogitCombination {
    /// Coefficients on `(o_real, o_fake)`.
    pub fn weights(self) -> [f64; 2] {
        match self {
            LogitCombination::FakeMinusReal => [-1.0, 1.0],
            LogitCombination::Real => [1.0, 0.0],
            LogitCombination::Fake => [0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Want {
    pub inputs: bool,
    pub params: bool,
}

impl Want {
    pub const INPUTS: Want = Want {
        inputs: true,
        params: false,
    };
    pub const PARAMS: Want = Want {
        inputs: false,
        params: true,
    };
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub logits: Vec<LogitPair>,
    /// Per-image gradient of the upstream-weighted logits w.r.t. the input.
    pub inputs: Option<Vec<Array3<f64>>>,
    /// Batch-summed gradient w.r.t. the flat parameter vector.
    pub params: Option<Vec<f64>>,
}

/// Last-convolutional-layer activations and the linear head that reads their
/// global average.
#[derive(Debug, Clone)]
pub struct CamFeatures {
    /// `K x H' x W'` feature maps.
    pub maps: Array3<f64>,
    /// `2 x K` head weights, row 0 real, row 1 fake.
    pub head: Array2<f64>,
}

/// Upstream gradient callback: receives all logits of the batch and returns
/// `d scalar / d (o_real, o_fake)` for each image.
pub type Upstream<'a> = dyn FnMut(&[LogitPair]) -> Vec<[f64; 2]> + 'a;

pub trait Detector: Send + Sync {
    fn architecture(&self) -> Architecture;

    fn forward(&self, batch: &[Array3<f64>]) -> Result<Vec<LogitPair>>;

    fn backward(&self, batch: &[Array3<f64>], upstream: &mut Upstream<'_>, want: Want) -> Result<Gradients>;

    fn parameters(&self) -> &[f64];

    fn parameters_mut(&mut self) -> &mut [f64];

    fn cam_features(&self, _input: &Array3<f64>) -> Result<CamFeatures> {
        Err(DetectorError::UnsupportedArchitecture(format!(
            "{} has no global-average-pool + linear head",
            self.architecture().id()
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnConfig {
    pub in_channels: usize,
    /// Output channels of each 3x3 convolution block.
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: vec![8, 16, 16, 16],
            strides: vec![2, 2, 2, 2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Architecture {
    ReferenceCnn(CnnConfig),
    Linear {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl Architecture {
    pub fn id(&self) -> &'static str {
        match self {
            Architecture::ReferenceCnn(_) => "reference-cnn",
            Architecture::Linear { .. } => "linear",
        }
    }

    /// Randomly initialised detector drawn from `rng`.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Box<dyn Detector>> {
        Ok(match self {
            Architecture::ReferenceCnn(cfg) => Box::new(ReferenceCnn::new(cfg.clone(), rng)?),
            Architecture::Linear {
                channels,
                height,
                width,
            } => Box::new(LinearDetector::random(*channels, *height, *width, rng)),
        })
    }

    fn with_parameters(&self, params: Vec<f64>) -> Result<Box<dyn Detector>> {
        Ok(match self {
            Architecture::ReferenceCnn(cfg) => Box::new(ReferenceCnn::from_parameters(cfg.clone(), params)?),
            Architecture::Linear {
                channels,
                height,
                width,
            } => Box::new(LinearDetector::from_parameters(*channels, *height, *width, params)?),
        })
    }
}

fn check_batch(batch: &[Array3<f64>], channels: usize) -> Result<(usize, usize, usize)> {
    let first = batch
        .first()
        .ok_or_else(|| DetectorError::BatchShape("empty batch".into()))?
        .dim();
    if let Some(bad) = batch.iter().find(|x| x.dim() != first) {
        return Err(DetectorError::BatchShape(format!(
            "mixed shapes {:?} and {:?}",
            first,
            bad.dim()
        )));
    }
    if first.0 != channels {
        return Err(DetectorError::BatchShape(format!(
            "expected {channels} channels, got {}",
            first.0
        )));
    }
    Ok(first)
}

fn sum_param_grads(per_sample: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for g in per_sample {
        for (t, v) in total.iter_mut().zip(g) {
            *t += v;
        }
    }
    total
}

fn check_finite(g: &Gradients) -> Result<()> {
    let bad_input = g
        .inputs
        .as_ref()
        .is_some_and(|xs| xs.iter().any(|x| x.iter().any(|v| !v.is_finite())));
    if bad_input {
        return Err(DetectorError::GradientUnavailable(
            "non-finite input gradient".into(),
        ));
    }
    Ok(())
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    stride: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl ConvLayer {
    fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1)
    }

    /// Output columns `ox` with `1 <= ox * stride + kx <= w`.
    fn col_range(&self, kx: usize, w: usize, ow: usize) -> std::ops::Range<usize> {
        if kx > w {
            return 0..0;
        }
        let lo = usize::from(kx == 0);
        let hi = ((w - kx) / self.stride + 1).min(ow);
        lo..hi.max(lo)
    }

    fn forward(&self, params: &[f64], x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = self.out_size(h, w);
        let s = self.stride;
        let weights = &params[self.weight_offset..self.weight_offset + self.cout * self.cin * 9];
        let bias = &params[self.bias_offset..self.bias_offset + self.cout];
        let mut out = vec![0.0; self.cout * oh * ow];
        for co in 0..self.cout {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            plane.fill(bias[co]);
            for ci in 0..self.cin {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wv = weights[((co * self.cin + ci) * 3 + ky) * 3 + kx];
                        let cols = self.col_range(kx, w, ow);
                        for oy in 0..oh {
                            let iy = oy * s + ky;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let row = &xc[(iy - 1) * w..iy * w];
                            let orow = &mut plane[oy * ow..(oy + 1) * ow];
                            for ox in cols.clone() {
                                orow[ox] += wv * row[ox * s + kx - 1];
                            }
                        }
                    }
                }
            }
        }
        (out, oh, ow)
    }

    /// Accumulates weight/bias gradients into `dparams` and, when requested,
    /// returns the gradient w.r.t. the layer input.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        h: usize,
        w: usize,
        dpre: &[f64],
        dparams: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let (oh, ow) = self.out_size(h, w);
        let s = self.stride;
        let weights = &params[self.weight_offset..self.weight_offset + self.cout * self.cin * 9];
        let mut dx = want_input.then(|| vec![0.0; self.cin * h * w]);
        let mut dparams = dparams;
        for co in 0..self.cout {
            let dplane = &dpre[co * oh * ow..(co + 1) * oh * ow];
            if let Some(dp) = dparams.as_deref_mut() {
                dp[self.bias_offset + co] += dplane.iter().sum::<f64>();
            }
            for ci in 0..self.cin {
                let xc = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let widx = ((co * self.cin + ci) * 3 + ky) * 3 + kx;
                        let wv = weights[widx];
                        let cols = self.col_range(kx, w, ow);
                        let mut dw = 0.0;
                        for oy in 0..oh {
                            let iy = oy * s + ky;
                            if iy == 0 || iy > h {
                                continue;
                            }
                            let drow = &dplane[oy * ow..(oy + 1) * ow];
                            let base = ci * h * w + (iy - 1) * w;
                            if dparams.is_some() {
                                let row = &xc[(iy - 1) * w..iy * w];
                                for ox in cols.clone() {
                                    dw += drow[ox] * row[ox * s + kx - 1];
                                }
                            }
                            if let Some(dx) = dx.as_mut() {
                                let dxrow = &mut dx[base..base + w];
                                for ox in cols.clone() {
                                    dxrow[ox * s + kx - 1] += wv * drow[ox];
                                }
                            }
                        }
                        if let Some(dp) = dparams.as_deref_mut() {
                            dp[self.weight_offset + widx] += dw;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Convolution blocks (3x3, padding 1, SiLU) followed by global average
/// pooling and a linear two-class head.
#[derive(Debug, Clone)]
pub struct ReferenceCnn {
    config: CnnConfig,
    layers: Vec<ConvLayer>,
    head_weight_offset: usize,
    head_bias_offset: usize,
    params: Vec<f64>,
}

struct CnnTrace {
    /// Input of every conv layer plus the final activation, with spatial dims.
    acts: Vec<(Vec<f64>, usize, usize)>,
    pres: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    logits: LogitPair,
}

impl ReferenceCnn {
    fn layout(config: &CnnConfig) -> Result<(Vec<ConvLayer>, usize, usize, usize)> {
        if config.widths.is_empty() || config.widths.len() != config.strides.len() {
            return Err(DetectorError::Config(
                "widths and strides must be non-empty and equally long".into(),
            ));
        }
        if config.in_channels == 0 || config.widths.contains(&0) || config.strides.contains(&0) {
            return Err(DetectorError::Config("zero width, stride or channel count".into()));
        }
        let mut layers = Vec::with_capacity(config.widths.len());
        let mut offset = 0;
        let mut cin = config.in_channels;
        for (&cout, &stride) in config.widths.iter().zip(&config.strides) {
            let weight_offset = offset;
            offset += cout * cin * 9;
            let bias_offset = offset;
            offset += cout;
            layers.push(ConvLayer {
                cin,
                cout,
                stride,
                weight_offset,
                bias_offset,
            });
            cin = cout;
        }
        let head_weight_offset = offset;
        offset += 2 * cin;
        let head_bias_offset = offset;
        offset += 2;
        Ok((layers, head_weight_offset, head_bias_offset, offset))
    }

    /// He-normal convolution weights, `N(0, 1/K)` head, zero biases.
    pub fn new<R: Rng + ?Sized>(config: CnnConfig, rng: &mut R) -> Result<Self> {
        let (layers, hw, hb, len) = Self::layout(&config)?;
        let mut params = vec![0.0; len];
        for layer in &layers {
            let std = (2.0 / (layer.cin * 9) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            for p in &mut params[layer.weight_offset..layer.weight_offset + layer.cout * layer.cin * 9] {
                *p = normal.sample(rng);
            }
        }
        let k = *config.widths.last().expect("non-empty widths");
        let normal = Normal::new(0.0, (1.0 / k as f64).sqrt()).expect("finite std");
        for p in &mut params[hw..hb] {
            *p = normal.sample(rng);
        }
        Ok(Self {
            config,
            layers,
            head_weight_offset: hw,
            head_bias_offset: hb,
            params,
        })
    }

    pub fn from_parameters(config: CnnConfig, params: Vec<f64>) -> Result<Self> {
        let (layers, hw, hb, len) = Self::layout(&config)?;
        if params.len() != len {
            return Err(DetectorError::Format(format!(
                "expected {len} parameters, got {}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            layers,
            head_weight_offset: hw,
            head_bias_offset: hb,
            params,
        })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(Cout, Cin, 3, 3)` kernel of conv layer `i`.
    pub fn conv_weights(&self, i: usize) -> ArrayView4<'_, f64> {
        let l = &self.layers[i];
        ArrayView4::from_shape(
            (l.cout, l.cin, 3, 3),
            &self.params[l.weight_offset..l.weight_offset + l.cout * l.cin * 9],
        )
        .expect("layout matches")
    }

    pub fn conv_bias(&self, i: usize) -> &[f64] {
        let l = &self.layers[i];
        &self.params[l.bias_offset..l.bias_offset + l.cout]
    }

    pub fn conv_stride(&self, i: usize) -> usize {
        self.layers[i].stride
    }

    /// `2 x K` head weights.
    pub fn head_weights(&self) -> ArrayView2<'_, f64> {
        let k = self.head_bias_offset - self.head_weight_offset;
        ArrayView2::from_shape((2, k / 2), &self.params[self.head_weight_offset..self.head_bias_offset])
            .expect("layout matches")
    }

    pub fn head_bias(&self) -> [f64; 2] {
        [
            self.params[self.head_bias_offset],
            self.params[self.head_bias_offset + 1],
        ]
    }

    fn trace(&self, x: &Array3<f64>) -> CnnTrace {
        let (_, h, w) = x.dim();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        let mut pres = Vec::with_capacity(self.layers.len());
        let input: Vec<f64> = x.iter().copied().collect();
        acts.push((input, h, w));
        for layer in &self.layers {
            let (a, ah, aw) = acts.last().expect("at least the input");
            let (pre, oh, ow) = layer.forward(&self.params, a, *ah, *aw);
            let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
            pres.push(pre);
            acts.push((act, oh, ow));
        }
        let (last, lh, lw) = acts.last().expect("final activation");
        let area = (lh * lw) as f64;
        let k = last.len() / (lh * lw);
        let pooled: Vec<f64> = (0..k)
            .map(|c| last[c * lh * lw..(c + 1) * lh * lw].iter().sum::<f64>() / area)
            .collect();
        let head = self.head_weights();
        let [br, bf] = self.head_bias();
        let dot = |row: usize| -> f64 { pooled.iter().zip(head.row(row)).map(|(a, b)| a * b).sum() };
        let logits = LogitPair {
            real: dot(0) + br,
            fake: dot(1) + bf,
        };
        CnnTrace {
            acts,
            pres,
            pooled,
            logits,
        }
    }

    fn backprop(&self, trace: &CnnTrace, dlogits: [f64; 2], want: Want) -> (Option<Array3<f64>>, Option<Vec<f64>>) {
        let mut dparams = want.params.then(|| vec![0.0; self.params.len()]);
        let head = self.head_weights();
        let k = trace.pooled.len();
        if let Some(dp) = dparams.as_mut() {
            for c in 0..2 {
                for (j, &p) in trace.pooled.iter().enumerate() {
                    dp[self.head_weight_offset + c * k + j] += dlogits[c] * p;
                }
                dp[self.head_bias_offset + c] += dlogits[c];
            }
        }
        let (_, lh, lw) = trace.acts.last().expect("final activation");
        let area = lh * lw;
        let mut dact = vec![0.0; k * area];
        for j in 0..k {
            let g = (dlogits[0] * head[[0, j]] + dlogits[1] * head[[1, j]]) / area as f64;
            dact[j * area..(j + 1) * area].fill(g);
        }
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let dpre: Vec<f64> = trace.pres[idx]
                .iter()
                .zip(&dact)
                .map(|(&p, &d)| d * silu_grad(p))
                .collect();
            let (x, h, w) = &trace.acts[idx];
            let need_input = idx > 0 || want.inputs;
            match layer.backward(&self.params, x, *h, *w, &dpre, dparams.as_deref_mut(), need_input) {
                Some(dx) => dact = dx,
                None => break,
            }
        }
        let dinput = want.inputs.then(|| {
            let (_, h, w) = trace.acts[0];
            Array3::from_shape_vec((self.config.in_channels, h, w), dact).expect("input layout")
        });
        (dinput, dparams)
    }
}

impl Detector for ReferenceCnn {
    fn architecture(&self) -> Architecture {
        Architecture::ReferenceCnn(self.config.clone())
    }

    fn forward(&self, batch: &[Array3<f64>]) -> Result<Vec<LogitPair>> {
        check_batch(batch, self.config.in_channels)?;
        Ok(batch.par_iter().map(|x| self.trace(x).logits).collect())
    }

    fn backward(&self, batch: &[Array3<f64>], upstream: &mut Upstream<'_>, want: Want) -> Result<Gradients> {
        check_batch(batch, self.config.in_channels)?;
        let traces: Vec<CnnTrace> = batch.par_iter().map(|x| self.trace(x)).collect();
        let logits: Vec<LogitPair> = traces.iter().map(|t| t.logits).collect();
        let seeds = upstream(&logits);
        if seeds.len() != batch.len() {
            return Err(DetectorError::BatchShape(format!(
                "upstream returned {} gradients for {} images",
                seeds.len(),
                batch.len()
            )));
        }
        let results: Vec<(Option<Array3<f64>>, Option<Vec<f64>>)> = traces
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(t, &s)| self.backprop(t, s, want))
            .collect();
        let (inputs, params): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let grads = Gradients {
            logits,
            inputs: want.inputs.then(|| inputs.into_iter().map(|x| x.expect("requested")).collect()),
            params: want.params.then(|| {
                sum_param_grads(
                    params.into_iter().map(|p| p.expect("requested")).collect(),
                    self.params.len(),
                )
            }),
        };
        check_finite(&grads)?;
        Ok(grads)
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn cam_features(&self, input: &Array3<f64>) -> Result<CamFeatures> {
        check_batch(std::slice::from_ref(input), self.config.in_channels)?;
        let trace = self.trace(input);
        let (last, lh, lw) = trace.acts.last().expect("final activation");
        let k = last.len() / (lh * lw);
        Ok(CamFeatures {
            maps: Array3::from_shape_vec((k, *lh, *lw), last.clone()).expect("feature layout"),
            head: self.head_weights().to_owned(),
        })
    }
}

/// `o = sum(w * x) + b` per class. Has no convolutional features, so CAM is
/// unsupported.
#[derive(Debug, Clone)]
pub struct LinearDetector {
    shape: (usize, usize, usize),
    params: Vec<f64>,
}

impl LinearDetector {
    pub fn new(weights_real: Array3<f64>, weights_fake: Array3<f64>, bias: [f64; 2]) -> Result<Self> {
        if weights_real.dim() != weights_fake.dim() {
            return Err(DetectorError::Config("real/fake weight shapes differ".into()));
        }
        let shape = weights_real.dim();
        let mut params: Vec<f64> = weights_real.iter().copied().collect();
        params.extend(weights_fake.iter().copied());
        params.extend(bias);
        Ok(Self { shape, params })
    }

    pub fn random<R: Rng + ?Sized>(c: usize, h: usize, w: usize, rng: &mut R) -> Self {
        let n = c * h * w;
        let std = (1.0 / n as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut params: Vec<f64> = (0..2 * n).map(|_| normal.sample(rng)).collect();
        params.extend([0.0, 0.0]);
        Self {
            shape: (c, h, w),
            params,
        }
    }

    fn from_parameters(c: usize, h: usize, w: usize, params: Vec<f64>) -> Result<Self> {
        if params.len() != 2 * c * h * w + 2 {
            return Err(DetectorError::Format(format!(
                "expected {} parameters, got {}",
                2 * c * h * w + 2,
                params.len()
            )));
        }
        Ok(Self {
            shape: (c, h, w),
            params,
        })
    }

    fn weights(&self, label: Label) -> &[f64] {
        let n = self.shape.0 * self.shape.1 * self.shape.2;
        &self.params[label.index() * n..(label.index() + 1) * n]
    }

    fn check(&self, batch: &[Array3<f64>]) -> Result<()> {
        let dim = check_batch(batch, self.shape.0)?;
        if dim != self.shape {
            return Err(DetectorError::BatchShape(format!(
                "linear detector expects {:?}, got {dim:?}",
                self.shape
            )));
        }
        Ok(())
    }

    fn logits(&self, x: &Array3<f64>) -> LogitPair {
        let n = self.params.len() - 2;
        let dot = |label: Label| -> f64 { self.weights(label).iter().zip(x.iter()).map(|(a, b)| a * b).sum() };
        LogitPair {
            real: dot(Label::Real) + self.params[n],
            fake: dot(Label::Fake) + self.params[n + 1],
        }
    }
}

impl Detector for LinearDetector {
    fn architecture(&self) -> Architecture {
        Architecture::Linear {
            channels: self.shape.0,
            height: self.shape.1,
            width: self.shape.2,
        }
    }

    fn forward(&self, batch: &[Array3<f64>]) -> Result<Vec<LogitPair>> {
        self.check(batch)?;
        Ok(batch.iter().map(|x| self.logits(x)).collect())
    }

    fn backward(&self, batch: &[Array3<f64>], upstream: &mut Upstream<'_>, want: Want) -> Result<Gradients> {
        self.check(batch)?;
        let logits: Vec<LogitPair> = batch.iter().map(|x| self.logits(x)).collect();
        let seeds = upstream(&logits);
        if seeds.len() != batch.len() {
            return Err(DetectorError::BatchShape("upstream length mismatch".into()));
        }
        let n = (self.params.len() - 2) / 2;
        let (wr, wf) = (self.weights(Label::Real), self.weights(Label::Fake));
        let inputs = want.inputs.then(|| {
            seeds
                .iter()
                .map(|&[dr, df]| {
                    let flat: Vec<f64> = wr.iter().zip(wf).map(|(a, b)| dr * a + df * b).collect();
                    Array3::from_shape_vec(self.shape, flat).expect("weight layout")
                })
                .collect()
        });
        let params = want.params.then(|| {
            let mut g = vec![0.0; self.params.len()];
            for (x, &[dr, df]) in batch.iter().zip(&seeds) {
                for (i, &v) in x.iter().enumerate() {
                    g[i] += dr * v;
                    g[n + i] += df * v;
                }
                g[2 * n] += dr;
                g[2 * n + 1] += df;
            }
            g
        });
        let grads = Gradients {
            logits,
            inputs,
            params,
        };
        check_finite(&grads)?;
        Ok(grads)
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }
}

/// Pass counters shared between an [`Instrumented`] detector and its observers.
#[derive(Debug, Default)]
pub struct PassCounters {
    pub forward: AtomicUsize,
    pub backward: AtomicUsize,
    pub parameter_writes: AtomicUsize,
}

impl PassCounters {
    pub fn snapshot(&self) -> (usize, usize, usize) {
        (
            self.forward.load(Ordering::SeqCst),
            self.backward.load(Ordering::SeqCst),
            self.parameter_writes.load(Ordering::SeqCst),
        )
    }
}

/// Wraps a detector and counts batch-level forward/backward passes and
/// mutable parameter accesses.
pub struct Instrumented<D> {
    inner: D,
    counters: Arc<PassCounters>,
}

impl<D: Detector> Instrumented<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            counters: Arc::default(),
        }
    }

    pub fn counters(&self) -> Arc<PassCounters> {
        Arc::clone(&self.counters)
    }

    pub fn into_inner(self) -> D {
        self.inner
    }
}

impl<D: Detector> Detector for Instrumented<D> {
    fn architecture(&self) -> Architecture {
        self.inner.architecture()
    }

    fn forward(&self, batch: &[Array3<f64>]) -> Result<Vec<LogitPair>> {
        self.counters.forward.fetch_add(1, Ordering::SeqCst);
        self.inner.forward(batch)
    }

    fn backward(&self, batch: &[Array3<f64>], upstream: &mut Upstream<'_>, want: Want) -> Result<Gradients> {
        self.counters.forward.fetch_add(1, Ordering::SeqCst);
        self.counters.backward.fetch_add(1, Ordering::SeqCst);
        self.inner.backward(batch, upstream, want)
    }

    fn parameters(&self) -> &[f64] {
        self.inner.parameters()
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        self.counters.parameter_writes.fetch_add(1, Ordering::SeqCst);
        self.inner.parameters_mut()
    }

    fn cam_features(&self, input: &Array3<f64>) -> Result<CamFeatures> {
        self.counters.forward.fetch_add(1, Ordering::SeqCst);
        self.inner.cam_features(input)
    }
}

impl Detector for Box<dyn Detector> {
    fn architecture(&self) -> Architecture {
        (**self).architecture()
    }
    fn forward(&self, batch: &[Array3<f64>]) -> Result<Vec<LogitPair>> {
        (**self).forward(batch)
    }
    fn backward(&self, batch: &[Array3<f64>], upstream: &mut Upstream<'_>, want: Want) -> Result<Gradients> {
        (**self).backward(batch, upstream, want)
    }
    fn parameters(&self) -> &[f64] {
        (**self).parameters()
    }
    fn parameters_mut(&mut self) -> &mut [f64] {
        (**self).parameters_mut()
    }
    fn cam_features(&self, input: &Array3<f64>) -> Result<CamFeatures> {
        (**self).cam_features(input)
    }
}

/// Logits for 8-bit images (scaled to `[0, 1]` first).
pub fn forward_images(det: &dyn Detector, images: &[Image]) -> Result<Vec<LogitPair>> {
    let batch: Vec<Array3<f64>> = images.iter().map(Image::to_tensor).collect();
    det.forward(&batch)
}

/// Input gradients of the selected logit combination for a batch, in one
/// forward and one backward pass.
pub fn input_gradients(
    det: &dyn Detector,
    batch: &[Array3<f64>],
    combination: LogitCombination,
) -> Result<Vec<Array3<f64>>> {
    let weights = combination.weights();
    let grads = det.backward(batch, &mut |logits| vec![weights; logits.len()], Want::INPUTS)?;
    Ok(grads.inputs.expect("input gradients requested"))
}

/// `d s / d I` for one image, in normalised pixel units.
pub fn input_gradient(det: &dyn Detector, image: &Image, combination: LogitCombination) -> Result<Array3<f64>> {
    Ok(input_gradients(det, &[image.to_tensor()], combination)?.remove(0))
}

/// Class activation map `sum_k w_k^class F_k` on the last convolutional
/// layer, optionally bilinearly upsampled to the input resolution.
pub fn compute_cam(det: &dyn Detector, image: &Image, class: Label, upsample: bool) -> Result<Array2<f64>> {
    let feats = det.cam_features(&image.to_tensor())?;
    let (k, fh, fw) = feats.maps.dim();
    let mut cam = Array2::<f64>::zeros((fh, fw));
    for c in 0..k {
        let wk = feats.head[[class.index(), c]];
        cam.scaled_add(wk, &feats.maps.index_axis(ndarray::Axis(0), c));
    }
    if !upsample || (fh, fw) == (image.height(), image.width()) {
        return Ok(cam);
    }
    let planes = cam.insert_axis(ndarray::Axis(0));
    let up = resize_planes(&planes, image.height(), image.width());
    Ok(up.index_axis_move(ndarray::Axis(0), 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "TrainConfig::default_lr")]
    pub learning_rate: f64,
    #[serde(default = "TrainConfig::default_batch")]
    pub batch_size: usize,
    #[serde(default = "TrainConfig::default_flood")]
    pub flood_level: f64,
    #[serde(default)]
    pub iterations: usize,
}

impl TrainConfig {
    fn default_lr() -> f64 {
        2e-4
    }
    fn default_batch() -> usize {
        16
    }
    fn default_flood() -> f64 {
        0.04
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DetectorError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(DetectorError::Config(format!(
                "batch size must be even and positive, got {}",
                self.batch_size
            )));
        }
        if !(self.flood_level >= 0.0) {
            return Err(DetectorError::Config(format!(
                "flood level must be non-negative, got {}",
                self.flood_level
            )));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: Self::default_lr(),
            batch_size: Self::default_batch(),
            flood_level: Self::default_flood(),
            iterations: 0,
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(learning_rate: f64, num_params: usize) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter size mismatch");
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / b1t;
            let v_hat = *v / b2t;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Mean two-class cross-entropy and its gradient w.r.t. each logit pair.
pub fn cross_entropy(logits: &[LogitPair], labels: &[Label]) -> (f64, Vec<[f64; 2]>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        let m = l.real.max(l.fake);
        let lse = m + ((l.real - m).exp() + (l.fake - m).exp()).ln();
        loss += lse - l.get(y);
        let p = [(l.real - lse).exp(), (l.fake - lse).exp()];
        let mut g = [p[0] / n, p[1] / n];
        g[y.index()] -= 1.0 / n;
        grads.push(g);
    }
    (loss / n, grads)
}

/// `|ce - b| + b`.
pub fn flooded(ce: f64, flood_level: f64) -> f64 {
    (ce - flood_level).abs() + flood_level
}

/// One flooded cross-entropy Adam update on a balanced batch. Returns the
/// flooded loss of the forward pass that preceded the update.
///
/// The flooded gradient is `sign(ce - b) * grad(ce)` with `sign(0) = +1`.
pub fn train_step(
    det: &mut dyn Detector,
    inputs: &[Array3<f64>],
    labels: &[Label],
    config: &TrainConfig,
    optimizer: &mut Adam,
) -> Result<f64> {
    config.validate()?;
    if inputs.len() != labels.len() {
        return Err(DetectorError::BatchShape(format!(
            "{} inputs but {} labels",
            inputs.len(),
            labels.len()
        )));
    }
    let fakes = labels.iter().filter(|&&l| l == Label::Fake).count();
    if fakes * 2 != labels.len() {
        return Err(DetectorError::Config(format!(
            "batch must be half real, half fake; got {fakes} fake of {}",
            labels.len()
        )));
    }
    let b = config.flood_level;
    let mut ce = f64::NAN;
    let grads = det.backward(
        inputs,
        &mut |logits| {
            let (loss, g) = cross_entropy(logits, labels);
            ce = loss;
            let sign = if loss >= b { 1.0 } else { -1.0 };
            g.into_iter().map(|[a, c]| [sign * a, sign * c]).collect()
        },
        Want::PARAMS,
    )?;
    let loss = flooded(ce, b);
    let param_grads = grads.params.expect("parameter gradients requested");
    if !loss.is_finite() || param_grads.iter().any(|g| !g.is_finite()) {
        return Err(DetectorError::TrainingDiverged {
            loss,
            detail: "non-finite loss or parameter gradient".into(),
        });
    }
    optimizer.learning_rate = config.learning_rate;
    optimizer.step(det.parameters_mut(), &param_grads);
    Ok(loss)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RFMCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, version (u32 LE), architecture JSON length (u32 LE) and
/// bytes, parameter count (u64 LE), parameters (f64 LE), SHA-256 of all
/// preceding bytes.
pub fn encode_checkpoint(det: &dyn Detector) -> Vec<u8> {
    let arch = serde_json::to_vec(&det.architecture()).expect("architecture serialises");
    let params = det.parameters();
    let mut buf = Vec::with_capacity(8 + 4 + 4 + arch.len() + 8 + params.len() * 8 + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    buf.extend_from_slice(&arch);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Box<dyn Detector>> {
    if bytes.len() < 32 {
        return Err(DetectorError::Checksum(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(DetectorError::Checksum("content digest mismatch".into()));
    }
    let mut cursor = body;
    let mut take = |n: usize| -> Result<&[u8]> {
        if cursor.len() < n {
            return Err(DetectorError::Format("unexpected end of checkpoint".into()));
        }
        let (head, rest) = cursor.split_at(n);
        cursor = rest;
        Ok(head)
    };
    if take(8)? != CHECKPOINT_MAGIC {
        return Err(DetectorError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(DetectorError::Format(format!("unsupported version {version}")));
    }
    let arch_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let arch: Architecture =
        serde_json::from_slice(take(arch_len)?).map_err(|e| DetectorError::Format(e.to_string()))?;
    let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let raw = take(count.checked_mul(8).ok_or_else(|| DetectorError::Format("parameter count overflow".into()))?)?;
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    arch.with_parameters(params)
}

/// Writes the checkpoint through a temporary file so a finished file is never
/// partially overwritten.
pub fn save_checkpoint(det: &dyn Detector, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&encode_checkpoint(det))?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Box<dyn Detector>> {
    decode_checkpoint(&fs::read(path)?)
}
