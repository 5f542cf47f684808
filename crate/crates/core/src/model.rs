//! Classifiers with hand-written backpropagation and the local SGD trainer.
//!
//! Two architectures are supported:
//!
//! * `Mlp`: mean over frames, dense + ReLU, dense.
//! * `ConvGru`: two valid 3x3 convolutions over (time x mel), each followed by
//!   ReLU and 2x2 max-pooling; a GRU over the pooled time axis whose input at
//!   each step is the flattened (channel, mel) slice; mean over GRU outputs;
//!   dense + ReLU; dense.
//!
//! For a `T x M` input the conv stack produces `T1 = (T-2)/2`, `M1 = (M-2)/2`
//! after the first block and `T2 = (T1-2)/2`, `M2 = (M1-2)/2` after the second
//! (floor division), so the GRU sees `T2` steps of width `c2 * M2`. Inputs
//! need at least 10 frames and 10 dims.
//!
//! All weights live in one flat [`ParamVector`]; gradients share its layout.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::partition::Example;
use crate::rng::{self, SimRng};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("client shard is empty")]
    EmptyShard,
    #[error("invalid architecture: {0}")]
    InvalidArch(&'static str),
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("target {target} is not below {n_classes}")]
    TargetOutOfRange { target: usize, n_classes: usize },
    #[error("invalid training setting: {0}")]
    InvalidSetting(&'static str),
}

fn shape_err(msg: String) -> ModelError {
    ModelError::ShapeMismatch(msg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    ConvGru,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum ModelArch {
    Mlp {
        input_dims: usize,
        hidden: usize,
        n_classes: usize,
    },
    ConvGru {
        input_dims: usize,
        #[cfg_attr(feature = "serde", serde(default = "default_channels"))]
        conv_channels: (usize, usize),
        #[cfg_attr(feature = "serde", serde(default = "default_width"))]
        gru_hidden: usize,
        #[cfg_attr(feature = "serde", serde(default = "default_width"))]
        dense_hidden: usize,
        n_classes: usize,
    },
}

#[cfg(feature = "serde")]
fn default_channels() -> (usize, usize) {
    (16, 32)
}

#[cfg(feature = "serde")]
fn default_width() -> usize {
    64
}

impl ModelArch {
    pub fn mlp(input_dims: usize, hidden: usize, n_classes: usize) -> Self {
        ModelArch::Mlp { input_dims, hidden, n_classes }
    }

    /// Conv+GRU with the default widths: channels (16, 32), GRU 64, dense 64.
    pub fn conv_gru(input_dims: usize, n_classes: usize) -> Self {
        ModelArch::ConvGru { input_dims, conv_channels: (16, 32), gru_hidden: 64, dense_hidden: 64, n_classes }
    }

    pub fn kind(&self) -> ArchKind {
        match self {
            ModelArch::Mlp { .. } => ArchKind::Mlp,
            ModelArch::ConvGru { .. } => ArchKind::ConvGru,
        }
    }

    pub fn n_classes(&self) -> usize {
        match *self {
            ModelArch::Mlp { n_classes, .. } | ModelArch::ConvGru { n_classes, .. } => n_classes,
        }
    }

    pub fn input_dims(&self) -> usize {
        match *self {
            ModelArch::Mlp { input_dims, .. } | ModelArch::ConvGru { input_dims, .. } => input_dims,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_classes() < 2 {
            return Err(ModelError::InvalidArch("n_classes must be at least 2"));
        }
        match *self {
            ModelArch::Mlp { input_dims, hidden, .. } => {
                if input_dims == 0 || hidden == 0 {
                    return Err(ModelError::InvalidArch("widths must be at least 1"));
                }
            }
            ModelArch::ConvGru { input_dims, conv_channels, gru_hidden, dense_hidden, .. } => {
                if conv_channels.0 == 0 || conv_channels.1 == 0 || gru_hidden == 0 || dense_hidden == 0 {
                    return Err(ModelError::InvalidArch("widths must be at least 1"));
                }
                if pooled_len(input_dims).is_none() {
                    return Err(ModelError::InvalidArch("conv_gru needs input_dims >= 10"));
                }
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in, fan_out)` per tensor; fans are zero for biases.
    fn tensors(&self) -> Vec<(&'static str, Vec<usize>, usize, usize)> {
        match *self {
            ModelArch::Mlp { input_dims, hidden, n_classes } => vec![
                ("dense1.weight", vec![hidden, input_dims], input_dims, hidden),
                ("dense1.bias", vec![hidden], 0, 0),
                ("dense2.weight", vec![n_classes, hidden], hidden, n_classes),
                ("dense2.bias", vec![n_classes], 0, 0),
            ],
            ModelArch::ConvGru {
                input_dims,
                conv_channels: (c1, c2),
                gru_hidden: h,
                dense_hidden: f,
                n_classes: k,
            } => {
                let d_in = c2 * pooled_len(input_dims).unwrap_or(0);
                vec![
                    ("conv1.weight", vec![c1, 1, 3, 3], 9, c1 * 9),
                    ("conv1.bias", vec![c1], 0, 0),
                    ("conv2.weight", vec![c2, c1, 3, 3], c1 * 9, c2 * 9),
                    ("conv2.bias", vec![c2], 0, 0),
                    ("gru.weight_ih", vec![3 * h, d_in], d_in, 3 * h),
                    ("gru.weight_hh", vec![3 * h, h], h, 3 * h),
                    ("gru.bias_ih", vec![3 * h], 0, 0),
                    ("gru.bias_hh", vec![3 * h], 0, 0),
                    ("dense1.weight", vec![f, h], h, f),
                    ("dense1.bias", vec![f], 0, 0),
                    ("dense2.weight", vec![k, f], f, k),
                    ("dense2.bias", vec![k], 0, 0),
                ]
            }
        }
    }

    pub fn layout(&self) -> Vec<TensorSpec> {
        let mut offset = 0;
        self.tensors()
            .into_iter()
            .map(|(name, shape, _, _)| {
                let spec = TensorSpec { name: name.into(), offset, shape };
                offset += spec.len();
                spec
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(TensorSpec::len).sum()
    }
}

/// Length after one valid 3x3 conv and one 2x2 pool: `(n - 2) / 2`.
pub fn conv_pool_len(n: usize) -> Option<usize> {
    let out = n.checked_sub(2)? / 2;
    (out > 0).then_some(out)
}

/// Length after both conv blocks.
pub fn pooled_len(n: usize) -> Option<usize> {
    conv_pool_len(conv_pool_len(n)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter storage with a named, contiguous layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<TensorSpec>,
}

impl ParamVector {
    pub fn new(layout: Vec<TensorSpec>, values: Vec<f64>) -> Result<Self, ModelError> {
        let mut expected = 0;
        for t in &layout {
            if t.offset != expected {
                return Err(shape_err(alloc::format!("tensor {} starts at {}, expected {expected}", t.name, t.offset)));
            }
            expected += t.len();
        }
        if expected != values.len() {
            return Err(shape_err(alloc::format!("layout covers {expected} values, vector has {}", values.len())));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        Self { values: vec![0.0; other.values.len()], layout: other.layout.clone() }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let t = self.layout.iter().find(|t| t.name == name)?;
        Some(&self.values[t.range()])
    }

    fn slice(&self, index: usize) -> &[f64] {
        &self.values[self.layout[index].range()]
    }

    fn slice_mut(&mut self, index: usize) -> &mut [f64] {
        let r = self.layout[index].range();
        &mut self.values[r]
    }

    fn check_arch(&self, arch: &ModelArch) -> Result<(), ModelError> {
        if self.layout != arch.layout() {
            return Err(ModelError::LayoutMismatch);
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(arch: &ModelArch, seed: u64) -> Result<ParamVector, ModelError> {
    arch.validate()?;
    let mut r = rng::derived_stream(seed, &[rng::TAG_INIT]);
    let mut values = Vec::with_capacity(arch.n_params());
    for (_, shape, fan_in, fan_out) in arch.tensors() {
        let n: usize = shape.iter().product();
        if fan_in == 0 {
            values.extend(core::iter::repeat_n(0.0, n));
        } else {
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            values.extend((0..n).map(|_| r.random_range(-limit..=limit)));
        }
    }
    ParamVector::new(arch.layout(), values)
}

/// Inputs and integer targets of one minibatch.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub inputs: Vec<&'a FeatureMatrix>,
    pub targets: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(inputs: Vec<&'a FeatureMatrix>, targets: Vec<usize>) -> Result<Self, ModelError> {
        if inputs.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if inputs.len() != targets.len() {
            return Err(shape_err(alloc::format!("{} inputs but {} targets", inputs.len(), targets.len())));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_examples<I: IntoIterator<Item = &'a Example>>(examples: I) -> Result<Self, ModelError> {
        let (inputs, targets) = examples.into_iter().map(|e| (&e.features, e.label)).unzip();
        Self::new(inputs, targets)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

// Dense helpers; weights are row-major `[out, in]`.

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
    }
}

/// Accumulates `dW += dy x^T`, `db += dy` and, if given, `dx += W^T dy`.
fn affine_backward(w: &[f64], x: &[f64], dy: &[f64], gw: &mut [f64], gb: &mut [f64], dx: Option<&mut [f64]>) {
    let n_in = x.len();
    for (o, &d) in dy.iter().enumerate() {
        gb[o] += d;
        if d != 0.0 {
            for (g, v) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }
    if let Some(dx) = dx {
        for (o, &d) in dy.iter().enumerate() {
            if d != 0.0 {
                for (g, a) in dx.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *g += d * a;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Log-sum-exp softmax; returns `(loss, dlogits)` for one target.
fn softmax_xent(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| libm::exp(z - max)).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + libm::log(sum);
    let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    d[target] -= 1.0;
    (lse - logits[target], d)
}

// Parameter indices inside the layouts above.
const MLP_W1: usize = 0;
const MLP_B1: usize = 1;
const MLP_W2: usize = 2;
const MLP_B2: usize = 3;
const CG_C1W: usize = 0;
const CG_C1B: usize = 1;
const CG_C2W: usize = 2;
const CG_C2B: usize = 3;
const CG_WIH: usize = 4;
const CG_WHH: usize = 5;
const CG_BIH: usize = 6;
const CG_BHH: usize = 7;
const CG_D1W: usize = 8;
const CG_D1B: usize = 9;
const CG_D2W: usize = 10;
const CG_D2B: usize = 11;

/// Feature maps of shape `channels x rows x cols`, row-major.
#[derive(Debug, Clone)]
struct Maps {
    channels: usize,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Maps {
    fn at(&self, c: usize, r: usize, k: usize) -> f64 {
        self.data[(c * self.rows + r) * self.cols + k]
    }
}

/// Valid 3x3 convolution followed by ReLU.
fn conv3x3_relu(input: &Maps, w: &[f64], b: &[f64], out_channels: usize) -> Maps {
    let (rows, cols) = (input.rows - 2, input.cols - 2);
    let mut data = vec![0.0; out_channels * rows * cols];
    for co in 0..out_channels {
        for r in 0..rows {
            for k in 0..cols {
                let mut acc = b[co];
                for ci in 0..input.channels {
                    let wk = &w[(co * input.channels + ci) * 9..(co * input.channels + ci + 1) * 9];
                    for dr in 0..3 {
                        let base = (ci * input.rows + r + dr) * input.cols + k;
                        let row = &input.data[base..base + 3];
                        acc += wk[dr * 3] * row[0] + wk[dr * 3 + 1] * row[1] + wk[dr * 3 + 2] * row[2];
                    }
                }
                data[(co * rows + r) * cols + k] = acc.max(0.0);
            }
        }
    }
    Maps { channels: out_channels, rows, cols, data }
}

/// Gradient of [`conv3x3_relu`] given the upstream gradient on its (post-ReLU)
/// output. Accumulates weight/bias gradients; returns the input gradient when
/// asked.
fn conv3x3_relu_backward(
    input: &Maps,
    output: &Maps,
    w: &[f64],
    mut d_out: Vec<f64>,
    gw: &mut [f64],
    gb: &mut [f64],
    want_input_grad: bool,
) -> Option<Vec<f64>> {
    for (d, &y) in d_out.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *d = 0.0;
        }
    }
    let mut d_in = want_input_grad.then(|| vec![0.0; input.data.len()]);
    let (rows, cols) = (output.rows, output.cols);
    for co in 0..output.channels {
        for r in 0..rows {
            for k in 0..cols {
                let d = d_out[(co * rows + r) * cols + k];
                if d == 0.0 {
                    continue;
                }
                gb[co] += d;
                for ci in 0..input.channels {
                    let wbase = (co * input.channels + ci) * 9;
                    for dr in 0..3 {
                        for dk in 0..3 {
                            let idx = (ci * input.rows + r + dr) * input.cols + k + dk;
                            gw[wbase + dr * 3 + dk] += d * input.data[idx];
                            if let Some(di) = d_in.as_mut() {
                                di[idx] += d * w[wbase + dr * 3 + dk];
                            }
                        }
                    }
                }
            }
        }
    }
    d_in
}

/// 2x2 max-pool (floor); also returns the flat source index of each maximum.
fn maxpool2(input: &Maps) -> (Maps, Vec<usize>) {
    let (rows, cols) = (input.rows / 2, input.cols / 2);
    let mut data = vec![0.0; input.channels * rows * cols];
    let mut argmax = vec![0usize; data.len()];
    for c in 0..input.channels {
        for r in 0..rows {
            for k in 0..cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dr in 0..2 {
                    for dk in 0..2 {
                        let idx = (c * input.rows + 2 * r + dr) * input.cols + 2 * k + dk;
                        if input.data[idx] > best {
                            best = input.data[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * rows + r) * cols + k;
                data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (Maps { channels: input.channels, rows, cols, data }, argmax)
}

fn maxpool2_backward(argmax: &[usize], d_out: &[f64], input_len: usize) -> Vec<f64> {
    let mut d_in = vec![0.0; input_len];
    for (&src, &d) in argmax.iter().zip(d_out) {
        d_in[src] += d;
    }
    d_in
}

/// Per-example forward state kept for the backward pass.
enum Cache {
    Mlp { pooled: Vec<f64>, pre: Vec<f64>, hidden: Vec<f64> },
    ConvGru(Box<ConvGruCache>),
}

struct ConvGruCache {
    input: Maps,
    conv1: Maps,
    pool1: Maps,
    arg1: Vec<usize>,
    conv2: Maps,
    pool2: Maps,
    arg2: Vec<usize>,
    steps: Vec<GruStep>,
    pooled: Vec<f64>,
    pre: Vec<f64>,
    hidden: Vec<f64>,
}

struct GruStep {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    n: Vec<f64>,
}

fn check_input(arch: &ModelArch, x: &FeatureMatrix) -> Result<(), ModelError> {
    if x.dims() != arch.input_dims() {
        return Err(shape_err(alloc::format!("input has {} dims, model expects {}", x.dims(), arch.input_dims())));
    }
    if x.frames() == 0 {
        return Err(shape_err("input has no frames".into()));
    }
    if arch.kind() == ArchKind::ConvGru && pooled_len(x.frames()).is_none() {
        return Err(shape_err(alloc::format!("conv_gru needs at least 10 frames, input has {}", x.frames())));
    }
    Ok(())
}

fn forward_example(p: &ParamVector, arch: &ModelArch, x: &FeatureMatrix) -> (Vec<f64>, Cache) {
    match *arch {
        ModelArch::Mlp { hidden, n_classes, .. } => {
            let pooled = x.mean_over_frames();
            let mut pre = vec![0.0; hidden];
            affine(p.slice(MLP_W1), p.slice(MLP_B1), &pooled, &mut pre);
            let h: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let mut logits = vec![0.0; n_classes];
            affine(p.slice(MLP_W2), p.slice(MLP_B2), &h, &mut logits);
            (logits, Cache::Mlp { pooled, pre, hidden: h })
        }
        ModelArch::ConvGru { conv_channels: (c1, c2), gru_hidden: hd, dense_hidden: f, n_classes: k, .. } => {
            let input = Maps { channels: 1, rows: x.frames(), cols: x.dims(), data: x.values().to_vec() };
            let conv1 = conv3x3_relu(&input, p.slice(CG_C1W), p.slice(CG_C1B), c1);
            let (pool1, arg1) = maxpool2(&conv1);
            let conv2 = conv3x3_relu(&pool1, p.slice(CG_C2W), p.slice(CG_C2B), c2);
            let (pool2, arg2) = maxpool2(&conv2);
            let (wih, whh, bih, bhh) = (p.slice(CG_WIH), p.slice(CG_WHH), p.slice(CG_BIH), p.slice(CG_BHH));
            let d_in = c2 * pool2.cols;
            let mut h = vec![0.0; hd];
            let mut pooled = vec![0.0; hd];
            let mut steps = Vec::with_capacity(pool2.rows);
            let mut gi = vec![0.0; 3 * hd];
            let mut gh = vec![0.0; 2 * hd];
            let mut gn = vec![0.0; hd];
            for t in 0..pool2.rows {
                let xt: Vec<f64> = (0..c2)
                    .flat_map(|c| (0..pool2.cols).map(move |m| (c, m)))
                    .map(|(c, m)| pool2.at(c, t, m))
                    .collect();
                debug_assert_eq!(xt.len(), d_in);
                affine(wih, bih, &xt, &mut gi);
                // z and r use W_hh rows [0, 2H).
                affine(&whh[..2 * hd * hd], &bhh[..2 * hd], &h, &mut gh);
                let z: Vec<f64> = (0..hd).map(|j| sigmoid(gi[j] + gh[j])).collect();
                let r: Vec<f64> = (0..hd).map(|j| sigmoid(gi[hd + j] + gh[hd + j])).collect();
                let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
                affine(&whh[2 * hd * hd..], &bhh[2 * hd..], &rh, &mut gn);
                let n: Vec<f64> = (0..hd).map(|j| libm::tanh(gi[2 * hd + j] + gn[j])).collect();
                let h_new: Vec<f64> = (0..hd).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect();
                for (acc, v) in pooled.iter_mut().zip(&h_new) {
                    *acc += v;
                }
                steps.push(GruStep { x: xt, h_prev: core::mem::replace(&mut h, h_new), z, r, rh, n });
            }
            let steps_n = pool2.rows as f64;
            pooled.iter_mut().for_each(|v| *v /= steps_n);
            let mut pre = vec![0.0; f];
            affine(p.slice(CG_D1W), p.slice(CG_D1B), &pooled, &mut pre);
            let hidden: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let mut logits = vec![0.0; k];
            affine(p.slice(CG_D2W), p.slice(CG_D2B), &hidden, &mut logits);
            let cache = ConvGruCache { input, conv1, pool1, arg1, conv2, pool2, arg2, steps, pooled, pre, hidden };
            (logits, Cache::ConvGru(Box::new(cache)))
        }
    }
}

/// Accumulates the gradient of one example's loss (given `dlogits`) into `g`.
fn backward_example(p: &ParamVector, arch: &ModelArch, cache: &Cache, dlogits: &[f64], g: &mut ParamVector) {
    match (arch, cache) {
        (ModelArch::Mlp { hidden, .. }, Cache::Mlp { pooled, pre, hidden: h }) => {
            let mut dh = vec![0.0; *hidden];
            dense_backward(p, g, MLP_W2, MLP_B2, h, dlogits, Some(&mut dh));
            let da: Vec<f64> = dh.iter().zip(pre).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
            dense_backward(p, g, MLP_W1, MLP_B1, pooled, &da, None);
        }
        (ModelArch::ConvGru { conv_channels: (_, c2), gru_hidden: hd, dense_hidden: f, .. }, Cache::ConvGru(c)) => {
            let (hd, f, c2) = (*hd, *f, *c2);
            // Dense head.
            let mut dhidden = vec![0.0; f];
            dense_backward(p, g, CG_D2W, CG_D2B, &c.hidden, dlogits, Some(&mut dhidden));
            let dpre: Vec<f64> = dhidden.iter().zip(&c.pre).map(|(d, a)| if *a > 0.0 { *d } else { 0.0 }).collect();
            let mut dpooled = vec![0.0; hd];
            dense_backward(p, g, CG_D1W, CG_D1B, &c.pooled, &dpre, Some(&mut dpooled));

            // GRU, backwards through time.
            let steps_n = c.steps.len() as f64;
            let dpool_step: Vec<f64> = dpooled.iter().map(|v| v / steps_n).collect();
            let (wih, whh) = (p.slice(CG_WIH), p.slice(CG_WHH));
            let d_in = c2 * c.pool2.cols;
            let mut g_wih = vec![0.0; 3 * hd * d_in];
            let mut g_whh = vec![0.0; 3 * hd * hd];
            let mut g_bih = vec![0.0; 3 * hd];
            let mut g_bhh = vec![0.0; 3 * hd];
            let mut dx_steps = vec![vec![0.0; d_in]; c.steps.len()];
            let mut carry = vec![0.0; hd];
            for (t, s) in c.steps.iter().enumerate().rev() {
                let dh: Vec<f64> = carry.iter().zip(&dpool_step).map(|(a, b)| a + b).collect();
                let mut dh_prev: Vec<f64> = (0..hd).map(|j| dh[j] * s.z[j]).collect();
                let da_n: Vec<f64> = (0..hd).map(|j| dh[j] * (1.0 - s.z[j]) * (1.0 - s.n[j] * s.n[j])).collect();
                let da_z: Vec<f64> =
                    (0..hd).map(|j| dh[j] * (s.h_prev[j] - s.n[j]) * s.z[j] * (1.0 - s.z[j])).collect();
                // Candidate path: a_n = W_in x + b_in + W_hn (r * h) + b_hn.
                let mut drh = vec![0.0; hd];
                affine_backward(
                    &whh[2 * hd * hd..],
                    &s.rh,
                    &da_n,
                    &mut g_whh[2 * hd * hd..],
                    &mut g_bhh[2 * hd..],
                    Some(&mut drh),
                );
                let da_r: Vec<f64> = (0..hd).map(|j| drh[j] * s.h_prev[j] * s.r[j] * (1.0 - s.r[j])).collect();
                for j in 0..hd {
                    dh_prev[j] += drh[j] * s.r[j];
                }
                let mut da_zr = da_z.clone();
                da_zr.extend_from_slice(&da_r);
                affine_backward(
                    &whh[..2 * hd * hd],
                    &s.h_prev,
                    &da_zr,
                    &mut g_whh[..2 * hd * hd],
                    &mut g_bhh[..2 * hd],
                    Some(&mut dh_prev),
                );
                let mut da_all = da_zr;
                da_all.extend_from_slice(&da_n);
                affine_backward(wih, &s.x, &da_all, &mut g_wih, &mut g_bih, Some(&mut dx_steps[t]));
                carry = dh_prev;
            }
            add_into(g.slice_mut(CG_WIH), &g_wih);
            add_into(g.slice_mut(CG_WHH), &g_whh);
            add_into(g.slice_mut(CG_BIH), &g_bih);
            add_into(g.slice_mut(CG_BHH), &g_bhh);

            // Back into the pooled conv2 maps.
            let m2 = c.pool2.cols;
            let mut dpool2 = vec![0.0; c.pool2.data.len()];
            for (t, dx) in dx_steps.iter().enumerate() {
                for ch in 0..c2 {
                    for m in 0..m2 {
                        dpool2[(ch * c.pool2.rows + t) * m2 + m] += dx[ch * m2 + m];
                    }
                }
            }
            let dconv2 = maxpool2_backward(&c.arg2, &dpool2, c.conv2.data.len());
            let (mut gw, mut gb) = (vec![0.0; g.slice(CG_C2W).len()], vec![0.0; g.slice(CG_C2B).len()]);
            let dpool1 = conv3x3_relu_backward(&c.pool1, &c.conv2, p.slice(CG_C2W), dconv2, &mut gw, &mut gb, true)
                .expect("input gradient requested");
            add_into(g.slice_mut(CG_C2W), &gw);
            add_into(g.slice_mut(CG_C2B), &gb);
            let dconv1 = maxpool2_backward(&c.arg1, &dpool1, c.conv1.data.len());
            let (mut gw, mut gb) = (vec![0.0; g.slice(CG_C1W).len()], vec![0.0; g.slice(CG_C1B).len()]);
            conv3x3_relu_backward(&c.input, &c.conv1, p.slice(CG_C1W), dconv1, &mut gw, &mut gb, false);
            add_into(g.slice_mut(CG_C1W), &gw);
            add_into(g.slice_mut(CG_C1B), &gb);
        }
        _ => unreachable!("cache built for a different architecture"),
    }
}

fn dense_backward(
    p: &ParamVector,
    g: &mut ParamVector,
    w: usize,
    b: usize,
    x: &[f64],
    dy: &[f64],
    dx: Option<&mut [f64]>,
) {
    let (rw, rb) = (g.layout[w].range(), g.layout[b].range());
    debug_assert!(rw.end <= rb.start);
    let (lo, hi) = g.values.split_at_mut(rb.start);
    affine_backward(p.slice(w), x, dy, &mut lo[rw], &mut hi[..rb.len()], dx);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn check_batch(params: &ParamVector, arch: &ModelArch, inputs: &[&FeatureMatrix]) -> Result<(), ModelError> {
    arch.validate()?;
    params.check_arch(arch)?;
    if inputs.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    inputs.iter().try_for_each(|x| check_input(arch, x))
}

/// Logits, one row per input.
pub fn forward(params: &ParamVector, arch: &ModelArch, inputs: &[&FeatureMatrix]) -> Result<Vec<Vec<f64>>, ModelError> {
    check_batch(params, arch, inputs)?;
    Ok(inputs.iter().map(|x| forward_example(params, arch, x).0).collect())
}

/// Arg-max class per input (lowest index on ties).
pub fn predict(params: &ParamVector, arch: &ModelArch, inputs: &[&FeatureMatrix]) -> Result<Vec<usize>, ModelError> {
    Ok(forward(params, arch, inputs)?
        .iter()
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grad(
    params: &ParamVector,
    arch: &ModelArch,
    batch: &Batch<'_>,
) -> Result<(f64, ParamVector), ModelError> {
    check_batch(params, arch, &batch.inputs)?;
    let k = arch.n_classes();
    if let Some(&target) = batch.targets.iter().find(|&&t| t >= k) {
        return Err(ModelError::TargetOutOfRange { target, n_classes: k });
    }
    let mut grad = ParamVector::zeros_like(params);
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for (x, &t) in batch.inputs.iter().zip(&batch.targets) {
        let (logits, cache) = forward_example(params, arch, x);
        let (l, mut d) = softmax_xent(&logits, t);
        loss += l;
        d.iter_mut().for_each(|v| *v /= n);
        backward_example(params, arch, &cache, &d, &mut grad);
    }
    Ok((loss / n, grad))
}

/// Plain minibatch SGD settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_LOCAL_EPOCHS: usize = 1;

impl SgdConfig {
    pub fn new(lr: f64) -> Self {
        Self { lr, epochs: DEFAULT_LOCAL_EPOCHS, batch_size: DEFAULT_BATCH_SIZE }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(ModelError::InvalidSetting("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidSetting("batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Result of local training.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub params: ParamVector,
    /// Example-weighted mean of the minibatch losses seen during training.
    pub mean_loss: f64,
}

/// SGD over `shard` drawing shuffles from `rng`. Running `e` epochs and then
/// `e'` more with the same generator equals running `e + e'` epochs at once.
pub fn local_train_with_rng(
    params: &ParamVector,
    arch: &ModelArch,
    shard: &[Example],
    sgd: &SgdConfig,
    rng: &mut SimRng,
) -> Result<LocalUpdate, ModelError> {
    if shard.is_empty() {
        return Err(ModelError::EmptyShard);
    }
    sgd.validate()?;
    let mut p = params.clone();
    let mut loss_sum = 0.0;
    let mut seen = 0usize;
    for _ in 0..sgd.epochs {
        let mut order: Vec<usize> = (0..shard.len()).collect();
        order.shuffle(rng);
        for chunk in order.chunks(sgd.batch_size) {
            let batch = Batch::from_examples(chunk.iter().map(|&i| &shard[i]))?;
            let (loss, grad) = loss_and_grad(&p, arch, &batch)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            if sgd.lr != 0.0 {
                for (w, g) in p.values.iter_mut().zip(&grad.values) {
                    *w -= sgd.lr * g;
                }
            }
        }
    }
    let mean_loss = if seen > 0 { loss_sum / seen as f64 } else { 0.0 };
    Ok(LocalUpdate { params: p, mean_loss })
}

/// Seeded SGD: shuffle, sequential minibatches (last partial batch kept),
/// `p <- p - lr * grad` per step.
pub fn local_train(
    params: &ParamVector,
    arch: &ModelArch,
    shard: &[Example],
    sgd: &SgdConfig,
    seed: u64,
) -> Result<ParamVector, ModelError> {
    local_train_with_rng(params, arch, shard, sgd, &mut rng::stream(seed)).map(|u| u.params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_matrix(r: &mut SimRng, frames: usize, dims: usize) -> FeatureMatrix {
        FeatureMatrix::new(frames, dims, (0..frames * dims).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn tiny_conv_gru() -> ModelArch {
        ModelArch::ConvGru { input_dims: 12, conv_channels: (2, 3), gru_hidden: 4, dense_hidden: 5, n_classes: 3 }
    }

    #[test]
    fn mlp_parameter_count() {
        let arch = ModelArch::mlp(128, 64, 4);
        assert_eq!(arch.n_params(), 8516);
        let p = init_params(&arch, 1).unwrap();
        assert_eq!(p.len(), 8516);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        for arch in [ModelArch::mlp(10, 6, 3), tiny_conv_gru()] {
            let a = init_params(&arch, 42).unwrap();
            assert_eq!(a, init_params(&arch, 42).unwrap());
            assert_ne!(a, init_params(&arch, 43).unwrap());
            for t in a.layout() {
                let v = &a.values()[t.range()];
                if t.name.contains("bias") {
                    assert!(v.iter().all(|&x| x == 0.0), "{}", t.name);
                } else {
                    assert!(v.iter().any(|&x| x != 0.0), "{}", t.name);
                }
            }
        }
    }

    #[test]
    fn glorot_bounds() {
        let arch = ModelArch::mlp(128, 64, 4);
        let p = init_params(&arch, 3).unwrap();
        let limit = (6.0f64 / (128.0 + 64.0)).sqrt();
        assert!(p.tensor("dense1.weight").unwrap().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn zero_weights_give_zero_logits() {
        for arch in [ModelArch::mlp(10, 4, 3), tiny_conv_gru()] {
            let p = ParamVector::zeros_like(&init_params(&arch, 0).unwrap());
            let x = FeatureMatrix::zeros(12, arch.input_dims());
            let logits = forward(&p, &arch, &[&x]).unwrap();
            assert!(logits[0].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn batch_rows_are_independent() {
        let mut r = SimRng::seed_from_u64(1);
        for arch in [ModelArch::mlp(12, 4, 3), tiny_conv_gru()] {
            let p = init_params(&arch, 2).unwrap();
            let xs: Vec<FeatureMatrix> = (0..4).map(|i| random_matrix(&mut r, 12 + i, 12)).collect();
            let refs: Vec<&FeatureMatrix> = xs.iter().collect();
            let rev: Vec<&FeatureMatrix> = xs.iter().rev().collect();
            let a = forward(&p, &arch, &refs).unwrap();
            let mut b = forward(&p, &arch, &rev).unwrap();
            b.reverse();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn full_size_conv_gru_shapes() {
        let arch = ModelArch::conv_gru(128, 4);
        // 94 -> 92 -> 46 -> 44 -> 22 frames; 128 -> 126 -> 63 -> 61 -> 30 dims.
        assert_eq!(conv_pool_len(94), Some(46));
        assert_eq!(pooled_len(94), Some(22));
        assert_eq!(pooled_len(128), Some(30));
        let p = init_params(&arch, 5).unwrap();
        assert_eq!(p.tensor("gru.weight_ih").unwrap().len(), 3 * 64 * 32 * 30);
        let mut r = SimRng::seed_from_u64(9);
        let x = random_matrix(&mut r, 94, 128);
        let logits = forward(&p, &arch, &[&x]).unwrap();
        assert_eq!((logits.len(), logits[0].len()), (1, 4));
        assert!(logits[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn shape_errors() {
        let arch = tiny_conv_gru();
        let p = init_params(&arch, 0).unwrap();
        let short = FeatureMatrix::zeros(9, 12);
        assert!(matches!(forward(&p, &arch, &[&short]), Err(ModelError::ShapeMismatch(_))));
        let wrong = FeatureMatrix::zeros(12, 11);
        assert!(matches!(forward(&p, &arch, &[&wrong]), Err(ModelError::ShapeMismatch(_))));
        let other = init_params(&ModelArch::mlp(12, 3, 3), 0).unwrap();
        assert_eq!(forward(&other, &arch, &[&FeatureMatrix::zeros(12, 12)]), Err(ModelError::LayoutMismatch));
        assert!(ModelArch::mlp(4, 4, 1).validate().is_err());
        assert!(ModelArch::conv_gru(9, 3).validate().is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let arch = ModelArch::mlp(6, 3, 5);
        let p = ParamVector::zeros_like(&init_params(&arch, 0).unwrap());
        let x = FeatureMatrix::zeros(2, 6);
        let (loss, _) = loss_and_grad(&p, &arch, &Batch::new(vec![&x, &x], vec![1, 4]).unwrap()).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn duplicated_batch_is_equivalent() {
        let mut r = SimRng::seed_from_u64(4);
        for arch in [ModelArch::mlp(12, 5, 3), tiny_conv_gru()] {
            let p = init_params(&arch, 8).unwrap();
            let xs: Vec<FeatureMatrix> = (0..3).map(|_| random_matrix(&mut r, 12, 12)).collect();
            let once = Batch::new(xs.iter().collect(), vec![0, 1, 2]).unwrap();
            let twice = Batch::new(xs.iter().chain(&xs).collect(), vec![0, 1, 2, 0, 1, 2]).unwrap();
            let (l1, g1) = loss_and_grad(&p, &arch, &once).unwrap();
            let (l2, g2) = loss_and_grad(&p, &arch, &twice).unwrap();
            assert!((l1 - l2).abs() < 1e-12);
            for (a, b) in g1.values().iter().zip(g2.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logit_shift_invariance() {
        // Shifting the output bias by a constant shifts every logit equally.
        let mut r = SimRng::seed_from_u64(6);
        let arch = ModelArch::mlp(8, 4, 3);
        let p = init_params(&arch, 1).unwrap();
        let mut shifted = p.clone();
        let range = arch.layout()[3].range();
        shifted.values_mut()[range].iter_mut().for_each(|b| *b += 17.0);
        let xs: Vec<FeatureMatrix> = (0..4).map(|_| random_matrix(&mut r, 5, 8)).collect();
        let batch = Batch::new(xs.iter().collect(), vec![0, 2, 1, 1]).unwrap();
        let (l1, g1) = loss_and_grad(&p, &arch, &batch).unwrap();
        let (l2, g2) = loss_and_grad(&shifted, &arch, &batch).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut r = SimRng::seed_from_u64(2);
        let arch = tiny_conv_gru();
        let p = init_params(&arch, 3).unwrap();
        let x = random_matrix(&mut r, 14, 12);
        let batch = Batch::new(vec![&x], vec![1]).unwrap();
        let a = loss_and_grad(&p, &arch, &batch).unwrap();
        let b = loss_and_grad(&p, &arch, &batch).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }

    fn shard(r: &mut SimRng, n: usize, dims: usize, k: usize) -> Vec<Example> {
        (0..n).map(|i| Example { features: random_matrix(r, 12, dims), label: i % k }).collect()
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut r = SimRng::seed_from_u64(3);
        let arch = ModelArch::mlp(12, 4, 3);
        let p = init_params(&arch, 1).unwrap();
        let data = shard(&mut r, 20, 12, 3);
        let out = local_train(&p, &arch, &data, &SgdConfig { lr: 0.0, epochs: 3, batch_size: 16 }, 9).unwrap();
        assert_eq!(out, p);
        assert_eq!(local_train(&p, &arch, &[], &SgdConfig::new(0.1), 0), Err(ModelError::EmptyShard));
    }

    #[test]
    fn single_step_matches_hand_update() {
        let mut r = SimRng::seed_from_u64(5);
        let arch = ModelArch::mlp(12, 4, 3);
        let p = init_params(&arch, 1).unwrap();
        let data = shard(&mut r, 1, 12, 3);
        let lr = 0.05;
        let out = local_train(&p, &arch, &data, &SgdConfig { lr, epochs: 1, batch_size: 16 }, 0).unwrap();
        let (_, g) = loss_and_grad(&p, &arch, &Batch::from_examples(&data).unwrap()).unwrap();
        for ((o, w), gv) in out.values().iter().zip(p.values()).zip(g.values()) {
            assert_eq!(*o, w - lr * gv);
        }
    }

    #[test]
    fn defaults_follow_benchmark_settings() {
        let s = SgdConfig::new(0.1);
        assert_eq!((s.batch_size, s.epochs), (16, 1));
    }

    #[test]
    fn epochs_compose_with_chained_rng() {
        let mut r = SimRng::seed_from_u64(8);
        let arch = ModelArch::mlp(12, 4, 3);
        let p = init_params(&arch, 2).unwrap();
        let data = shard(&mut r, 37, 12, 3);
        let cfg = |epochs| SgdConfig { lr: 0.1, epochs, batch_size: 8 };
        let mut rng_a = rng::stream(77);
        let once = local_train_with_rng(&p, &arch, &data, &cfg(2), &mut rng_a).unwrap().params;
        let once = local_train_with_rng(&once, &arch, &data, &cfg(3), &mut rng_a).unwrap().params;
        let all = local_train_with_rng(&p, &arch, &data, &cfg(5), &mut rng::stream(77)).unwrap().params;
        assert_eq!(once, all);
    }
}
