//! Network descriptions, collapsing, quantization, plans and execution.

mod exec;
mod plan;
mod quant;

pub use exec::{execute, predict, run, CostReport, Execution, StepReport};
pub use plan::{
    build_plan, preset_choices, Carrier, InferencePlan, InputEncoding, LinearChoice, PlanConfig, PlanStep,
    Preset, StepOp, Strategy, CONV_DENSE_THRESHOLD, DEFAULT_PRIMES,
};
pub use quant::{
    propagate_bounds, quantize, quantize_input, QuantizationPolicy, QuantizedNetwork,
};

use std::ops::{Add, Mul};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr::ConvGeometry;

/// Channel-major tensor shape; flat vectors are `len x 1 x 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn flat(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        kernel_h: usize,
        kernel_w: usize,
        stride_h: usize,
        stride_w: usize,
        maps: usize,
        /// Zero rows and columns added on every side.
        #[serde(default)]
        padding: usize,
    },
    #[serde(rename = "avgpool")]
    AvgPool { window: usize, stride: usize },
    Dense { outputs: usize },
    Square,
    Softmax,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. } | LayerSpec::Dense { .. })
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { .. } | LayerSpec::AvgPool { .. } | LayerSpec::Dense { .. }
        )
    }

    fn pads(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv { padding, .. } => (padding, padding),
            _ => (0, 0),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let window = |inp: usize, k: usize, s: usize, pad: usize| {
            let padded = inp + 2 * pad;
            if k == 0 || s == 0 || k > padded || pad >= k {
                Err(Error::Shape(format!(
                    "window {k} stride {s} does not fit input {inp} (padding {pad})"
                )))
            } else {
                Ok((padded - k) / s + 1)
            }
        };
        let (ph, pw) = self.pads();
        Ok(match *self {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                stride_h,
                stride_w,
                maps,
                ..
            } => Shape::new(
                maps,
                window(input.height, kernel_h, stride_h, ph)?,
                window(input.width, kernel_w, stride_w, pw)?,
            ),
            LayerSpec::AvgPool { window: k, stride } => Shape::new(
                input.channels,
                window(input.height, k, stride, 0)?,
                window(input.width, k, stride, 0)?,
            ),
            LayerSpec::Dense { outputs } => Shape::flat(outputs),
            LayerSpec::Square | LayerSpec::Softmax => input,
        })
    }

    /// Expected `(weights, bias)` lengths for this layer on `input`.
    pub fn param_lens(&self, input: Shape) -> (usize, usize) {
        match *self {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                maps,
                ..
            } => (maps * input.channels * kernel_h * kernel_w, maps),
            LayerSpec::Dense { outputs } => (outputs * input.len(), outputs),
            _ => (0, 0),
        }
    }
}

/// A layer with real weights. Conv weights are `maps x channels x kh x kw`,
/// dense weights `outputs x inputs`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn new(spec: LayerSpec, weights: Vec<f64>, bias: Vec<f64>) -> Self {
        Self {
            spec,
            weights,
            bias,
        }
    }

    /// A parameter-free layer, or a layer described by shape only.
    pub fn shape_only(spec: LayerSpec) -> Self {
        Self::new(spec, Vec::new(), Vec::new())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input: Shape,
    pub layers: Vec<Layer>,
}

impl Network {
    /// Checks that shapes chain and parameters have the declared lengths.
    /// Layers without weights are accepted as shape-only descriptions.
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self> {
        let mut shape = input;
        for (i, layer) in layers.iter().enumerate() {
            let (w, b) = layer.spec.param_lens(shape);
            let shape_only = layer.weights.is_empty() && layer.bias.is_empty();
            if !shape_only && (layer.weights.len() != w || layer.bias.len() != b) {
                return Err(Error::Shape(format!(
                    "layer {i}: expected {w} weights and {b} biases, got {} and {}",
                    layer.weights.len(),
                    layer.bias.len()
                )));
            }
            if matches!(layer.spec, LayerSpec::Softmax) && i + 1 != layers.len() {
                return Err(Error::Shape(format!("layer {i}: softmax must be last")));
            }
            shape = layer.spec.output_shape(shape)?;
        }
        Ok(Self { input, layers })
    }

    pub fn output_shape(&self) -> Shape {
        self.layers
            .iter()
            .fold(self.input, |s, l| l.spec.output_shape(s).expect("validated"))
    }

    pub fn has_weights(&self) -> bool {
        self.layers
            .iter()
            .all(|l| !l.spec.has_params() || !l.weights.is_empty())
    }

    /// Layer-by-layer float evaluation.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input.len() {
            return Err(Error::Shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input.len()
            )));
        }
        let mut cur = x.to_vec();
        let mut shape = self.input;
        for layer in &self.layers {
            (cur, shape) = apply_layer(layer, &cur, shape, true, None)?;
        }
        Ok(cur)
    }
}

fn require_weights(layer: &Layer) -> Result<()> {
    if layer.weights.is_empty() && layer.spec.has_params() {
        return Err(Error::Shape("layer has no weights".into()));
    }
    Ok(())
}

/// Applies one layer; `with_bias = false` evaluates the linear part only and
/// `pads` overrides the layer's own padding.
fn apply_layer(
    layer: &Layer,
    x: &[f64],
    shape: Shape,
    with_bias: bool,
    pads: Option<(usize, usize)>,
) -> Result<(Vec<f64>, Shape)> {
    match layer.spec {
        LayerSpec::Conv {
            kernel_h,
            kernel_w,
            stride_h,
            stride_w,
            maps,
            ..
        } => {
            require_weights(layer)?;
            let (ph, pw) = pads.unwrap_or_else(|| layer.spec.pads());
            let oh = (shape.height + 2 * ph - kernel_h) / stride_h + 1;
            let ow = (shape.width + 2 * pw - kernel_w) / stride_w + 1;
            let c_in = shape.channels;
            let mut out = vec![0.0; maps * oh * ow];
            for m in 0..maps {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = if with_bias { layer.bias[m] } else { 0.0 };
                        for c in 0..c_in {
                            for dy in 0..kernel_h {
                                let y = (oy * stride_h + dy) as isize - ph as isize;
                                if y < 0 || y >= shape.height as isize {
                                    continue;
                                }
                                for dx in 0..kernel_w {
                                    let xx = (ox * stride_w + dx) as isize - pw as isize;
                                    if xx < 0 || xx >= shape.width as isize {
                                        continue;
                                    }
                                    let w = layer.weights
                                        [((m * c_in + c) * kernel_h + dy) * kernel_w + dx];
                                    acc += w * x[(c * shape.height + y as usize) * shape.width
                                        + xx as usize];
                                }
                            }
                        }
                        out[(m * oh + oy) * ow + ox] = acc;
                    }
                }
            }
            Ok((out, Shape::new(maps, oh, ow)))
        }
        LayerSpec::AvgPool { window, stride } => {
            let out_shape = layer.spec.output_shape(shape)?;
            let norm = 1.0 / (window * window) as f64;
            let mut out = vec![0.0; out_shape.len()];
            for c in 0..shape.channels {
                for oy in 0..out_shape.height {
                    for ox in 0..out_shape.width {
                        let mut acc = 0.0;
                        for dy in 0..window {
                            for dx in 0..window {
                                acc += x[(c * shape.height + oy * stride + dy) * shape.width
                                    + ox * stride
                                    + dx];
                            }
                        }
                        out[(c * out_shape.height + oy) * out_shape.width + ox] = acc * norm;
                    }
                }
            }
            Ok((out, out_shape))
        }
        LayerSpec::Dense { outputs } => {
            require_weights(layer)?;
            let k = x.len();
            let out = (0..outputs)
                .map(|i| {
                    let dot: f64 = layer.weights[i * k..(i + 1) * k]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum();
                    if with_bias {
                        dot + layer.bias[i]
                    } else {
                        dot
                    }
                })
                .collect();
            Ok((out, Shape::flat(outputs)))
        }
        LayerSpec::Square => Ok((x.iter().map(|v| v * v).collect(), shape)),
        LayerSpec::Softmax => Ok((x.to_vec(), shape)),
    }
}

/// Arithmetic shared by the float and integer stage evaluators.
pub trait Scalar:
    Copy + Default + PartialEq + Send + Sync + Add<Output = Self> + Mul<Output = Self> + std::fmt::Debug
{
}

impl Scalar for f64 {}
impl Scalar for i128 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    Conv { geom: ConvGeometry },
    Dense,
}

/// One collapsed affine map. Conv weights are `maps x taps` in the tap order
/// of [`ConvGeometry::source`]; dense weights are `outputs x inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStage<T> {
    pub kind: LinearKind,
    pub input: Shape,
    pub output: Shape,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearStage<T> {
    pub fn has_weights(&self) -> bool {
        !self.weights.is_empty()
    }

    pub fn outputs(&self) -> usize {
        self.output.len()
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        match self.kind {
            LinearKind::Dense => {
                let k = self.input.len();
                (0..self.outputs())
                    .map(|i| {
                        self.weights[i * k..(i + 1) * k]
                            .iter()
                            .zip(x)
                            .fold(self.bias[i], |acc, (&w, &v)| acc + w * v)
                    })
                    .collect()
            }
            LinearKind::Conv { geom } => {
                let taps = geom.taps();
                let maps = self.output.channels;
                let mut out = Vec::with_capacity(maps * geom.positions());
                for m in 0..maps {
                    for i in 0..geom.positions() {
                        let mut acc = self.bias[m];
                        for j in 0..taps {
                            if let Some((c, y, xx)) = geom.source(i, j) {
                                acc = acc
                                    + self.weights[m * taps + j] * x[(c * geom.height + y) * geom.width + xx];
                            }
                        }
                        out.push(acc);
                    }
                }
                out
            }
        }
    }

    /// Explicit `outputs x inputs` matrix over the unpadded input, and the
    /// bias expanded to one entry per output.
    pub fn matrix(&self) -> (Vec<T>, Vec<T>) {
        let k = self.input.len();
        match self.kind {
            LinearKind::Dense => (self.weights.clone(), self.bias.clone()),
            LinearKind::Conv { geom } => {
                let taps = geom.taps();
                let positions = geom.positions();
                let maps = self.output.channels;
                let mut w = vec![T::default(); maps * positions * k];
                let mut bias = Vec::with_capacity(maps * positions);
                for m in 0..maps {
                    for i in 0..positions {
                        let row = &mut w[(m * positions + i) * k..(m * positions + i + 1) * k];
                        for j in 0..taps {
                            if let Some((c, y, xx)) = geom.source(i, j) {
                                let col = (c * geom.height + y) * geom.width + xx;
                                row[col] = row[col] + self.weights[m * taps + j];
                            }
                        }
                        bias.push(self.bias[m]);
                    }
                }
                (w, bias)
            }
        }
    }

    /// Bias of every output coordinate.
    pub fn expanded_bias(&self) -> Vec<T> {
        match self.kind {
            LinearKind::Dense => self.bias.clone(),
            LinearKind::Conv { geom } => self
                .bias
                .iter()
                .flat_map(|&b| std::iter::repeat_n(b, geom.positions()))
                .collect(),
        }
    }

    /// Nonzero-structure of the map: `(input, weight)` pairs per output.
    /// Padding taps are left out; zero weights are kept.
    pub fn terms(&self) -> Vec<Vec<(usize, T)>> {
        match self.kind {
            LinearKind::Dense => {
                let k = self.input.len();
                (0..self.outputs())
                    .map(|i| (0..k).map(|j| (j, self.weights[i * k + j])).collect())
                    .collect()
            }
            LinearKind::Conv { geom } => {
                let taps = geom.taps();
                (0..self.output.channels)
                    .flat_map(|m| {
                        (0..geom.positions()).map(move |i| {
                            (0..taps)
                                .filter_map(|j| {
                                    geom.source(i, j).map(|(c, y, x)| {
                                        ((c * geom.height + y) * geom.width + x, self.weights[m * taps + j])
                                    })
                                })
                                .collect()
                        })
                    })
                    .collect()
            }
        }
    }

    /// Number of terms per output, without needing weights.
    pub fn term_counts(&self) -> Vec<usize> {
        match self.kind {
            LinearKind::Dense => vec![self.input.len(); self.outputs()],
            LinearKind::Conv { geom } => {
                let per_pos: Vec<usize> = (0..geom.positions())
                    .map(|i| (0..geom.taps()).filter(|&j| geom.source(i, j).is_some()).count())
                    .collect();
                per_pos.repeat(self.output.channels)
            }
        }
    }

    /// Rows of the map as `(weights, bias)`, one per distinct row shape
    /// (per map for convolutions).
    pub fn rows(&self) -> Vec<(&[T], T)> {
        let width = match self.kind {
            LinearKind::Dense => self.input.len(),
            LinearKind::Conv { geom, .. } => geom.taps(),
        };
        self.weights
            .chunks(width.max(1))
            .zip(&self.bias)
            .map(|(w, &b)| (w, b))
            .collect()
    }

    pub fn map_weights<U>(&self, f: impl Fn(T) -> U) -> LinearStage<U> {
        LinearStage {
            kind: self.kind,
            input: self.input,
            output: self.output,
            weights: self.weights.iter().map(|&w| f(w)).collect(),
            bias: self.bias.iter().map(|&b| f(b)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage<T> {
    Linear(LinearStage<T>),
    Square,
}

/// Alternating affine maps and squares.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapsedNetwork<T> {
    pub input: Shape,
    pub stages: Vec<Stage<T>>,
}

impl<T: Scalar> CollapsedNetwork<T> {
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.input.len() {
            return Err(Error::Shape(format!(
                "input has {} values, network expects {}",
                x.len(),
                self.input.len()
            )));
        }
        let mut cur = x.to_vec();
        for stage in &self.stages {
            cur = match stage {
                Stage::Linear(l) => {
                    if !l.has_weights() {
                        return Err(Error::Shape("network has no weights".into()));
                    }
                    l.apply(&cur)
                }
                Stage::Square => cur.iter().map(|&v| v * v).collect(),
            };
        }
        Ok(cur)
    }

    pub fn map_weights<U>(&self, f: impl Fn(T) -> U + Copy) -> CollapsedNetwork<U> {
        CollapsedNetwork {
            input: self.input,
            stages: self
                .stages
                .iter()
                .map(|s| match s {
                    Stage::Linear(l) => Stage::Linear(l.map_weights(f)),
                    Stage::Square => Stage::Square,
                })
                .collect(),
        }
    }

    pub fn linear_stages(&self) -> impl Iterator<Item = &LinearStage<T>> {
        self.stages.iter().filter_map(|s| match s {
            Stage::Linear(l) => Some(l),
            Stage::Square => None,
        })
    }

    pub fn output_len(&self) -> usize {
        self.linear_stages().last().map_or(self.input.len(), |l| l.outputs())
    }

    pub fn has_weights(&self) -> bool {
        self.linear_stages().all(LinearStage::has_weights)
    }
}

/// Replaces every maximal run of linear layers by one affine stage.
///
/// Runs of convolutions and pools where only the first layer pads become a
/// single convolution whose window covers the composite receptive field.
/// Other runs become explicit dense matrices.
pub fn collapse(net: &Network) -> Result<CollapsedNetwork<f64>> {
    let mut stages = Vec::new();
    let mut shape = net.input;
    let mut i = 0;
    while i < net.layers.len() {
        match net.layers[i].spec {
            LayerSpec::Square => {
                stages.push(Stage::Square);
                i += 1;
            }
            LayerSpec::Softmax => i += 1,
            _ => {
                let start = i;
                while i < net.layers.len() && net.layers[i].spec.is_linear() {
                    i += 1;
                }
                let run = &net.layers[start..i];
                let stage = collapse_run(run, shape)?;
                shape = stage.output;
                stages.push(Stage::Linear(stage));
            }
        }
    }
    Ok(CollapsedNetwork {
        input: net.input,
        stages,
    })
}

fn run_output(run: &[Layer], input: Shape) -> Result<Shape> {
    run.iter().try_fold(input, |s, l| l.spec.output_shape(s))
}

fn run_forward(run: &[Layer], x: &[f64], input: Shape, with_bias: bool, first_pad: Option<(usize, usize)>) -> Result<Vec<f64>> {
    let mut cur = x.to_vec();
    let mut shape = input;
    for (k, layer) in run.iter().enumerate() {
        let pads = if k == 0 { first_pad } else { None };
        (cur, shape) = apply_layer(layer, &cur, shape, with_bias, pads)?;
    }
    Ok(cur)
}

fn collapse_run(run: &[Layer], input: Shape) -> Result<LinearStage<f64>> {
    let output = run_output(run, input)?;
    let shape_only = run.iter().any(|l| l.weights.is_empty() && l.spec.has_params());
    if let Some(geom) = composite_conv(run, input, output) {
        let kind = LinearKind::Conv { geom };
        if shape_only {
            return Ok(LinearStage {
                kind,
                input,
                output,
                weights: Vec::new(),
                bias: Vec::new(),
            });
        }
        let patch = Shape::new(geom.channels, geom.kernel_h, geom.kernel_w);
        let taps = geom.taps();
        let responses = (0..taps)
            .into_par_iter()
            .map(|j| {
                let mut e = vec![0.0; taps];
                e[j] = 1.0;
                run_forward(run, &e, patch, false, Some((0, 0)))
            })
            .collect::<Result<Vec<_>>>()?;
        let maps = output.channels;
        let mut weights = vec![0.0; maps * taps];
        for (j, r) in responses.iter().enumerate() {
            for m in 0..maps {
                weights[m * taps + j] = r[m];
            }
        }
        let bias = run_forward(run, &vec![0.0; taps], patch, true, Some((0, 0)))?;
        return Ok(LinearStage {
            kind,
            input,
            output,
            weights,
            bias,
        });
    }

    if shape_only {
        return Ok(LinearStage {
            kind: LinearKind::Dense,
            input,
            output: Shape::flat(output.len()),
            weights: Vec::new(),
            bias: Vec::new(),
        });
    }
    // Multiply per-layer matrices starting from the output side, where they
    // are narrowest.
    let mut shapes = vec![input];
    for l in run {
        shapes.push(l.spec.output_shape(*shapes.last().expect("non-empty"))?);
    }
    let mut acc: Option<(Vec<f64>, usize)> = None;
    for (k, layer) in run.iter().enumerate().rev() {
        let m = layer_matrix(layer, shapes[k])?;
        let (rows_in, cols) = (shapes[k + 1].len(), shapes[k].len());
        acc = Some(match acc {
            None => (m, rows_in),
            Some((a, rows)) => (matmul(&a, rows, rows_in, &m, cols), rows),
        });
    }
    let (weights, _) = acc.expect("non-empty run");
    let bias = run_forward(run, &vec![0.0; input.len()], input, true, None)?;
    Ok(LinearStage {
        kind: LinearKind::Dense,
        input,
        output: Shape::flat(output.len()),
        weights,
        bias,
    })
}

fn matmul(a: &[f64], rows: usize, inner: usize, b: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    out.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
        for t in 0..inner {
            let x = a[i * inner + t];
            if x != 0.0 {
                for (o, &y) in row.iter_mut().zip(&b[t * cols..(t + 1) * cols]) {
                    *o += x * y;
                }
            }
        }
    });
    out
}

/// The linear part of one layer as an explicit `out x in` matrix.
fn layer_matrix(layer: &Layer, input: Shape) -> Result<Vec<f64>> {
    let out = layer.spec.output_shape(input)?;
    let (k, r) = (input.len(), out.len());
    if let LayerSpec::Dense { .. } = layer.spec {
        require_weights(layer)?;
        return Ok(layer.weights.clone());
    }
    let cols = (0..k)
        .into_par_iter()
        .map(|j| {
            let mut e = vec![0.0; k];
            e[j] = 1.0;
            apply_layer(layer, &e, input, false, None).map(|(v, _)| v)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut m = vec![0.0; r * k];
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m[i * k + j] = v;
        }
    }
    Ok(m)
}

/// Geometry of the convolution equivalent to a run of convs and pools, if
/// one exists.
fn composite_conv(run: &[Layer], input: Shape, output: Shape) -> Option<ConvGeometry> {
    let (mut kh, mut kw, mut sh, mut sw) = (1, 1, 1, 1);
    let mut first_pads = (0, 0);
    for (k, layer) in run.iter().enumerate() {
        let (lkh, lkw, lsh, lsw) = match layer.spec {
            LayerSpec::Conv {
                kernel_h,
                kernel_w,
                stride_h,
                stride_w,
                ..
            } => (kernel_h, kernel_w, stride_h, stride_w),
            LayerSpec::AvgPool { window, stride } => (window, window, stride, stride),
            _ => return None,
        };
        let pads = layer.spec.pads();
        if k == 0 {
            first_pads = pads;
        } else if pads != (0, 0) {
            return None;
        }
        kh += (lkh - 1) * sh;
        kw += (lkw - 1) * sw;
        sh *= lsh;
        sw *= lsw;
    }
    let geom = ConvGeometry {
        channels: input.channels,
        height: input.height,
        width: input.width,
        kernel_h: kh,
        kernel_w: kw,
        stride_h: sh,
        stride_w: sw,
        pad_h: first_pads.0,
        pad_w: first_pads.1,
    };
    let fits = geom.validate().is_ok() && geom.out_h() == output.height && geom.out_w() == output.width;
    fits.then_some(geom)
}
