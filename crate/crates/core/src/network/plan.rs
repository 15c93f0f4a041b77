use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CollapsedNetwork, LinearKind, LinearStage, Scalar, Shape, Stage};
use crate::backend::{Evaluator, OpCounters};
use crate::error::{Error, Result};
use crate::kernels::KernelCostModel;
use crate::repr::{
    clean_cost, combine_cost, combined_rep, dense_to_convolution_cost, encode_convolution, encode_dense,
    encode_simd, encode_sparse, plan_dense_to_convolution, sparse_to_dense_cost, stack_cost, stacked_rep,
    ConvGeometry, EncodedTensor, PixelOrder, RepKind, Representation,
};

/// Plaintext primes used when none are given.
pub const DEFAULT_PRIMES: [u64; 3] = [2148728833, 2148794369, 2149810177];

/// Default window-volume x maps above which a convolution after the first
/// layer is evaluated as a dense matrix.
pub const CONV_DENSE_THRESHOLD: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    LolaMnist,
    LolaDenseMnist,
    LolaCifar,
    CryptonetsSimd,
    LinearFeatures,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::LolaMnist,
        Preset::LolaDenseMnist,
        Preset::LolaCifar,
        Preset::CryptonetsSimd,
        Preset::LinearFeatures,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::LolaMnist => "lola-mnist",
            Preset::LolaDenseMnist => "lola-dense-mnist",
            Preset::LolaCifar => "lola-cifar",
            Preset::CryptonetsSimd => "cryptonets-simd",
            Preset::LinearFeatures => "linear-features",
        }
    }

    pub fn default_n(self) -> usize {
        match self {
            Preset::LolaDenseMnist | Preset::LolaCifar => 16384,
            _ => 8192,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown plan '{s}'")))
    }
}

/// Kernel used for one linear stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinearChoice {
    /// The client sends the convolution representation (first stage only).
    ClientConv,
    /// Masks a dense vector into window messages.
    MaskedConv,
    RowMajor,
    Stacked,
    ColMajor,
    Simd,
}

impl FromStr for LinearChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "client-conv" => LinearChoice::ClientConv,
            "masked-conv" => LinearChoice::MaskedConv,
            "row-major" => LinearChoice::RowMajor,
            "stacked" => LinearChoice::Stacked,
            "col-major" => LinearChoice::ColMajor,
            "simd" => LinearChoice::Simd,
            other => return Err(Error::InvalidParams(format!("unknown kernel '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Strategy {
    Preset(Preset),
    Custom(Vec<LinearChoice>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanConfig {
    pub n: usize,
    pub primes: Vec<u64>,
    pub conv_dense_threshold: usize,
}

impl PlanConfig {
    pub fn new(n: usize, primes: Vec<u64>) -> Self {
        Self {
            n,
            primes,
            conv_dense_threshold: CONV_DENSE_THRESHOLD,
        }
    }

    pub fn for_preset(p: Preset) -> Self {
        Self::new(p.default_n(), DEFAULT_PRIMES.to_vec())
    }
}

/// How the client encodes the (channel-major) input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputEncoding {
    Convolution {
        geom: ConvGeometry,
        positions: Option<Vec<usize>>,
    },
    /// One dense message holding the image flattened with `order`.
    DenseImage { order: PixelOrder },
    Dense,
    Sparse,
    Simd,
}

/// What flows between steps: one tensor or several single-message parts.
#[derive(Debug, Clone, PartialEq)]
pub enum Carrier {
    Tensor(Representation),
    Parts(Vec<Representation>),
}

impl Carrier {
    pub fn message_count(&self) -> usize {
        match self {
            Carrier::Tensor(r) => r.message_count(),
            Carrier::Parts(p) => p.len(),
        }
    }

    /// `count×dim` as printed in traces.
    pub fn size_label(&self) -> String {
        match self {
            Carrier::Tensor(r) => format!("{}×{}", r.message_count(), r.message_dim()),
            Carrier::Parts(p) => format!("{}×{}", p.len(), p[0].message_dim()),
        }
    }

    pub fn rep_label(&self) -> &'static str {
        match self {
            Carrier::Tensor(r) => r.label(),
            Carrier::Parts(p) => p[0].label(),
        }
    }

    fn tensor(&self) -> Option<&Representation> {
        match self {
            Carrier::Tensor(r) => Some(r),
            Carrier::Parts(_) => None,
        }
    }
}

impl fmt::Display for Carrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.size_label(), self.rep_label())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOp {
    MaskToConv { geom: ConvGeometry, order: PixelOrder },
    Conv,
    Combine { offsets: Vec<i64>, clean: bool },
    Clean,
    Square,
    Stack { copies: usize },
    Stacked,
    RowMajor,
    SparseToDense { targets: Vec<usize> },
    ColMajor,
    SimdLinear,
    Output,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub layer: String,
    pub op: StepOp,
    /// Index into the network's stages of the linear stage this step uses.
    pub stage: Option<usize>,
    /// Add that stage's bias after the step.
    pub bias: bool,
    pub input: Carrier,
    pub output: Carrier,
    pub description: String,
    pub predicted: OpCounters,
}

impl PlanStep {
    /// Input size for traces; the final sparse scores read as `1×r`.
    pub fn size_label(&self) -> String {
        match (&self.op, &self.input) {
            (StepOp::Output, Carrier::Tensor(r)) if r.kind == RepKind::Sparse => format!("1×{}", r.len),
            _ => self.input.size_label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferencePlan {
    pub name: String,
    pub n: usize,
    pub primes: Vec<u64>,
    pub input_shape: Shape,
    pub input: InputEncoding,
    pub choices: Vec<LinearChoice>,
    pub steps: Vec<PlanStep>,
}

impl InferencePlan {
    pub fn predicted_totals(&self) -> OpCounters {
        let mut t = self
            .steps
            .iter()
            .fold(OpCounters::default(), |acc, s| acc.merged(&s.predicted.without_peak()));
        t.live_messages_peak = self.peak_messages() as u64;
        t
    }

    /// Multiplicative depth: one level per square.
    pub fn depth(&self) -> u32 {
        self.steps.iter().filter(|s| s.op == StepOp::Square).count() as u32
    }

    /// Largest number of messages any step consumes.
    pub fn peak_messages(&self) -> usize {
        self.steps.iter().map(|s| s.input.message_count()).max().unwrap_or(0)
    }

    pub fn input_rep(&self) -> &Carrier {
        &self.steps[0].input
    }

    pub fn output_rep(&self) -> &Carrier {
        &self.steps.last().expect("plans have an output step").output
    }

    /// Encodes one channel-major input record as the plan expects.
    pub fn encode_input(&self, ev: &Evaluator, x: &[i128]) -> Result<EncodedTensor> {
        if ev.n() != self.n {
            return Err(Error::InvalidParams(format!(
                "plan built for n = {}, evaluator has n = {}",
                self.n,
                ev.n()
            )));
        }
        if x.len() != self.input_shape.len() {
            return Err(Error::Shape(format!(
                "input has {} values, plan expects {}",
                x.len(),
                self.input_shape.len()
            )));
        }
        let s = self.input_shape;
        match &self.input {
            InputEncoding::Convolution { geom, positions } => encode_convolution(ev, x, geom, positions.clone()),
            InputEncoding::DenseImage { order } => encode_dense(ev, &order.flatten(x, s.channels, s.height, s.width)?),
            InputEncoding::Dense => encode_dense(ev, x),
            InputEncoding::Sparse => encode_sparse(ev, x),
            InputEncoding::Simd => encode_simd(ev, &[x.to_vec()]),
        }
    }
}

/// Kernel choice per linear stage for a preset.
pub fn preset_choices<T: Scalar>(
    preset: Preset,
    net: &CollapsedNetwork<T>,
    config: &PlanConfig,
) -> Vec<LinearChoice> {
    let linear: Vec<&LinearStage<T>> = net.linear_stages().collect();
    let last = linear.len().saturating_sub(1);
    linear
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let conv = matches!(l.kind, LinearKind::Conv { .. });
            match preset {
                Preset::CryptonetsSimd => LinearChoice::Simd,
                Preset::LinearFeatures => LinearChoice::RowMajor,
                _ if i == 0 && conv => match preset {
                    Preset::LolaDenseMnist => LinearChoice::MaskedConv,
                    _ => LinearChoice::ClientConv,
                },
                _ if i == 0 || i == last => LinearChoice::RowMajor,
                Preset::LolaCifar => match l.kind {
                    LinearKind::Conv { geom } if geom.taps() * l.output.channels <= config.conv_dense_threshold => {
                        LinearChoice::MaskedConv
                    }
                    _ => LinearChoice::RowMajor,
                },
                _ => LinearChoice::Stacked,
            }
        })
        .collect()
}

/// Builds the step sequence for `net` (weights are not needed).
pub fn build_plan<T: Scalar>(
    net: &CollapsedNetwork<T>,
    strategy: &Strategy,
    config: &PlanConfig,
) -> Result<InferencePlan> {
    let n = config.n;
    if !n.is_power_of_two() || n < 4 {
        return Err(Error::InvalidParams(format!("ring degree {n} is not a power of two >= 4")));
    }
    let (name, choices, fallback) = match strategy {
        Strategy::Preset(p) => (p.name().to_string(), preset_choices(*p, net, config), *p == Preset::LolaCifar),
        Strategy::Custom(c) => ("custom".to_string(), c.clone(), false),
    };
    let linear_count = net.linear_stages().count();
    if choices.len() != linear_count {
        return Err(Error::IncompatibleStrategy(format!(
            "{} kernel choices for {linear_count} linear stages",
            choices.len()
        )));
    }
    let mut b = Builder {
        n,
        cost: KernelCostModel::new(n),
        steps: Vec::new(),
    };
    let (input, mut carrier) = b.input(net, choices.first().copied())?;
    let mut choices_used = Vec::with_capacity(choices.len());
    let mut linear_idx = 0;
    for (si, stage) in net.stages.iter().enumerate() {
        match stage {
            Stage::Square => {
                let next = choices.get(linear_idx).copied();
                carrier = b.square(carrier, next)?;
            }
            Stage::Linear(l) => {
                let choice = choices[linear_idx];
                let saved = (b.steps.len(), carrier.clone());
                let result = b.linear(si, l, choice, carrier, linear_idx == 0);
                carrier = match result {
                    Ok(c) => {
                        choices_used.push(choice);
                        c
                    }
                    Err(e) if fallback && choice == LinearChoice::MaskedConv && linear_idx > 0 => {
                        b.steps.truncate(saved.0);
                        choices_used.push(LinearChoice::RowMajor);
                        b.linear(si, l, LinearChoice::RowMajor, saved.1, false)
                            .map_err(|_| e)?
                    }
                    Err(e) => return Err(e),
                };
                linear_idx += 1;
            }
        }
    }
    b.output(carrier);
    Ok(InferencePlan {
        name,
        n,
        primes: config.primes.clone(),
        input_shape: net.input,
        input,
        choices: choices_used,
        steps: b.steps,
    })
}

struct Builder {
    n: usize,
    cost: KernelCostModel,
    steps: Vec<PlanStep>,
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleStrategy(msg.into())
}

fn layer_name<T>(l: &LinearStage<T>) -> String {
    match l.kind {
        LinearKind::Conv { geom } => format!("{}×{} convolution layer", geom.kernel_h, geom.kernel_w),
        LinearKind::Dense => "dense layer".into(),
    }
}

fn plain_adds(count: usize) -> OpCounters {
    OpCounters {
        plain_add: count as u64,
        ..Default::default()
    }
}

/// Columns occupied per row by a set of slots.
fn column_span(slots: &[usize], n: usize) -> usize {
    slots.iter().map(|&s| s % (n / 2) + 1).max().unwrap_or(0)
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        layer: &str,
        op: StepOp,
        stage: Option<usize>,
        bias: bool,
        input: Carrier,
        output: Carrier,
        description: String,
        predicted: OpCounters,
    ) -> Carrier {
        let bias_cost = if bias { plain_adds(output.message_count()) } else { OpCounters::default() };
        let mut predicted = predicted.merged(&bias_cost);
        predicted.live_messages_peak = input.message_count() as u64;
        self.steps.push(PlanStep {
            layer: layer.to_string(),
            op,
            stage,
            bias,
            input,
            output: output.clone(),
            description,
            predicted,
        });
        output
    }

    /// Input encoding and the carrier it produces.
    fn input<T: Scalar>(
        &self,
        net: &CollapsedNetwork<T>,
        first: Option<LinearChoice>,
    ) -> Result<(InputEncoding, Carrier)> {
        let n = self.n;
        let len = net.input.len();
        let first_stage = net.linear_stages().next();
        let fits = |len: usize| {
            if len > n {
                Err(Error::Capacity(format!("{len} input values do not fit in {n} slots")))
            } else {
                Ok(())
            }
        };
        Ok(match first {
            Some(LinearChoice::ClientConv) => {
                let Some(LinearKind::Conv { geom }) = first_stage.map(|l| l.kind) else {
                    return Err(incompatible("client-side convolution needs a convolution first"));
                };
                let positions = client_positions(geom.positions(), first_stage.unwrap().output.channels, n)?;
                let enc = InputEncoding::Convolution {
                    geom,
                    positions: positions.clone(),
                };
                let positions = positions.unwrap_or_else(|| (0..geom.positions()).collect());
                let rep = conv_rep(&geom, PixelOrder::RowMajor, positions);
                (enc, Carrier::Tensor(rep))
            }
            Some(LinearChoice::MaskedConv) => {
                let Some(LinearKind::Conv { geom }) = first_stage.map(|l| l.kind) else {
                    return Err(incompatible("masked convolution needs a convolution"));
                };
                fits(len)?;
                let order = geom.polyphase();
                (InputEncoding::DenseImage { order }, Carrier::Tensor(Representation::dense(order.flat_len(
                    geom.channels,
                    geom.height,
                    geom.width,
                ))))
            }
            Some(LinearChoice::ColMajor) => (InputEncoding::Sparse, Carrier::Tensor(Representation::sparse(len, None))),
            Some(LinearChoice::Simd) => (InputEncoding::Simd, Carrier::Tensor(Representation::simd(len, 1))),
            _ => {
                fits(len)?;
                (InputEncoding::Dense, Carrier::Tensor(Representation::dense(len)))
            }
        })
    }

    fn linear<T: Scalar>(
        &mut self,
        si: usize,
        l: &LinearStage<T>,
        choice: LinearChoice,
        carrier: Carrier,
        first: bool,
    ) -> Result<Carrier> {
        let n = self.n;
        let layer = layer_name(l);
        let r = l.outputs();
        match choice {
            LinearChoice::ClientConv | LinearChoice::MaskedConv => {
                let LinearKind::Conv { geom } = l.kind else {
                    return Err(incompatible("convolution kernel chosen for a dense stage"));
                };
                if choice == LinearChoice::ClientConv && !first {
                    return Err(incompatible("client-side convolution is only possible on the input"));
                }
                let mut carrier = carrier;
                if choice == LinearChoice::MaskedConv {
                    carrier = self.to_single(&layer, carrier)?;
                    let rep = carrier.tensor().expect("single").clone();
                    let order = if first { geom.polyphase() } else { PixelOrder::RowMajor };
                    let plan = plan_dense_to_convolution(&rep, &geom, order, n).map_err(|e| match e {
                        Error::Shape(msg) => incompatible(format!("masked convolution: {msg}")),
                        e => e,
                    })?;
                    let predicted = dense_to_convolution_cost(&plan, n)?;
                    carrier = self.push(
                        &layer,
                        StepOp::MaskToConv { geom, order },
                        None,
                        false,
                        carrier,
                        Carrier::Tensor(plan.rep),
                        format!("mask input to create {} messages", geom.taps()),
                        predicted,
                    );
                }
                let Some(conv) = carrier.tensor().and_then(|r| r.conv.clone()) else {
                    return Err(incompatible("convolution kernel needs window messages"));
                };
                let maps = l.output.channels;
                let parts = vec![Representation::interleaved(conv.positions.clone()); maps];
                let carrier = self.push(
                    &layer,
                    StepOp::Conv,
                    Some(si),
                    false,
                    carrier,
                    Carrier::Parts(parts.clone()),
                    format!("convolution vector -- row major multiplication, {maps} maps"),
                    self.cost.conv(geom.taps(), maps),
                );
                let step = column_span(&conv.positions, n) as i64;
                let offsets: Vec<i64> = (0..maps as i64).map(|m| m * step).collect();
                self.combine(&layer, si, carrier, parts, offsets, false)
            }
            LinearChoice::RowMajor => {
                let carrier = self.to_single(&layer, carrier)?;
                let rep = carrier.tensor().expect("single").clone();
                if rep.len != l.input.len() {
                    return Err(Error::Shape(format!("{}-vector fed to a {}-input stage", rep.len, l.input.len())));
                }
                let pad = self.cost.dot_pad(rep.span());
                let valid = if pad == n { None } else { Some(0) };
                let kind = if rep.kind == RepKind::Dense { "dense" } else { "interleaved" };
                Ok(self.push(
                    &layer,
                    StepOp::RowMajor,
                    Some(si),
                    true,
                    carrier,
                    Carrier::Tensor(Representation::sparse(r, valid)),
                    format!("{kind} vector -- row major multiplication"),
                    self.cost.dense_rowmajor(r, pad),
                ))
            }
            LinearChoice::Stacked => {
                let mut carrier = self.to_single(&layer, carrier)?;
                let mut rep = carrier.tensor().expect("single").clone();
                if rep.len != l.input.len() {
                    return Err(Error::Shape(format!("{}-vector fed to a {}-input stage", rep.len, l.input.len())));
                }
                if rep.dirty {
                    rep = rep.with_dirty(false);
                    carrier = self.push(
                        &layer,
                        StepOp::Clean,
                        None,
                        false,
                        carrier,
                        Carrier::Tensor(rep.clone()),
                        "mask garbage slots".into(),
                        clean_cost(1),
                    );
                }
                let pad = rep.pad();
                if pad > n / 2 {
                    return Err(incompatible(format!("a {}-slot span does not fit one slot row for stacking", rep.span())));
                }
                let copies = n / pad;
                let stacked = stacked_rep(&rep, copies, n).map_err(|e| incompatible(e.to_string()))?;
                let carrier = self.push(
                    &layer,
                    StepOp::Stack { copies },
                    None,
                    false,
                    carrier,
                    Carrier::Tensor(stacked),
                    format!("stack {copies} copies"),
                    stack_cost(pad, copies, n)?,
                );
                let calls = self.cost.stacked_calls(r, pad);
                let parts: Vec<Representation> = (0..calls)
                    .map(|t| {
                        let rows = copies.min(r - t * copies);
                        Representation::interleaved((0..rows).map(|c| c * pad + pad - 1).collect()).with_dirty(true)
                    })
                    .collect();
                let carrier = self.push(
                    &layer,
                    StepOp::Stacked,
                    Some(si),
                    false,
                    carrier,
                    Carrier::Parts(parts.clone()),
                    format!("stacked vector -- row major multiplication in {calls} iterations of {copies} rows"),
                    self.cost.stacked_rowmajor(r, pad),
                );
                let offsets: Vec<i64> = (0..calls as i64).collect();
                self.combine(&layer, si, carrier, parts, offsets, true)
            }
            LinearChoice::ColMajor => {
                let Some(rep) = carrier.tensor().filter(|r| r.kind == RepKind::Sparse && r.valid_slot.is_none())
                else {
                    return Err(incompatible("column-major kernel needs sparse messages replicated in every slot"));
                };
                let k = rep.len;
                if k != l.input.len() {
                    return Err(Error::Shape(format!("{k} sparse messages fed to a {}-input stage", l.input.len())));
                }
                if r > n {
                    return Err(Error::Capacity(format!("{r} outputs exceed n = {n}")));
                }
                Ok(self.push(
                    &layer,
                    StepOp::ColMajor,
                    Some(si),
                    true,
                    carrier,
                    Carrier::Tensor(Representation::dense(r)),
                    "sparse vector -- column major multiplication".into(),
                    self.cost.sparse_colmajor(k),
                ))
            }
            LinearChoice::Simd => {
                let Some(rep) = carrier.tensor().filter(|r| r.kind == RepKind::Simd) else {
                    return Err(incompatible("SIMD kernel needs SIMD messages"));
                };
                let batch = rep.batch;
                Ok(self.push(
                    &layer,
                    StepOp::SimdLinear,
                    Some(si),
                    true,
                    carrier,
                    Carrier::Tensor(Representation::simd(r, batch)),
                    format!("weighted sums over messages, {r} outputs"),
                    self.cost.simd(l.term_counts()),
                ))
            }
        }
    }

    fn combine(
        &mut self,
        layer: &str,
        si: usize,
        carrier: Carrier,
        parts: Vec<Representation>,
        offsets: Vec<i64>,
        clean: bool,
    ) -> Result<Carrier> {
        let n = self.n;
        let cleaned: Vec<Representation> = parts.iter().map(|p| p.clone().with_dirty(false)).collect();
        let out = combined_rep(&cleaned, &offsets, n).map_err(|e| incompatible(e.to_string()))?;
        let mut predicted = combine_cost(&offsets, n)?;
        let mut description = String::new();
        if clean {
            predicted = predicted.merged(&clean_cost(parts.len()));
            description.push_str(&format!("mask {} messages, ", parts.len()));
        }
        description.push_str(&format!(
            "combine to one vector using {} rotations and additions",
            parts.len() - 1
        ));
        Ok(self.push(
            layer,
            StepOp::Combine { offsets, clean },
            Some(si),
            true,
            carrier,
            Carrier::Tensor(out),
            description,
            predicted,
        ))
    }

    /// Converts sparse messages into one dense message.
    fn to_single(&mut self, layer: &str, carrier: Carrier) -> Result<Carrier> {
        match carrier.tensor() {
            Some(r) if matches!(r.kind, RepKind::Dense | RepKind::Interleaved) => Ok(carrier),
            Some(r) if r.kind == RepKind::Sparse => {
                let k = r.len;
                if k > self.n {
                    return Err(Error::Capacity(format!("{k} values do not fit in {} slots", self.n)));
                }
                let targets: Vec<usize> = (0..k).collect();
                let predicted = sparse_to_dense_cost(r.valid_slot, &targets, self.n)?;
                Ok(self.push(
                    layer,
                    StepOp::SparseToDense { targets },
                    None,
                    false,
                    carrier,
                    Carrier::Tensor(Representation::dense(k)),
                    format!("convert {k} sparse messages into one dense vector"),
                    predicted,
                ))
            }
            _ => Err(incompatible(format!("kernel needs a single message, got {carrier}"))),
        }
    }

    fn square(&mut self, carrier: Carrier, next: Option<LinearChoice>) -> Result<Carrier> {
        let single_next = matches!(
            next,
            Some(LinearChoice::RowMajor | LinearChoice::Stacked | LinearChoice::MaskedConv)
        );
        let many_sparse = carrier
            .tensor()
            .is_some_and(|r| r.kind == RepKind::Sparse && r.len > 1);
        let carrier = if single_next && many_sparse {
            self.to_single("square layer", carrier)?
        } else {
            carrier
        };
        let count = carrier.message_count();
        let out = carrier.clone();
        Ok(self.push(
            "square layer",
            StepOp::Square,
            None,
            false,
            carrier,
            out,
            "square".into(),
            self.cost.square(count),
        ))
    }

    fn output(&mut self, carrier: Carrier) {
        let out = carrier.clone();
        let count = carrier.message_count();
        self.push(
            "output layer",
            StepOp::Output,
            None,
            false,
            carrier,
            out,
            format!("decrypt {count} messages"),
            OpCounters::default(),
        );
    }
}

fn conv_rep(geom: &ConvGeometry, order: PixelOrder, positions: Vec<usize>) -> Representation {
    let windows = crate::repr::conv_windows(geom, order);
    Representation::convolution(geom.input_len(), windows, positions)
}

/// Slots of the window positions when the client encodes the input: the
/// identity when every map fits in one row after combining, otherwise
/// half of the positions in each row.
fn client_positions(positions: usize, maps: usize, n: usize) -> Result<Option<Vec<usize>>> {
    let half = n / 2;
    if positions * maps <= half {
        return Ok(None);
    }
    let h = positions.div_ceil(2);
    if h * maps > half {
        return Err(incompatible(format!(
            "{maps} maps of {positions} window positions do not fit in {n} slots"
        )));
    }
    Ok(Some((0..positions).map(|i| if i < h { i } else { half + i - h }).collect()))
}
