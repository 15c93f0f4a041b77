use std::time::Instant;

use serde::Serialize;

use super::plan::{Carrier, InferencePlan, StepOp};
use super::{CollapsedNetwork, LinearStage, Stage};
use crate::backend::{BackendKind, Evaluator, OpCounters};
use crate::error::{Error, Result};
use crate::kernels::{
    conv_rowmajor, matvec_dense_rowmajor, matvec_interleaved_rowmajor, matvec_simd, matvec_sparse_colmajor,
    matvec_stacked_rowmajor, square_tensor, WeightMatrix,
};
use crate::repr::{
    clean, combine_interleaved, dense_to_convolution, sparse_to_dense, stack_copies, EncodedTensor, RepKind,
};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub layer: String,
    /// `count×dim` of the step input.
    pub input: String,
    pub representation: String,
    pub operation: String,
    pub output: String,
    pub predicted: OpCounters,
    pub measured: OpCounters,
    /// Wall time; never compared.
    #[serde(skip)]
    pub seconds: f64,
}

impl StepReport {
    pub fn matches_prediction(&self) -> bool {
        self.predicted.without_peak() == self.measured.without_peak()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub plan: String,
    pub backend: BackendKind,
    pub n: usize,
    pub primes: Vec<u64>,
    pub steps: Vec<StepReport>,
    pub totals: OpCounters,
    /// Largest multiplicative depth among the output messages.
    pub depth: u32,
    pub peak_messages: u64,
}

impl CostReport {
    pub fn matches_prediction(&self) -> bool {
        self.steps.iter().all(StepReport::matches_prediction)
    }
}

#[derive(Debug, Clone)]
pub struct Execution {
    pub scores: Vec<i128>,
    pub report: CostReport,
}

/// Index of the largest score; ties go to the lowest index.
pub fn predict<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn stage(net: &CollapsedNetwork<i128>, idx: Option<usize>) -> Result<&LinearStage<i128>> {
    match idx.and_then(|i| net.stages.get(i)) {
        Some(Stage::Linear(l)) if l.has_weights() => Ok(l),
        Some(Stage::Linear(_)) => Err(Error::Shape("network has no weights".into())),
        _ => Err(Error::Shape("plan refers to a stage the network does not have".into())),
    }
}

fn matrix(l: &LinearStage<i128>) -> Result<WeightMatrix> {
    let (w, _) = l.matrix();
    WeightMatrix::new(l.outputs(), l.input.len(), w)
}

enum Value {
    Tensor(EncodedTensor),
    Parts(Vec<EncodedTensor>),
}

impl Value {
    fn tensor(&self) -> Result<&EncodedTensor> {
        match self {
            Value::Tensor(t) => Ok(t),
            Value::Parts(_) => Err(Error::RepresentationMismatch {
                expected: "single tensor".into(),
                found: "message parts".into(),
            }),
        }
    }

    fn parts(&self) -> Result<&[EncodedTensor]> {
        match self {
            Value::Parts(p) => Ok(p),
            Value::Tensor(t) => Err(Error::RepresentationMismatch {
                expected: "message parts".into(),
                found: t.rep.label().into(),
            }),
        }
    }

    fn message_count(&self) -> usize {
        match self {
            Value::Tensor(t) => t.messages.len(),
            Value::Parts(p) => p.iter().map(|t| t.messages.len()).sum(),
        }
    }

    fn matches(&self, c: &Carrier) -> bool {
        match (self, c) {
            (Value::Tensor(t), Carrier::Tensor(r)) => &t.rep == r,
            (Value::Parts(p), Carrier::Parts(r)) => p.len() == r.len() && p.iter().zip(r).all(|(t, r)| &t.rep == r),
            _ => false,
        }
    }
}

/// Adds `bias[i]` at the slot(s) holding output `i`.
fn add_bias(ev: &Evaluator, t: EncodedTensor, bias: &[i128]) -> Result<EncodedTensor> {
    let n = ev.n();
    match t.rep.kind {
        RepKind::Dense | RepKind::Interleaved => {
            let mut plain = vec![0i128; n];
            for (&s, &b) in t.rep.layout.iter().zip(bias) {
                plain[s] = b;
            }
            let m = ev.add_plain(t.single()?, &ev.encode_plain(&plain)?)?;
            EncodedTensor::new(vec![m], t.rep)
        }
        RepKind::Sparse | RepKind::Simd => {
            let messages = t
                .messages
                .iter()
                .zip(bias)
                .map(|(m, &b)| ev.add_plain(m, &ev.encode_plain(&vec![b; n])?))
                .collect::<Result<Vec<_>>>()?;
            EncodedTensor::new(messages, t.rep)
        }
        _ => Err(Error::RepresentationMismatch {
            expected: "an output representation".into(),
            found: t.rep.label().into(),
        }),
    }
}

fn run_step(
    ev: &Evaluator,
    net: &CollapsedNetwork<i128>,
    op: &StepOp,
    stage_idx: Option<usize>,
    value: Value,
) -> Result<Value> {
    Ok(match op {
        StepOp::MaskToConv { geom, order } => Value::Tensor(dense_to_convolution(ev, value.tensor()?, geom, *order)?),
        StepOp::Conv => {
            let l = stage(net, stage_idx)?;
            let weights: Vec<Vec<i128>> = l.rows().into_iter().map(|(w, _)| w.to_vec()).collect();
            Value::Parts(conv_rowmajor(ev, &weights, value.tensor()?)?)
        }
        StepOp::Combine { offsets, clean: masked } => {
            let parts = value.parts()?;
            let parts = if *masked {
                parts.iter().map(|p| clean(ev, p)).collect::<Result<Vec<_>>>()?
            } else {
                parts.to_vec()
            };
            Value::Tensor(combine_interleaved(ev, &parts, offsets)?)
        }
        StepOp::Clean => Value::Tensor(clean(ev, value.tensor()?)?),
        StepOp::Square | StepOp::Output => match value {
            Value::Tensor(t) if *op == StepOp::Square => Value::Tensor(square_tensor(ev, &t)?),
            v => v,
        },
        StepOp::Stack { copies } => Value::Tensor(stack_copies(ev, value.tensor()?, *copies)?),
        StepOp::Stacked => {
            let w = matrix(stage(net, stage_idx)?)?;
            Value::Parts(matvec_stacked_rowmajor(ev, &w, value.tensor()?)?)
        }
        StepOp::RowMajor => {
            let t = value.tensor()?;
            let w = matrix(stage(net, stage_idx)?)?;
            Value::Tensor(if t.rep.kind == RepKind::Dense {
                matvec_dense_rowmajor(ev, &w, t)?
            } else {
                matvec_interleaved_rowmajor(ev, &w.with_permutation(t.rep.layout.clone())?, t)?
            })
        }
        StepOp::SparseToDense { targets } => Value::Tensor(sparse_to_dense(ev, value.tensor()?, targets)?),
        StepOp::ColMajor => {
            let w = matrix(stage(net, stage_idx)?)?;
            Value::Tensor(matvec_sparse_colmajor(ev, &w, value.tensor()?)?)
        }
        StepOp::SimdLinear => {
            let terms = stage(net, stage_idx)?.terms();
            Value::Tensor(matvec_simd(ev, &terms, value.tensor()?)?)
        }
    })
}

/// Runs `plan` on an encoded input. Scores are decoded from the final
/// representation; the report holds predicted and measured counters per step.
pub fn execute(
    plan: &InferencePlan,
    net: &CollapsedNetwork<i128>,
    input: EncodedTensor,
    ev: &Evaluator,
) -> Result<Execution> {
    if ev.n() != plan.n || ev.modulus().prime_values() != plan.primes {
        return Err(Error::InvalidParams(
            "evaluator parameters differ from the plan's (n, primes)".into(),
        ));
    }
    if net.input != plan.input_shape {
        return Err(Error::Shape("network input shape differs from the plan's".into()));
    }
    let mut value = Value::Tensor(input);
    if !value.matches(plan.input_rep()) {
        return Err(Error::RepresentationMismatch {
            expected: plan.input_rep().to_string(),
            found: value.tensor().map(|t| t.rep.to_string()).unwrap_or_default(),
        });
    }
    let mut steps = Vec::with_capacity(plan.steps.len());
    let mut totals = OpCounters::default();
    let mut peak = 0u64;
    for (index, step) in plan.steps.iter().enumerate() {
        let live = value.message_count();
        ev.observe_live(live);
        peak = peak.max(live as u64);
        let before = ev.counters();
        let start = Instant::now();
        value = run_step(ev, net, &step.op, step.stage, value)?;
        if step.bias {
            let bias = stage(net, step.stage)?.expanded_bias();
            let Value::Tensor(t) = value else {
                return Err(Error::Shape("bias added to message parts".into()));
            };
            value = Value::Tensor(add_bias(ev, t, &bias)?);
        }
        let seconds = start.elapsed().as_secs_f64();
        if !value.matches(&step.output) {
            return Err(Error::RepresentationMismatch {
                expected: step.output.to_string(),
                found: match &value {
                    Value::Tensor(t) => t.rep.to_string(),
                    Value::Parts(p) => format!("{} parts", p.len()),
                },
            });
        }
        let mut measured = ev.counters().since(&before);
        measured.live_messages_peak = live as u64;
        totals = totals.merged(&measured);
        steps.push(StepReport {
            index,
            layer: step.layer.clone(),
            input: step.size_label(),
            representation: step.input.rep_label().to_string(),
            operation: step.description.clone(),
            output: step.output.to_string(),
            predicted: step.predicted,
            measured,
            seconds,
        });
    }
    let out = value.tensor()?;
    let scores = out.decode(ev);
    let depth = out.messages.iter().map(|m| m.depth()).max().unwrap_or(0);
    totals.live_messages_peak = peak;
    Ok(Execution {
        scores,
        report: CostReport {
            plan: plan.name.clone(),
            backend: ev.backend(),
            n: plan.n,
            primes: plan.primes.clone(),
            steps,
            totals,
            depth,
            peak_messages: peak,
        },
    })
}

/// Encodes `x`, runs the plan and returns scores with the report.
pub fn run(plan: &InferencePlan, net: &CollapsedNetwork<i128>, x: &[i128], ev: &Evaluator) -> Result<Execution> {
    let input = plan.encode_input(ev, x)?;
    execute(plan, net, input, ev)
}
