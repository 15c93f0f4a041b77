use serde::Serialize;

use super::{CollapsedNetwork, LinearStage, Stage};
use crate::error::{Error, Result};
use crate::ring::{ntt_primes, CrtModulus};

/// Power-of-two fixed-point scales for the input and each linear stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuantizationPolicy {
    pub input_scale: f64,
    pub weight_scales: Vec<f64>,
    /// Largest `|x|` of a quantized input coordinate.
    pub input_bound: u128,
}

impl QuantizationPolicy {
    pub fn uniform(linear_stages: usize, weight_scale: f64, input_scale: f64, input_bound: u128) -> Self {
        Self {
            input_scale,
            weight_scales: vec![weight_scale; linear_stages],
            input_bound,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNetwork {
    pub net: CollapsedNetwork<i128>,
    pub input_scale: f64,
    /// Activation scale after each stage.
    pub scales: Vec<f64>,
    /// Magnitude bound after each stage.
    pub bounds: Vec<u128>,
}

impl QuantizedNetwork {
    /// Wraps an already-integer network, checking its bounds against `modulus`.
    pub fn from_integer(net: CollapsedNetwork<i128>, input_bound: u128, modulus: &CrtModulus) -> Result<Self> {
        let bounds = propagate_bounds(&net, input_bound);
        check_bounds(&bounds, modulus)?;
        let scales = vec![1.0; net.stages.len()];
        Ok(Self {
            net,
            input_scale: 1.0,
            scales,
            bounds,
        })
    }

    /// Plaintext integer forward pass.
    pub fn forward(&self, x: &[i128]) -> Result<Vec<i128>> {
        self.net.forward(x)
    }

    pub fn output_scale(&self) -> f64 {
        self.scales.last().copied().unwrap_or(self.input_scale)
    }

    pub fn final_bound(&self) -> u128 {
        self.bounds.last().copied().unwrap_or(0)
    }

    /// Fraction of inputs on which the float and quantized argmax agree.
    pub fn agreement_rate(&self, float: &CollapsedNetwork<f64>, inputs: &[Vec<f64>]) -> Result<f64> {
        if inputs.is_empty() {
            return Ok(1.0);
        }
        let mut agree = 0;
        for x in inputs {
            let f = float.forward(x)?;
            let q = self.forward(&quantize_input(x, self.input_scale))?;
            let fa = super::predict(&f);
            if fa == super::predict(&q) {
                agree += 1;
            }
        }
        Ok(agree as f64 / inputs.len() as f64)
    }
}

fn check_scale(s: f64) -> Result<()> {
    if s > 0.0 && s.log2().fract() == 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParams(format!("scale {s} is not a positive power of two")))
    }
}

pub fn quantize_input(x: &[f64], scale: f64) -> Vec<i128> {
    x.iter().map(|v| (v * scale).round_ties_even() as i128).collect()
}

/// Rounds every weight to `round(w * scale)` (ties to even) and every bias
/// to the activation scale it is added at, then checks that the propagated
/// magnitude bound fits the modulus after every stage.
pub fn quantize(
    net: &CollapsedNetwork<f64>,
    policy: &QuantizationPolicy,
    modulus: &CrtModulus,
) -> Result<QuantizedNetwork> {
    check_scale(policy.input_scale)?;
    let linear = net.linear_stages().count();
    if policy.weight_scales.len() != linear {
        return Err(Error::InvalidParams(format!(
            "{} weight scales for {linear} linear stages",
            policy.weight_scales.len()
        )));
    }
    let mut act = policy.input_scale;
    let mut scales = Vec::with_capacity(net.stages.len());
    let mut ws = policy.weight_scales.iter();
    let mut stages = Vec::with_capacity(net.stages.len());
    for stage in &net.stages {
        match stage {
            Stage::Linear(l) => {
                let w = *ws.next().expect("counted");
                check_scale(w)?;
                let q = quantize_stage(l, w, act * w);
                act *= w;
                stages.push(Stage::Linear(q));
            }
            Stage::Square => {
                act *= act;
                stages.push(Stage::Square);
            }
        }
        scales.push(act);
    }
    let net = CollapsedNetwork {
        input: net.input,
        stages,
    };
    let bounds = propagate_bounds(&net, policy.input_bound);
    check_bounds(&bounds, modulus)?;
    Ok(QuantizedNetwork {
        net,
        input_scale: policy.input_scale,
        scales,
        bounds,
    })
}

fn quantize_stage(l: &LinearStage<f64>, w_scale: f64, b_scale: f64) -> LinearStage<i128> {
    LinearStage {
        kind: l.kind,
        input: l.input,
        output: l.output,
        weights: l.weights.iter().map(|w| (w * w_scale).round_ties_even() as i128).collect(),
        bias: l.bias.iter().map(|b| (b * b_scale).round_ties_even() as i128).collect(),
    }
}

/// Bound on `|x|` after every stage: linear maps give the largest
/// `sum |w| * B + |b|` over rows, squares give `B^2`. Saturates at `u128::MAX`.
pub fn propagate_bounds(net: &CollapsedNetwork<i128>, input_bound: u128) -> Vec<u128> {
    let mut b = input_bound;
    net.stages
        .iter()
        .map(|stage| {
            b = match stage {
                Stage::Linear(l) => l
                    .rows()
                    .iter()
                    .map(|(w, bias)| {
                        let s = w.iter().fold(0u128, |acc, x| acc.saturating_add(x.unsigned_abs()));
                        s.saturating_mul(b).saturating_add(bias.unsigned_abs())
                    })
                    .max()
                    .unwrap_or(0),
                Stage::Square => b.saturating_mul(b),
            };
            b
        })
        .collect()
}

fn check_bounds(bounds: &[u128], modulus: &CrtModulus) -> Result<()> {
    let capacity = modulus.crt().half();
    match bounds.iter().position(|&b| b > capacity) {
        None => Ok(()),
        Some(layer) => Err(Error::LayerOverflow {
            layer,
            bound: bounds[layer],
            capacity,
            suggestion: suggest_primes(bounds.iter().copied().max().unwrap_or(0), modulus.n()),
        }),
    }
}

/// Smallest list of 31-bit NTT primes whose centered range covers `bound`.
fn suggest_primes(bound: u128, n: usize) -> String {
    let candidates = ntt_primes(n, 31, 4);
    let mut product: u128 = 1;
    for (k, &p) in candidates.iter().enumerate() {
        product = match product.checked_mul(p as u128) {
            Some(x) if x < 1 << 127 => x,
            _ => break,
        };
        if product / 2 >= bound {
            return format!("primes {:?} would suffice", &candidates[..=k]);
        }
    }
    "the bound exceeds what a 127-bit composite modulus can hold".into()
}
