//! The evaluator that stands in for the encryption scheme.
//!
//! A [`Message`] carries one limb per prime of the plaintext modulus. The
//! [`BackendKind::Slot`] backend stores slot values and computes directly on
//! them; [`BackendKind::Ring`] stores ring coefficients and realizes every
//! operation through `ring` (NTT products, automorphism rotations). Both must
//! lower to identical integers.
//!
//! Noise is modeled by a multiplicative depth counter and a per-slot bound
//! on the absolute value of the underlying signed integers.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ring::arith::{add_mod, mul_mod, reduce_signed};
use crate::ring::{CrtModulus, RingElement, Rotation, SlotVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Slot,
    Ring,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Slot => "slot",
            BackendKind::Ring => "ring",
        })
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slot" => Ok(BackendKind::Slot),
            "ring" => Ok(BackendKind::Ring),
            other => Err(Error::InvalidParams(format!("unknown backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetPolicy {
    pub max_depth: u32,
}

impl Default for BudgetPolicy {
    fn default() -> Self {
        Self { max_depth: 16 }
    }
}

/// Exact operation counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OpCounters {
    pub ct_ct_mul: u64,
    pub ct_plain_mul: u64,
    pub scalar_mul: u64,
    pub add: u64,
    pub plain_add: u64,
    /// Primitive (power-of-two) column rotations.
    pub rot_cols: u64,
    pub rot_rows: u64,
    /// Rotation requests before decomposition into primitives.
    pub rot_calls: u64,
    /// Subset of `ct_plain_mul` whose plaintext is a 0/1 mask.
    pub mask_mul: u64,
    pub live_messages_peak: u64,
}

impl OpCounters {
    pub fn rotations(&self) -> u64 {
        self.rot_cols + self.rot_rows
    }

    /// Componentwise sum; the live peak takes the maximum.
    pub fn merged(&self, o: &OpCounters) -> OpCounters {
        OpCounters {
            ct_ct_mul: self.ct_ct_mul + o.ct_ct_mul,
            ct_plain_mul: self.ct_plain_mul + o.ct_plain_mul,
            scalar_mul: self.scalar_mul + o.scalar_mul,
            add: self.add + o.add,
            plain_add: self.plain_add + o.plain_add,
            rot_cols: self.rot_cols + o.rot_cols,
            rot_rows: self.rot_rows + o.rot_rows,
            rot_calls: self.rot_calls + o.rot_calls,
            mask_mul: self.mask_mul + o.mask_mul,
            live_messages_peak: self.live_messages_peak.max(o.live_messages_peak),
        }
    }

    /// Difference of the additive counters; the peak is taken from `self`.
    pub fn since(&self, earlier: &OpCounters) -> OpCounters {
        OpCounters {
            ct_ct_mul: self.ct_ct_mul - earlier.ct_ct_mul,
            ct_plain_mul: self.ct_plain_mul - earlier.ct_plain_mul,
            scalar_mul: self.scalar_mul - earlier.scalar_mul,
            add: self.add - earlier.add,
            plain_add: self.plain_add - earlier.plain_add,
            rot_cols: self.rot_cols - earlier.rot_cols,
            rot_rows: self.rot_rows - earlier.rot_rows,
            rot_calls: self.rot_calls - earlier.rot_calls,
            mask_mul: self.mask_mul - earlier.mask_mul,
            live_messages_peak: self.live_messages_peak,
        }
    }

    /// Additive counters only, for comparing predicted and measured deltas.
    pub fn without_peak(mut self) -> OpCounters {
        self.live_messages_peak = 0;
        self
    }
}

#[derive(Debug, Default)]
struct AtomicCounters {
    ct_ct_mul: AtomicU64,
    ct_plain_mul: AtomicU64,
    scalar_mul: AtomicU64,
    add: AtomicU64,
    plain_add: AtomicU64,
    rot_cols: AtomicU64,
    rot_rows: AtomicU64,
    rot_calls: AtomicU64,
    mask_mul: AtomicU64,
    live_messages_peak: AtomicU64,
}

impl AtomicCounters {
    fn snapshot(&self) -> OpCounters {
        let ld = |a: &AtomicU64| a.load(Ordering::SeqCst);
        OpCounters {
            ct_ct_mul: ld(&self.ct_ct_mul),
            ct_plain_mul: ld(&self.ct_plain_mul),
            scalar_mul: ld(&self.scalar_mul),
            add: ld(&self.add),
            plain_add: ld(&self.plain_add),
            rot_cols: ld(&self.rot_cols),
            rot_rows: ld(&self.rot_rows),
            rot_calls: ld(&self.rot_calls),
            mask_mul: ld(&self.mask_mul),
            live_messages_peak: ld(&self.live_messages_peak),
        }
    }
}

fn bump(a: &AtomicU64) {
    a.fetch_add(1, Ordering::SeqCst);
}

/// An evaluator-level value; the stand-in for a ciphertext.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    backend: BackendKind,
    limbs: Vec<Vec<u64>>,
    depth: u32,
    plain_depth: u32,
    // per-slot bound on |x|, and its maximum
    bounds: Arc<Vec<u128>>,
    magnitude: u128,
}

impl Message {
    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn plain_depth(&self) -> u32 {
        self.plain_depth
    }

    /// Upper bound on `|x|` over every slot's signed value.
    pub fn magnitude(&self) -> u128 {
        self.magnitude
    }

    pub fn slot_bounds(&self) -> &[u128] {
        &self.bounds
    }

    /// Raw per-prime payload (slot values or ring coefficients).
    pub fn limbs(&self) -> &[Vec<u64>] {
        &self.limbs
    }
}

/// A plaintext operand prepared for one backend.
#[derive(Debug, Clone)]
pub struct Plaintext {
    limbs: Vec<Vec<u64>>,
    abs: Vec<u128>,
    max_abs: u128,
    is_mask: bool,
    backend: BackendKind,
}

impl Plaintext {
    pub fn max_abs(&self) -> u128 {
        self.max_abs
    }

    pub fn is_mask(&self) -> bool {
        self.is_mask
    }
}

pub struct Evaluator {
    modulus: Arc<CrtModulus>,
    backend: BackendKind,
    policy: BudgetPolicy,
    counters: AtomicCounters,
}

impl fmt::Debug for Evaluator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Evaluator")
            .field("n", &self.n())
            .field("primes", &self.modulus.prime_values())
            .field("backend", &self.backend)
            .field("policy", &self.policy)
            .finish()
    }
}

impl Evaluator {
    pub fn new(modulus: Arc<CrtModulus>, backend: BackendKind, policy: BudgetPolicy) -> Self {
        Self {
            modulus,
            backend,
            policy,
            counters: AtomicCounters::default(),
        }
    }

    pub fn n(&self) -> usize {
        self.modulus.n()
    }

    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn modulus(&self) -> &Arc<CrtModulus> {
        &self.modulus
    }

    pub fn policy(&self) -> BudgetPolicy {
        self.policy
    }

    /// Largest signed magnitude that still decodes correctly.
    pub fn capacity(&self) -> u128 {
        self.modulus.crt().half()
    }

    pub fn counters(&self) -> OpCounters {
        self.counters.snapshot()
    }

    pub fn reset_counters(&self) {
        let c = &self.counters;
        for a in [
            &c.ct_ct_mul,
            &c.ct_plain_mul,
            &c.scalar_mul,
            &c.add,
            &c.plain_add,
            &c.rot_cols,
            &c.rot_rows,
            &c.rot_calls,
            &c.mask_mul,
            &c.live_messages_peak,
        ] {
            a.store(0, Ordering::SeqCst);
        }
    }

    /// Records that `count` messages are simultaneously alive.
    pub fn observe_live(&self, count: usize) {
        self.counters
            .live_messages_peak
            .fetch_max(count as u64, Ordering::SeqCst);
    }

    /// Combines per-slot bounds with `op`; errors if any slot exceeds capacity.
    fn combine_bounds(
        &self,
        a: &[u128],
        b: impl Fn(usize) -> u128,
        op: impl Fn(u128, u128) -> Option<u128>,
    ) -> Result<(Arc<Vec<u128>>, u128)> {
        let capacity = self.capacity();
        let mut max = 0;
        let mut out = Vec::with_capacity(a.len());
        for (i, &x) in a.iter().enumerate() {
            let y = op(x, b(i)).unwrap_or(u128::MAX);
            if y > capacity {
                return Err(Error::MagnitudeOverflow { bound: y, capacity });
            }
            max = max.max(y);
            out.push(y);
        }
        Ok((Arc::new(out), max))
    }

    fn abs_bounds(&self, values: &[i128]) -> Result<(Vec<u128>, u128)> {
        let mut abs: Vec<u128> = values.iter().map(|v| v.unsigned_abs()).collect();
        abs.resize(self.n().max(abs.len()), 0);
        let (_, max) = self.combine_bounds(&abs, |_| 0, |x, _| Some(x))?;
        Ok((abs, max))
    }

    fn check_same(&self, m: &Message) -> Result<()> {
        if m.backend != self.backend || m.limbs.len() != self.modulus.primes().len() {
            return Err(Error::ModulusMismatch(format!(
                "message from {} backend with {} limbs",
                m.backend,
                m.limbs.len()
            )));
        }
        Ok(())
    }

    fn residues(&self, values: &[i128]) -> Result<Vec<Vec<u64>>> {
        let n = self.n();
        if values.len() > n {
            return Err(Error::Capacity(format!("{} values exceed {n} slots", values.len())));
        }
        Ok(self
            .modulus
            .prime_values()
            .iter()
            .map(|&p| {
                let mut slots: Vec<u64> = values.iter().map(|&v| reduce_signed(v, p)).collect();
                slots.resize(n, 0);
                slots
            })
            .collect())
    }

    fn to_payload(&self, slot_limbs: Vec<Vec<u64>>) -> Vec<Vec<u64>> {
        match self.backend {
            BackendKind::Slot => slot_limbs,
            BackendKind::Ring => slot_limbs
                .into_iter()
                .zip(self.modulus.contexts())
                .map(|(slots, ctx)| {
                    ctx.encode(&SlotVector::from_raw(ctx.p(), slots))
                        .expect("limb matches its context")
                        .into_coeffs()
                })
                .collect(),
        }
    }

    /// Encrypt stand-in: places `values` in slots `0..len`, zero elsewhere.
    pub fn lift(&self, values: &[i128]) -> Result<Message> {
        let limbs = self.to_payload(self.residues(values)?);
        let (abs, magnitude) = self.abs_bounds(values)?;
        Ok(Message {
            backend: self.backend,
            limbs,
            depth: 0,
            plain_depth: 0,
            bounds: Arc::new(abs),
            magnitude,
        })
    }

    /// Decrypt stand-in: all `n` slots in the centered signed embedding.
    pub fn lower(&self, m: &Message) -> Vec<i128> {
        let slot_limbs: Vec<Vec<u64>> = match m.backend {
            BackendKind::Slot => m.limbs.clone(),
            BackendKind::Ring => m
                .limbs
                .iter()
                .zip(self.modulus.contexts())
                .map(|(coeffs, ctx)| {
                    ctx.decode(&RingElement::from_raw(ctx.p(), coeffs.clone()))
                        .expect("limb matches its context")
                        .into_slots()
                })
                .collect(),
        };
        let crt = self.modulus.crt();
        let mut residues = vec![0u64; slot_limbs.len()];
        (0..self.n())
            .map(|i| {
                for (r, limb) in residues.iter_mut().zip(&slot_limbs) {
                    *r = limb[i];
                }
                crt.join_signed(&residues).expect("limb count matches")
            })
            .collect()
    }

    pub fn encode_plain(&self, values: &[i128]) -> Result<Plaintext> {
        let limbs = self.to_payload(self.residues(values)?);
        let (abs, max_abs) = self.abs_bounds(values)?;
        Ok(Plaintext {
            limbs,
            abs,
            max_abs,
            is_mask: false,
            backend: self.backend,
        })
    }

    /// A 0/1 plaintext selecting the given slots.
    pub fn encode_mask(&self, selected: &[usize]) -> Result<Plaintext> {
        let mut values = vec![0i128; self.n()];
        for &s in selected {
            if s >= self.n() {
                return Err(Error::Capacity(format!("mask slot {s} out of range")));
            }
            values[s] = 1;
        }
        let mut pt = self.encode_plain(&values)?;
        pt.is_mask = true;
        Ok(pt)
    }

    fn limbwise(
        &self,
        a: &[Vec<u64>],
        b: &[Vec<u64>],
        op: impl Fn(u64, u64, u64) -> u64,
    ) -> Vec<Vec<u64>> {
        a.iter()
            .zip(b)
            .zip(self.modulus.prime_values())
            .map(|((x, y), p)| x.iter().zip(y).map(|(&u, &v)| op(u, v, p)).collect())
            .collect()
    }

    fn product(&self, a: &[Vec<u64>], b: &[Vec<u64>]) -> Vec<Vec<u64>> {
        match self.backend {
            BackendKind::Slot => self.limbwise(a, b, mul_mod),
            BackendKind::Ring => a
                .iter()
                .zip(b)
                .zip(self.modulus.contexts())
                .map(|((x, y), ctx)| {
                    let p = ctx.p();
                    ctx.mul(
                        &RingElement::from_raw(p, x.clone()),
                        &RingElement::from_raw(p, y.clone()),
                    )
                    .expect("limb matches its context")
                    .into_coeffs()
                })
                .collect(),
        }
    }

    pub fn add(&self, a: &Message, b: &Message) -> Result<Message> {
        self.check_same(a)?;
        self.check_same(b)?;
        let (bounds, magnitude) =
            self.combine_bounds(&a.bounds, |i| b.bounds[i], u128::checked_add)?;
        let limbs = self.limbwise(&a.limbs, &b.limbs, add_mod);
        bump(&self.counters.add);
        Ok(Message {
            backend: self.backend,
            limbs,
            depth: a.depth.max(b.depth),
            plain_depth: a.plain_depth.max(b.plain_depth),
            bounds,
            magnitude,
        })
    }

    pub fn add_plain(&self, a: &Message, w: &Plaintext) -> Result<Message> {
        self.check_same(a)?;
        self.check_plain(w)?;
        let (bounds, magnitude) = self.combine_bounds(&a.bounds, |i| w.abs[i], u128::checked_add)?;
        let limbs = self.limbwise(&a.limbs, &w.limbs, add_mod);
        bump(&self.counters.plain_add);
        Ok(Message {
            limbs,
            bounds,
            magnitude,
            ..a.clone()
        })
    }

    /// Ciphertext-ciphertext product.
    pub fn mul(&self, a: &Message, b: &Message) -> Result<Message> {
        self.check_same(a)?;
        self.check_same(b)?;
        let depth = a.depth.max(b.depth) + 1;
        if depth > self.policy.max_depth {
            return Err(Error::DepthExceeded {
                depth,
                max_depth: self.policy.max_depth,
            });
        }
        let (bounds, magnitude) =
            self.combine_bounds(&a.bounds, |i| b.bounds[i], u128::checked_mul)?;
        let limbs = self.product(&a.limbs, &b.limbs);
        bump(&self.counters.ct_ct_mul);
        Ok(Message {
            backend: self.backend,
            limbs,
            depth,
            plain_depth: a.plain_depth.max(b.plain_depth),
            bounds,
            magnitude,
        })
    }

    pub fn square(&self, a: &Message) -> Result<Message> {
        self.mul(a, a)
    }

    fn check_plain(&self, w: &Plaintext) -> Result<()> {
        if w.backend != self.backend {
            return Err(Error::ModulusMismatch(format!(
                "plaintext prepared for {} backend",
                w.backend
            )));
        }
        Ok(())
    }

    /// Slot-wise product with a plaintext vector (or mask).
    pub fn mul_plain(&self, a: &Message, w: &Plaintext) -> Result<Message> {
        self.check_same(a)?;
        self.check_plain(w)?;
        let (bounds, magnitude) = self.combine_bounds(&a.bounds, |i| w.abs[i], u128::checked_mul)?;
        let limbs = self.product(&a.limbs, &w.limbs);
        bump(&self.counters.ct_plain_mul);
        if w.is_mask {
            bump(&self.counters.mask_mul);
        }
        Ok(Message {
            backend: self.backend,
            limbs,
            depth: a.depth,
            plain_depth: a.plain_depth + 1,
            bounds,
            magnitude,
        })
    }

    pub fn mul_scalar(&self, a: &Message, c: i128) -> Result<Message> {
        self.check_same(a)?;
        let (bounds, magnitude) =
            self.combine_bounds(&a.bounds, |_| c.unsigned_abs(), u128::checked_mul)?;
        let limbs = a
            .limbs
            .iter()
            .zip(self.modulus.prime_values())
            .map(|(x, p)| {
                let c = reduce_signed(c, p);
                x.iter().map(|&u| mul_mod(u, c, p)).collect()
            })
            .collect();
        bump(&self.counters.scalar_mul);
        Ok(Message {
            backend: self.backend,
            limbs,
            depth: a.depth,
            plain_depth: a.plain_depth + 1,
            bounds,
            magnitude,
        })
    }

    /// Rotates by `rot`, applying one primitive rotation per power-of-two
    /// component. Zero rotations are free.
    pub fn rotate(&self, a: &Message, rot: Rotation) -> Result<Message> {
        self.check_same(a)?;
        let steps = rot.primitive_steps(self.n())?;
        if steps.is_empty() {
            return Ok(a.clone());
        }
        let mut limbs = a.limbs.clone();
        let mut bounds = a.bounds.to_vec();
        for step in &steps {
            bounds = step.permute(&bounds)?;
            limbs = match self.backend {
                BackendKind::Slot => limbs
                    .into_iter()
                    .map(|l| step.permute(&l))
                    .collect::<Result<_>>()?,
                BackendKind::Ring => limbs
                    .into_iter()
                    .zip(self.modulus.contexts())
                    .map(|(l, ctx)| {
                        ctx.galois_rotate(&RingElement::from_raw(ctx.p(), l), *step)
                            .map(RingElement::into_coeffs)
                    })
                    .collect::<Result<_>>()?,
            };
            match step {
                Rotation::Rows => bump(&self.counters.rot_rows),
                Rotation::Columns(_) => bump(&self.counters.rot_cols),
            }
        }
        bump(&self.counters.rot_calls);
        Ok(Message {
            limbs,
            bounds: Arc::new(bounds),
            ..a.clone()
        })
    }
}
