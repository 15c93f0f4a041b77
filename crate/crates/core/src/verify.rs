//! Randomized self-checks of the ring, the two backends and the kernels
//! against direct integer arithmetic.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::backend::{BackendKind, BudgetPolicy, Evaluator};
use crate::error::Result;
use crate::kernels::{
    conv_rowmajor, matvec_dense_rowmajor, matvec_interleaved_rowmajor, matvec_simd, matvec_sparse_colmajor,
    matvec_stacked_rowmajor, WeightMatrix,
};
use crate::repr::{
    encode_convolution, encode_dense, encode_interleaved, encode_simd, encode_sparse, stack_copies, ConvGeometry,
};
use crate::ring::arith::{add_mod, mul_mod, sub_mod};
use crate::ring::{CrtModulus, RingContext, RingElement, Rotation, SlotVector};

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub n: usize,
    pub primes: Vec<u64>,
    pub trials: usize,
    pub seed: u64,
    /// Negative control: realize column rotations in the wrong direction.
    pub corrupt_rotation: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub trials: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_failure: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

struct Tally {
    name: &'static str,
    trials: usize,
    failures: usize,
    first: Option<String>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            trials: 0,
            failures: 0,
            first: None,
        }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.trials += 1;
        if !ok {
            self.failures += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }

    fn done(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            trials: self.trials,
            failures: self.failures,
            first_failure: self.first,
        }
    }
}

/// Negacyclic product by the quadratic formula.
pub fn schoolbook_negacyclic(a: &[u64], b: &[u64], p: u64) -> Vec<u64> {
    let n = a.len();
    let mut out = vec![0u64; n];
    for i in 0..n {
        for j in 0..n {
            let t = mul_mod(a[i], b[j], p);
            let k = i + j;
            if k < n {
                out[k] = add_mod(out[k], t, p);
            } else {
                out[k - n] = sub_mod(out[k - n], t, p);
            }
        }
    }
    out
}

fn random_slots(rng: &mut ChaCha8Rng, p: u64, n: usize) -> SlotVector {
    SlotVector::new(p, (0..n).map(|_| rng.gen_range(0..p)).collect()).expect("reduced")
}

fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> Rotation {
    let half = (n / 2) as i64;
    if half <= 1 || rng.gen_ratio(1, 8) {
        Rotation::Rows
    } else {
        Rotation::Columns(rng.gen_range(1 - half..half))
    }
}

pub fn batching_suite(ctx: &RingContext, trials: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let (p, n) = (ctx.p(), ctx.n());
    let mut t = Tally::new("batching-homomorphism");
    for _ in 0..trials {
        let u = random_slots(rng, p, n);
        let v = random_slots(rng, p, n);
        let (eu, ev) = (ctx.encode(&u)?, ctx.encode(&v)?);
        let sum = ctx.decode(&ctx.add(&eu, &ev)?)?;
        let prod = ctx.decode(&ctx.mul(&eu, &ev)?)?;
        let ok_sum = sum.slots().iter().zip(u.slots().iter().zip(v.slots())).all(|(&s, (&a, &b))| s == add_mod(a, b, p));
        let ok_prod =
            prod.slots().iter().zip(u.slots().iter().zip(v.slots())).all(|(&s, (&a, &b))| s == mul_mod(a, b, p));
        t.check(ok_sum && ok_prod, || format!("p = {p}, n = {n}: slotwise result differs"));
    }
    Ok(t.done())
}

pub fn rotation_suite(ctx: &RingContext, trials: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let (p, n) = (ctx.p(), ctx.n());
    let mut t = Tally::new("rotation-oracle");
    for _ in 0..trials {
        let rot = random_rotation(rng, n);
        let v = random_slots(rng, p, n);
        let got = ctx.decode(&ctx.galois_rotate(&ctx.encode(&v)?, rot)?)?;
        t.check(got == v.rotated(rot)?, || format!("{rot:?} at n = {n}"));
    }
    Ok(t.done())
}

pub fn ntt_suite(ctx: &RingContext, trials: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let (p, n) = (ctx.p(), ctx.n());
    let mut t = Tally::new("ntt-vs-schoolbook");
    for _ in 0..trials {
        let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        let got = ctx.mul(&RingElement::new(p, a.clone())?, &RingElement::new(p, b.clone())?)?;
        t.check(got.coeffs() == schoolbook_negacyclic(&a, &b, p), || format!("p = {p}, n = {n}"));
    }
    Ok(t.done())
}

/// Random chains of add, mul, plain mul and rotations on both backends.
pub fn backend_agreement_suite(
    slot: &Evaluator,
    ring: &Evaluator,
    trials: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SuiteResult> {
    let n = slot.n();
    let mut t = Tally::new("backend-agreement");
    for _ in 0..trials {
        let x: Vec<i128> = (0..n).map(|_| rng.gen_range(-50..=50)).collect();
        let y: Vec<i128> = (0..n).map(|_| rng.gen_range(-50..=50)).collect();
        let w: Vec<i128> = (0..n).map(|_| rng.gen_range(-5..=5)).collect();
        let rot = random_rotation(rng, n);
        let run = |ev: &Evaluator| -> Result<Vec<i128>> {
            let (a, b) = (ev.lift(&x)?, ev.lift(&y)?);
            let s = ev.add(&a, &ev.rotate(&b, rot)?)?;
            let m = ev.mul(&s, &ev.mul_plain(&a, &ev.encode_plain(&w)?)?)?;
            Ok(ev.lower(&ev.rotate(&m, rot)?))
        };
        let (a, b) = (run(slot)?, run(ring)?);
        t.check(a == b, || format!("{rot:?} at n = {n}"));
    }
    Ok(t.done())
}

fn direct_conv(image: &[i128], g: &ConvGeometry, w: &[i128]) -> Vec<i128> {
    (0..g.positions())
        .map(|i| {
            (0..g.taps())
                .filter_map(|j| g.source(i, j).map(|(c, y, x)| w[j] * image[(c * g.height + y) * g.width + x]))
                .sum()
        })
        .collect()
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, k: usize) -> Vec<Vec<i128>> {
    (0..r).map(|_| (0..k).map(|_| rng.gen_range(-9..=9)).collect()).collect()
}

/// The five matrix-vector kernels and the convolution kernel against
/// schoolbook results, with `r, k <= 64`.
pub fn kernel_suite(ev: &Evaluator, trials: usize, rng: &mut ChaCha8Rng) -> Result<SuiteResult> {
    let n = ev.n();
    let mut t = Tally::new(match ev.backend() {
        BackendKind::Slot => "kernel-oracle (slot)",
        BackendKind::Ring => "kernel-oracle (ring)",
    });
    let max = 64.min(n / 2).max(1);
    for trial in 0..trials {
        let r = rng.gen_range(1..=max);
        let k = rng.gen_range(1..=max);
        let rows = random_matrix(rng, r, k);
        let w = WeightMatrix::from_rows(&rows)?;
        let v: Vec<i128> = (0..k).map(|_| rng.gen_range(-20..=20)).collect();
        let want = w.apply(&v);
        let label = |kind: &str| format!("{kind}: {r}x{k} at n = {n}, trial {trial}");

        let got = matvec_dense_rowmajor(ev, &w, &encode_dense(ev, &v)?)?.decode(ev);
        t.check(got == want, || label("dense row-major"));

        let mut layout: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut layout[..], rng);
        layout.truncate(k);
        let x = encode_interleaved(ev, &v, layout.clone())?;
        let got = matvec_interleaved_rowmajor(ev, &w.clone().with_permutation(layout)?, &x)?.decode(ev);
        t.check(got == want, || label("interleaved row-major"));

        if r <= n {
            let got = matvec_sparse_colmajor(ev, &w, &encode_sparse(ev, &v)?)?.decode(ev);
            t.check(got == want, || label("sparse column-major"));
        }

        let pad = k.next_power_of_two();
        let copies = n / pad;
        let stacked = stack_copies(ev, &encode_dense(ev, &v)?, copies)?;
        let got: Vec<i128> = matvec_stacked_rowmajor(ev, &w, &stacked)?
            .iter()
            .flat_map(|p| p.decode(ev))
            .collect();
        t.check(got == want, || label("stacked row-major"));

        let batch: Vec<Vec<i128>> = (0..rng.gen_range(1..=4.min(n)))
            .map(|_| (0..k).map(|_| rng.gen_range(-20..=20)).collect())
            .collect();
        let terms: Vec<Vec<(usize, i128)>> = rows
            .iter()
            .map(|row| row.iter().copied().enumerate().collect())
            .collect();
        let out = matvec_simd(ev, &terms, &encode_simd(ev, &batch)?)?.decode_simd_batch(ev)?;
        let ok = out.iter().zip(&batch).all(|(o, b)| o == &w.apply(b));
        t.check(ok, || label("simd"));

        let side = rng.gen_range(2..=8usize);
        let kk = rng.gen_range(1..=side.min(3));
        let stride = rng.gen_range(1..=2);
        let pad_px = rng.gen_range(0..kk);
        let g = ConvGeometry::square(rng.gen_range(1..=2), side, side, kk, stride, pad_px);
        if g.positions() <= n {
            let image: Vec<i128> = (0..g.input_len()).map(|_| rng.gen_range(0..16)).collect();
            let count = rng.gen_range(1..=3);
            let maps = random_matrix(rng, count, g.taps());
            let x = encode_convolution(ev, &image, &g, None)?;
            let parts = conv_rowmajor(ev, &maps, &x)?;
            let ok = parts.iter().zip(&maps).all(|(p, m)| p.decode(ev) == direct_conv(&image, &g, m));
            t.check(ok, || label("convolution"));
        }
    }
    Ok(t.done())
}

/// Runs every suite; the ring-level suites use each prime in turn.
pub fn run_suites(cfg: &VerifyConfig) -> Result<Vec<SuiteResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut modulus = CrtModulus::new(&cfg.primes, cfg.n)?;
    if cfg.corrupt_rotation {
        modulus = modulus.with_inverted_rotation();
    }
    let modulus = Arc::new(modulus);
    let merge = |results: Vec<SuiteResult>| {
        let mut it = results.into_iter();
        let mut acc = it.next().expect("at least one prime");
        for r in it {
            acc.trials += r.trials;
            acc.failures += r.failures;
            acc.first_failure = acc.first_failure.or(r.first_failure);
        }
        acc
    };
    let per_prime = cfg.trials.div_ceil(modulus.contexts().len()).max(1);
    let mut out = Vec::new();
    for suite in [batching_suite, rotation_suite] {
        let rs = modulus
            .contexts()
            .iter()
            .map(|c| suite(c, per_prime, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        out.push(merge(rs));
    }
    // schoolbook is quadratic; keep it to degrees where that is cheap
    if cfg.n <= 1024 {
        let c = &modulus.contexts()[0];
        out.push(ntt_suite(c, cfg.trials, &mut rng)?);
    }
    let slot = Evaluator::new(modulus.clone(), BackendKind::Slot, BudgetPolicy::default());
    let ring = Evaluator::new(modulus.clone(), BackendKind::Ring, BudgetPolicy::default());
    out.push(backend_agreement_suite(&slot, &ring, cfg.trials, &mut rng)?);
    let kernel_trials = cfg.trials.min(if cfg.n > 1024 { 20 } else { cfg.trials });
    out.push(kernel_suite(&slot, kernel_trials, &mut rng)?);
    out.push(kernel_suite(&ring, kernel_trials, &mut rng)?);
    Ok(out)
}
