use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lola_core::backend::{BackendKind, BudgetPolicy, Evaluator, Message};
use lola_core::kernels::{
    conv_rowmajor, matvec_dense_rowmajor, matvec_interleaved_rowmajor, matvec_simd, matvec_sparse_colmajor,
    matvec_stacked_rowmajor, square_tensor, KernelCostModel, WeightMatrix,
};
use lola_core::network::{
    build_plan, collapse, predict, run, CollapsedNetwork, Layer, LayerSpec, Network, PlanConfig, Preset, Shape,
    Strategy as PlanStrategy, DEFAULT_PRIMES,
};
use lola_core::repr::{
    clean, combine_interleaved, dense_to_convolution, encode_convolution, encode_dense, encode_interleaved,
    encode_simd, encode_sparse, plan_dense_to_convolution, sparse_to_dense, stack_copies, ConvGeometry, PixelOrder,
};
use lola_core::ring::{Crt, CrtModulus, PrimeModulus, RingContext, RingElement, Rotation, SlotVector};

const P: u64 = 2148728833;

fn ctx(n: usize) -> RingContext {
    RingContext::new(PrimeModulus::new(P, n).unwrap()).unwrap()
}

fn evaluator(n: usize, primes: &[u64], backend: BackendKind) -> Evaluator {
    Evaluator::new(Arc::new(CrtModulus::new(primes, n).unwrap()), backend, BudgetPolicy::default())
}

fn pair(n: usize, primes: &[u64]) -> [Evaluator; 2] {
    [evaluator(n, primes, BackendKind::Slot), evaluator(n, primes, BackendKind::Ring)]
}

/// Slot permutation of the 2 x n/2 matrix, written out independently.
fn permute_oracle(v: &[u64], rot: Rotation) -> Vec<u64> {
    let n = v.len();
    let h = n / 2;
    let mut out = vec![0; n];
    for r in 0..2 {
        for c in 0..h {
            let (dr, dc) = match rot {
                Rotation::Rows => (1 - r, c),
                Rotation::Columns(k) => (r, (c as i64 + k).rem_euclid(h as i64) as usize),
            };
            out[dr * h + dc] = v[r * h + c];
        }
    }
    out
}

fn negacyclic(a: &[u64], b: &[u64], p: u64) -> Vec<u64> {
    let n = a.len();
    let mut acc = vec![0i128; n];
    for i in 0..n {
        for j in 0..n {
            let t = (a[i] as i128 * b[j] as i128) % p as i128;
            if i + j < n {
                acc[i + j] += t;
            } else {
                acc[i + j - n] -= t;
            }
            acc[(i + j) % n] %= p as i128;
        }
    }
    acc.into_iter().map(|x| x.rem_euclid(p as i128) as u64).collect()
}

fn schoolbook(w: &[Vec<i128>], v: &[i128]) -> Vec<i128> {
    w.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn rotation(n: usize) -> impl Strategy<Value = Rotation> {
    let h = (n / 2) as i64;
    prop_oneof![Just(Rotation::Rows), (1 - h..h).prop_map(Rotation::Columns)]
}

fn residues(n: usize) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0..P, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batching_homomorphism(u in residues(64), v in residues(64)) {
        let c = ctx(64);
        let eu = c.encode(&SlotVector::new(P, u.clone()).unwrap()).unwrap();
        let ev = c.encode(&SlotVector::new(P, v.clone()).unwrap()).unwrap();
        let prod = c.decode(&c.mul(&eu, &ev).unwrap()).unwrap();
        let sum = c.decode(&c.add(&eu, &ev).unwrap()).unwrap();
        for i in 0..64 {
            prop_assert_eq!(prod.slots()[i] as u128, u[i] as u128 * v[i] as u128 % P as u128);
            prop_assert_eq!(sum.slots()[i], (u[i] + v[i]) % P);
        }
    }

    #[test]
    fn rotation_matches_permutation(v in residues(64), rot in rotation(64)) {
        let c = ctx(64);
        let e = c.galois_rotate(&c.encode(&SlotVector::new(P, v.clone()).unwrap()).unwrap(), rot).unwrap();
        prop_assert_eq!(c.decode(&e).unwrap().into_slots(), permute_oracle(&v, rot));
    }

    #[test]
    fn ntt_product_is_negacyclic(log_n in 1u32..=7, seed in any::<u64>()) {
        let n = 1usize << log_n;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..P)).collect();
        let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..P)).collect();
        let c = ctx(n);
        let got = c.mul(&RingElement::new(P, a.clone()).unwrap(), &RingElement::new(P, b.clone()).unwrap()).unwrap();
        prop_assert_eq!(got.into_coeffs(), negacyclic(&a, &b, P));
    }

    #[test]
    fn column_rotations_compose(v in residues(32), a in -15i64..16, b in -15i64..16) {
        let c = ctx(32);
        let e = c.encode(&SlotVector::new(P, v).unwrap()).unwrap();
        let two = c.galois_rotate(&c.galois_rotate(&e, Rotation::Columns(a)).unwrap(), Rotation::Columns(b)).unwrap();
        let k = (a + b).rem_euclid(16);
        let one = if k == 0 { e.clone() } else { c.galois_rotate(&e, Rotation::Columns(k)).unwrap() };
        prop_assert_eq!(two.coeffs(), one.coeffs());
        let rows = c.galois_rotate(&c.galois_rotate(&e, Rotation::Rows).unwrap(), Rotation::Rows).unwrap();
        prop_assert_eq!(rows.coeffs(), e.coeffs());
    }

    #[test]
    fn crt_is_a_ring_isomorphism(x in any::<u64>(), y in any::<u64>()) {
        let moduli = &DEFAULT_PRIMES[..2];
        let crt = Crt::new(moduli).unwrap();
        let m = crt.composite();
        let (x, y) = (x as u128 % m, y as u128 % m);
        let (rx, ry) = (crt.split(x), crt.split(y));
        let prod: Vec<u64> = rx.iter().zip(&ry).zip(moduli).map(|((&a, &b), &p)| (a as u128 * b as u128 % p as u128) as u64).collect();
        let sum: Vec<u64> = rx.iter().zip(&ry).zip(moduli).map(|((&a, &b), &p)| (a + b) % p).collect();
        prop_assert_eq!(crt.join(&prod).unwrap(), x * y % m);
        prop_assert_eq!(crt.join(&sum).unwrap(), (x + y) % m);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Add(usize, usize),
    Mul(usize, usize),
    MulPlain(usize, Vec<i128>),
    MulScalar(usize, i128),
    AddPlain(usize, Vec<i128>),
    Rotate(usize, Rotation),
}

fn program(n: usize) -> impl Strategy<Value = (Vec<Vec<i128>>, Vec<Op>)> {
    let inputs = prop::collection::vec(prop::collection::vec(-20i128..=20, n), 2..4);
    let op = prop_oneof![
        (any::<usize>(), any::<usize>()).prop_map(|(a, b)| Op::Add(a, b)),
        (any::<usize>(), any::<usize>()).prop_map(|(a, b)| Op::Mul(a, b)),
        (any::<usize>(), prop::collection::vec(-3i128..=3, n)).prop_map(|(a, w)| Op::MulPlain(a, w)),
        (any::<usize>(), -5i128..=5).prop_map(|(a, c)| Op::MulScalar(a, c)),
        (any::<usize>(), prop::collection::vec(-3i128..=3, n)).prop_map(|(a, w)| Op::AddPlain(a, w)),
        (any::<usize>(), rotation(n)).prop_map(|(a, r)| Op::Rotate(a, r)),
    ];
    (inputs, prop::collection::vec(op, 1..200))
}

/// Runs the program, tracking the depth each value should have. Operations
/// that fail (budget) are skipped; the error itself is recorded.
fn interpret(ev: &Evaluator, inputs: &[Vec<i128>], ops: &[Op]) -> (Vec<Message>, Vec<u32>, Vec<String>) {
    let mut regs: Vec<Message> = inputs.iter().map(|v| ev.lift(v).unwrap()).collect();
    let mut depth = vec![0u32; regs.len()];
    let mut errors = Vec::new();
    for op in ops {
        let k = regs.len();
        let (res, d) = match op {
            Op::Add(a, b) => (ev.add(&regs[a % k], &regs[b % k]), depth[a % k].max(depth[b % k])),
            Op::Mul(a, b) => (ev.mul(&regs[a % k], &regs[b % k]), depth[a % k].max(depth[b % k]) + 1),
            Op::MulPlain(a, w) => (ev.mul_plain(&regs[a % k], &ev.encode_plain(w).unwrap()), depth[a % k]),
            Op::MulScalar(a, c) => (ev.mul_scalar(&regs[a % k], *c), depth[a % k]),
            Op::AddPlain(a, w) => (ev.add_plain(&regs[a % k], &ev.encode_plain(w).unwrap()), depth[a % k]),
            Op::Rotate(a, r) => (ev.rotate(&regs[a % k], *r), depth[a % k]),
        };
        match res {
            Ok(m) => {
                regs.push(m);
                depth.push(d);
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    (regs, depth, errors)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn backends_agree_on_random_programs((inputs, ops) in program(32)) {
        let [slot, ring] = pair(32, &DEFAULT_PRIMES);
        let (a, da, ea) = interpret(&slot, &inputs, &ops);
        let (b, db, eb) = interpret(&ring, &inputs, &ops);
        prop_assert_eq!(&ea, &eb);
        prop_assert_eq!(&da, &db);
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(slot.lower(x), ring.lower(y));
        }
        prop_assert_eq!(slot.counters(), ring.counters());
    }

    #[test]
    fn depth_and_magnitude_laws((inputs, ops) in program(16)) {
        let ev = evaluator(16, &DEFAULT_PRIMES, BackendKind::Slot);
        // inputs pushed to their bound in every slot
        let inputs: Vec<Vec<i128>> = inputs.iter().map(|v| v.iter().map(|&x| if x < 0 { -20 } else { 20 }).collect()).collect();
        let (regs, depth, _) = interpret(&ev, &inputs, &ops);
        for (m, &d) in regs.iter().zip(&depth) {
            prop_assert_eq!(m.depth(), d);
            let lowered = ev.lower(m);
            for (x, &b) in lowered.iter().zip(m.slot_bounds()) {
                prop_assert!(x.unsigned_abs() <= b);
                prop_assert!(b <= m.magnitude());
            }
        }
    }

    #[test]
    fn encoders_round_trip(v in prop::collection::vec(-1000i128..=1000, 1..=32), seed in any::<u64>()) {
        let n = 64;
        let ev = evaluator(n, &DEFAULT_PRIMES[..1], BackendKind::Slot);
        prop_assert_eq!(encode_dense(&ev, &v).unwrap().decode(&ev), v.clone());
        prop_assert_eq!(encode_sparse(&ev, &v).unwrap().decode(&ev), v.clone());
        let mut layout: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut layout[..], &mut ChaCha8Rng::seed_from_u64(seed));
        layout.truncate(v.len());
        prop_assert_eq!(encode_interleaved(&ev, &v, layout).unwrap().decode(&ev), v.clone());
        let batch = vec![v.clone(), v.iter().map(|x| -x).collect()];
        prop_assert_eq!(encode_simd(&ev, &batch).unwrap().decode_simd_batch(&ev).unwrap(), batch);
    }

    #[test]
    fn conversions_preserve_the_logical_vector(
        v in prop::collection::vec(-1000i128..=1000, 1..=16),
        log_copies in 0u32..=2,
        seed in any::<u64>(),
    ) {
        let n = 128;
        let ev = evaluator(n, &DEFAULT_PRIMES[..1], BackendKind::Slot);
        let d = encode_dense(&ev, &v).unwrap();
        let stacked = stack_copies(&ev, &d, 1 << log_copies).unwrap();
        prop_assert_eq!(stacked.decode(&ev), v.clone());
        prop_assert_eq!(clean(&ev, &d).unwrap().decode(&ev), v.clone());

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut targets: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut targets[..], &mut rng);
        targets.truncate(v.len());
        let gathered = sparse_to_dense(&ev, &encode_sparse(&ev, &v).unwrap(), &targets).unwrap();
        prop_assert_eq!(gathered.decode(&ev), v.clone());

        // single-slot sparse parts from a row-major product against the identity
        let eye: Vec<Vec<i128>> = (0..v.len()).map(|i| (0..v.len()).map(|j| (i == j) as i128).collect()).collect();
        let sparse = matvec_dense_rowmajor(&ev, &WeightMatrix::from_rows(&eye).unwrap(), &d).unwrap();
        prop_assert_eq!(sparse_to_dense(&ev, &sparse, &targets).unwrap().decode(&ev), v.clone());

        // two halves combined at a right shift of len(first half)
        let split = v.len() / 2;
        if split > 0 {
            let a = encode_dense(&ev, &v[..split]).unwrap();
            let b = encode_dense(&ev, &v[split..]).unwrap();
            let c = combine_interleaved(&ev, &[a, b], &[0, split as i64]).unwrap();
            prop_assert_eq!(c.decode(&ev), v.clone());
        }
    }

    #[test]
    fn combine_rejects_overlap(len in 2usize..8, shift in 0i64..2) {
        let ev = evaluator(64, &DEFAULT_PRIMES[..1], BackendKind::Slot);
        let v: Vec<i128> = (1..=len as i128).collect();
        let a = encode_dense(&ev, &v).unwrap();
        let b = encode_dense(&ev, &v).unwrap();
        // any shift shorter than the vector overlaps
        let offset = shift.min(len as i64 - 1);
        prop_assert!(combine_interleaved(&ev, &[a, b], &[0, offset]).is_err());
    }

    #[test]
    fn kernels_match_schoolbook(
        (r, k) in (1usize..=16, 1usize..=16),
        seed in any::<u64>(),
    ) {
        let n = 64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<Vec<i128>> = (0..r).map(|_| (0..k).map(|_| rng.gen_range(-9..=9)).collect()).collect();
        let v: Vec<i128> = (0..k).map(|_| rng.gen_range(-20..=20)).collect();
        let want = schoolbook(&w, &v);
        let m = WeightMatrix::from_rows(&w).unwrap();
        let cost = KernelCostModel::new(n);
        for ev in pair(n, &DEFAULT_PRIMES[..2]) {
            let d = encode_dense(&ev, &v).unwrap();
            let pad = cost.dot_pad(k);

            let before = ev.counters();
            let out = matvec_dense_rowmajor(&ev, &m, &d).unwrap();
            prop_assert_eq!(ev.counters().since(&before).without_peak(), cost.dense_rowmajor(r, pad));
            prop_assert_eq!(out.decode(&ev), want.clone());
            prop_assert_eq!(out.messages.iter().map(|x| x.depth()).max(), Some(0));

            let mut layout: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut layout[..], &mut rng);
            layout.truncate(k);
            let x = encode_interleaved(&ev, &v, layout.clone()).unwrap();
            let pad_i = cost.dot_pad(layout.iter().max().unwrap() + 1);
            let before = ev.counters();
            let out = matvec_interleaved_rowmajor(&ev, &m.clone().with_permutation(layout).unwrap(), &x).unwrap();
            prop_assert_eq!(ev.counters().since(&before).without_peak(), cost.dense_rowmajor(r, pad_i));
            prop_assert_eq!(out.decode(&ev), want.clone());

            let before = ev.counters();
            let out = matvec_sparse_colmajor(&ev, &m, &encode_sparse(&ev, &v).unwrap()).unwrap();
            prop_assert_eq!(ev.counters().since(&before).without_peak(), cost.sparse_colmajor(k));
            prop_assert_eq!(out.decode(&ev), want.clone());

            let pad_s = k.next_power_of_two();
            let s = stack_copies(&ev, &d, n / pad_s).unwrap();
            let before = ev.counters();
            let parts = matvec_stacked_rowmajor(&ev, &m, &s).unwrap();
            prop_assert_eq!(ev.counters().since(&before).without_peak(), cost.stacked_rowmajor(r, pad_s));
            prop_assert_eq!(parts.iter().flat_map(|p| p.decode(&ev)).collect::<Vec<_>>(), want.clone());

            let terms: Vec<Vec<(usize, i128)>> = w.iter().map(|row| row.iter().copied().enumerate().collect()).collect();
            let before = ev.counters();
            let out = matvec_simd(&ev, &terms, &encode_simd(&ev, &[v.clone()]).unwrap()).unwrap();
            prop_assert_eq!(ev.counters().since(&before).without_peak(), cost.simd(vec![k; r]));
            prop_assert_eq!(out.decode(&ev), want.clone());

            let before = ev.counters();
            let sq = square_tensor(&ev, &out).unwrap();
            prop_assert_eq!(ev.counters().since(&before).without_peak(), cost.square(r));
            prop_assert!(sq.messages.iter().all(|x| x.depth() == 1));
        }
    }

    #[test]
    fn conv_kernel_matches_direct_convolution(
        side in 3usize..=8,
        k in 1usize..=3,
        stride in 1usize..=2,
        pad in 0usize..=2,
        maps in 1usize..=3,
        seed in any::<u64>(),
    ) {
        prop_assume!(pad < k && k <= side);
        let g = ConvGeometry::square(2, side, side, k, stride, pad);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image: Vec<i128> = (0..g.input_len()).map(|_| rng.gen_range(0..16)).collect();
        let w: Vec<Vec<i128>> = (0..maps).map(|_| (0..g.taps()).map(|_| rng.gen_range(-5..=5)).collect()).collect();
        let (oh, ow) = ((side + 2 * pad - k) / stride + 1, (side + 2 * pad - k) / stride + 1);
        let cost = KernelCostModel::new(128);
        for ev in pair(128, &DEFAULT_PRIMES[..1]) {
            let x = encode_convolution(&ev, &image, &g, None).unwrap();
            let before = ev.counters();
            let parts = conv_rowmajor(&ev, &w, &x).unwrap();
            prop_assert_eq!(ev.counters().since(&before).without_peak(), cost.conv(g.taps(), maps));
            for (m, part) in parts.iter().enumerate() {
                let got = part.decode(&ev);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0;
                        for c in 0..2 {
                            for dy in 0..k {
                                for dx in 0..k {
                                    let (y, xx) = ((oy * stride + dy) as i64 - pad as i64, (ox * stride + dx) as i64 - pad as i64);
                                    if y >= 0 && xx >= 0 && (y as usize) < side && (xx as usize) < side {
                                        s += w[m][(c * k + dy) * k + dx] * image[(c * side + y as usize) * side + xx as usize];
                                    }
                                }
                            }
                        }
                        prop_assert_eq!(got[oy * ow + ox], s);
                    }
                }
            }
        }
    }
}

/// Client-side and masked encodings hold the same tap values at the
/// positions the masked plan declares.
fn check_conv_encodings(g: ConvGeometry, n: usize, image: &[i128]) {
    let ev = evaluator(n, &DEFAULT_PRIMES[..1], BackendKind::Slot);
    let order = g.polyphase();
    let flat = order.flatten(image, g.channels, g.height, g.width).unwrap();
    let d = encode_dense(&ev, &flat).unwrap();
    let Ok(plan) = plan_dense_to_convolution(&d.rep, &g, order, n) else { return };
    let masked = dense_to_convolution(&ev, &d, &g, order).unwrap();
    let positions = masked.rep.conv.as_ref().unwrap().positions.clone();
    assert_eq!(plan.rep, masked.rep);
    let client = encode_convolution(&ev, image, &g, Some(positions.clone())).unwrap();
    assert_eq!(masked.messages.len(), client.messages.len());
    for (a, b) in masked.messages.iter().zip(&client.messages) {
        let (la, lb) = (ev.lower(a), ev.lower(b));
        for &s in &positions {
            assert_eq!(la[s], lb[s], "{g:?}");
        }
    }
    // pixels no window reads decode as zero
    let covered = |order: PixelOrder, v: Vec<i128>| -> Vec<i128> {
        let mut out = vec![0; v.len()];
        for i in 0..g.positions() {
            for j in 0..g.taps() {
                if let Some(px) = g.source(i, j) {
                    let s = order.index(px, g.height, g.width);
                    out[s] = v[s];
                }
            }
        }
        out
    };
    assert_eq!(masked.decode(&ev), covered(order, flat));
    let row_major = PixelOrder::RowMajor.flatten(image, g.channels, g.height, g.width).unwrap();
    assert_eq!(client.decode(&ev), covered(PixelOrder::RowMajor, row_major));
}

#[test]
fn masked_and_client_convolution_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for side in [4, 6] {
        for k in 1..=side {
            for stride in 1..=k.min(3) {
                for pad in 0..k.min(2) {
                    let g = ConvGeometry::square(1, side, side, k, stride, pad);
                    let image: Vec<i128> = (0..side * side).map(|_| rng.gen_range(0..256)).collect();
                    check_conv_encodings(g, 128, &image);
                }
            }
        }
    }
    let g = ConvGeometry::square(1, 28, 28, 5, 2, 1);
    for _ in 0..3 {
        let image: Vec<i128> = (0..784).map(|_| rng.gen_range(0..256)).collect();
        check_conv_encodings(g, 2048, &image);
    }
}

fn conv(k: usize, s: usize, maps: usize, padding: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel_h: k,
        kernel_w: k,
        stride_h: s,
        stride_w: s,
        maps,
        padding,
    }
}

fn random_net(rng: &mut ChaCha8Rng, input: Shape, specs: &[LayerSpec], range: i32) -> Network {
    let mut shape = input;
    let layers = specs
        .iter()
        .map(|&s| {
            let (w, b) = s.param_lens(shape);
            shape = s.output_shape(shape).unwrap();
            Layer::new(
                s,
                (0..w).map(|_| rng.gen_range(-range..=range) as f64).collect(),
                (0..b).map(|_| rng.gen_range(-range..=range) as f64).collect(),
            )
        })
        .collect();
    Network::new(input, layers).unwrap()
}

fn integer(net: &Network) -> CollapsedNetwork<i128> {
    collapse(net).unwrap().map_weights(|w| w.round() as i128)
}

#[test]
fn mnist_shaped_plans_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let specs = [conv(5, 2, 5, 1), LayerSpec::Square, LayerSpec::Dense { outputs: 20 }, LayerSpec::Square, LayerSpec::Dense { outputs: 10 }];
    let net = integer(&random_net(&mut rng, Shape::new(1, 28, 28), &specs, 2));
    let x: Vec<i128> = (0..784).map(|_| rng.gen_range(0..256)).collect();
    let oracle = net.forward(&x).unwrap();
    for (preset, n) in [(Preset::LolaMnist, 8192), (Preset::LolaDenseMnist, 16384), (Preset::CryptonetsSimd, 64)] {
        let plan = build_plan(&net, &PlanStrategy::Preset(preset), &PlanConfig::new(n, DEFAULT_PRIMES.to_vec())).unwrap();
        let ev = evaluator(n, &DEFAULT_PRIMES, BackendKind::Slot);
        let out = run(&plan, &net, &x, &ev).unwrap();
        assert_eq!(out.scores, oracle, "{preset}");
        assert!(out.report.matches_prediction());
        for (step, s) in plan.steps.iter().zip(&out.report.steps) {
            assert_eq!(s.measured.live_messages_peak, step.input.message_count() as u64);
        }
    }
}

#[test]
fn counters_do_not_depend_on_thread_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let specs = [conv(3, 1, 2, 0), LayerSpec::Square, LayerSpec::Dense { outputs: 10 }];
    let net = integer(&random_net(&mut rng, Shape::new(1, 8, 8), &specs, 3));
    let x: Vec<i128> = (0..64).map(|_| rng.gen_range(0..16)).collect();
    let plan = build_plan(&net, &PlanStrategy::Preset(Preset::LolaMnist), &PlanConfig::new(256, DEFAULT_PRIMES.to_vec())).unwrap();
    let reports: Vec<_> = [1, 4, 1]
        .into_iter()
        .map(|t| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(t).build().unwrap();
            pool.install(|| {
                let ev = evaluator(256, &DEFAULT_PRIMES, BackendKind::Ring);
                let out = run(&plan, &net, &x, &ev).unwrap();
                (out.scores, out.report.steps.iter().map(|s| s.measured).collect::<Vec<_>>(), ev.counters())
            })
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
    assert_eq!(reports[0], reports[2]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn collapse_matches_layer_by_layer(seed in any::<u64>(), pool in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut specs = vec![conv(3, 1, 2, 1)];
        if pool {
            specs.push(LayerSpec::AvgPool { window: 2, stride: 2 });
        }
        specs.extend([conv(3, 1, 3, 0), LayerSpec::Square, LayerSpec::Dense { outputs: 4 }, LayerSpec::Dense { outputs: 3 }]);
        let input = Shape::new(2, 9, 9);
        let mut shape = input;
        let layers = specs.iter().map(|&s| {
            let (w, b) = s.param_lens(shape);
            shape = s.output_shape(shape).unwrap();
            Layer::new(s, (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect(), (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect())
        }).collect();
        let net = Network::new(input, layers).unwrap();
        let collapsed = collapse(&net).unwrap();
        prop_assert_eq!(collapsed.stages.len(), 3);
        let x: Vec<f64> = (0..input.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = net.forward(&x).unwrap();
        let b = collapsed.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-9 * u.abs().max(1.0), "{} vs {}", u, v);
        }

        let ints = random_net(&mut rng, input, &specs[..specs.len() - 2], 3);
        let xi: Vec<f64> = (0..input.len()).map(|_| rng.gen_range(-4..=4) as f64).collect();
        let want: Vec<i128> = ints.forward(&xi).unwrap().iter().map(|v| v.round() as i128).collect();
        if !pool {
            let got = integer(&ints).forward(&xi.iter().map(|&v| v as i128).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn prediction_is_scale_invariant(scores in prop::collection::vec(-1000i64..1000, 1..12), c in 1i64..50) {
        let scaled: Vec<i64> = scores.iter().map(|s| s * c).collect();
        prop_assert_eq!(predict(&scores), predict(&scaled));
        let best = scores.iter().max().unwrap();
        prop_assert_eq!(predict(&scores), scores.iter().position(|s| s == best).unwrap());
    }
}

#[test]
fn predict_examples() {
    assert_eq!(predict(&[1, 5, 3]), 1);
    assert_eq!(predict(&[7, 7, 7]), 0);
    assert_eq!(predict(&[-1, -5, -3]), 0);
    let neg: Vec<i32> = [4, 1, 9].iter().map(|x| -x).collect();
    assert_eq!(predict(&neg), 1);
}

#[test]
fn zero_input_and_biases_give_zero_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let specs = [conv(3, 1, 2, 0), LayerSpec::Square, LayerSpec::Dense { outputs: 10 }];
    let mut net = random_net(&mut rng, Shape::new(1, 8, 8), &specs, 3);
    for l in &mut net.layers {
        l.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let net = integer(&net);
    for preset in Preset::ALL {
        let plan = build_plan(&net, &PlanStrategy::Preset(preset), &PlanConfig::new(256, DEFAULT_PRIMES.to_vec())).unwrap();
        let ev = evaluator(256, &DEFAULT_PRIMES, BackendKind::Slot);
        assert_eq!(run(&plan, &net, &[0; 64], &ev).unwrap().scores, vec![0; 10], "{preset}");
    }
}
