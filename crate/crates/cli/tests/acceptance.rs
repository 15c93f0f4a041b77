//! Release acceptance suite: one PASS/FAIL line per criterion.

use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lola_core::backend::{BackendKind, BudgetPolicy, Evaluator, OpCounters};
use lola_core::kernels::{
    conv_rowmajor, dot_product, matvec_dense_rowmajor, matvec_interleaved_rowmajor, matvec_simd,
    matvec_sparse_colmajor, matvec_stacked_rowmajor, WeightMatrix,
};
use lola_core::network::{
    build_plan, collapse, propagate_bounds, quantize, run, CollapsedNetwork, Layer, LayerSpec, LinearKind, Network,
    PlanConfig, Preset, QuantizationPolicy, Shape, Stage, Strategy, DEFAULT_PRIMES,
};
use lola_core::repr::{
    encode_convolution, encode_dense, encode_interleaved, encode_simd, encode_sparse, stack_copies, ConvGeometry,
};
use lola_core::ring::{CrtModulus, PrimeModulus, RingContext, RingElement, Rotation, SlotVector};
use lola_core::Error;

const BATCH_TIME_LIMIT: Duration = Duration::from_secs(60);
const E2E_TIME_LIMIT: Duration = Duration::from_secs(600);
const COLLAPSE_REL_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn evaluator(n: usize, primes: &[u64], backend: BackendKind) -> Evaluator {
    Evaluator::new(Arc::new(CrtModulus::new(primes, n).unwrap()), backend, BudgetPolicy::default())
}

fn is_prime_trial(n: u64) -> bool {
    n >= 2 && (2..).take_while(|d: &u64| d * d <= n).all(|d| n % d != 0)
}

/// Slot permutation of the 2 x n/2 matrix.
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
    let p = p as u128;
    let mut pos = vec![0u128; n];
    let mut neg = vec![0u128; n];
    for i in 0..n {
        for j in 0..n {
            let t = a[i] as u128 * b[j] as u128 % p;
            if i + j < n {
                pos[i + j] = (pos[i + j] + t) % p;
            } else {
                neg[i + j - n] = (neg[i + j - n] + t) % p;
            }
        }
    }
    pos.iter().zip(&neg).map(|(&x, &y)| ((x + p - y) % p) as u64).collect()
}

fn schoolbook(w: &[Vec<i128>], v: &[i128]) -> Vec<i128> {
    w.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Direct zero-padded convolution; weights are `maps x c x k x k`.
fn direct_conv(img: &[i128], c: usize, h: usize, w: usize, k: usize, s: usize, pad: usize, wt: &[Vec<i128>]) -> Vec<Vec<i128>> {
    let (oh, ow) = ((h + 2 * pad - k) / s + 1, (w + 2 * pad - k) / s + 1);
    wt.iter()
        .map(|m| {
            let mut out = Vec::with_capacity(oh * ow);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0;
                    for ch in 0..c {
                        for dy in 0..k {
                            for dx in 0..k {
                                let y = (oy * s + dy) as i64 - pad as i64;
                                let x = (ox * s + dx) as i64 - pad as i64;
                                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                    acc += m[(ch * k + dy) * k + dx] * img[(ch * h + y as usize) * w + x as usize];
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
            out
        })
        .collect()
}

fn c1_batching() -> Outcome {
    let p = DEFAULT_PRIMES[0];
    ensure(p % 16384 == 1, || format!("{p} is not 1 mod 16384"))?;
    let ctx = RingContext::new(PrimeModulus::new(p, 8192).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    for t in 0..1000 {
        let u: Vec<u64> = (0..8192).map(|_| rng.gen_range(0..p)).collect();
        let v: Vec<u64> = (0..8192).map(|_| rng.gen_range(0..p)).collect();
        let eu = ctx.encode(&SlotVector::new(p, u.clone()).unwrap()).unwrap();
        let ev = ctx.encode(&SlotVector::new(p, v.clone()).unwrap()).unwrap();
        let sum = ctx.decode(&ctx.add(&eu, &ev).unwrap()).unwrap();
        let prod = ctx.decode(&ctx.mul(&eu, &ev).unwrap()).unwrap();
        for i in 0..8192 {
            ensure(sum.slots()[i] == (u[i] + v[i]) % p, || format!("pair {t}: add differs at slot {i}"))?;
            let want = (u[i] as u128 * v[i] as u128 % p as u128) as u64;
            ensure(prod.slots()[i] == want, || format!("pair {t}: mul differs at slot {i}"))?;
        }
    }
    let el = start.elapsed();
    ensure(el < BATCH_TIME_LIMIT, || format!("took {el:.1?} (limit {BATCH_TIME_LIMIT:?})"))?;
    Ok(format!("1000 pairs at n = 8192, p = {p}, exact, {el:.1?} (limit {BATCH_TIME_LIMIT:?})"))
}

fn c2_rotation() -> Outcome {
    let p = DEFAULT_PRIMES[0];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut exhaustive = 0;
    for log_n in 2..=6 {
        let n = 1usize << log_n;
        let ctx = RingContext::new(PrimeModulus::new(p, n).unwrap()).unwrap();
        let h = (n / 2) as i64;
        let rots = std::iter::once(Rotation::Rows).chain((1 - h..h).map(Rotation::Columns));
        for rot in rots {
            let v: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
            let got = ctx.decode(&ctx.galois_rotate(&ctx.encode(&SlotVector::new(p, v.clone()).unwrap()).unwrap(), rot).unwrap()).unwrap();
            ensure(got.slots() == permute_oracle(&v, rot), || format!("{rot:?} at n = {n}"))?;
            exhaustive += 1;
        }
    }
    let n = 8192;
    let ctx = RingContext::new(PrimeModulus::new(p, n).unwrap()).unwrap();
    for _ in 0..1000 {
        let rot = if rng.gen_ratio(1, 10) { Rotation::Rows } else { Rotation::Columns(rng.gen_range(-4095..4096)) };
        let v: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
        let got = ctx.decode(&ctx.galois_rotate(&ctx.encode(&SlotVector::new(p, v.clone()).unwrap()).unwrap(), rot).unwrap()).unwrap();
        ensure(got.slots() == permute_oracle(&v, rot), || format!("{rot:?} at n = 8192"))?;
    }
    Ok(format!("{exhaustive} exhaustive cases for n <= 64, 1000 random at n = 8192, exact"))
}

fn c3_ntt() -> Outcome {
    let p = DEFAULT_PRIMES[1];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [8, 64, 256, 1024] {
        let ctx = RingContext::new(PrimeModulus::new(p, n).unwrap()).unwrap();
        for t in 0..500 {
            let a: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
            let b: Vec<u64> = (0..n).map(|_| rng.gen_range(0..p)).collect();
            let got = ctx.mul(&RingElement::new(p, a.clone()).unwrap(), &RingElement::new(p, b.clone()).unwrap()).unwrap();
            ensure(got.coeffs() == negacyclic(&a, &b, p), || format!("n = {n}, pair {t}"))?;
        }
    }
    Ok("500 pairs at each n in {8, 64, 256, 1024}, exact".into())
}

fn c4_kernels() -> Outcome {
    let n = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut count = 0;
    for backend in [BackendKind::Slot, BackendKind::Ring] {
        let ev = evaluator(n, &DEFAULT_PRIMES[..2], backend);
        for t in 0..500 {
            let (r, k) = (rng.gen_range(1..=64), rng.gen_range(1..=64));
            let w: Vec<Vec<i128>> = (0..r).map(|_| (0..k).map(|_| rng.gen_range(-9..=9)).collect()).collect();
            let v: Vec<i128> = (0..k).map(|_| rng.gen_range(-50..=50)).collect();
            let want = schoolbook(&w, &v);
            let m = WeightMatrix::from_rows(&w).unwrap();
            let tag = |name: &str| format!("{name} ({backend}, {r}x{k}, instance {t})");
            let dense = encode_dense(&ev, &v).unwrap();

            let got = matvec_dense_rowmajor(&ev, &m, &dense).map_err(|e| e.to_string())?.decode(&ev);
            ensure(got == want, || tag("dense row-major"))?;

            let mut layout: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut layout[..], &mut rng);
            layout.truncate(k);
            let x = encode_interleaved(&ev, &v, layout.clone()).unwrap();
            let got = matvec_interleaved_rowmajor(&ev, &m.clone().with_permutation(layout).unwrap(), &x)
                .map_err(|e| e.to_string())?
                .decode(&ev);
            ensure(got == want, || tag("interleaved row-major"))?;

            let got = matvec_sparse_colmajor(&ev, &m, &encode_sparse(&ev, &v).unwrap()).map_err(|e| e.to_string())?.decode(&ev);
            ensure(got == want, || tag("sparse column-major"))?;

            let stacked = stack_copies(&ev, &dense, n / k.next_power_of_two()).unwrap();
            let got: Vec<i128> = matvec_stacked_rowmajor(&ev, &m, &stacked)
                .map_err(|e| e.to_string())?
                .iter()
                .flat_map(|p| p.decode(&ev))
                .collect();
            ensure(got == want, || tag("stacked row-major"))?;

            let batch: Vec<Vec<i128>> = (0..3).map(|_| (0..k).map(|_| rng.gen_range(-50..=50)).collect()).collect();
            let terms: Vec<Vec<(usize, i128)>> = w.iter().map(|row| row.iter().copied().enumerate().collect()).collect();
            let got = matvec_simd(&ev, &terms, &encode_simd(&ev, &batch).unwrap())
                .map_err(|e| e.to_string())?
                .decode_simd_batch(&ev)
                .unwrap();
            ensure(got.iter().zip(&batch).all(|(g, b)| g == &schoolbook(&w, b)), || tag("simd"))?;

            let side = rng.gen_range(4..=10);
            let kk = rng.gen_range(1..=4.min(side));
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..kk);
            let g = ConvGeometry::square(2, side, side, kk, stride, pad);
            let img: Vec<i128> = (0..g.input_len()).map(|_| rng.gen_range(0..256)).collect();
            let maps: Vec<Vec<i128>> = (0..rng.gen_range(1..=4)).map(|_| (0..g.taps()).map(|_| rng.gen_range(-9..=9)).collect()).collect();
            let parts = conv_rowmajor(&ev, &maps, &encode_convolution(&ev, &img, &g, None).unwrap()).map_err(|e| e.to_string())?;
            let want = direct_conv(&img, 2, side, side, kk, stride, pad, &maps);
            ensure(parts.iter().map(|p| p.decode(&ev)).collect::<Vec<_>>() == want, || tag("convolution"))?;
            count += 6;
        }
    }
    Ok(format!("{count} kernel instances (5 matvec kernels + conv, 500 each per backend), exact"))
}

fn delta(ev: &Evaluator, f: impl FnOnce()) -> OpCounters {
    let before = ev.counters();
    f();
    ev.counters().since(&before).without_peak()
}

fn c5_counts() -> Outcome {
    let n = 8192;
    let ev = evaluator(n, &DEFAULT_PRIMES, BackendKind::Slot);
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let v: Vec<i128> = (0..4096).map(|_| rng.gen_range(-3..=3)).collect();
    let row: Vec<i128> = (0..4096).map(|_| rng.gen_range(-3..=3)).collect();
    let m = ev.lift(&v).unwrap();
    let layout: Vec<usize> = (0..4096).collect();
    let c = delta(&ev, || {
        dot_product(&ev, &m, &layout, &row, 4096).unwrap();
    });
    ensure(c.ct_plain_mul == 1 && c.rotations() == 12 && c.add == 12, || format!("dot product: {c:?}"))?;

    let x: Vec<i128> = (0..845).map(|_| rng.gen_range(-3..=3)).collect();
    let w: Vec<Vec<i128>> = (0..100).map(|_| (0..845).map(|_| rng.gen_range(-3..=3)).collect()).collect();
    let stacked = stack_copies(&ev, &encode_dense(&ev, &x).unwrap(), 8).unwrap();
    ensure(stacked.rep.stride == 1024, || format!("stride {}", stacked.rep.stride))?;
    let mut parts = Vec::new();
    let c = delta(&ev, || parts = matvec_stacked_rowmajor(&ev, &WeightMatrix::from_rows(&w).unwrap(), &stacked).unwrap());
    let widths: Vec<usize> = parts.iter().map(|p| p.rep.len).collect();
    ensure(parts.len() == 13 && c.ct_plain_mul == 13 && widths[..12].iter().all(|&w| w == 8), || {
        format!("stacked: {} calls, widths {widths:?}, {c:?}", parts.len())
    })?;

    for k in [1usize, 7, 64] {
        let w: Vec<Vec<i128>> = (0..10).map(|_| (0..k).map(|_| rng.gen_range(-3..=3)).collect()).collect();
        let v: Vec<i128> = (0..k).map(|_| rng.gen_range(-3..=3)).collect();
        let s = encode_sparse(&ev, &v).unwrap();
        let c = delta(&ev, || {
            matvec_sparse_colmajor(&ev, &WeightMatrix::from_rows(&w).unwrap(), &s).unwrap();
        });
        ensure(c.ct_plain_mul == k as u64 && c.add == k as u64 - 1 && c.rotations() == 0, || format!("sparse k = {k}: {c:?}"))?;
    }

    let g = ConvGeometry::square(1, 28, 28, 5, 2, 1);
    let img: Vec<i128> = (0..784).map(|_| rng.gen_range(0..256)).collect();
    let maps: Vec<Vec<i128>> = (0..5).map(|_| (0..25).map(|_| rng.gen_range(-3..=3)).collect()).collect();
    let x = encode_convolution(&ev, &img, &g, None).unwrap();
    for map in &maps {
        let c = delta(&ev, || {
            conv_rowmajor(&ev, std::slice::from_ref(map), &x).unwrap();
        });
        ensure(c.scalar_mul == 25 && c.add == 24, || format!("conv map: {c:?}"))?;
    }
    Ok("dot(4096) = 1 mult + 12 rot + 12 add; stacked 13 calls x 8 rows; sparse k mult + k-1 add; conv 25 scalar + 24 add per map".into())
}

fn profile(model: &std::path::Path, plan: &str, format: &str) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_lola"))
        .args(["profile", "--model", model.to_str().unwrap(), "--plan", plan, "--format", format])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    Ok(String::from_utf8(o.stdout).unwrap())
}

fn rows(jsonl: &str) -> Vec<serde_json::Value> {
    jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn gen(dir: &std::path::Path, arch: &str) -> Result<std::path::PathBuf, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_lola"))
        .args(["gen-model", "--arch", arch, "--shape-only", "--out", dir.to_str().unwrap()])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
    Ok(String::from_utf8(o.stdout).unwrap().trim().into())
}

fn c6_traces() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mnist = gen(dir.path(), "mnist")?;
    let cifar = gen(dir.path(), "cifar")?;

    let r = rows(&profile(&mnist, "lola-mnist", "jsonl")?);
    let seq: Vec<String> = r[..r.len() - 1].iter().map(|x| format!("{} {}", x["input"].as_str().unwrap(), x["representation"].as_str().unwrap())).collect();
    let golden = [
        "25×169 convolution", "5×169 dense", "1×845 dense", "1×845 dense", "1×6760 stacked", "13×8 interleave",
        "1×100 interleave", "1×100 interleave", "1×10 sparse",
    ];
    ensure(seq == golden, || format!("lola-mnist sequence {seq:?}"))?;
    let ctct = r.last().unwrap()["totals"]["ct_ct_mul"].as_u64();
    ensure(ctct == Some(2), || format!("lola-mnist ct*ct = {ctct:?}"))?;

    let r = rows(&profile(&mnist, "lola-dense-mnist", "jsonl")?);
    ensure(r[0]["input"] == "1×784" && r[0]["counters"]["mask_mul"] == 25, || format!("first row {}", r[0]))?;
    ensure(r[0]["operation"] == "mask input to create 25 messages", || format!("first row {}", r[0]))?;
    let stacked = r.iter().find(|x| x["representation"] == "stacked-interleave").ok_or("no stacked row")?;
    ensure(stacked["operation"].as_str().unwrap().contains("7 iterations of 16 rows"), || format!("{stacked}"))?;
    ensure(r.iter().any(|x| x["input"] == "7×16"), || "no 7×16 row".into())?;

    let r = rows(&profile(&cifar, "lola-cifar", "jsonl")?);
    let input: usize = r[0]["input"].as_str().unwrap().split('×').next().unwrap().parse().unwrap();
    ensure(input == 192, || format!("lola-cifar input {input} messages"))?;
    let r = rows(&profile(&cifar, "cryptonets-simd", "jsonl")?);
    let widest = r.last().unwrap()["peak_messages"].as_u64().unwrap();
    ensure(widest == 16268, || format!("cryptonets-simd widest layer {widest}"))?;
    let ratio = widest as f64 / input as f64;
    ensure(ratio >= 80.0, || format!("ratio {ratio:.1}"))?;
    Ok(format!("lola-mnist and lola-dense-mnist goldens match; cifar 192 vs 16268 messages ({ratio:.1}x)"))
}

fn c7_primes() -> Outcome {
    for p in DEFAULT_PRIMES {
        ensure(is_prime_trial(p), || format!("{p} is composite"))?;
        ensure(p % 32768 == 1, || format!("{p} mod 32768 = {}", p % 32768))?;
    }
    CrtModulus::new(&DEFAULT_PRIMES, 16384).map_err(|e| e.to_string())?;
    Ok(format!("{DEFAULT_PRIMES:?} prime (trial division) and 1 mod 32768"))
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

/// Integer forward pass of conv/square/dense layers, written directly.
fn oracle(net: &Network, x: &[i128]) -> Vec<i128> {
    let mut cur = x.to_vec();
    let mut shape = net.input;
    for l in &net.layers {
        let w: Vec<i128> = l.weights.iter().map(|&v| v as i128).collect();
        let b: Vec<i128> = l.bias.iter().map(|&v| v as i128).collect();
        cur = match l.spec {
            LayerSpec::Conv { kernel_h, stride_h, maps, padding, .. } => {
                let per = shape.channels * kernel_h * kernel_h;
                let wt: Vec<Vec<i128>> = (0..maps).map(|m| w[m * per..(m + 1) * per].to_vec()).collect();
                direct_conv(&cur, shape.channels, shape.height, shape.width, kernel_h, stride_h, padding, &wt)
                    .into_iter()
                    .zip(&b)
                    .flat_map(|(map, &bias)| map.into_iter().map(move |v| v + bias))
                    .collect()
            }
            LayerSpec::Square => cur.iter().map(|v| v * v).collect(),
            LayerSpec::Dense { outputs } => (0..outputs)
                .map(|i| b[i] + cur.iter().zip(&w[i * cur.len()..(i + 1) * cur.len()]).map(|(a, c)| a * c).sum::<i128>())
                .collect(),
            _ => unreachable!(),
        };
        shape = l.spec.output_shape(shape).unwrap();
    }
    cur
}

fn c8_end_to_end() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let start = Instant::now();
    let mut runs = 0;
    let mut skipped = 0;
    for t in 0..200 {
        let side = rng.gen_range(8..=16);
        let k = rng.gen_range(2..=5);
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=1);
        let specs = [
            conv(k, stride, rng.gen_range(1..=3), pad),
            LayerSpec::Square,
            LayerSpec::Dense { outputs: rng.gen_range(4..=16) },
            LayerSpec::Square,
            LayerSpec::Dense { outputs: 10 },
        ];
        let input = Shape::new(1, side, side);
        let mut shape = input;
        let layers = specs
            .iter()
            .map(|&s| {
                let (w, b) = s.param_lens(shape);
                shape = s.output_shape(shape).unwrap();
                Layer::new(
                    s,
                    (0..w).map(|_| rng.gen_range(-3..=3) as f64).collect(),
                    (0..b).map(|_| rng.gen_range(-3..=3) as f64).collect(),
                )
            })
            .collect();
        let net = Network::new(input, layers).unwrap();
        let x: Vec<i128> = (0..input.len()).map(|_| rng.gen_range(0..16)).collect();
        let want = oracle(&net, &x);
        let n = if side <= 12 { 512 } else { 1024 };
        let modulus = CrtModulus::new(&DEFAULT_PRIMES, n).unwrap();
        let q = quantize(&collapse(&net).unwrap(), &QuantizationPolicy::uniform(3, 1.0, 1.0, 15), &modulus).map_err(|e| e.to_string())?;
        let modulus = Arc::new(modulus);
        for preset in Preset::ALL {
            let plan = match build_plan(&q.net, &Strategy::Preset(preset), &PlanConfig::new(n, DEFAULT_PRIMES.to_vec())) {
                Ok(p) => p,
                Err(Error::IncompatibleStrategy(_)) | Err(Error::Capacity(_)) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(format!("net {t}, {preset}: {e}")),
            };
            for backend in [BackendKind::Slot, BackendKind::Ring] {
                let ev = Evaluator::new(modulus.clone(), backend, BudgetPolicy::default());
                let out = run(&plan, &q.net, &x, &ev)
                    .map_err(|e| format!("net {t} ({side}x{side}, {:?}), {preset}, {backend}: {e}", specs[..3].to_vec()))?;
                ensure(out.scores == want, || format!("net {t}, {preset}, {backend}: scores differ from the oracle"))?;
                ensure(out.report.matches_prediction(), || format!("net {t}, {preset}, {backend}: counters differ from the plan"))?;
                runs += 1;
            }
        }
    }
    let el = start.elapsed();
    ensure(el < E2E_TIME_LIMIT, || format!("took {el:.1?}"))?;
    Ok(format!("200 nets, {runs} plan/backend runs equal to the oracle ({skipped} inapplicable plans), {el:.1?} (limit {E2E_TIME_LIMIT:?})"))
}

fn c9_collapse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let input = Shape::new(3, 16, 16);
    let specs = [conv(3, 1, 8, 0), LayerSpec::AvgPool { window: 2, stride: 2 }, conv(3, 1, 6, 0)];
    let mut shape = input;
    let layers = specs
        .iter()
        .map(|&s| {
            let (w, b) = s.param_lens(shape);
            shape = s.output_shape(shape).unwrap();
            Layer::new(s, (0..w).map(|_| rng.gen_range(-1.0..1.0)).collect(), (0..b).map(|_| rng.gen_range(-1.0..1.0)).collect())
        })
        .collect();
    let net = Network::new(input, layers).unwrap();
    let collapsed = collapse(&net).map_err(|e| e.to_string())?;
    let Some(Stage::Linear(stage)) = collapsed.stages.first() else { return Err("no linear stage".into()) };
    let LinearKind::Conv { geom } = stage.kind else { return Err("run did not collapse to a convolution".into()) };
    ensure(
        collapsed.stages.len() == 1 && (geom.kernel_h, geom.kernel_w, geom.stride_h, geom.stride_w) == (8, 8, 2, 2),
        || format!("collapsed to {geom:?}"),
    )?;
    let mut worst = 0f64;
    for _ in 0..100 {
        let x: Vec<f64> = (0..input.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = net.forward(&x).unwrap();
        let b = collapsed.forward(&x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            worst = worst.max((u - v).abs() / u.abs().max(1.0));
        }
    }
    ensure(worst <= COLLAPSE_REL_TOL, || format!("relative error {worst:e}"))?;
    Ok(format!("conv3x3 + pool2x2 + conv3x3 -> 8x8 stride-2 conv, max rel error {worst:.1e} (tol {COLLAPSE_REL_TOL:e})"))
}

fn dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Layer {
    Layer::new(
        LayerSpec::Dense { outputs: rows },
        (0..rows * cols).map(|_| rng.gen_range(-5..=5) as f64).collect(),
        (0..rows).map(|_| rng.gen_range(-5..=5) as f64).collect(),
    )
}

fn c10_quantization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut corners = 0;
    for t in 0..50 {
        let d = rng.gen_range(1..=6);
        let h = rng.gen_range(1..=6);
        let bound: i128 = rng.gen_range(1..=255);
        let layers = vec![dense(h, d, &mut rng), Layer::shape_only(LayerSpec::Square), dense(3, h, &mut rng)];
        let net = Network::new(Shape::flat(d), layers).unwrap();
        let ints: CollapsedNetwork<i128> = collapse(&net).unwrap().map_weights(|w| w as i128);
        let bounds = propagate_bounds(&ints, bound as u128);
        let mut seen = vec![0u128; bounds.len()];
        for mask in 0..1u32 << d {
            let x: Vec<i128> = (0..d).map(|i| if mask >> i & 1 == 1 { bound } else { -bound }).collect();
            let mut cur = x;
            for (s, stage) in ints.stages.iter().enumerate() {
                cur = match stage {
                    Stage::Linear(l) => l.apply(&cur),
                    Stage::Square => cur.iter().map(|v| v * v).collect(),
                };
                let m = cur.iter().map(|v| v.unsigned_abs()).max().unwrap();
                ensure(m <= bounds[s], || format!("net {t}: stage {s} reached {m} > bound {}", bounds[s]))?;
                seen[s] = seen[s].max(m);
            }
            corners += 1;
        }
        ensure(seen[0] == bounds[0] && seen[1] == bounds[1], || format!("net {t}: corner max {seen:?}, bounds {bounds:?}"))?;
    }

    let modulus = CrtModulus::new(&DEFAULT_PRIMES[..1], 16).unwrap();
    let layers = vec![
        dense(4, 4, &mut rng),
        Layer::shape_only(LayerSpec::Square),
        Layer::new(LayerSpec::Dense { outputs: 2 }, vec![10.0; 8], vec![0.0; 2]),
        Layer::shape_only(LayerSpec::Square),
        dense(2, 2, &mut rng),
    ];
    let net = collapse(&Network::new(Shape::flat(4), layers).unwrap()).unwrap();
    match quantize(&net, &QuantizationPolicy::uniform(3, 1.0, 1.0, 100), &modulus) {
        Err(Error::LayerOverflow { layer: 3, .. }) => {}
        other => return Err(format!("expected an overflow at stage 3, got {other:?}")),
    }
    Ok(format!("{corners} corner inputs within the propagated bounds; overflow reported at the offending layer"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("batching homomorphism", c1_batching),
        ("rotation oracle", c2_rotation),
        ("ntt vs schoolbook", c3_ntt),
        ("kernel oracle equivalence", c4_kernels),
        ("operation counts", c5_counts),
        ("plan trace goldens", c6_traces),
        ("modulus validation", c7_primes),
        ("end-to-end equivalence", c8_end_to_end),
        ("collapse correctness", c9_collapse),
        ("quantization soundness", c10_quantization),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
