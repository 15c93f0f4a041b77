"""Quick end-to-end check of the Python bindings.

Build and install first:  pip install ./crates/py
"""

import json
import random

import lola


def check_ring():
    p = lola.DEFAULT_PRIMES[0]
    ring = lola.Ring(16, p)
    rng = random.Random(0)
    u = [rng.randrange(p) for _ in range(16)]
    v = [rng.randrange(p) for _ in range(16)]
    eu, ev = ring.encode(u), ring.encode(v)
    assert ring.decode(ring.mul(eu, ev)) == [a * b % p for a, b in zip(u, v)]
    assert ring.decode(ring.add(eu, ev)) == [(a + b) % p for a, b in zip(u, v)]
    # columns shift right within each row of 8
    rotated = ring.decode(ring.rotate(eu, 1))
    assert rotated[:8] == u[7:8] + u[:7] and rotated[8:] == u[15:] + u[8:15]
    assert ring.decode(ring.rotate(eu, "rows")) == u[8:] + u[:8]


def toy_model():
    rng = random.Random(1)
    layers = [
        {"kind": "conv", "kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1, "maps": 2},
        {"kind": "square"},
        {"kind": "dense", "outputs": 6},
        {"kind": "square"},
        {"kind": "dense", "outputs": 10},
    ]
    sizes = [(2 * 9, 2), None, (6 * 2 * 36, 6), None, (10 * 6, 10)]
    weights = []
    for s in sizes:
        if s is None:
            weights.append(([], []))
        else:
            weights.append(([rng.randint(-3, 3) for _ in range(s[0])], [rng.randint(-3, 3) for _ in range(s[1])]))
    return lola.Model((1, 8, 8), layers, weights, input_bound=15, name="toy")


def check_inference():
    model = toy_model()
    x = [random.Random(2).randint(0, 15) for _ in range(64)]
    want = [round(v) for v in model.forward([float(v) for v in x])]
    for preset in lola.PRESETS:
        for backend in ("slot", "ring"):
            try:
                out = model.infer(x, preset=preset, n=256, backend=backend)
            except ValueError as e:
                print(f"  skip {preset}: {e}")
                break
            assert out.scores == want, (preset, backend, out.scores, want)
            assert out.matches_prediction
            assert json.loads(out.trace_jsonl().splitlines()[-1])["record"] == "summary"
    print("  scores", want, "class", max(range(10), key=lambda i: (want[i], -i)))


def check_plan():
    mnist = lola.Model(
        (1, 28, 28),
        [
            {"kind": "conv", "kernel_h": 5, "kernel_w": 5, "stride_h": 2, "stride_w": 2, "maps": 5, "padding": 1},
            {"kind": "square"},
            {"kind": "dense", "outputs": 100},
            {"kind": "square"},
            {"kind": "dense", "outputs": 10},
        ],
    )
    plan = mnist.plan("lola-mnist")
    assert plan.n == 8192 and plan.depth == 2
    inputs = [s[1] + " " + s[2] for s in plan.steps()]
    assert inputs[0] == "25×169 convolution" and inputs[-1] == "1×10 sparse", inputs
    print(plan.trace())


def check_verify():
    for name, trials, failures in lola.verify(n=64, trials=5):
        assert failures == 0, name


if __name__ == "__main__":
    for f in (check_ring, check_inference, check_plan, check_verify):
        f()
        print("ok", f.__name__)
