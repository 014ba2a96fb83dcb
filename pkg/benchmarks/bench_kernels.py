"""Time the compiled kernels against the numpy fallback on toy-model shapes.

    python3 benchmarks/bench_kernels.py [--repeat N] [--json FILE] [--no-step]

Each row is the best of N runs. The last rows time one full training step of the
toy model (batch 32) under each backend.
"""
import argparse
import json
import time

import numpy as np

from laconv import kernels, synth
from laconv import tensor as T
from laconv.net import LaConvNet, build
from laconv.text import Vocabulary
from laconv.train import AdamState, Dataset, TrainConfig, keep_heap, train_epoch

B = 32
# (h, d, k, g, s) of the three toy stages
DYCONV = [(32, 16, 3, 4, 4), (16, 32, 5, 8, 2), (8, 64, 5, 16, 1)]
BN = [(B * 32 * 32, 16), (B * 16 * 16, 128), (B * 8 * 8, 256)]
POOL = [(64, 16), (32, 16), (16, 32)]


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    f32 = np.float32
    for h, d, k, g, s in DYCONV:
        x = rng.standard_normal((B, h, h, d)).astype(f32)
        w = rng.standard_normal((B, h // s, h // s, k * k * g)).astype(f32)
        gout = rng.standard_normal(x.shape).astype(f32)
        tag = f"{h}x{h}x{d} k{k} g{g} s{s}"
        yield "dyconv fwd", tag, lambda K, x=x, w=w, k=k, g=g, s=s: K["dyconv_forward"](x, w, k, g, s)
        yield "dyconv bwd", tag, lambda K, x=x, w=w, gout=gout, k=k, g=g, s=s: K["dyconv_backward"](x, w, gout, k, g, s)
    for n, c in BN:
        x = rng.standard_normal((n, c)).astype(f32)
        res = rng.standard_normal((n, c)).astype(f32)
        gamma, beta = np.ones(c, f32), np.zeros(c, f32)
        y, mean, _, inv = kernels.bn_forward(x, gamma, beta, 1e-5, res, True)
        tag = f"{n}x{c} +res relu"
        yield "bn fwd", tag, lambda K, x=x, res=res, gamma=gamma, beta=beta: K["bn_forward"](x, gamma, beta, 1e-5, res, True)
        yield "bn bwd", tag, lambda K, x=x, y=y, gamma=gamma, mean=mean, inv=inv: K["bn_backward"](x, x, y, gamma, mean, inv)
    for h, d in POOL:
        x = rng.standard_normal((B, h, h, d)).astype(np.float32)
        out = kernels.maxpool_forward(x)
        g = rng.standard_normal(out.shape).astype(np.float32)
        tag = f"{h}x{h}x{d}"
        yield "maxpool fwd", tag, lambda K, x=x: K["maxpool_forward"](x)
        yield "maxpool bwd", tag, lambda K, g=g, x=x, out=out: K["maxpool_backward"](g, x, out)


def step_time(backend, repeat):
    kernels.use_backend(backend)
    vocab = Vocabulary(synth.vocabulary_tokens())
    data = Dataset(synth.generate(B, "train", 0)[0], vocab)
    model = LaConvNet(build("toy"), len(vocab))
    cfg = TrainConfig(lr0=1e-4, epochs=2, warmup_epochs=0, batch_size=B)
    state, rng = AdamState(), np.random.default_rng(0)
    return best_of(lambda: train_epoch(model, data, cfg, state, rng, 0, 100, 0), repeat)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write the rows here")
    ap.add_argument("--no-step", action="store_true", help="skip the full training-step timing")
    args = ap.parse_args()
    if kernels.COMPILED_KERNELS is None:
        raise SystemExit("compiled kernels are not built; run pip install -e . --no-build-isolation")

    keep_heap()  # as in training: reuse freed buffers instead of faulting in fresh pages
    rows = []
    rng = np.random.default_rng(0)
    print(f"{'kernel':<12} {'shape':<24} {'numpy ms':>9} {'compiled ms':>12} {'speedup':>8}")
    for name, tag, fn in cases(rng):
        tn = best_of(lambda: fn(kernels.NUMPY_KERNELS), args.repeat)
        tc = best_of(lambda: fn(kernels.COMPILED_KERNELS), args.repeat)
        rows.append({"kernel": name, "shape": tag, "numpy_ms": tn * 1e3, "compiled_ms": tc * 1e3})
        print(f"{name:<12} {tag:<24} {tn * 1e3:9.2f} {tc * 1e3:12.2f} {tn / tc:7.1f}x")
    if not args.no_step:
        prev = kernels.BACKEND
        tn, tc = step_time("numpy", args.repeat), step_time("compiled", args.repeat)
        kernels.use_backend(prev)
        rows.append({"kernel": "train step", "shape": f"toy, batch {B}", "numpy_ms": tn * 1e3, "compiled_ms": tc * 1e3})
        print(f"{'train step':<12} {'toy, batch 32':<24} {tn * 1e3:9.1f} {tc * 1e3:12.1f} {tn / tc:7.1f}x")
    if args.json:
        with open(args.json, "w") as f:
            json.dump(rows, f, indent=1)


if __name__ == "__main__":
    main()
