#!/usr/bin/env python3
"""Side-by-side timing of the two inference backends.

Runs the fused jitted forward and the plain numpy forward on the same inputs
at a few model sizes, reports per-call latency and speedup, and prints the
largest element difference between the two hidden-state outputs. A decode
loop at the default model size gives an end-to-end number.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--decode-steps T]
"""

import argparse
import statistics
import time

import numpy as np

from mdlab import kernels
from mdlab.backbone import BackboneConfig, init_params, predict
from mdlab.decode import DecodeConfig, Strategy, TokenMode, TokenSchedule, decode
from mdlab.rng import derive_rng

SIZES = [
    ("default (D=64, 2 layers, S=24)",
     BackboneConfig(vocab_size=16, max_len=32, embed_dim=64, n_layers=2,
                    n_heads=4, hidden_dim=128), 24),
    ("wide (D=128, 4 layers, S=64)",
     BackboneConfig(vocab_size=32, max_len=80, embed_dim=128, n_layers=4,
                    n_heads=8, hidden_dim=512), 64),
]


def backends():
    return ("numpy", "numba") if kernels.HAS_NUMBA else ("numpy",)


def time_call(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_forward(label, bcfg, seq_len, repeats):
    rng = np.random.default_rng(0)
    params = init_params(bcfg, rng)
    packed = kernels.pack_params(params.blocks, bcfg.n_layers, bcfg.n_heads)
    tokens = rng.integers(0, bcfg.vocab_size, size=seq_len)
    tvec = np.zeros(bcfg.embed_dim)

    outs, medians = {}, {}
    for backend in backends():
        kernels.configure(backend)
        kernels.warmup()
        kernels.forward_hidden(packed, tokens, tvec)  # compile / warm caches
        medians[backend] = time_call(
            lambda: kernels.forward_hidden(packed, tokens, tvec), repeats)
        outs[backend] = kernels.forward_hidden(packed, tokens, tvec)

    print(f"\n{label}")
    for backend, med in medians.items():
        print(f"  {backend:<6} {med * 1e6:9.1f} us/call")
    if len(outs) == 2:
        diff = float(np.abs(outs["numba"] - outs["numpy"]).max())
        speedup = medians["numpy"] / medians["numba"]
        print(f"  speedup numba vs numpy: {speedup:.2f}x, "
              f"max |hidden diff| = {diff:.3e}")


def bench_decode(steps):
    bcfg = SIZES[0][1]
    params = init_params(bcfg, np.random.default_rng(1))
    prompt = np.arange(2, 10, dtype=np.int64)
    cfg = DecodeConfig(T=steps, L=16, schedule=TokenSchedule("linear"),
                       strategy=Strategy("top1_confidence"),
                       token_mode=TokenMode("greedy"))

    print(f"\ndecode loop ({steps} steps, default size)")
    for backend in backends():
        kernels.configure(backend)
        kernels.warmup()
        decode(lambda s: predict(params, s), prompt, cfg, derive_rng(0, "warm"))
        med = time_call(
            lambda: decode(lambda s: predict(params, s), prompt, cfg,
                           derive_rng(0, "bench")), 5)
        print(f"  {backend:<6} {med * 1e3:9.2f} ms/trajectory")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=200,
                    help="timed calls per backend (median reported)")
    ap.add_argument("--decode-steps", type=int, default=16,
                    help="steps for the end-to-end decode timing")
    args = ap.parse_args()

    if not kernels.HAS_NUMBA:
        print("numba not importable; timing the numpy backend only")
    for label, bcfg, seq_len in SIZES:
        bench_forward(label, bcfg, seq_len, args.repeats)
    bench_decode(args.decode_steps)
    kernels.configure(None)


if __name__ == "__main__":
    main()
