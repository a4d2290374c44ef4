"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Shapes match what one training minibatch (32 sequences x 15 frames of 24x32)
feeds each kernel. The last section times a full forward+backward step with
each backend selected through STTRANSFER_KERNELS in a subprocess.
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from sttransfer import kernels
from sttransfer.tensor import pool_output_size


def cases(rng):
    n = 32 * 15
    x1 = np.pad(rng.random((n, 3, 24, 32)), ((0, 0), (0, 0), (2, 2), (2, 2)))
    pool_in = rng.random((n, 16, 12, 16))
    cols = rng.random((n * 12 * 16, 3 * 25))
    mag = rng.random((24, 32))
    gx, gy = rng.normal(size=(2, 24, 32))
    strong = rng.random((24, 32)) < 0.05
    weak = rng.random((24, 32)) < 0.3
    ho, wo = pool_output_size(12, 2, 2, 0, True), pool_output_size(16, 2, 2, 0, True)

    def pool_bw(mod):
        out, arg = mod.maxpool_forward(pool_in, 2, 2, 0, ho, wo)
        return lambda: mod.maxpool_backward(out, arg, 12, 16)

    return {
        "im2col conv1 (5x5, s2)": lambda m: (lambda: m.im2col(x1, 5, 5, 2)),
        "col2im conv1": lambda m: (lambda: m.col2im(cols, x1.shape, 5, 5, 2)),
        "maxpool fwd 2x2": lambda m: (lambda: m.maxpool_forward(pool_in, 2, 2, 0, ho, wo)),
        "maxpool bwd 2x2": pool_bw,
        "canny NMS 24x32": lambda m: (lambda: m.canny_nms(mag, gx, gy, 1e-9)),
        "hysteresis 24x32": lambda m: (lambda: m.hysteresis(strong, weak)),
    }


STEP = """
import time, numpy as np
from sttransfer import tensor as T, kernels
from sttransfer.network import NetworkConfig, init_parameters, trace
T.set_precision("float32")
p = init_parameters(NetworkConfig(), 0)
x = np.random.default_rng(0).random((32, 15, 3, 24, 32)).astype(np.float32)
y = np.random.default_rng(1).integers(0, 2, 32)
def step():
    p.zero_grad()
    T.backward(T.cross_entropy(trace(p, x).raw, y))
step()
t = time.perf_counter()
for _ in range({repeat}):
    step()
print(kernels.BACKEND, (time.perf_counter() - t) / {repeat})
"""


def train_step(backend: str, repeat: int):
    env = dict(os.environ, STTRANSFER_KERNELS=backend)
    out = subprocess.run([sys.executable, "-c", STEP.format(repeat=repeat)], env=env, capture_output=True,
                         text=True, check=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the fallback is available", file=sys.stderr)
    rng = np.random.default_rng(0)
    rows = {}
    for name, make in cases(rng).items():
        rows[name] = {}
        for bname, mod in backends.items():
            fn = make(mod)
            rows[name][bname] = min(timeit.repeat(fn, number=1, repeat=args.repeat))

    print(f"{'kernel':26s}" + "".join(f"{b:>14s}" for b in backends) + "   speedup")
    for name, t in rows.items():
        speed = f"{t['python'] / t['cython']:8.2f}x" if "cython" in t else ""
        print(f"{name:26s}" + "".join(f"{t[b] * 1e3:11.3f} ms" for b in backends) + "  " + speed)

    step = {}
    for b in backends:
        got, secs = train_step(b, max(2, args.repeat // 5))
        step[got] = secs
    print("\ntraining step, 32 x 15 frames, float32:")
    for b, secs in step.items():
        print(f"  {b:8s} {secs * 1e3:9.1f} ms")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels_seconds": rows, "train_step_seconds": step}, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
