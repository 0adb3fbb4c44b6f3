"""Time the hot kernels under the compiled and numpy backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--csv out.csv]
"""

import argparse
import csv
import sys
import timeit

import numpy as np

from langdc.numerics import kernels


def cases(rng):
    # shapes seen in training: (batch * heads * queries, keys) score rows and (tokens, width) activations
    scores = rng.standard_normal((16 * 4 * 160, 160))
    grad_s = rng.standard_normal(scores.shape)
    act = rng.standard_normal((16 * 160, 64))
    grad_a = rng.standard_normal(act.shape)
    gain, bias = np.ones(64), np.zeros(64)
    logits = rng.standard_normal((16 * 40, 79))
    targets = rng.integers(0, 79, 16 * 40)
    sm = kernels.softmax_fwd(scores, 160, True, 0)
    ln = kernels.layer_norm_fwd(act, gain, bias, 1e-5)
    return {
        "softmax_fwd (causal)": lambda: kernels.softmax_fwd(scores, 160, True, 0),
        "softmax_bwd (causal)": lambda: kernels.softmax_bwd(sm, grad_s, 160, True, 0),
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(act, gain, bias, 1e-5),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(grad_a, ln[1], ln[2], gain),
        "gelu_fwd": lambda: kernels.gelu_fwd(act),
        "gelu_bwd": lambda: kernels.gelu_bwd(act, grad_a),
        "xent_fwd": lambda: kernels.xent_fwd(logits, targets, -100),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    before = kernels.get_backend()
    rows = {}
    for name in backends:
        kernels.set_backend(name)
        for label, fn in cases(np.random.default_rng(0)).items():
            fn()
            best = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            rows.setdefault(label, {})[name] = best * 1e3
    kernels.set_backend(before)
    head = f"{'kernel':24s}" + "".join(f"{b + ' ms':>14s}" for b in backends)
    if len(backends) == 2:
        head += f"{'speedup':>10s}"
    print(head)
    for label, t in rows.items():
        line = f"{label:24s}" + "".join(f"{t[b]:14.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{t['python'] / t['cython']:10.2f}"
        print(line)
    if len(backends) < 2:
        print("compiled backend unavailable; build with `pip install -e . --no-build-isolation`", file=sys.stderr)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["kernel"] + backends)
            for label, t in rows.items():
                w.writerow([label] + [f"{t[b]:.4f}" for b in backends])


if __name__ == "__main__":
    main()
