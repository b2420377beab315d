"""Compare the compiled and pure-numpy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]

Each kernel runs on the same inputs under every available backend; the
table reports the best wall time over ``--repeat`` runs and the speedup
relative to the numpy fallback. Outputs are cross-checked before timing.
"""

import argparse
import timeit

import numpy as np

from sprout import kernels


def cases(rng):
    feats = rng.standard_normal((256, 128))
    gray = rng.integers(0, 256, size=(512, 512)).astype(np.float64)
    emb = rng.standard_normal((2000, 64))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    pred = rng.integers(0, 21, size=512 * 512)
    label = rng.integers(0, 21, size=512 * 512)
    return {
        "singular_values 256x128": lambda impl: kernels.singular_values(feats, impl=impl),
        "laplacian_variance 512x512": lambda impl: kernels.laplacian_variance(gray, impl=impl),
        "greedy_dedup 2000x64": lambda impl: kernels.greedy_dedup(emb, 0.95, impl=impl),
        "confusion_matrix 262144 px": lambda impl: kernels.confusion_matrix(pred, label, 21, impl=impl),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    impls = kernels.backends()
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(sorted(impls))}")
    header = f"{'kernel':<28}" + "".join(f"{name:>12}" for name in sorted(impls)) + f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for label, fn in cases(np.random.default_rng(args.seed)).items():
        outs = {name: fn(impl) for name, impl in impls.items()}
        ref = outs["python"]
        for name, out in outs.items():
            if not np.allclose(out, ref, rtol=1e-9, atol=1e-9):
                raise SystemExit(f"{label}: backend {name} disagrees with the numpy fallback")
        times = {name: min(timeit.repeat(lambda: fn(impl), number=1, repeat=args.repeat)) for name, impl in impls.items()}
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        row = f"{label:<28}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in sorted(impls)) + f"{speedup:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
