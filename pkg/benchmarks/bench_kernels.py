"""Compare the compiled kernels against the numpy/pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints a table of median wall time per call and the speedup of the compiled
backend, after checking that both backends return identical results.
"""

import argparse
import statistics
import time

import numpy as np

from amerlab import _pykernels as py

try:
    from amerlab import _kernels as cy
except ImportError:
    cy = None


def _time(fn, repeat):
    fn()  # warm-up
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def cases(rng):
    cost = rng.standard_normal((128, 5, 5))
    corpus = rng.standard_normal((20000, 64)).astype(np.float32)
    corpus /= np.linalg.norm(corpus, axis=1, keepdims=True)
    queries = rng.standard_normal((200, 64))
    queries /= np.linalg.norm(queries, axis=1, keepdims=True)
    acts = rng.standard_normal((128, 512)).astype(np.float32)
    return [
        ("hungarian 128 x 5x5", "hungarian_batch", (cost,)),
        ("top-100 scan 20k x 64, 200 q", "topk_search", (corpus, queries, 100, 1)),
        ("gelu+grad 128 x 512 f32", "gelu_pair", (acts,)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if cy is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':32s} {'python [s]':>12s} {'cython [s]':>12s} {'speedup':>8s}")
    for label, name, call_args in cases(rng):
        t_py = _time(lambda: getattr(py, name)(*call_args), args.repeat)
        if cy is None:
            print(f"{label:32s} {t_py:12.5f} {'-':>12s} {'-':>8s}")
            continue
        a, b = getattr(py, name)(*call_args), getattr(cy, name)(*call_args)
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        same = all(np.allclose(x, y, rtol=1e-6, atol=1e-7) for x, y in zip(a, b))
        t_cy = _time(lambda: getattr(cy, name)(*call_args), args.repeat)
        flag = "" if same else "  MISMATCH"
        print(f"{label:32s} {t_py:12.5f} {t_cy:12.5f} {t_py / t_cy:7.1f}x{flag}")


if __name__ == "__main__":
    main()
