"""Time the numba kernels against the pure-numpy fallback.

    python benchmarks/bench_kernels.py [--size 64] [--repeat 5]

Both backends are imported directly, so the LONGISEG_DISABLE_NUMBA flag is
irrelevant here. Each kernel's outputs are checked for agreement before timing;
the numba timings exclude the first (compiling) call.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from longiseg.kernels import _numba, _numpy


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def trilinear_case(size, rng):
    vol = rng.random((size,) * 3)
    grid = np.stack(np.meshgrid(*(np.arange(size, dtype=np.float64),) * 3, indexing="ij"))
    coords = grid + rng.normal(scale=1.5, size=grid.shape)
    return (vol, coords)


def labelling_case(size, rng):
    # sparse random foreground, many small 26-connected components
    noise = rng.random((size,) * 3)
    return (noise > 0.97,)


def check_trilinear(a, b):
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def check_labels(a, b):
    assert a[1] == b[1] and np.array_equal(a[0], b[0])


CASES = {
    "sample_trilinear": (trilinear_case, check_trilinear),
    "label_components": (labelling_case, check_labels),
}


def run(size: int, repeat: int, seed: int = 0) -> list[dict]:
    rng = np.random.default_rng(seed)
    rows = []
    for name, (make, check) in CASES.items():
        args = make(size, rng)
        fast, slow = getattr(_numba, name), getattr(_numpy, name)
        check(fast(*args), slow(*args))  # also triggers compilation
        t_numba = best_of(lambda: fast(*args), repeat)
        t_numpy = best_of(lambda: slow(*args), repeat)
        rows.append({"kernel": name, "size": size, "numba_s": t_numba, "numpy_s": t_numpy,
                     "speedup": t_numpy / t_numba})
    return rows


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, default=64, help="edge length of the cubic test volume")
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    rows = run(args.size, args.repeat, args.seed)
    print(f"{'kernel':<18} {'size':>5} {'numba [s]':>10} {'numpy [s]':>10} {'speedup':>8}")
    for r in rows:
        print(f"{r['kernel']:<18} {r['size']:>5} {r['numba_s']:>10.4f} {r['numpy_s']:>10.4f} {r['speedup']:>7.1f}x")
    return rows


if __name__ == "__main__":
    main()
