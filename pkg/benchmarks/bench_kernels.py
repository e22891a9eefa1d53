"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--size 256] [--repeat 3]

Each case checks the two backends agree bit for bit before timing them.
"""

import argparse
import time

import numpy as np

from microscore import kernels
from microscore.simulate import generate, preset_spec
from microscore.smoothing import build_kernel, smooth


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256, help="image side length")
    ap.add_argument("--components", type=int, default=121, help="score vector length")
    ap.add_argument("--l-w", type=int, default=30)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    if kernels.BACKEND != "cython":
        print("compiled extension not available; only the python backend can be timed")
        backends = ["python"]
    else:
        backends = ["cython", "python"]

    rng = np.random.default_rng(0)
    n = args.size
    k = build_kernel(args.l_w)
    field = rng.normal(size=(n, n, args.components))
    spec = preset_spec("a", 0, seed=1)
    cases = {
        f"AR field {n}x{n} (+64 burn)": lambda b: generate(spec, n, n, backend=b).pixels,
        f"WMA l_w={args.l_w} on {n}x{n}x{args.components}": lambda b: smooth(field, k, backend=b),
    }

    print(f"{'case':<38}" + "".join(f"{b:>12}" for b in backends) + "   speedup  identical")
    for name, fn in cases.items():
        res = {b: best_of(lambda: fn(b), args.repeat) for b in backends}
        line = f"{name:<38}" + "".join(f"{res[b][0]:>11.3f}s" for b in backends)
        if len(backends) == 2:
            same = np.array_equal(res["cython"][1], res["python"][1])
            line += f"   {res['python'][0] / res['cython'][0]:>6.1f}x  {same}"
        print(line)


if __name__ == "__main__":
    main()
