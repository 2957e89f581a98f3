"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints the median time per call for each kernel and backend, the speedup
and the largest difference between the two outputs.
"""
import argparse
import statistics
import time

import numpy as np

from ddpred import _fallback

try:
    from ddpred import _core
except ImportError:
    _core = None


def timeit(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def sos_case(rng, taps=6, n=11 * 32 * 32):
    omega = 2 * np.pi * 5000.0 * np.cos(rng.uniform(0, 2 * np.pi, (taps, 32)))
    phase = rng.uniform(0, 2 * np.pi, (taps, 32))
    amp = np.full(taps, np.sqrt(1.0 / taps / 32))
    return (omega, phase, amp, 1.0 / 20e6, n)


def adam_case(rng, size=760_000):
    w, g = rng.standard_normal(size), rng.standard_normal(size)
    m, v = 0.1 * rng.standard_normal(size), rng.random(size)
    return w, g, m, v


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if _core is None:
        print("compiled extension not built; only the fallback is available")
    rng = np.random.default_rng(0)

    sos = sos_case(rng)
    w, g, m, v = adam_case(rng)
    hyper = (1e-3, 0.9, 0.999, 1e-8, 1 - 0.9 ** 3, 1 - 0.999 ** 3)

    def adam(mod):
        ww, mm, vv = w.copy(), m.copy(), v.copy()
        return lambda: mod.adam_update(ww, g, mm, vv, *hyper)

    rows = [("sos_synthesize (6 taps x 11264 samples)", lambda mod: (lambda: mod.sos_synthesize(*sos))),
            ("adam_update (760k params)", adam)]
    print(f"{'kernel':44s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s} {'max diff':>10s}")
    for name, make in rows:
        t_py = timeit(make(_fallback), args.repeat) * 1e3
        if _core is None:
            print(f"{name:44s} {t_py:10.3f} {'-':>10s}")
            continue
        t_c = timeit(make(_core), args.repeat) * 1e3
        if name.startswith("sos"):
            diff = np.max(np.abs(_core.sos_synthesize(*sos) - _fallback.sos_synthesize(*sos)))
        else:
            outs = []
            for mod in (_fallback, _core):
                ww, mm, vv = w.copy(), m.copy(), v.copy()
                mod.adam_update(ww, g, mm, vv, *hyper)
                outs.append(ww)
            diff = np.max(np.abs(outs[0] - outs[1]))
        print(f"{name:44s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x {diff:10.2e}")


if __name__ == "__main__":
    main()
