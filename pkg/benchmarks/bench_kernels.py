"""Time the sequential kernels under numba and plain numpy.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from nepadd import _accel


def _time(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation for the jitted flavour)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    T, H, D = 200, 16, 16
    xw, w_hh = rng.normal(size=(T, 4 * H)), rng.normal(size=(H, 4 * H)) * 0.3
    h, c, gates = _accel.numpy_kernels["lstm_forward"](xw, w_hh)
    cases = {
        "lstm_forward": (xw, w_hh),
        "lstm_backward": (rng.normal(size=(T, H)), c, gates, w_hh),
        "ar1_filter": (rng.normal(size=(T, D)), rng.uniform(0.5, 0.9, size=T)),
    }
    print(f"{'kernel':<14} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for name, inputs in cases.items():
        t_np = _time(_accel.numpy_kernels[name], inputs, args.repeat)
        if _accel.HAVE_NUMBA:
            t_nb = _time(_accel.numba_kernels[name], inputs, args.repeat)
            print(f"{name:<14} {1e3 * t_np:>10.3f} {1e3 * t_nb:>10.3f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{name:<14} {1e3 * t_np:>10.3f} {'n/a':>10}")


if __name__ == "__main__":
    main()
