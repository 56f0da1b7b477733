"""Time the compiled kernels against the numpy reference, plus an end-to-end run.

    python benchmarks/bench_kernels.py [--repeat 50]

Kernel rows time the two implementations directly; the last row times a
full mobility run under each backend. Runs are interleaved after a warm-up
so clock ramp-up does not favour whichever goes second.
"""

import argparse
import timeit

import numpy as np

from mapf import _kernels_py, kernels
from mapf.engine import MapfConfig, run_mapf
from mapf.mobility import DEMO_ROUTE, mobility_scenario
from mapf.models import simulate_truth


def kernel_cases(impl, rng):
    M = 100_000
    lx = rng.normal(0, 5, M)
    ll = rng.normal(0, 5, M)
    w, _ = _kernels_py.normalize_log(lx)
    u = np.sort(rng.random(M))
    pts = rng.uniform(0, 3000, (4000, 2))
    return {
        "logsumexp (1e5)": lambda: impl.logsumexp(lx),
        "normalize_log (1e5)": lambda: impl.normalize_log(lx),
        "weight_update (1e5)": lambda: impl.weight_update(lx, ll),
        "inverse_cdf (1e5)": lambda: impl.inverse_cdf(w, u),
        "nearest_segment (4000 x 5 seg)": lambda: impl.nearest_segment(pts, DEMO_ROUTE),
    }


def end_to_end(backend):
    sc = mobility_scenario(T=100, switch=50)
    _, ys = simulate_truth(sc.schedule, sc.T, np.random.default_rng(0))

    def go():
        kernels.use_backend(backend)
        run_mapf(sc.bank, ys, 4000, MapfConfig(refresh_period=15), seed=1)

    return go


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    impls = {"python": _kernels_py}
    if kernels._ckernels is not None:
        impls["cython"] = kernels._ckernels
    else:
        print("compiled kernels not built; only the python backend is available")
    cases = {name: kernel_cases(m, np.random.default_rng(0)) for name, m in impls.items()}
    for name in impls:
        cases[name]["mobility run (T=100, N=4000)"] = end_to_end(name)
    labels = list(next(iter(cases.values())))
    best = {(lab, name): float("inf") for lab in labels for name in impls}
    for fn in (f for c in cases.values() for f in c.values()):
        fn()  # warm-up
    for _ in range(5):
        for lab in labels:
            n = 1 if lab.startswith("mobility") else args.repeat
            for name in impls:
                t = timeit.timeit(cases[name][lab], number=n) / n
                best[lab, name] = min(best[lab, name], t)
    kernels.use_backend(kernels.available_backends()[-1])
    width = max(map(len, labels)) + 2
    names = list(impls)
    print(f"{'case':<{width}}" + "".join(f"{b:>14}" for b in names) + ("   speedup" if len(names) > 1 else ""))
    for lab in labels:
        line = f"{lab:<{width}}" + "".join(f"{best[lab, b] * 1e3:>11.3f} ms" for b in names)
        if len(names) > 1:
            line += f"   {best[lab, 'python'] / best[lab, 'cython']:6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
