"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both paths are called directly, so ``LATENTCERT_DISABLE_NUMBA`` has no
effect here. The first numba call (compilation) is excluded.
"""
import argparse
import time

import numpy as np

from latentcert import kernels as K


def best_of(fn, repeat):
    out = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return min(out)


def cases(rng):
    cap = 1 << 16
    tree = np.zeros(2 * cap - 1)
    leaves = rng.integers(0, cap, 4096)
    values = rng.random(4096)
    K.sumtree_set_numpy(tree, cap, np.arange(cap), rng.random(cap))
    targets = rng.random(4096) * tree[0]
    yield ("sumtree_set 4096 of 65536", lambda: K.sumtree_set_numpy(tree, cap, leaves, values),
           lambda: K._sumtree_set_nb(tree, cap, leaves, values))
    yield ("sumtree_find 4096 of 65536", lambda: K.sumtree_find_numpy(tree, cap, targets),
           lambda: K._sumtree_find_nb(tree, cap, targets))

    n = 64
    x = rng.normal(size=(n, 2))
    cost = np.linalg.norm(x[:, None] - x[None], axis=2)
    p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(n))
    yield (f"transport {n}x{n}", lambda: K.transport_numpy(p, q, cost), lambda: K._transport_nb(p, q, cost))

    n = 24
    P = rng.dirichlet(np.ones(n), size=n)
    R = rng.random(n)
    lab = rng.random((n, n)) < 0.2
    lab = lab | lab.T
    np.fill_diagonal(lab, False)
    d = np.zeros((n, n))
    args = (d, P, R, lab, 0.9, True, False)
    yield (f"bisim sweep {n} states", lambda: K.pseudometric_sweep_numpy(*args), lambda: K._pseudometric_sweep_nb(*args))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    print(f"numba available: {K.HAVE_NUMBA}")
    print(f"{'kernel':32s} {'numpy [ms]':>12s} {'numba [ms]':>12s} {'speedup':>8s}")
    for name, np_fn, nb_fn in cases(rng):
        t_np = best_of(np_fn, args.repeat)
        if K.HAVE_NUMBA:
            nb_fn()  # compile
            t_nb = best_of(nb_fn, args.repeat)
            print(f"{name:32s} {t_np * 1e3:12.3f} {t_nb * 1e3:12.3f} {t_np / t_nb:8.1f}")
        else:
            print(f"{name:32s} {t_np * 1e3:12.3f} {'-':>12s} {'-':>8s}")


if __name__ == "__main__":
    main()
