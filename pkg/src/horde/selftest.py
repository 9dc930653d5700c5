"""Monte-Carlo checks of the sketch estimator against exact polynomial kernels."""
from __future__ import annotations

import math

import numpy as np

from .oracle import exact_poly_kernel
from .sketch import cascade_sketches, polykernel_estimate, rm_sketch_direct, sample_rademacher


def correlated_pair(c: int, rng, min_abs_dot: float = 0.3) -> tuple[np.ndarray, np.ndarray]:
    """Unit vectors x, y with |<x, y>| >= ``min_abs_dot``."""
    while True:
        x, y = rng.normal(size=(2, c))
        x /= np.linalg.norm(x)
        y /= np.linalg.norm(y)
        if abs(x @ y) >= min_abs_dot:
            return x, y


def estimates(x, y, k: int, d: int, trials: int, seed: int) -> np.ndarray:
    """Order-k kernel estimates from ``trials`` independent stacks."""
    ss = np.random.SeedSequence(seed)
    out = np.empty(trials)
    for t, child in enumerate(ss.spawn(trials)):
        st = sample_rademacher(len(x), d, k, int(child.generate_state(1)[0]))
        out[t] = polykernel_estimate(rm_sketch_direct(x, st, k), rm_sketch_direct(y, st, k))
    return out


def consistency(c: int, d: int, K: int, trials: int, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x, y = correlated_pair(c, rng)
    rows = {}
    for k in range(2, K + 1):
        est = estimates(x, y, k, d, trials, seed + k)
        exact = exact_poly_kernel(x, y, k)
        se = est.std(ddof=1) / math.sqrt(trials)
        tol = max(0.05 * abs(exact), 3 * se)
        rows[str(k)] = {"mean": float(est.mean()), "exact": exact, "se": float(se), "tol": float(tol),
                        "ok": bool(abs(est.mean() - exact) <= tol)}
    return {"orders": rows, "ok": all(r["ok"] for r in rows.values())}


def unbiasedness(c: int, K: int, trials: int, seed: int) -> dict:
    """d = 1: large variance, but the mean stays within 3 SE."""
    rng = np.random.default_rng(seed)
    x, y = correlated_pair(c, rng)
    rows = {}
    for k in range(2, K + 1):
        est = estimates(x, y, k, 1, trials, seed + 100 + k)
        se = est.std(ddof=1) / math.sqrt(trials)
        exact = exact_poly_kernel(x, y, k)
        rows[str(k)] = {"mean": float(est.mean()), "exact": exact, "se": float(se),
                        "ok": bool(abs(est.mean() - exact) <= 3 * se)}
    return {"orders": rows, "ok": all(r["ok"] for r in rows.values())}


def variance_scaling(c: int, d: int, trials: int, seed: int, k: int = 2, lo: float = 0.35, hi: float = 0.65) -> dict:
    rng = np.random.default_rng(seed)
    x, y = correlated_pair(c, rng)
    widths = [d, 2 * d, 4 * d]
    var = [float(estimates(x, y, k, w, trials, seed + 7 * i).var(ddof=1)) for i, w in enumerate(widths)]
    ratios = [var[i + 1] / var[i] for i in range(len(var) - 1)]
    return {"order": k, "widths": widths, "variances": var, "ratios": ratios,
            "ok": all(lo <= r <= hi for r in ratios)}


def cascade_equivalence(c: int, d: int, K: int, trials: int, seed: int, rtol: float = 1e-10) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        st = sample_rademacher(c, d, K, seed + t)
        x = rng.normal(size=c)
        k = int(rng.integers(2, K + 1))
        a = cascade_sketches(x, st, K).orders[k][0]
        b = rm_sketch_direct(x, st, k)
        worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)))
    return {"max_rel_dev": worst, "ok": worst <= rtol}


def homogeneity(c: int, d: int, K: int, seed: int, rtol: float = 1e-12) -> dict:
    rng = np.random.default_rng(seed)
    st = sample_rademacher(c, d, K, seed)
    x = rng.normal(size=c)
    worst = 0.0
    for a in (0.5, 2.0, -1.5):
        for k in range(2, K + 1):
            lhs = rm_sketch_direct(a * x, st, k)
            rhs = a**k * rm_sketch_direct(x, st, k)
            worst = max(worst, float(np.max(np.abs(lhs - rhs)) / max(np.max(np.abs(rhs)), 1e-300)))
    return {"max_rel_dev": worst, "ok": worst <= rtol}


def run_selftest(c: int = 8, d: int = 1024, K: int = 4, trials: int = 500, seed: int = 0) -> dict:
    if trials < 100:
        raise ValueError("trials must be >= 100")
    if K < 2:
        raise ValueError("K must be >= 2")
    suites = {
        "consistency": consistency(c, d, K, trials, seed),
        "unbiased_d1": unbiasedness(c, K, trials, seed),
        "variance_scaling": variance_scaling(c, max(d // 4, 1), trials, seed),
        "cascade_equivalence": cascade_equivalence(c, min(d, 256), K, trials, seed),
        "homogeneity": homogeneity(c, d, K, seed),
    }
    return {"params": {"c": c, "d": d, "K": K, "trials": trials, "seed": seed},
            "suites": suites, "ok": all(s["ok"] for s in suites.values())}
