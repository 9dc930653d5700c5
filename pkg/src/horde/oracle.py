"""Exact brute-force quantities: Kronecker moments, polynomial and Gaussian
kernels, MMD, Wasserstein-1, and the moment-series bounds on MMD / W1.

These are reference computations. They favour clarity and exactness over
speed and refuse inputs whose Kronecker powers would exceed ``KRON_LIMIT``
entries.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.spatial.distance import cdist

KRON_LIMIT = 10**6
TRANSPORT_LIMIT = 10**6


class GuardError(ValueError):
    """Input too large for the exact oracle."""


@dataclass
class EmpiricalDistribution:
    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 1:
            s = s[None, :]
        if s.ndim != 2 or s.shape[0] < 1:
            raise ValueError("need at least one sample of shape (n, c)")
        if not np.all(np.isfinite(s)):
            raise ValueError("samples must be finite")
        self.samples = s

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def c(self) -> int:
        return self.samples.shape[1]

    @property
    def radius(self) -> float:
        return float(np.sqrt((self.samples**2).sum(axis=1)).max())


def _as_dist(x) -> EmpiricalDistribution:
    return x if isinstance(x, EmpiricalDistribution) else EmpiricalDistribution(x)


def kron_moment(x, k: int) -> np.ndarray:
    """k-fold Kronecker power of ``x`` (length c**k)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if k < 0:
        raise ValueError("k must be >= 0")
    if x.size**k > KRON_LIMIT:
        raise GuardError(f"c^k = {x.size}^{k} exceeds {KRON_LIMIT}")
    out = np.ones(1)
    for _ in range(k):
        out = np.kron(out, x)
    return out


def mean_kron_moment(samples, k: int) -> np.ndarray:
    """Empirical E[x^{(x)k}] over the rows of ``samples``."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[1] ** k > KRON_LIMIT:
        raise GuardError(f"c^k = {samples.shape[1]}^{k} exceeds {KRON_LIMIT}")
    acc = np.zeros(samples.shape[1] ** k)
    for x in samples:
        acc += kron_moment(x, k)
    return acc / samples.shape[0]


def exact_poly_kernel(x, y, k: int) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"length mismatch {x.size} vs {y.size}")
    return float(np.dot(x, y)) ** k


def gaussian_kernel(x, y, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(np.atleast_2d(x), np.atleast_2d(y), "sqeuclidean"))


def mmd2_gaussian(I, J, gamma: float) -> float:
    """Biased (V-statistic) squared MMD under k(x, y) = exp(-gamma ||x - y||^2)."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    X = _as_dist(I).samples
    Y = _as_dist(J).samples
    kxx = gaussian_kernel(X, X, gamma).mean()
    kyy = gaussian_kernel(Y, Y, gamma).mean()
    # both orders, so that swapping I and J gives the identical float
    kxy = 0.5 * (gaussian_kernel(X, Y, gamma).mean() + gaussian_kernel(Y, X, gamma).mean())
    return float(kxx + kyy - 2.0 * kxy)


def wasserstein1(I, J) -> float:
    """Exact W1 between uniform empirical distributions, Euclidean ground cost.

    Equal sample counts reduce to an assignment problem; otherwise the
    transport LP is solved with HiGHS.
    """
    X = _as_dist(I).samples
    Y = _as_dist(J).samples
    n, m = X.shape[0], Y.shape[0]
    if n * m > TRANSPORT_LIMIT:
        raise GuardError(f"{n}x{m} cost matrix exceeds {TRANSPORT_LIMIT} entries")
    cost = cdist(X, Y)
    if n == m:
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].sum() / n)
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([np.full(n, 1.0 / n), np.full(m, 1.0 / m)])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun)


def taylor_weights(gamma: float, p: int) -> np.ndarray:
    """a_k = (2 gamma)^k / k! for k = 1..p."""
    return np.array([(2.0 * gamma) ** k / math.factorial(k) for k in range(1, p + 1)])


def exp_series_tail(z: float, p: int) -> float:
    """sum_{k > p} z^k / k! for z >= 0, summed directly (no cancellation)."""
    if z < 0:
        raise ValueError("z must be >= 0")
    if z == 0:
        return 0.0
    k = p + 1
    term = math.exp(k * math.log(z) - math.lgamma(k + 1))
    total = 0.0
    while True:
        total += term
        k += 1
        term *= z / k
        if k > z and term <= 1e-17 * total:
            return total


def moment_tail(gamma: float, radius: float, p: int) -> float:
    """Worst-case remainder sum_{k>p} a_k * 4 R^{2k} of the moment series."""
    return 4.0 * exp_series_tail(2.0 * gamma * radius**2, p)


def gaussian_kernel_taylor(x, y, gamma: float, p: int) -> tuple[float, float]:
    """Degree-p truncation of exp(-g|x|^2 - g|y|^2) * exp(2g<x,y>) and its error bound."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = float(x @ y)
    pref = math.exp(-gamma * (x @ x + y @ y))
    partial = sum((2 * gamma * s) ** k / math.factorial(k) for k in range(p + 1))
    return pref * partial, pref * exp_series_tail(2 * gamma * abs(s), p)


def moment_deltas(I, J, p: int) -> np.ndarray:
    """Delta_k = ||E[x^{(x)k}] - E[y^{(x)k}]||^2 for k = 1..p via explicit Kronecker means."""
    X = _as_dist(I).samples
    Y = _as_dist(J).samples
    if X.shape[1] != Y.shape[1]:
        raise ValueError("dimension mismatch")
    out = np.empty(p)
    for k in range(1, p + 1):
        diff = mean_kron_moment(X, k) - mean_kron_moment(Y, k)
        out[k - 1] = diff @ diff
    return out


def moment_distance_series(I, J, gamma: float, p: int) -> tuple[np.ndarray, float, float]:
    """Return (deltas, sum_k a_k Delta_k, tail) for k = 1..p."""
    I = _as_dist(I)
    J = _as_dist(J)
    deltas = moment_deltas(I, J, p)
    weighted = float(taylor_weights(gamma, p) @ deltas)
    radius = max(I.radius, J.radius)
    return deltas, weighted, moment_tail(gamma, radius, p)


@dataclass
class BoundReport:
    gamma: float
    p: int
    mmd2: float
    w1: float
    deltas: list[float]
    weights: list[float]
    A: float
    a_prime: float
    K_b: float
    radius: float
    alpha: float
    tail: float
    weighted_sum: float
    upper_ok: bool = False
    lower_ok: bool = False
    w1_ok: bool = False
    w1_constant: float = 0.0
    kb_w1_constant: float = 0.0
    w1_lower_bound: float = 0.0
    details: dict = field(default_factory=dict)

    def recheck(self) -> "BoundReport":
        """Recompute the three verdicts from the numeric fields."""
        deltas = np.asarray(self.deltas)
        total = float(deltas.sum())
        upper_a = 1.0 + self.A * total + self.tail
        upper_series = 1.0 + self.weighted_sum + self.tail
        lower = self.alpha * self.a_prime * total - self.tail
        tol = 1e-12
        self.details = {
            "upper_A_form": upper_a,
            "upper_series_form": upper_series,
            "mmd2_lower": lower,
            "mmd": math.sqrt(max(self.mmd2, 0.0)),
            "w1_times_constant": self.w1_constant * self.w1,
        }
        self.upper_ok = bool(self.mmd2 <= upper_a + tol and self.mmd2 <= upper_series + tol)
        w1_lb = (lower) / self.w1_constant**2 if self.w1_constant > 0 else -math.inf
        self.w1_lower_bound = w1_lb
        self.lower_ok = bool(lower <= self.mmd2 + tol and w1_lb <= self.w1**2 + tol)
        self.w1_ok = bool(math.sqrt(max(self.mmd2, 0.0)) <= self.w1_constant * self.w1 + tol)
        return self

    @property
    def all_ok(self) -> bool:
        return self.upper_ok and self.lower_ok and self.w1_ok

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "BoundReport":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown report fields {sorted(unknown)}")
        return cls(**d)


def bound_report(I, J, gamma: float, p: int) -> BoundReport:
    """Compute every quantity entering the MMD / W1 moment bounds and check them."""
    if gamma <= 0:
        raise ValueError("gamma must be > 0")
    if p < 1:
        raise ValueError("p must be >= 1")
    I = _as_dist(I)
    J = _as_dist(J)
    deltas, weighted, tail = moment_distance_series(I, J, gamma, p)
    weights = taylor_weights(gamma, p)
    k_b = 0.0
    for k in range(1, p + 1):
        mx = mean_kron_moment(I.samples, k)
        my = mean_kron_moment(J.samples, k)
        k_b = max(k_b, float(mx @ mx), float(my @ my))
    radius = max(I.radius, J.radius)
    # pointwise exp(-g|x|^2 - g|y|^2) >= exp(-2 g R^2); also cover the moment-norm constant
    alpha = math.exp(-2.0 * gamma * max(k_b, radius**2))
    report = BoundReport(
        gamma=float(gamma),
        p=int(p),
        mmd2=mmd2_gaussian(I, J, gamma),
        w1=wasserstein1(I, J),
        deltas=deltas.tolist(),
        weights=weights.tolist(),
        A=float(weights.max()),
        a_prime=float(weights.min()),
        K_b=k_b,
        radius=radius,
        alpha=alpha,
        tail=tail,
        weighted_sum=weighted,
        w1_constant=math.sqrt(2.0 * gamma),
        kb_w1_constant=math.sqrt(k_b),
    )
    return report.recheck()


def verify_upper_bound(I, J, gamma: float, p: int) -> BoundReport:
    """MMD^2 <= 1 + A sum Delta_k + tail and MMD^2 <= 1 + sum a_k Delta_k + tail."""
    return bound_report(I, J, gamma, p)


def verify_lower_bound(I, J, gamma: float, p: int) -> BoundReport:
    """alpha a' sum Delta_k - tail <= MMD^2 and MMD <= sqrt(2 gamma) W1."""
    return bound_report(I, J, gamma, p)


def gram_weighted_series(I, J, gamma: float, p: int) -> float:
    """sum_k a_k Delta_k via Gram expansion of <x, y>^k over sample pairs.

    Independent of the Kronecker route: Delta_k = mean <x,x'>^k + mean <y,y'>^k
    - 2 mean <x,y>^k.
    """
    X = _as_dist(I).samples
    Y = _as_dist(J).samples
    gxx, gyy, gxy = X @ X.T, Y @ Y.T, X @ Y.T
    total = 0.0
    for k, a in enumerate(taylor_weights(gamma, p), start=1):
        total += a * ((gxx**k).mean() + (gyy**k).mean() - 2.0 * (gxy**k).mean())
    return float(total)
