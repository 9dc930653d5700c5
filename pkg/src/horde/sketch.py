"""Random Maclaurin sketches of high-order moments.

Order-k sketch of a c-vector x with Rademacher projectors W_1..W_k (c x d)::

    phi_k(x) = (W_1^T x) * (W_2^T x) * ... * (W_k^T x) / sqrt(d)

The 1/sqrt(d) factor is applied once, so ``<phi_k(x), phi_k(y)>`` is already
an unbiased estimate of ``<x, y>^k`` at every order. The cascaded form
computes all orders with one matrix per order, phi_k = phi_{k-1} * (W_k^T x).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkernel import Graph, Node


@dataclass
class ProjectorStack:
    """K projection matrices of shape (c, d), stored as one (K, c, d) array."""

    matrices: np.ndarray
    trainable: bool = False
    seed: int | None = None

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        if self.matrices.ndim != 3:
            raise ValueError(f"matrices must be (K, c, d), got {self.matrices.shape}")
        if self.K < 1:
            raise ValueError("stack needs at least one matrix")

    @property
    def K(self) -> int:
        return self.matrices.shape[0]

    @property
    def c(self) -> int:
        return self.matrices.shape[1]

    @property
    def d(self) -> int:
        return self.matrices.shape[2]

    @property
    def num_parameters(self) -> int:
        return self.matrices.size if self.trainable else 0


@dataclass
class SketchSet:
    """Per-order sketches of a set of features plus their means.

    ``orders[k]`` has shape (n, d) for n features; ``means[k]`` is the
    empirical order-k moment sketch (mean over the n features).
    """

    orders: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def means(self) -> dict[int, np.ndarray]:
        return {k: v.mean(axis=0) for k, v in self.orders.items()}


def sample_rademacher(c: int, d: int, K: int, seed: int, trainable: bool = False) -> ProjectorStack:
    """Sample K independent c x d matrices with i.i.d. entries uniform on {-1, +1}."""
    for nm, v in (("c", c), ("d", d), ("K", K)):
        if int(v) < 1:
            raise ValueError(f"{nm} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)
    signs = rng.integers(0, 2, size=(K, c, d), dtype=np.int8) * 2 - 1
    return ProjectorStack(signs.astype(np.float64), trainable=trainable, seed=seed)


def _check_order(stack: ProjectorStack, K: int):
    if K < 2:
        raise ValueError(f"sketch order must be >= 2 (order 1 is the plain mean), got {K}")
    if K > stack.K:
        raise ValueError(f"order {K} exceeds stack depth {stack.K}")


def _projections(x, stack: ProjectorStack, K: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != stack.c:
        raise ValueError(f"feature length {x.shape[-1]} != stack c={stack.c}")
    # (..., K, d)
    return np.einsum("...c,kcd->...kd", x, stack.matrices[:K])


def rm_sketch_direct(x, stack: ProjectorStack, K: int) -> np.ndarray:
    """Order-K sketch as a single product of K projections. ``x`` is (c,) or (n, c)."""
    _check_order(stack, K)
    proj = _projections(x, stack, K)
    return np.prod(proj, axis=-2) / np.sqrt(stack.d)


def cascade_sketches(x, stack: ProjectorStack, K: int) -> SketchSet:
    """All orders 2..K via the recursion phi_k = phi_{k-1} * (W_k^T x)."""
    _check_order(stack, K)
    x = np.asarray(x, dtype=np.float64)
    batch = x.reshape(-1, stack.c)
    proj = _projections(batch, stack, K)
    phi = proj[:, 0] * proj[:, 1] / np.sqrt(stack.d)
    out = {2: phi}
    for k in range(3, K + 1):
        phi = phi * proj[:, k - 1]
        out[k] = phi
    return SketchSet(out)


def polykernel_estimate(sx, sy) -> float:
    """Estimate of <x, y>^k from two order-k sketches (plain inner product)."""
    sx = np.asarray(sx, dtype=np.float64)
    sy = np.asarray(sy, dtype=np.float64)
    if sx.shape != sy.shape:
        raise ValueError(f"sketch lengths differ: {sx.shape} vs {sy.shape}")
    return float(sx @ sy)


def empirical_moment_sketch(features, stack: ProjectorStack, k: int) -> np.ndarray:
    """Mean order-k sketch over a non-empty set of c-vectors (n, c)."""
    features = np.asarray(features, dtype=np.float64).reshape(-1, stack.c)
    if features.shape[0] == 0:
        raise ValueError("empty feature set")
    return rm_sketch_direct(features, stack, k).mean(axis=0)


# -- graph builders (trainable / frozen projectors inside a Graph)


def stack_nodes(g: Graph, stack: ProjectorStack, prefix: str = "sketch") -> list[Node]:
    """Register the stack in ``g``: parameters when trainable, constants otherwise."""
    if stack.trainable:
        return [g.parameter(f"{prefix}.W{k + 1}", stack.matrices[k]) for k in range(stack.K)]
    return [g.constant(stack.matrices[k], name=f"{prefix}.W{k + 1}") for k in range(stack.K)]


def cascade_graph(g: Graph, x: Node, mats: list[Node], K: int, d: int) -> dict[int, Node]:
    """Cascaded sketches of ``x`` (..., c) for orders 2..K as graph nodes."""
    if K < 2 or K > len(mats):
        raise ValueError(f"order {K} incompatible with {len(mats)} matrices")
    proj = [g.matmul(x, mats[k]) for k in range(K)]
    phi = g.scale(g.hadamard(proj[0], proj[1]), 1.0 / np.sqrt(d))
    out = {2: phi}
    for k in range(3, K + 1):
        phi = g.hadamard(phi, proj[k - 1])
        out[k] = phi
    return out


def direct_graph(g: Graph, x: Node, mats: list[Node], d: int) -> Node:
    """Uncascaded sketch: product of W_j^T x over all given matrices, / sqrt(d)."""
    if len(mats) < 2:
        raise ValueError("direct sketch needs at least two matrices")
    phi = g.hadamard(g.matmul(x, mats[0]), g.matmul(x, mats[1]))
    for m in mats[2:]:
        phi = g.hadamard(phi, g.matmul(x, m))
    return g.scale(phi, 1.0 / np.sqrt(d))


def sample_uncascaded(c: int, d: int, K: int, seed: int) -> dict[int, ProjectorStack]:
    """Independent trainable stacks per order: order k owns k matrices."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(K + 1)
    return {
        k: sample_rademacher(c, d, k, int(children[k].generate_state(1)[0]), trainable=True)
        for k in range(2, K + 1)
    }


def uncascaded_parameter_count(c: int, d: int, K: int) -> int:
    return sum(k * c * d for k in range(2, K + 1))


def cascaded_parameter_count(c: int, d: int, K: int) -> int:
    return K * c * d
