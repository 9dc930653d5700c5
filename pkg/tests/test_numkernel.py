import numpy as np
import pytest

from horde import kernels
from horde import _kernels_py
from horde.numkernel import OP_KINDS, Graph, GraphError, ShapeError, StateError, finite_diff_check, op_counter

TOL = 1e-5


def _reduce(g, node, shape, seed=0):
    """Scalar sum(node * R) with a fixed random R, so every output entry matters."""
    r = np.random.default_rng(seed).normal(size=shape)
    g.output("loss", g.sum(g.hadamard(node, g.constant(r))))


def _check(g, feed, names):
    g.forward(feed)
    return max(finite_diff_check(g, n) for n in names)


def _unary_case(op, shape=(3, 4), low=-2.0, high=2.0, away=0.1, **attrs):
    rng = np.random.default_rng(1)
    x = rng.uniform(low, high, size=shape)
    x = np.where(np.abs(x) < away, away + np.abs(x), x)
    g = Graph()
    p = g.parameter("x", x)
    out = getattr(g, op)(p, **attrs)
    return g, out


# op kind -> builder returning (graph, feed, names to check); kinks avoided by construction
def _case(kind):
    rng = np.random.default_rng(7)
    g = Graph()
    if kind == "matmul":
        a = g.parameter("a", rng.normal(size=(2, 3, 4)))
        b = g.parameter("b", rng.normal(size=(4, 5)))
        _reduce(g, g.matmul(a, b), (2, 3, 5))
        return g, {}, ["a", "b"]
    if kind in ("hadamard", "add", "sub"):
        a = g.parameter("a", rng.normal(size=(3, 4)))
        b = g.parameter("b", rng.normal(size=(4,)))  # broadcast
        _reduce(g, getattr(g, kind)(a, b), (3, 4))
        return g, {}, ["a", "b"]
    if kind == "scale":
        g2, out = _unary_case("scale", alpha=-1.7)
        _reduce(g2, out, (3, 4))
        return g2, {}, ["x"]
    if kind == "shift":
        g2, out = _unary_case("shift", value=0.3)
        _reduce(g2, out, (3, 4))
        return g2, {}, ["x"]
    if kind in ("exp", "relu", "square", "softplus", "l2_normalize"):
        g2, out = _unary_case(kind)
        _reduce(g2, out, (3, 4))
        return g2, {}, ["x"]
    if kind in ("log", "sqrt"):
        g2, out = _unary_case(kind, low=0.2, high=3.0)
        _reduce(g2, out, (3, 4))
        return g2, {}, ["x"]
    if kind == "conv2d":
        x = g.input("x")
        w = g.parameter("w", rng.normal(size=(3, 3, 2, 3)))
        _reduce(g, g.conv2d(x, w, stride=2, pad=1), (2, 3, 3, 3))
        return g, {"x": rng.normal(size=(2, 5, 5, 2))}, ["w", "x"]
    if kind in ("mean", "sum"):
        a = g.parameter("a", rng.normal(size=(2, 3, 4)))
        _reduce(g, getattr(g, kind)(a, axes=(0, 2)), (3,))
        return g, {}, ["a"]
    if kind == "concat":
        a = g.parameter("a", rng.normal(size=(2, 3)))
        b = g.parameter("b", rng.normal(size=(2, 2)))
        _reduce(g, g.concat([a, b], axis=1), (2, 5))
        return g, {}, ["a", "b"]
    if kind == "reshape":
        a = g.parameter("a", rng.normal(size=(2, 6)))
        _reduce(g, g.reshape(a, (3, 4)), (3, 4))
        return g, {}, ["a"]
    if kind == "expand_dims":
        a = g.parameter("a", rng.normal(size=(2, 3)))
        _reduce(g, g.expand_dims(a, 1), (2, 1, 3))
        return g, {}, ["a"]
    if kind == "transpose":
        a = g.parameter("a", rng.normal(size=(2, 3, 4)))
        _reduce(g, g.transpose(a, (2, 0, 1)), (4, 2, 3))
        return g, {}, ["a"]
    if kind == "pairwise_sqdist":
        a = g.parameter("a", rng.normal(size=(5, 3)))
        _reduce(g, g.pairwise_sqdist(a), (5, 5))
        return g, {}, ["a"]
    raise KeyError(kind)


class TestGradients:
    @pytest.mark.parametrize("kind", OP_KINDS)
    def test_every_op_kind(self, kind):
        g, feed, names = _case(kind)
        assert _check(g, feed, names) <= TOL

    def test_composed_chain(self):
        rng = np.random.default_rng(3)
        g = Graph()
        x = g.input("x")
        w = g.parameter("w", rng.normal(size=(4, 6)))
        h = g.softplus(g.matmul(x, w))
        e = g.l2_normalize(h)
        d2 = g.pairwise_sqdist(e)
        g.output("loss", g.mean(g.sqrt(g.shift(d2, 0.5))))
        assert _check(g, {"x": rng.normal(size=(5, 4))}, ["w", "x"]) <= TOL

    def test_shared_node_accumulates(self):
        g = Graph()
        a = g.parameter("a", np.array([1.5, -0.5]))
        g.output("loss", g.sum(g.hadamard(a, a)))
        g.forward()
        np.testing.assert_allclose(g.backward()["a"], [3.0, -1.0])


class TestSemantics:
    def test_sqrt_zero_subgradient(self):
        g = Graph()
        a = g.parameter("a", np.zeros(3))
        g.output("loss", g.sum(g.sqrt(a)))
        g.forward()
        np.testing.assert_array_equal(g.backward()["a"], np.zeros(3))

    def test_operator_overloads(self):
        g = Graph()
        a = g.parameter("a", np.array([1.0, 2.0]))
        g.output("y", (2.0 * (a + 1.0) - a) / 2.0)
        np.testing.assert_allclose(g.forward()["y"], [1.5, 2.0])

    def test_pairwise_sqdist_values(self):
        g = Graph()
        x = g.input("x")
        g.output("d", g.pairwise_sqdist(x))
        pts = np.array([[0.0, 0.0], [3.0, 4.0]])
        np.testing.assert_array_equal(g.forward({"x": pts})["d"], [[0, 25], [25, 0]])

    def test_shape_error_names_node(self):
        g = Graph()
        a = g.input("a")
        b = g.input("b")
        g.output("y", g.matmul(a, b))
        with pytest.raises(ShapeError, match="matmul"):
            g.forward({"a": np.ones((2, 3)), "b": np.ones((4, 2))})

    def test_unbound_input(self):
        g = Graph()
        g.output("y", g.exp(g.input("a")))
        with pytest.raises(GraphError, match="unbound"):
            g.forward({})

    def test_backward_before_forward(self):
        g = Graph()
        g.output("y", g.sum(g.parameter("a", np.ones(2))))
        with pytest.raises(StateError):
            g.backward()

    def test_duplicate_and_nonfinite_parameters(self):
        g = Graph()
        g.parameter("a", np.ones(2))
        with pytest.raises(GraphError):
            g.parameter("a", np.ones(2))
        with pytest.raises((GraphError, ValueError)):
            g.parameter("b", np.array([np.nan]))

    def test_fd_step_range(self):
        g = Graph()
        g.output("y", g.sum(g.parameter("a", np.ones(2))))
        g.forward()
        with pytest.raises(ValueError):
            finite_diff_check(g, "a", step=1.0)

    def test_op_counter_and_scopes(self):
        g = Graph()
        a = g.input("a")
        with g.scope("branch"):
            b = g.exp(a)
        g.output("y", g.sum(b))
        assert g.count_nodes(scope="branch") == 1
        g.forward({"a": np.zeros(3)})
        assert g.op_counts["exp"] == 1 and g.op_counts["sum"] == 1

    def test_global_op_counter(self):
        with op_counter() as tally:
            g = Graph()
            a = g.input("a")
            with g.scope("branch"):
                y = g.exp(a)
            g.output("y", g.sum(y))
            g.forward({"a": np.zeros(3)})
            g.forward({"a": np.ones(3)})
        g.forward({"a": np.ones(3)})
        assert tally.built_scopes["branch"] == 1 and tally.executed["exp"] == 2
        assert tally.executed_scopes["branch"] == 2 and tally.executed["sum"] == 2

    def test_parameter_shares_storage(self):
        w = np.ones(3)
        g = Graph()
        g.output("y", g.sum(g.parameter("w", w)))
        w += 1.0
        assert g.forward()["y"] == 6.0


class TestKernelBackends:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_im2col_matches_reference(self, stride, pad):
        x = np.random.default_rng(0).normal(size=(2, 7, 6, 3))
        np.testing.assert_allclose(kernels.im2col(x, 3, 3, stride, pad), _kernels_py.im2col(x, 3, 3, stride, pad),
                                   rtol=0, atol=0)

    @pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
    def test_col2im_is_adjoint(self, stride, pad):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 7, 7, 2))
        cols = kernels.im2col(x, 3, 3, stride, pad)
        y = rng.normal(size=cols.shape)
        lhs = float(np.sum(cols * y))
        rhs = float(np.sum(x * kernels.col2im(y, x.shape, 3, 3, stride, pad)))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)
        np.testing.assert_allclose(kernels.col2im(y, x.shape, 3, 3, stride, pad),
                                   _kernels_py.col2im(y, x.shape, 3, 3, stride, pad), rtol=1e-13, atol=1e-13)

    def test_backend_selected(self):
        assert kernels.BACKEND in ("cython", "python")
