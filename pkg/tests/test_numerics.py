import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advlab import numerics as nx
from advlab.errors import DimensionError, DomainError, UsageError
from advlab.model import Mlp, MlpSpec

from conftest import central_difference, max_rel_err


def grad_of(fn, *values):
    leaves = [nx.Tensor(v, requires_grad=True) for v in values]
    with nx.Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    return [leaf.grad for leaf in leaves]


class TestMatmul:
    def test_identity(self):
        out = nx.matmul(np.eye(2), [[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])

    def test_hand_product(self):
        assert nx.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            nx.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_grad_of_sum_is_ones_times_bt(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        ga, gb = grad_of(lambda x, y: nx.matmul(x, y).sum(), a, b)
        np.testing.assert_allclose(ga, np.ones((3, 2)) @ b.T, rtol=0, atol=1e-15)
        fd = central_difference(lambda x: (x @ b).sum(), a)
        assert max_rel_err(ga, fd) < 1e-6
        fdb = central_difference(lambda y: (a @ y).sum(), b)
        assert max_rel_err(gb, fdb) < 1e-6


class TestElementwise:
    def test_relu_values(self):
        assert nx.relu([-1.0, 0.0, 2.0]).data.tolist() == [0.0, 0.0, 2.0]

    def test_relu_subgradient_at_zero(self):
        (g,) = grad_of(lambda x: nx.relu(x).sum(), np.array([-1.0, 0.0, 2.0]))
        assert g.tolist() == [0.0, 0.0, 1.0]

    def test_tanh_at_zero(self):
        (g,) = grad_of(lambda x: nx.tanh(x).sum(), np.array([0.0]))
        assert nx.tanh([0.0]).data[0] == 0.0
        assert g[0] == 1.0

    def test_mul_grad_is_other_operand(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=5), rng.normal(size=5)
        ga, _ = grad_of(lambda x, y: (x * y).sum(), a, b)
        np.testing.assert_array_equal(ga, b)
        assert max_rel_err(ga, central_difference(lambda x: (x * b).sum(), a)) < 1e-8

    def test_dispatch_and_errors(self):
        assert nx.elementwise("scale", [1.0, 2.0], 3.0).data.tolist() == [3.0, 6.0]
        with pytest.raises(DimensionError):
            nx.elementwise("add", np.ones(3), np.ones(4))
        with pytest.raises(DomainError):
            nx.elementwise("cube", np.ones(3))


class TestCrossEntropy:
    def test_uniform_logits_give_ln2(self):
        for label in (0, 1):
            v = nx.softmax_cross_entropy([[0.0, 0.0]], [label]).item()
            assert v == pytest.approx(np.log(2), abs=1e-15)

    def test_saturated(self):
        assert nx.softmax_cross_entropy([[30.0, -30.0]], [0]).item() < 1e-25

    def test_gradient_finite_differences(self):
        rng = np.random.default_rng(2)
        logits, labels = rng.normal(size=(4, 3)), np.array([0, 2, 1, 2])
        (g,) = grad_of(lambda z: nx.softmax_cross_entropy(z, labels), logits)
        fd = central_difference(lambda z: nx.softmax_cross_entropy(z, labels).item(), logits)
        assert max_rel_err(g, fd) < 1e-6

    def test_closed_form_gradient(self):
        logits, labels = np.array([[1.0, 2.0, 0.5]]), np.array([1])
        (g,) = grad_of(lambda z: nx.softmax_cross_entropy(z, labels), logits)
        p = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(g, p - np.array([[0, 1, 0]]), atol=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(DomainError):
            nx.softmax_cross_entropy([[0.0, 1.0]], [2])
        with pytest.raises(DomainError):
            nx.softmax_cross_entropy([[0.0, 1.0]], [-1])

    @settings(max_examples=50, deadline=None)
    @given(
        arrays(np.float64, (3, 4), elements=st.floats(-20, 20)),
        st.floats(-50, 50),
        st.lists(st.integers(0, 3), min_size=3, max_size=3),
    )
    def test_shift_invariance(self, logits, c, labels):
        a = nx.softmax_cross_entropy(logits, labels).item()
        b = nx.softmax_cross_entropy(logits + c, labels).item()
        assert abs(a - b) <= 1e-12


class TestL2Norm:
    def test_pythagoras(self):
        assert nx.l2_norm([3.0, 4.0]).item() == 5.0

    def test_zero_vector_guard(self):
        (g,) = grad_of(nx.l2_norm, np.zeros(3))
        assert nx.l2_norm(np.zeros(3)).item() == 0.0
        assert g.tolist() == [0.0, 0.0, 0.0]

    def test_gradient_matches_fd(self):
        v = np.random.default_rng(3).normal(size=6)
        (g,) = grad_of(nx.l2_norm, v)
        np.testing.assert_allclose(g, v / np.linalg.norm(v), atol=1e-15)
        assert max_rel_err(g, central_difference(lambda x: np.sqrt(np.sum(x * x)), v)) < 1e-6


class TestNormalizeRows:
    def test_unit_rows(self):
        y = nx.normalize_rows(np.array([[3.0, 4.0], [0.0, 2.0]])).data
        np.testing.assert_allclose(y, [[0.6, 0.8], [0.0, 1.0]])

    def test_gradient_matches_fd(self):
        x = np.random.default_rng(4).normal(size=(3, 4))
        w = np.random.default_rng(5).normal(size=(3, 4))
        (g,) = grad_of(lambda t: (nx.normalize_rows(t) * w).sum(), x)
        fd = central_difference(lambda t: float(np.sum(t / np.linalg.norm(t, axis=1, keepdims=True) * w)), x)
        assert max_rel_err(g, fd) < 1e-6

    def test_zero_row_is_finite(self):
        (g,) = grad_of(lambda t: nx.normalize_rows(t).sum(), np.zeros((1, 3)))
        assert np.all(np.isfinite(g))


class TestBackward:
    def test_sum(self):
        (g,) = grad_of(lambda x: x.sum(), np.array([1.0, 2.0, 3.0]))
        assert g.tolist() == [1.0, 1.0, 1.0]

    def test_squared_norm(self):
        x = np.array([1.0, -2.0, 0.5])
        (g,) = grad_of(lambda t: (t * t).sum(), x)
        np.testing.assert_array_equal(g, 2 * x)

    def test_twice_on_same_tape_rejected(self):
        x = nx.Tensor([1.0, 2.0], requires_grad=True)
        with nx.Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
        with pytest.raises(UsageError):
            tape.backward(loss)
        with pytest.raises(UsageError):
            nx.backward(loss)

    def test_non_scalar_rejected(self):
        x = nx.Tensor([1.0, 2.0], requires_grad=True)
        with nx.Tape() as tape:
            y = x * x
        with pytest.raises(UsageError):
            tape.backward(y)

    def test_no_tape_rejected(self):
        x = nx.Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            nx.backward((x * x).sum())

    def test_unreached_leaf_gets_zero_grad(self):
        a = nx.Tensor([1.0], requires_grad=True)
        b = nx.Tensor([2.0], requires_grad=True)
        with nx.Tape() as tape:
            loss = (a * 3.0).sum()
            _ = b * 2.0
        tape.backward(loss)
        assert b.grad.tolist() == [0.0]

    def test_reused_operand_accumulates(self):
        (g,) = grad_of(lambda t: (t * t * t).sum(), np.array([2.0]))
        assert g[0] == pytest.approx(12.0)

    def test_composite_mlp_parameters(self):
        spec = MlpSpec(3, (5,), 2, "tanh")
        model = Mlp.init(spec, 0)
        rng = np.random.default_rng(6)
        x, y = rng.normal(size=(7, 3)), rng.integers(0, 2, 7)
        with nx.Tape() as tape:
            loss = nx.softmax_cross_entropy(model.forward(x), y)
        tape.backward(loss)
        g = model.grad_vector()
        theta = model.get_params()

        def f(values):
            probe = Mlp(spec, values)
            return nx.softmax_cross_entropy(probe.logits(x), y).item()

        assert max_rel_err(g, central_difference(f, theta.values), floor=1e-6) < 1e-4
