"""Tape engine checks: forward values, gradients vs finite differences,
double backprop, determinism, and structured errors."""

import numpy as np
import pytest

from vlbnn import autodiff as ad
from util import assign_from_flat, flatten, max_rel_err, tiny_mlp


class TestForwardValues:
    def test_softplus_at_zero_is_log_two(self):
        assert ad.softplus(ad.constant(0.0)).item() == pytest.approx(np.log(2.0), abs=1e-15)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 5))
        out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
        np.testing.assert_allclose(out.data, a, rtol=0, atol=0)

    def test_log_softmax_symmetry(self):
        out = ad.log_softmax(ad.constant([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [-np.log(2), -np.log(2)], atol=1e-15)

    def test_gather_nll_matches_log_softmax(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(size=(4, 3))
        y = np.array([0, 2, 1, 2])
        nll = ad.gather_nll(ad.constant(logits), y)
        ls = ad.log_softmax(ad.constant(logits))
        np.testing.assert_allclose(nll.data, -ls.data[np.arange(4), y], atol=1e-15)

    def test_constants_stay_off_tape(self):
        out = ad.mul(ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))
        assert not out.on_tape


class TestFirstOrderGradients:
    def test_grad_of_square(self):
        x = ad.leaf(3.0)
        (g,) = ad.grad(ad.square(x), [x])
        assert g.item() == pytest.approx(6.0, abs=1e-12)

    def _check(self, build, leaves, seed=0):
        """Compare grad() against central finite differences of the scalar."""
        out = build()
        grads = ad.grad(out, leaves)
        flat0 = flatten([t.data for t in leaves])

        def f(vec):
            assign_from_flat(leaves, vec)
            return build().item()

        fd = ad.finite_diff_gradient(f, flat0)
        assign_from_flat(leaves, flat0)
        assert max_rel_err(flatten([g.data for g in grads]), fd) < 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_elementwise_primitives(self, seed):
        rng = np.random.default_rng(seed)
        a = ad.leaf(rng.normal(size=(3, 4)))
        b = ad.leaf(rng.normal(size=(4,)))
        w = ad.constant(rng.normal(size=(3, 4)))

        def build():
            t = ad.add(a, b)
            t = ad.mul(t, ad.sub(a, ad.scalar_mul(b, 0.7)))
            t = ad.add(ad.square(t), ad.exp(ad.scalar_mul(t, 0.3)))
            return ad.mul(t, w).sum()

        self._check(build, [a, b])

    @pytest.mark.parametrize("seed", range(4))
    def test_smooth_nonlinearities(self, seed):
        rng = np.random.default_rng(10 + seed)
        a = ad.leaf(rng.normal(size=(5,)))
        w = ad.constant(rng.normal(size=(5,)))

        def build():
            t = ad.add(ad.softplus(a), ad.sigmoid(ad.scalar_mul(a, 2.0)))
            return ad.mul(t, w).sum()

        self._check(build, [a])

    @pytest.mark.parametrize("axis", [None, 0, 1])
    def test_sum_axes(self, axis):
        rng = np.random.default_rng(42)
        a = ad.leaf(rng.normal(size=(3, 4)))
        w_shape = {None: (), 0: (4,), 1: (3,)}[axis]
        w = ad.constant(rng.normal(size=w_shape))

        def build():
            return ad.mul(a.sum(axis), w).sum() if axis is not None else ad.mul(a.sum(), w)

        self._check(build, [a])

    @pytest.mark.parametrize("seed", range(3))
    def test_matmul_and_softmax_losses(self, seed):
        rng = np.random.default_rng(20 + seed)
        a = ad.leaf(rng.normal(size=(4, 3)))
        b = ad.leaf(rng.normal(size=(3, 5)))
        y = rng.integers(0, 5, size=4)

        def build():
            return ad.gather_nll(ad.matmul(a, b), y).sum()

        self._check(build, [a, b])

    @pytest.mark.parametrize("seed", range(3))
    def test_mlp_loss_gradient(self, seed):
        """Random 3-layer softplus MLP loss vs central differences (h=1e-5)."""
        rng = np.random.default_rng(100 + seed)
        leaves, forward = tiny_mlp([3, 8, 8, 4], seed)
        x = rng.normal(size=(6, 3))
        y = rng.integers(0, 4, size=6)

        def build():
            return ad.gather_nll(forward(x), y).sum()

        self._check(build, leaves)

    def test_linearity_of_grad(self):
        rng = np.random.default_rng(7)
        x = ad.leaf(rng.normal(size=(6,)))
        f = ad.exp(ad.scalar_mul(x, 0.5)).sum()
        g = ad.softplus(x).sum()
        combined = ad.add(ad.scalar_mul(f, 2.5), ad.scalar_mul(g, -1.25))
        (gc,) = ad.grad(combined, [x])
        (gf,) = ad.grad(f, [x])
        (gg,) = ad.grad(g, [x])
        np.testing.assert_allclose(gc.data, 2.5 * gf.data - 1.25 * gg.data, atol=1e-12)

    def test_unreachable_input_gets_zeros(self):
        x = ad.leaf([1.0, 2.0])
        z = ad.leaf([3.0])
        (gz,) = ad.grad(ad.square(x).sum(), [z])
        np.testing.assert_array_equal(gz.data, np.zeros(1))

    def test_deterministic_replay(self):
        def run():
            leaves, forward = tiny_mlp([3, 6, 6, 2], seed=5)
            x = np.random.default_rng(0).normal(size=(4, 3))
            loss = ad.gather_nll(forward(x), np.array([0, 1, 0, 1])).sum()
            return [g.data.copy() for g in ad.grad(loss, leaves)]

        for a, b in zip(run(), run()):
            assert np.array_equal(a, b)


class TestDoubleBackprop:
    def test_softplus_second_derivative_at_zero(self):
        x = ad.leaf(0.0)
        (g,) = ad.grad(ad.softplus(x), [x], create_graph=True)
        (h,) = ad.grad(g, [x])
        assert h.item() == pytest.approx(0.25, abs=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_grad_of_grad_matches_fd_of_grad(self, seed):
        """d/dx [grad f] agrees with finite differences of grad f."""
        rng = np.random.default_rng(200 + seed)
        x = ad.leaf(rng.normal(size=(4,)))
        w = ad.constant(rng.normal(size=(4,)))

        def scalar_of_grad():
            f = ad.add(ad.softplus(x), ad.square(ad.sigmoid(x))).sum()
            (g,) = ad.grad(f, [x], create_graph=True)
            return ad.mul(g, w).sum()

        out = scalar_of_grad()
        (gg,) = ad.grad(out, [x])
        x0 = x.data.copy()

        def f(vec):
            assign_from_flat([x], vec)
            return scalar_of_grad().item()

        fd = ad.finite_diff_gradient(f, x0.ravel())
        assign_from_flat([x], x0.ravel())
        assert max_rel_err(gg.data.ravel(), fd) < 1e-4

    def test_squared_gradient_penalty_second_order(self):
        """Penalty sum(grad^2) differentiates correctly through the tape."""
        rng = np.random.default_rng(321)
        leaves, forward = tiny_mlp([2, 5, 3], seed=77)
        x = rng.normal(size=(4, 2))
        y = rng.integers(0, 3, size=4)

        def penalty():
            loss = ad.gather_nll(forward(x), y).sum()
            grads = ad.grad(loss, leaves, create_graph=True)
            total = None
            for g in grads:
                s = ad.square(g).sum()
                total = s if total is None else ad.add(total, s)
            return total

        out = penalty()
        grads = ad.grad(out, leaves)
        flat0 = flatten([t.data for t in leaves])

        def f(vec):
            assign_from_flat(leaves, vec)
            return penalty().item()

        fd = ad.finite_diff_gradient(f, flat0)
        assign_from_flat(leaves, flat0)
        assert max_rel_err(flatten([g.data for g in grads]), fd) < 1e-4


class TestErrors:
    def test_elementwise_shape_mismatch_names_operation(self):
        with pytest.raises(ad.ShapeMismatchError, match="add") as exc:
            ad.add(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((3, 2))))
        assert exc.value.shapes == ((2, 3), (3, 2))

    def test_size_one_stretching_is_rejected(self):
        # Broadcast is leading-axis expansion only.
        with pytest.raises(ad.ShapeMismatchError):
            ad.mul(ad.constant(np.zeros((3, 1))), ad.constant(np.zeros((3, 4))))

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError, match="matmul"):
            ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 3))))

    def test_gather_nll_index_out_of_range(self):
        with pytest.raises(ad.ClassIndexError):
            ad.gather_nll(ad.constant(np.zeros((2, 3))), np.array([0, 3]))

    def test_grad_rejects_nonscalar_output(self):
        x = ad.leaf([1.0, 2.0])
        with pytest.raises(ValueError, match="scalar"):
            ad.grad(ad.square(x), [x])

    def test_grad_rejects_off_tape_input(self):
        x = ad.leaf(2.0)
        c = ad.constant(1.0)
        with pytest.raises(ValueError, match="not on the tape"):
            ad.grad(ad.square(x), [c])


class TestFiniteDifferenceOracle:
    def test_square_at_three(self):
        fd = ad.finite_diff_gradient(lambda v: float(v[0] ** 2), np.array([3.0]))
        assert fd[0] == pytest.approx(6.0, abs=1e-9)

    def test_softplus_slope_at_zero(self):
        fd = ad.finite_diff_gradient(
            lambda v: float(np.logaddexp(0.0, v[0])), np.array([0.0]))
        assert fd[0] == pytest.approx(0.5, abs=1e-9)

    def test_rejects_nonpositive_step(self):
        with pytest.raises(ValueError):
            ad.finite_diff_gradient(lambda v: 0.0, np.zeros(1), h=0.0)
