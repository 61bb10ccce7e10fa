import numpy as np
import pytest

import sgq.autodiff as ad

RNG = np.random.default_rng(12345)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = f()
        x[i] = orig - h
        fm = f()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grad(build, *shapes, positive=False, tol=1e-4, trials=5):
    """Finite-difference check of scalar(build(*leaves)) at random points."""
    for trial in range(trials):
        leaves = []
        for s in shapes:
            vals = RNG.standard_normal(s)
            if positive:
                vals = np.abs(vals) + 0.5
            leaves.append(ad.tensor(vals, dtype=np.float64, requires_grad=True))
        loss = ad.sum_all(build(*leaves))
        ad.backward(loss, leaves)
        for leaf in leaves:
            def f(leaf=leaf):
                fresh = [ad.Tensor(l.value) for l in leaves]
                return float(ad.sum_all(build(*fresh)).value)

            fd = numeric_grad(f, leaf.value)
            rel = np.abs(leaf.grad - fd) / (np.abs(fd) + 1e-8)
            assert rel.max() <= tol, f"trial {trial}: rel err {rel.max():.2e}"


class TestForwardValues:
    def test_matmul_identity(self):
        x = ad.tensor([[1.0, 2.0], [3.0, 4.0]])
        out = ad.matmul(ad.tensor(np.eye(2)), x)
        assert np.allclose(out.value, x.value)

    def test_matmul_arithmetic(self):
        out = ad.matmul(ad.tensor([[1.0, 2.0]]), ad.tensor([[3.0], [4.0]]))
        assert out.value.tolist() == [[11.0]]

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ValueError, match="matmul"):
            ad.matmul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones((2, 3))))

    def test_leaky_relu_definition(self):
        out = ad.leaky_relu(ad.tensor([-1.0, 3.0]), 0.2)
        assert np.allclose(out.value, [-0.2, 3.0])

    def test_leaky_relu_slope_must_be_finite(self):
        with pytest.raises(ValueError):
            ad.leaky_relu(ad.tensor([1.0]), float("inf"))

    def test_log_softmax_symmetry(self):
        out = ad.log_softmax_rows(ad.tensor([[0.0, 0.0]]))
        assert np.allclose(out.value, [[-np.log(2), -np.log(2)]])

    def test_log_softmax_rows_sum_to_one(self):
        x = ad.tensor(RNG.standard_normal((6, 9)))
        out = ad.log_softmax_rows(x)
        assert np.allclose(np.exp(out.value).sum(axis=1), 1.0, atol=1e-5)

    def test_concat_rows(self):
        out = ad.concat_rows(ad.tensor([[1.0], [2.0]]), ad.tensor([[3.0], [4.0]]))
        assert out.value.tolist() == [[1.0, 3.0], [2.0, 4.0]]


class TestGradients:
    """Central finite differences, 64-bit mode, sampled away from kinks."""

    def test_matmul(self):
        check_grad(lambda a, b: ad.matmul(a, b), (3, 4), (4, 2))

    def test_add_same_shape(self):
        check_grad(lambda a, b: ad.add(a, b), (3, 4), (3, 4))

    def test_add_row_bias(self):
        check_grad(lambda a, b: ad.add(a, b), (3, 4), (1, 4))

    def test_mul_and_div(self):
        check_grad(lambda a, b: ad.mul(a, b), (4, 3), (4, 3))
        check_grad(lambda a, b: ad.div(a, b), (4, 3), (4, 3), positive=True)
        check_grad(lambda a, b: ad.div(a, b), (4, 3), (4, 1), positive=True)

    def test_scale_and_add_scalar(self):
        check_grad(lambda a: ad.add_scalar(ad.scale(a, -1.7), 0.3), (5,))

    def test_exp_log_sqrt(self):
        check_grad(ad.exp, (4, 2))
        check_grad(ad.log, (4, 2), positive=True)
        check_grad(ad.sqrt, (4, 2), positive=True)

    def test_leaky_relu_away_from_kink(self):
        # positive=True keeps samples > 0.5, far from the 0 kink; also probe negatives
        check_grad(lambda a: ad.leaky_relu(a, 0.2), (6,), positive=True)
        check_grad(lambda a: ad.leaky_relu(ad.scale(a, -1.0), 0.2), (6,), positive=True)

    def test_concat_rows(self):
        check_grad(lambda a, b: ad.matmul(ad.concat_rows(a, b), ad.Tensor(np.ones((5, 1)))), (3, 2), (3, 3))

    def test_log_softmax(self):
        weights = RNG.standard_normal((3, 4))
        check_grad(lambda a: ad.mul(ad.log_softmax_rows(a), weights), (3, 4))

    def test_row_sum_and_reshape(self):
        check_grad(lambda a: ad.row_sum(a), (4, 3))
        check_grad(lambda a: ad.reshape(a, (6,)), (2, 3))

    def test_slice_rows(self):
        check_grad(lambda a: ad.slice_rows(a, 1, 3), (5, 2))

    def test_gather_and_segment(self):
        idx = np.array([3, 0, 0, 2, 3])
        check_grad(lambda a: ad.gather_rows(a, idx), (4, 3))
        check_grad(lambda a: ad.segment_sum(a, idx, 4), (5, 2))

    def test_nll_loss(self):
        labels = np.array([1, 0, 2, 1])
        mask = np.array([True, False, True, True])
        check_grad(lambda a: ad.nll_loss(ad.log_softmax_rows(a), labels, mask), (4, 3))


class TestNllLoss:
    def test_one_hot_correct_gives_zero(self):
        lp = np.full((3, 2), -50.0)
        lp[np.arange(3), [0, 1, 0]] = 0.0
        loss = ad.nll_loss(ad.tensor(lp), np.array([0, 1, 0]), np.ones(3, bool))
        assert loss.value == pytest.approx(0.0)

    def test_uniform_two_class(self):
        lp = np.log(np.full((4, 2), 0.5))
        loss = ad.nll_loss(ad.tensor(lp), np.array([0, 1, 1, 0]), np.ones(4, bool))
        assert loss.value == pytest.approx(np.log(2), rel=1e-6)

    def test_matches_per_row_recount(self):
        lp = ad.tensor(RNG.standard_normal((7, 4)))
        labels = RNG.integers(0, 4, 7)
        mask = np.array([True, False, True, True, False, True, True])
        loss = ad.nll_loss(lp, labels, mask)
        rows = [i for i in range(7) if mask[i]]
        expected = -sum(lp.value[i, labels[i]] for i in rows) / len(rows)
        assert loss.value == pytest.approx(expected, rel=1e-6)

    def test_empty_mask_is_error(self):
        with pytest.raises(ValueError, match="no supervised nodes"):
            ad.nll_loss(ad.tensor(np.zeros((2, 2))), np.zeros(2, np.int64), np.zeros(2, bool))


class TestBackward:
    def test_sum_of_weights_gives_ones(self):
        w = ad.tensor(RNG.standard_normal((2, 2)), requires_grad=True)
        ad.backward(ad.sum_all(w), [w])
        assert np.array_equal(w.grad, np.ones((2, 2), dtype=np.float32))

    def test_constant_loss_gives_zeros(self):
        w = ad.tensor(np.ones((2, 2)), requires_grad=True)
        loss = ad.tensor(0.0)
        ad.backward(loss, [w])
        assert np.array_equal(w.grad, np.zeros((2, 2), dtype=np.float32))

    def test_off_path_leaves_get_zero(self):
        w = ad.tensor(np.ones((2, 2)), requires_grad=True)
        u = ad.tensor(np.ones(3), requires_grad=True)
        ad.backward(ad.sum_all(ad.scale(w, 2.0)), [w, u])
        assert np.array_equal(u.grad, np.zeros(3, dtype=np.float32))

    def test_non_scalar_root_rejected(self):
        w = ad.tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.scale(w, 1.0), [w])

    def test_backward_twice_is_an_error(self):
        w = ad.tensor(np.ones(3), requires_grad=True)
        loss = ad.sum_all(w)
        ad.backward(loss, [w])
        with pytest.raises(RuntimeError, match="already invoked"):
            ad.backward(loss, [w])

    def test_gradient_accumulates_over_shared_subexpressions(self):
        w = ad.tensor(np.array([2.0]), requires_grad=True)
        loss = ad.sum_all(ad.mul(w, w))  # d(w^2)/dw = 2w
        ad.backward(loss, [w])
        assert np.allclose(w.grad, [4.0])
