import threading
import zlib

import numpy as np
import pytest

import gradcases
from latent_bridge import autodiff as ad
from latent_bridge.autodiff import Tape, Tensor
from latent_bridge.errors import (
    AxisOutOfRange,
    DetachedTensor,
    DomainError,
    NotScalar,
    ShapeMismatch,
)
from latent_bridge.gradcheck import finite_difference_check


def grad_of(f, x):
    xt = Tensor(x)
    with Tape() as tape:
        loss = f(xt)
    return tape.backward(loss)[xt]


class TestForward:
    def test_relu(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_sigmoid_half(self):
        assert ad.sigmoid(Tensor([0.0])).data.tolist() == [0.5]

    def test_sigmoid_extremes_finite(self):
        out = ad.sigmoid(Tensor([-800.0, 800.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(0.0) and out[1] == pytest.approx(1.0)

    def test_add(self):
        assert ad.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4, 6]

    def test_elementwise_dispatch(self):
        assert ad.elementwise("mul", Tensor([2.0, 3.0]), Tensor([4.0, 5.0])).data.tolist() == [8, 15]
        assert ad.elementwise("relu", Tensor([-1.0, 1.0])).data.tolist() == [0, 1]

    def test_operator_sugar(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        assert (a + b).data.tolist() == [4, 7]
        assert (b - a).data.tolist() == [2, 3]
        assert (a * 2).data.tolist() == [2, 4]
        assert (1 - a).data.tolist() == [0, -1]
        assert (b / 2).data.tolist() == [1.5, 2.5]
        assert (-a).data.tolist() == [-1, -2]

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_bias_broadcast_only_trailing(self):
        m = Tensor(np.ones((2, 3)))
        assert ad.add(m, Tensor([1.0, 2.0, 3.0])).shape == (2, 3)
        with pytest.raises(ShapeMismatch):
            ad.add(m, Tensor([1.0, 2.0]))

    def test_log_nonpositive(self):
        with pytest.raises(DomainError):
            ad.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            ad.log(Tensor([-1.0]))

    def test_exp_overflow(self):
        with pytest.raises(DomainError):
            ad.exp(Tensor([710.0]))
        assert np.isfinite(ad.exp(Tensor([709.0])).data).all()

    def test_matmul_identity(self):
        b = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)

    def test_matmul_small(self):
        assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]

    def test_matmul_shape(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_reductions(self):
        assert ad.mean(Tensor([1.0, 2.0, 3.0])).item() == 2.0
        assert ad.sum(Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=0).data.tolist() == [4, 6]
        assert ad.reduce("sum", Tensor([[1.0, 2.0], [3.0, 4.0]]), axis=1).data.tolist() == [3, 7]

    def test_axis_out_of_range(self):
        with pytest.raises(AxisOutOfRange):
            ad.sum(Tensor([[1.0]]), axis=2)

    def test_concat(self):
        assert ad.concat(Tensor([1.0, 2.0]), Tensor([0.0, 1.0]), axis=0).data.tolist() == [1, 2, 0, 1]
        assert ad.concat(Tensor(np.ones((2, 3))), Tensor(np.zeros((1, 3))), axis=0).shape == (3, 3)
        with pytest.raises(ShapeMismatch):
            ad.concat(Tensor(np.ones((2, 3))), Tensor(np.zeros((1, 2))), axis=0)

    def test_sort(self):
        s, perm = ad.sort_ascending_with_permutation(Tensor([3.0, 1.0, 2.0]))
        assert s.data.tolist() == [1, 2, 3]
        assert perm.tolist() == [1, 2, 0]

    def test_sort_sorted_input_identity(self):
        _, perm = ad.sort_ascending_with_permutation(Tensor([0.5, 1.0, 7.0]))
        assert perm.tolist() == [0, 1, 2]

    def test_sort_stable_ties(self):
        _, perm = ad.sort_ascending_with_permutation(Tensor([2.0, 1.0, 2.0, 1.0]))
        assert perm.tolist() == [1, 3, 0, 2]

    def test_sort_inverse_reconstructs(self):
        x = np.random.default_rng(0).standard_normal((7, 3))
        s, perm = ad.sort_ascending_with_permutation(Tensor(x))
        back = np.empty_like(x)
        np.put_along_axis(back, perm, s.data, axis=0)
        assert np.array_equal(back, x)

    def test_logsumexp_stable(self):
        out = ad.logsumexp(Tensor([[1000.0, 1000.0]]), axis=1).data
        assert out[0] == pytest.approx(1000.0 + np.log(2.0))

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeMismatch):
            Tensor(np.zeros((0, 3)))

    def test_item_requires_scalar(self):
        with pytest.raises(NotScalar):
            Tensor([1.0, 2.0]).item()


class TestBackward:
    def test_sum_grad(self):
        assert grad_of(ad.sum, np.array([1.0, 2.0, 3.0])).tolist() == [1, 1, 1]

    def test_square_grad(self):
        assert grad_of(lambda x: ad.sum(ad.square(x)), np.array([1.0, 2.0])).tolist() == [2, 4]

    def test_mean_grad(self):
        g = grad_of(ad.mean, np.arange(4.0))
        assert np.allclose(g, 0.25)

    def test_relu_subgradient_zero(self):
        assert grad_of(lambda x: ad.sum(ad.relu(x)), np.array([-1.0, 0.0, 1.0])).tolist() == [0, 0, 1]

    def test_matmul_grad_is_column_sums(self):
        rng = np.random.default_rng(1)
        b = Tensor(rng.standard_normal((4, 3)))
        a = rng.standard_normal((2, 4))
        g = grad_of(lambda x: ad.sum(ad.matmul(x, b)), a)
        assert np.allclose(g, np.tile(b.data.sum(axis=1), (2, 1)))

    def test_concat_routes_slices(self):
        a, b = Tensor(np.ones((2, 2))), Tensor(np.ones((1, 2)))
        w = Tensor(np.arange(6.0).reshape(3, 2))
        with Tape() as tape:
            loss = ad.sum(ad.mul(ad.concat(a, b, axis=0), w))
        grads = tape.backward(loss)
        assert np.array_equal(grads[a], w.data[:2])
        assert np.array_equal(grads[b], w.data[2:])

    def test_shared_input_accumulates(self):
        assert grad_of(lambda x: ad.sum(ad.mul(x, x)), np.array([3.0])).tolist() == [6.0]

    def test_unused_leaf_gets_zero(self):
        x, y = Tensor([1.0, 2.0]), Tensor([5.0])
        with Tape() as tape:
            loss = ad.sum(ad.add(x, x))
            ad.square(y)
        grads = tape.backward(loss)
        assert grads.get(y).tolist() == [0.0]

    def test_stop_gradient(self):
        g = grad_of(lambda x: ad.sum(ad.mul(x, ad.stop_gradient(x))), np.array([2.0]))
        assert g.tolist() == [2.0]

    def test_non_scalar_loss(self):
        x = Tensor([1.0, 2.0])
        with Tape() as tape:
            y = ad.square(x)
        with pytest.raises(NotScalar):
            tape.backward(y)

    def test_tape_single_use(self):
        x = Tensor([1.0])
        with Tape() as tape:
            loss = ad.sum(ad.square(x))
        tape.backward(loss)
        with pytest.raises(DetachedTensor):
            tape.backward(loss)
        with pytest.raises(DetachedTensor):
            with tape:
                pass

    def test_no_tape_no_record(self):
        y = ad.sum(Tensor([1.0, 2.0]))
        assert y.node_id is None
        with pytest.raises(DetachedTensor):
            ad.backward(y)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x0 = rng.uniform(-2, 2, 5)

        def f(x):
            return ad.sum(ad.sigmoid(x))

        def g(x):
            return ad.sum(ad.square(x))

        a, b = 1.5, -0.7
        combined = grad_of(lambda x: ad.add(ad.scale(f(x), a), ad.scale(g(x), b)), x0)
        assert np.allclose(combined, a * grad_of(f, x0) + b * grad_of(g, x0), rtol=1e-12, atol=1e-14)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        f, x = gradcases.case_mlp(rng)
        assert np.array_equal(grad_of(f, x), grad_of(f, x))

    def test_threads_have_separate_tapes(self):
        results = {}

        def worker(k):
            x = Tensor(np.full(3, float(k)))
            with Tape() as tape:
                loss = ad.sum(ad.square(x))
            results[k] = tape.backward(loss)[x]

        threads = [threading.Thread(target=worker, args=(k,)) for k in range(1, 5)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        for k in range(1, 5):
            assert results[k].tolist() == [2.0 * k] * 3


class TestGradcheck:
    def test_sum_exact(self):
        rep = finite_difference_check(ad.sum, np.random.default_rng(0).standard_normal(6))
        assert rep.max_rel_error < 1e-9

    @pytest.mark.parametrize("case", gradcases.ALL_CASES, ids=lambda c: c.__name__[5:])
    def test_case(self, case):
        rng = np.random.default_rng(zlib.crc32(case.__name__.encode()))
        for _ in range(3):
            f, x = case(rng)
            rep = finite_difference_check(f, x)
            assert rep.passed, f"{case.__name__}: max rel error {rep.max_rel_error:.2e}"

    def test_detects_wrong_gradient(self):
        def bad(x):
            # forward of square, backward of identity
            return ad.sum(ad._emit(x.data**2, (x,), lambda g: (g,)))

        rep = finite_difference_check(bad, np.array([1.0, 2.0]))
        assert not rep.passed
