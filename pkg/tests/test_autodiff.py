from typing import Callable, List, Tuple

import numpy as np
import pytest
from grappa import should

from partdiff import autodiff as ad
from partdiff.autodiff import Tensor
from partdiff.errors import ShapeError
from partdiff.helper import Helper
from .utils import TestUtil


def weighted(out: Tensor) -> Tensor:
    """Reduce any output to a scalar through a fixed random projection"""
    w = Helper.rng(99).standard_normal(out.shape)
    return (out * w).sum()


def positive(shape: Tuple[int, ...], seed: int) -> Tensor:
    x = TestUtil.leaf(shape, seed)
    x.data = np.abs(x.data) + 0.5
    return x


def away_from_zero(shape: Tuple[int, ...], seed: int) -> Tensor:
    x = TestUtil.leaf(shape, seed)
    x.data = np.where(x.data >= 0, x.data + 0.1, x.data - 0.1)
    return x


TABLE_INDICES = np.array([[0, 3, 3], [1, 0, 2]])
GATHER_INDICES = np.array([[2, 0], [1, 1], [3, 2]])

# name -> (function of the points, point factory taking a seed)
PRIMITIVES: List[Tuple[str, Callable[..., Tensor], Callable[[int], List[Tensor]]]] = [
    ("add", lambda a, b: ad.add(a, b), lambda s: [TestUtil.leaf((3, 4), s), TestUtil.leaf((4,), s + 1)]),
    ("sub", lambda a, b: ad.sub(a, b), lambda s: [TestUtil.leaf((3, 4), s), TestUtil.leaf((3, 1), s + 1)]),
    ("mul", lambda a, b: ad.mul(a, b), lambda s: [TestUtil.leaf((2, 3), s), TestUtil.leaf((2, 3), s + 1)]),
    ("div", lambda a, b: ad.div(a, b), lambda s: [TestUtil.leaf((2, 3), s), positive((2, 3), s + 1)]),
    ("neg", lambda a: ad.neg(a), lambda s: [TestUtil.leaf((5,), s)]),
    ("power", lambda a: ad.power(a, 3), lambda s: [TestUtil.leaf((2, 3), s)]),
    ("sqrt", lambda a: ad.power(a, 0.5), lambda s: [positive((4,), s)]),
    ("matmul", lambda a, b: ad.matmul(a, b), lambda s: [TestUtil.leaf((2, 3, 4), s), TestUtil.leaf((4, 2), s + 1)]),
    ("reshape", lambda a: ad.reshape(a, (3, 4)), lambda s: [TestUtil.leaf((2, 6), s)]),
    ("transpose", lambda a: ad.transpose(a, (2, 0, 1)), lambda s: [TestUtil.leaf((2, 3, 4), s)]),
    ("broadcast", lambda a: ad.broadcast_to(a, (3, 2, 4)), lambda s: [TestUtil.leaf((2, 1), s)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), lambda s: [TestUtil.leaf((2, 3), s), TestUtil.leaf((2, 2), s + 1)]),
    ("slice", lambda a: ad.getitem(a, (slice(None), slice(1, 3))), lambda s: [TestUtil.leaf((3, 4), s)]),
    ("sum", lambda a: ad.tsum(a, axis=1), lambda s: [TestUtil.leaf((3, 4), s)]),
    ("mean", lambda a: ad.mean(a, axis=(0, 2), keepdims=True), lambda s: [TestUtil.leaf((2, 3, 4), s)]),
    ("exp", lambda a: ad.exp(a), lambda s: [TestUtil.leaf((3, 3), s)]),
    ("log", lambda a: ad.log(a), lambda s: [positive((3, 3), s)]),
    ("sigmoid", lambda a: ad.sigmoid(a), lambda s: [TestUtil.leaf((6,), s)]),
    ("gelu", lambda a: ad.gelu(a), lambda s: [TestUtil.leaf((6,), s)]),
    ("silu", lambda a: ad.silu(a), lambda s: [TestUtil.leaf((6,), s)]),
    ("clamp_min", lambda a: ad.clamp_min(a, 0.0), lambda s: [away_from_zero((6,), s)]),
    ("logsumexp", lambda a: ad.logsumexp(a, axis=-1), lambda s: [TestUtil.leaf((3, 5), s)]),
    ("log_softmax", lambda a: ad.log_softmax(a, axis=-1), lambda s: [TestUtil.leaf((3, 5), s)]),
    ("softmax", lambda a: ad.softmax(a, axis=-1), lambda s: [TestUtil.leaf((3, 5), s)]),
    ("layer_norm", lambda a, g, b: ad.layer_norm(a, g, b), lambda s: [TestUtil.leaf((3, 6), s), TestUtil.leaf((6,), s + 1), TestUtil.leaf((6,), s + 2)]),
    ("embedding", lambda t: ad.embedding(t, TABLE_INDICES), lambda s: [TestUtil.leaf((4, 3), s)]),
    ("gather", lambda a: ad.gather(a, GATHER_INDICES), lambda s: [TestUtil.leaf((3, 4), s)]),
    ("mean_pool3d", lambda a: ad.mean_pool3d(a, (2, 2, 4), 2), lambda s: [TestUtil.leaf((2, 16, 3), s)]),
    ("upsample3d", lambda a: ad.upsample3d(a, (2, 2, 4), 2), lambda s: [TestUtil.leaf((2, 2, 3), s)]),
]


class TestPrimitives:
    def test_softmax_of_zeros_is_uniform(self):
        out = ad.softmax(Tensor([0.0, 0.0, 0.0]))
        np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15) | should.be.true
        abs(out.data.sum() - 1.0) | should.be.below(1e-15)

    def test_identity_matmul_returns_operand(self):
        a = Helper.rng(0).standard_normal((2, 2))
        out = ad.matmul(np.eye(2), a)
        np.array_equal(out.data, a) | should.be.true

    def test_stop_gradient_blocks_one_branch(self):
        x = Tensor(2.0, requires_grad=True)
        ad.backward(ad.stop_gradient(x) * x)
        float(x.grad) | should.be.equal.to(2.0)

    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        ad.backward(x.sum())
        x.grad.tolist() | should.be.equal.to([1.0, 1.0, 1.0])

    def test_backward_twice_doubles(self):
        x = TestUtil.leaf((4,), 1)
        loss = (x * x).sum()
        ad.backward(loss)
        first = x.grad.copy()
        ad.backward(loss)
        np.array_equal(x.grad, 2 * first) | should.be.true

    def test_non_scalar_loss_is_rejected(self):
        x = TestUtil.leaf((3,), 0)
        with pytest.raises(ShapeError) as cm:
            ad.backward(x * 2.0)
        str(cm.value) | should.contain("scalar")

    def test_shape_mismatch_is_rejected_at_construction(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        with pytest.raises(ShapeError):
            ad.reshape(Tensor(np.ones(6)), (4, 2))
        with pytest.raises(ShapeError):
            ad.mean_pool3d(Tensor(np.ones((1, 8, 2))), (2, 2, 2), 3)

    def test_embedding_rejects_out_of_range_indices(self):
        with pytest.raises(ShapeError):
            ad.embedding(TestUtil.leaf((3, 2), 0), np.array([0, 3]))

    def test_upsample_inverts_mean_pool_on_constant_blocks(self):
        pooled = TestUtil.leaf((1, 2, 3), 4)
        up = ad.upsample3d(pooled, (2, 2, 4), 2)
        back = ad.mean_pool3d(up, (2, 2, 4), 2)
        np.allclose(back.data, pooled.data, atol=1e-15) | should.be.true


class TestGradCheck:
    def test_linear_function_is_exact(self):
        w = np.array([1.0, -2.0, 0.5, 1.5, -1.0, 2.5])
        x = Tensor(np.zeros(6), requires_grad=True)
        ad.grad_check(lambda p: (p * w).sum(), [x]) | should.be.below_or_equal(1e-10)

    def test_quadratic_norm(self):
        W = TestUtil.leaf((3, 4), 7, name="W")
        x = TestUtil.leaf((4, 1), 8, name="x")

        def f(w: Tensor, v: Tensor) -> Tensor:
            y = w @ v
            return (y * y).sum()

        ad.grad_check(f, [W, x]) | should.be.below_or_equal(1e-4)

    def test_reports_a_wrong_gradient(self):
        def broken(p: Tensor) -> Tensor:
            # forward of x², backward of x
            return ad._result(p.data * p.data, (p,), lambda g: (g,), "broken").sum()

        x = Tensor([2.0, 3.0, 4.0], requires_grad=True)
        ad.grad_check(broken, [x]) | should.be.above(0.1)

    @pytest.mark.parametrize("seed", range(4))
    @pytest.mark.parametrize("name,fn,points", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
    def test_primitive(self, name, fn, points, seed):
        leaves = points(10 * seed)
        error = ad.grad_check(lambda *xs: weighted(fn(*xs)), leaves)
        error | should.be.below_or_equal(1e-4)
