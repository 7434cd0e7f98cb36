"""Engine tests: forward values, gradient checks per op, optimizer math."""
import numpy as np
import pytest

from patchcomm import tensor as T
from patchcomm.tensor import SGDMomentum, ShapeError, Tensor, cosine_lr, grad_check


def randt(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad)


class TestForward:
    def test_add_broadcast(self, rng):
        a, b = randt(rng, 3, 4), randt(rng, 4)
        np.testing.assert_allclose((a + b).data, a.data + b.data)

    def test_matmul_batched(self, rng):
        a, b = randt(rng, 5, 3, 4), randt(rng, 4, 2)
        np.testing.assert_allclose(T.matmul(a, b).data, a.data @ b.data)

    def test_matmul_shape_error(self, rng):
        with pytest.raises(ShapeError):
            T.matmul(randt(rng, 3, 4), randt(rng, 3, 4))

    def test_softmax_rows_sum_to_one(self, rng):
        s = T.softmax(randt(rng, 6, 9))
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_shift_invariance(self, rng):
        x = rng.normal(size=(2, 5))
        a = T.softmax(Tensor(x)).data
        b = T.softmax(Tensor(x + 123.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self, rng):
        x = randt(rng, 3, 7)
        np.testing.assert_allclose(T.log_softmax(x).data,
                                   np.log(T.softmax(x).data), atol=1e-12)

    def test_layer_norm_moments(self, rng):
        gain, bias = Tensor(np.ones(16)), Tensor(np.zeros(16))
        y = T.layer_norm(randt(rng, 4, 16), gain, bias).data
        np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-10)
        np.testing.assert_allclose(y.std(axis=-1), 1, atol=1e-4)

    def test_l2_normalize_unit_rows(self, rng):
        y = T.l2_normalize(randt(rng, 5, 8)).data
        np.testing.assert_allclose(np.linalg.norm(y, axis=-1), 1.0, atol=1e-12)

    def test_conv2d_matches_direct_computation(self, rng):
        x, w = randt(rng, 2, 3, 5, 5), randt(rng, 4, 3, 3, 3)
        b = randt(rng, 4)
        out = T.conv2d(x, w, b, stride=1, padding=1).data
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros_like(out)
        for i in range(5):
            for j in range(5):
                patch = xp[:, :, i:i + 3, j:j + 3]
                ref[:, :, i, j] = np.einsum("bcij,ocij->bo", patch, w.data) + b.data
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_float32_stays_float32(self):
        x = Tensor(np.ones((2, 2), dtype=np.float32))
        assert (x * 0.5 + 1.0).data.dtype == np.float32

    def test_straight_through_forward_is_hard(self, rng):
        soft = randt(rng, 4)
        hard = np.array([0.0, 1.0, 0.0, 0.0])
        np.testing.assert_array_equal(T.straight_through(hard, soft).data, hard)


class TestBackward:
    def test_repeated_use_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x + x  # dy/dx = 2x + 1 = 5
        y.backward()
        np.testing.assert_allclose(x.grad, [5.0])

    def test_two_backward_calls_accumulate_into_leaves(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        (x * x).backward()
        (x * x).backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_broadcast_gradient_shape(self, rng):
        a, b = randt(rng, 3, 4), randt(rng, 4)
        T.tsum(a * b).backward()
        assert b.grad.shape == (4,)
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0))

    def test_take_scatter_adds_duplicates(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        T.tsum(x[np.array([1, 1, 2])]).backward()
        np.testing.assert_allclose(x.grad, [0, 2, 1, 0])

    @pytest.mark.parametrize("name,f", [
        ("exp", lambda x: T.tsum(T.exp(x))),
        ("log", lambda x: T.tsum(T.log(T.exp(x) + 1.0))),
        ("relu", lambda x: T.tsum(T.relu(x))),
        ("gelu", lambda x: T.tsum(T.gelu(x))),
        ("sigmoid", lambda x: T.tsum(T.sigmoid(x))),
        ("power", lambda x: T.tsum(x ** 3)),
        ("mean", lambda x: T.tmean(x * x)),
        ("reshape", lambda x: T.tsum(T.exp(x.reshape(6, 2)))),
        ("transpose", lambda x: T.tsum(T.exp(T.transpose(x, (1, 0))))),
        ("softmax", lambda x: T.tsum(T.softmax(x) ** 2)),
        ("log_softmax", lambda x: T.tsum(T.log_softmax(x)[np.arange(3), [0, 2, 1]])),
        ("layer_norm", lambda x: T.tsum(T.layer_norm(x, Tensor(np.full(4, 1.3)),
                                                      Tensor(np.full(4, 0.2))) ** 2)),
        ("l2_normalize", lambda x: T.tsum(T.l2_normalize(x) ** 3)),
        ("clip", lambda x: T.tsum(T.clip(x, -0.5, 0.5) * 2.0)),
    ])
    def test_gradients_vs_finite_differences(self, rng, name, f):
        x = Tensor(rng.normal(size=(3, 4)) + 0.05)
        assert grad_check(f, x) < 1e-6, name

    def test_matmul_gradients(self, rng):
        w = Tensor(rng.normal(size=(4, 2)))
        x = Tensor(rng.normal(size=(5, 3, 4)))
        assert grad_check(lambda t: T.tsum(T.matmul(t, w) ** 2), x) < 1e-6
        assert grad_check(lambda t: T.tsum(T.matmul(x, t) ** 2), w) < 1e-6

    def test_conv2d_gradients(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 6, 6)))
        w = Tensor(rng.normal(size=(4, 3, 3, 3)))
        b = Tensor(rng.normal(size=4))
        assert grad_check(lambda t: T.tsum(T.conv2d(t, w, b, 2, 1) ** 2), x) < 1e-6
        assert grad_check(lambda t: T.tsum(T.conv2d(x, t, b, 2, 1) ** 2), w) < 1e-6
        assert grad_check(lambda t: T.tsum(T.conv2d(x, w, t, 2, 1) ** 2), b) < 1e-6

    def test_concat_gradients(self, rng):
        a, b = Tensor(rng.normal(size=(2, 3))), Tensor(rng.normal(size=(2, 5)))
        assert grad_check(lambda t: T.tsum(T.concat([t, b], axis=1) ** 2), a) < 1e-6

    def test_straight_through_routes_gradient_to_soft(self, rng):
        soft = Tensor(rng.normal(size=4), requires_grad=True)
        hard = np.array([0.0, 1.0, 0.0, 0.0])
        w = rng.normal(size=4)
        T.tsum(T.straight_through(hard, soft) * Tensor(w)).backward()
        np.testing.assert_allclose(soft.grad, w)

    def test_no_grad_tracking_when_not_required(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=False)
        out = T.tsum(a * 2.0)
        out.backward()
        assert a.grad is None


class TestGradCheckHarness:
    def test_detects_wrong_gradient(self):
        # mutation sensitivity: a deliberately broken backward must be caught
        def bad(x):
            y = T._node(x.data ** 2, (x,), lambda g: (g * x.data,))  # missing *2
            return T.tsum(y)

        assert grad_check(bad, Tensor(np.array([1.5, -2.0]))) > 1e-2


class TestOptimizer:
    def test_momentum_update_matches_hand_computation(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGDMomentum({"p": p}, momentum=0.5, weight_decay=0.0)
        p.grad = np.array([2.0])
        opt.step(lr=0.1)          # v = 2,   p = 1 - 0.2 = 0.8
        p.grad = np.array([1.0])
        opt.step(lr=0.1)          # v = 2.0, p = 0.8 - 0.2 = 0.6
        np.testing.assert_allclose(p.data, [0.6])

    def test_weight_decay_pulls_toward_zero(self):
        p = Tensor(np.array([10.0]), requires_grad=True)
        opt = SGDMomentum({"p": p}, momentum=0.0, weight_decay=0.1)
        p.grad = np.zeros(1)
        opt.step(lr=1.0)
        np.testing.assert_allclose(p.data, [9.0])

    def test_zero_grad(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = SGDMomentum({"p": p}, momentum=0.9, weight_decay=0.0)
        p.grad = np.array([5.0])
        opt.zero_grad()
        assert p.grad is None


class TestCosineLR:
    def test_linear_warmup(self):
        assert cosine_lr(0, 100, 1.0, 10) == pytest.approx(0.0)
        assert cosine_lr(5, 100, 1.0, 10) == pytest.approx(0.5)
        assert cosine_lr(10, 100, 1.0, 10) == pytest.approx(1.0)

    def test_cosine_tail(self):
        # halfway through the cosine phase the lr is half the base
        assert cosine_lr(55, 100, 2.0, 10) == pytest.approx(1.0)
        assert cosine_lr(99, 100, 2.0, 10) < 0.01

    def test_monotone_decay_after_warmup(self):
        lrs = [cosine_lr(e, 50, 0.3, 5) for e in range(5, 50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_warmup_must_be_shorter_than_run(self):
        with pytest.raises(ValueError):
            cosine_lr(0, 5, 1.0, 5)
