import struct
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from polarfuse import autograd as ag
from polarfuse.autograd import ContainerError, NonFiniteError, ShapeMismatch, Tensor
from polarfuse.gradcheck import TOLERANCE, run_suite


def p64(values):
    return ag.param("p", np.asarray(values, dtype=np.float64))


class TestOps:
    def test_conv_identity(self):
        x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)))
        out = ag.conv1x1(x, Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, x.data)

    def test_conv_hand_dot(self):
        out = ag.conv1x1(Tensor([[[3.0, 4.0]]]), Tensor([[1.0], [1.0]]), Tensor([0.0]))
        assert out.data.tolist() == [[[7.0]]]

    def test_conv_weight_grad_is_channel_sums(self):
        x = np.random.default_rng(1).standard_normal((3, 2, 4))
        w, b = p64(np.zeros((4, 1))), p64(np.zeros(1))
        ag.backward(ag.sum_all(ag.conv1x1(Tensor(x), w, b)))
        np.testing.assert_allclose(w.grad[:, 0], x.sum(axis=(0, 1)))
        assert b.grad[0] == 6

    def test_mse_values(self):
        x = Tensor([1.0, 2.0])
        assert ag.mse(x, x).item() == 0.0
        assert ag.mse(Tensor([3.0, 1.0]), Tensor([1.0, 1.0])).item() == 2.0

    def test_sigmoid_zero(self):
        assert ag.sigmoid(Tensor([0.0])).data[0] == 0.5

    def test_sigmoid_extremes_finite(self):
        out = ag.sigmoid(Tensor([-800.0, 800.0]))
        assert out.data.tolist() == [0.0, 1.0]

    def test_no_broadcasting(self):
        with pytest.raises(ShapeMismatch):
            ag.add(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((2, 2, 2))))
        with pytest.raises(ShapeMismatch):
            ag.conv1x1(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 1))), Tensor(np.zeros(1)))

    def test_nonfinite_raises(self):
        with pytest.raises(NonFiniteError):
            ag.exp(Tensor([1000.0]))

    def test_masked_l1_empty_mask_is_zero(self):
        out = ag.masked_l1(Tensor(np.ones((2, 2, 3))), np.zeros((2, 2, 3)), np.zeros((2, 2), bool))
        assert out.item() == 0.0

    def test_bce_matches_formula(self):
        z, t = np.array([0.3, -2.0, 5.0]), np.array([1.0, 0.0, 0.5])
        expect = np.mean(-(t * np.log(1 / (1 + np.exp(-z))) + (1 - t) * np.log(1 - 1 / (1 + np.exp(-z)))))
        assert ag.bce_with_logits(Tensor(z), t).item() == pytest.approx(expect, rel=1e-12)

    def test_dtype_preserved(self):
        x = Tensor(np.ones((1, 1, 2), np.float32))
        w, b = Tensor(np.ones((2, 2), np.float32)), Tensor(np.zeros(2, np.float32))
        assert ag.relu(ag.conv1x1(x, w, b)).data.dtype == np.float32


class TestBackward:
    def test_sum_gives_ones(self):
        p = p64(np.random.default_rng(0).standard_normal((2, 3, 2)))
        ag.backward(ag.sum_all(p))
        np.testing.assert_array_equal(p.grad, np.ones_like(p.data))

    def test_accumulates(self):
        p = p64([[[1.0, -2.0]]])
        loss = lambda: ag.sum_all(ag.mul(p, p))  # noqa: E731
        ag.backward(loss())
        first = p.grad.copy()
        ag.backward(loss())
        np.testing.assert_array_equal(p.grad, 2 * first)

    def test_shared_subgraph(self):
        p = p64([[[2.0]]])
        y = ag.mul(p, p)
        ag.backward(ag.sum_all(ag.add(y, y)))
        assert p.grad.item() == 8.0

    def test_composite_gradcheck(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((3, 3, 4)))
        w, b = p64(rng.standard_normal((4, 2))), p64(rng.standard_normal(2) + 0.1)
        target = rng.standard_normal((3, 3, 2))
        fn = lambda: ag.mse(ag.relu(ag.conv1x1(x, w, b)), Tensor(target))  # noqa: E731
        assert ag.check_gradients(fn, [w, b]) < 1e-4

    def test_non_scalar_rejected(self):
        with pytest.raises(ShapeMismatch):
            ag.backward(p64(np.ones(2)))

    def test_deep_chain_no_recursion_limit(self):
        p = p64([[[1.0]]])
        y = p
        for _ in range(5000):
            y = ag.scale(y, 1.0)
        ag.backward(ag.sum_all(y))
        assert p.grad.item() == 1.0


class TestSGD:
    def test_plain_step(self):
        p = p64([1.0, 2.0])
        p.grad[:] = [0.5, -1.0]
        ag.SGD([p], lr=1.0).step()
        assert p.data.tolist() == [0.5, 3.0]

    def test_zero_grad_no_move(self):
        p = p64([1.0, 2.0])
        ag.SGD([p], lr=0.3, momentum=0.9).step()
        assert p.data.tolist() == [1.0, 2.0]

    def test_momentum_recurrence(self):
        p = p64([0.0])
        opt = ag.SGD([p], lr=0.1, momentum=0.9)
        p.grad[:] = 1.0
        opt.step()  # v = 1, p = -0.1
        p.grad[:] = 2.0
        opt.step()  # v = 0.9 + 2 = 2.9, p = -0.1 - 0.29
        assert p.data[0] == pytest.approx(-0.39, abs=1e-15)

    def test_functional_form_matches(self):
        a, b = p64([1.0, -1.0]), p64([1.0, -1.0])
        opt, state = ag.SGD([a], 0.05, 0.9), None
        for g in ([1.0, 2.0], [-3.0, 0.5], [0.2, 0.2]):
            a.grad[:] = g
            b.grad[:] = g
            opt.step()
            state = ag.sgd_step([b], 0.05, 0.9, state)
        np.testing.assert_array_equal(a.data, b.data)


class TestGradSuite:
    def test_full_suite_under_budget(self):
        t0 = time.time()
        cases = run_suite(n_shapes=20, seed=0)
        elapsed = time.time() - t0
        bad = [(c.name, c.shape, c.error) for c in cases if not c.passed]
        assert not bad, bad
        assert len({c.seed for c in cases}) >= 20
        assert elapsed < 60

    def test_other_seed(self):
        assert all(c.error < TOLERANCE for c in run_suite(n_shapes=3, seed=11))


class TestContainer:
    @settings(max_examples=40)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 5))
    def test_round_trip(self, seed, n):
        rng = np.random.default_rng(seed)
        tensors = {f"t{i}.w": rng.standard_normal(tuple(rng.integers(1, 4, rng.integers(1, 4)))).astype(np.float32)
                   for i in range(n)}
        data = ag.save_tensors(tensors, {"k": [1, 2], "s": "x"})
        back, meta = ag.load_tensors(data)
        assert meta == {"k": [1, 2], "s": "x"}
        assert list(back) == list(tensors)
        for k in tensors:
            assert back[k].tobytes() == tensors[k].tobytes() and back[k].shape == tensors[k].shape
        assert ag.save_tensors(back, meta) == data

    def test_bad_magic(self):
        with pytest.raises(ContainerError):
            ag.load_tensors(b"XXXX" + b"\0" * 20)

    def test_truncated(self):
        data = ag.save_tensors({"a": np.ones((3, 3), np.float32)})
        with pytest.raises(ContainerError):
            ag.load_tensors(data[:-5])

    def test_version(self):
        data = bytearray(ag.save_tensors({}))
        struct.pack_into("<H", data, 4, 7)
        with pytest.raises(ContainerError):
            ag.load_tensors(bytes(data))
