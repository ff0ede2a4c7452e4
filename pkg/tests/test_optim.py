"""Adam optimizer and parameter store contracts."""

import numpy as np
import pytest

from peterrec.errors import ContractViolation
from peterrec.optim import Adam, ParameterStore
from peterrec.tensor import Tape, Tensor
from peterrec import tensor as T


def param(value):
    return Tensor(np.asarray(value, dtype=np.float32), requires_grad=True)


class TestAdamSteps:
    def test_first_step_is_exactly_minus_lr(self):
        p = param([0.0])
        opt = Adam([p], lr=0.001)
        p.grad = np.array([1.0], dtype=np.float32)
        opt.step()
        # bias correction makes m_hat / (sqrt(v_hat) + eps) ~ 1 at t=1
        assert abs(float(p.data[0]) + 0.001) < 1e-9

    def test_zero_gradient_leaves_parameter(self):
        p = param([1.5])
        opt = Adam([p], lr=0.1)
        p.grad = np.zeros(1, dtype=np.float32)
        opt.step()
        assert float(p.data[0]) == 1.5

    def test_converges_on_quadratic(self):
        p = param([0.0])
        opt = Adam([p], lr=0.1)
        for _ in range(100):
            with Tape() as tape:
                diff = T.sub(p, Tensor([3.0]))
                loss = T.reduce_sum(T.mul(diff, diff))
            tape.backward(loss)
            opt.step()
        assert abs(float(p.data[0]) - 3.0) < 0.5

    def test_missing_gradient_is_a_contract_violation(self):
        opt = Adam([param([0.0])])
        with pytest.raises(ContractViolation):
            opt.step()

    def test_grads_cleared_after_step(self):
        p = param([0.0])
        opt = Adam([p])
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert p.grad is None

    def test_unmanaged_tensors_untouched(self):
        tuned, frozen = param([0.0, 0.0]), param([1.0, 1.0])
        opt = Adam([tuned], lr=0.01)
        tuned.grad = np.ones(2, dtype=np.float32)
        frozen.grad = np.ones(2, dtype=np.float32)
        opt.step()
        assert np.array_equal(frozen.data, [1.0, 1.0])
        assert not np.array_equal(tuned.data, [0.0, 0.0])

    def test_update_keeps_float32(self):
        p = param([0.5])
        opt = Adam([p], lr=0.01)
        p.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert p.data.dtype == np.float32


class TestParameterStore:
    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.add("w", np.zeros(1, dtype=np.float32))
        with pytest.raises(ContractViolation):
            store.add("w", np.zeros(1, dtype=np.float32))

    def test_preserves_insertion_order(self):
        store = ParameterStore()
        for name in ("c", "a", "b"):
            store.add(name, np.zeros(1, dtype=np.float32))
        assert store.names() == ["c", "a", "b"]

    def test_total_size(self):
        store = ParameterStore()
        store.add("m", np.zeros((3, 4), dtype=np.float32))
        store.add("v", np.zeros(5, dtype=np.float32))
        assert store.total_size(["m", "v"]) == 17
        assert store.total_size(["v"]) == 5
        assert store.total_size() == 17

    def test_zero_grads_discards(self):
        store = ParameterStore()
        t = store.add("p", np.array([1.0, 2.0], dtype=np.float32))
        t.grad = np.ones(2, dtype=np.float32)
        store.zero_grads()
        assert t.grad is None

    def test_requires_grad_flag(self):
        store = ParameterStore()
        t = store.add("frozen", np.zeros(2, dtype=np.float32), requires_grad=False)
        assert t.requires_grad is False
