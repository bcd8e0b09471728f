import numpy as np
import pytest

from otrecon.diffnet import engine as E
from otrecon.errors import ContractError
from otrecon.selftest import PRIMITIVES, primitive_fd_error


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
@pytest.mark.parametrize("seed", range(3))
def test_primitive_gradients_float64(name, seed):
    assert primitive_fd_error(name, seed, np.float64) <= 1e-7


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_float32(name):
    # 32-bit reverse pass against a 64-bit finite-difference reference
    assert primitive_fd_error(name, 0, np.float32) <= 1e-4


def test_conv_is_cross_correlation():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    w = np.arange(9.0).reshape(1, 1, 3, 3)
    out = E.conv2d(E.constant(x), E.constant(w), E.constant(np.zeros(1))).data[0]
    # a unit impulse through cross-correlation yields the flipped kernel
    assert np.array_equal(out[1:4, 1:4], w[0, 0, ::-1, ::-1])


def test_conv_rejects_bad_shapes():
    with pytest.raises(ContractError):
        E.conv2d(E.constant(np.zeros((2, 4, 4))), E.constant(np.zeros((1, 3, 3, 3))), E.constant(np.zeros(1)))
    with pytest.raises(ContractError):
        E.conv2d(E.constant(np.zeros((1, 4, 4))), E.constant(np.zeros((1, 1, 5, 5))), E.constant(np.zeros(1)))


def test_add_and_channels_contracts():
    with pytest.raises(ContractError):
        E.add(E.constant(np.zeros((1, 2, 2))), E.constant(np.zeros((1, 3, 3))))
    with pytest.raises(ContractError):
        E.channels(E.constant(np.zeros((2, 2, 2))), 1, 3)


def test_no_grad_records_nothing():
    x = E.parameter(np.ones((1, 2, 2)))
    with E.no_grad():
        y = E.scale(x, 2.0)
    assert not y.requires_grad and y._parents == ()


def test_shared_input_accumulates():
    x = E.parameter(np.ones((1, 2, 2)))
    loss = E.mean_squared_error(E.add(x, x), np.zeros((1, 2, 2)))
    loss.backward()
    # d/dx mean((2x)^2) = 8x / n with n = 4
    assert np.allclose(x.grad, 2.0)


def test_deep_chain_does_not_recurse():
    x = E.parameter(np.ones((1, 1, 1)))
    y = x
    for _ in range(5000):
        y = E.scale(y, 1.0)
    E.mean_squared_error(y, np.zeros((1, 1, 1))).backward()
    assert x.grad[0, 0, 0] == pytest.approx(2.0)
