import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from hoireenact.numerics import (
    NumericsError,
    grad_check,
    layer_norm,
    linear,
    load_array,
    save_array,
    softmax_lastdim,
)

D = torch.float64


def test_linear_identity_and_permutation():
    x = torch.tensor([1.0, 2.0], dtype=D)
    assert linear(x, torch.eye(2, dtype=D), torch.zeros(2, dtype=D)).tolist() == [1.0, 2.0]
    p = torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=D)
    assert linear(torch.tensor([1.0, 0.0], dtype=D), p, torch.zeros(2, dtype=D)).tolist() == [0.0, 1.0]


def test_linear_shape_mismatch_names_both_shapes():
    with pytest.raises(NumericsError, match=r"\(3,\).*\(2, 2\)"):
        linear(torch.zeros(3), torch.zeros(2, 2))


def test_linear_input_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    w = torch.randn(4, 3, generator=g, dtype=D)
    b = torch.randn(3, generator=g, dtype=D)
    x = torch.randn(4, generator=g, dtype=D)
    # oracle: central differences, step 1e-5
    h = 1e-5
    fd = torch.zeros(4, dtype=D)
    for i in range(4):
        e = torch.zeros(4, dtype=D)
        e[i] = h
        fd[i] = (linear(x + e, w, b).sum() - linear(x - e, w, b).sum()) / (2 * h)
    xg = x.clone().requires_grad_(True)
    linear(xg, w, b).sum().backward()
    assert torch.allclose(xg.grad, w.sum(dim=1), atol=1e-12)
    assert torch.allclose(fd, w.sum(dim=1), atol=1e-8)


def test_layer_norm_cases():
    const = torch.full((2, 4), 3.0, dtype=D)
    assert torch.equal(layer_norm(const, torch.ones(4, dtype=D), torch.zeros(4, dtype=D)), torch.zeros(2, 4, dtype=D))
    x = torch.tensor([1.0, -1.0], dtype=D)
    out = layer_norm(x, torch.ones(2, dtype=D), torch.zeros(2, dtype=D), 1e-6)
    assert torch.allclose(out, torch.tensor([1.0, -1.0], dtype=D), atol=1e-5)
    shifted = layer_norm(x, torch.ones(2, dtype=D), torch.full((2,), 5.0, dtype=D), 1e-6)
    assert torch.allclose(shifted - out, torch.full((2,), 5.0, dtype=D), atol=1e-12)
    with pytest.raises(NumericsError):
        layer_norm(x, eps=0.0)


def test_softmax_examples():
    assert softmax_lastdim(torch.tensor([0.0, 0.0], dtype=D)).tolist() == [0.5, 0.5]
    assert softmax_lastdim(torch.tensor([-math.inf, 0.0], dtype=D)).tolist() == [0.0, 1.0]
    mpmath.mp.dps = 40
    exps = [mpmath.e**k for k in (1, 2, 3)]
    oracle = [float(e / sum(exps)) for e in exps]
    got = softmax_lastdim(torch.tensor([1.0, 2.0, 3.0], dtype=D))
    assert np.allclose(got.numpy(), oracle, atol=1e-12)
    assert np.allclose(got.numpy(), [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_rejects_fully_blocked_slice():
    with pytest.raises(NumericsError):
        softmax_lastdim(torch.tensor([[0.0, 1.0], [-math.inf, -math.inf]], dtype=D))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-50, 50), min_size=1, max_size=12),
    st.lists(st.booleans(), min_size=12, max_size=12),
)
def test_softmax_rows_are_probability_vectors(values, blocked):
    x = torch.tensor(values, dtype=D)
    block = torch.tensor(blocked[: len(values)])
    block[0] = False
    x = torch.where(block, torch.tensor(-math.inf, dtype=D), x)
    p = softmax_lastdim(x)
    assert (p >= 0).all()
    assert abs(float(p.sum()) - 1.0) < 1e-12
    assert (p[block] == 0).all()


def test_grad_check_quadratic():
    rep = grad_check(lambda x: (x * x).sum(), torch.tensor([1.0, 2.0, 3.0], dtype=D))
    assert rep.passed and rep.max_rel_error < 1e-8 and rep.failing_index is None


def test_grad_check_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return (x**3).sum()

        @staticmethod
        def backward(ctx, g):
            return g * torch.ones(3, dtype=D)

    rep = grad_check(Wrong.apply, torch.tensor([1.0, 2.0, 3.0], dtype=D))
    assert not rep.passed and rep.failing_index is not None


def test_grad_check_preconditions():
    with pytest.raises(NumericsError):
        grad_check(lambda x: x.sum(), torch.ones(2, dtype=torch.float32))
    with pytest.raises(NumericsError):
        grad_check(lambda x: x.sum(), torch.ones(2, dtype=D), step=1e-2)
    with pytest.raises(NumericsError):
        grad_check(lambda x: x.sum() / 0.0, torch.ones(2, dtype=D))


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_array_round_trip(tmp_path, dtype):
    x = torch.randn(2, 3, 4, dtype=dtype)
    save_array(tmp_path / "a.bin", x)
    with open(tmp_path / "a.bin", "rb") as fh:
        header = fh.readline()
    assert header.startswith(b'{"shape": [2, 3, 4], "precision": "f')
    y = load_array(tmp_path / "a.bin")
    assert y.dtype == dtype and torch.equal(x, y)


def test_replay_determinism():
    x = torch.randn(5, 7, dtype=D)
    g, b = torch.randn(7, dtype=D), torch.randn(7, dtype=D)
    assert torch.equal(layer_norm(x, g, b), layer_norm(x, g, b))
    assert torch.equal(softmax_lastdim(x), softmax_lastdim(x))
