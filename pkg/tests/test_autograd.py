import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bayesformer import autograd as ag
from bayesformer.autograd import GraphError, ShapeError, Tensor
from bayesformer.checks import numerical_grad, rel_error


def fd_check(build, *inputs, step=1e-5, tol=1e-4):
    """Compare backward against central differences for ``sum(build(*inputs) * w)``."""
    rng = np.random.default_rng(123)
    out = build(*inputs)
    w = Tensor(rng.standard_normal(out.shape))

    def f():
        return (build(*inputs) * w).sum().item()

    (build(*inputs) * w).sum().backward()
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        num = numerical_grad(f, t, step)
        assert rel_error(analytic, num, floor=1e-7).max() <= tol


def rand(shape, seed=0, lo=-2.0, hi=2.0):
    return Tensor(np.random.default_rng(seed).uniform(lo, hi, shape), requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ag.matmul(a, b).data, b.data)


def test_matmul_hand_expansion():
    assert ag.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_grad_of_sum_is_ones_times_b_transpose():
    a, b = rand((3, 4), 1), rand((4, 2), 2)
    ag.matmul(a, b).sum().backward()
    assert np.allclose(a.grad, np.ones((3, 2)) @ b.data.T, rtol=0, atol=1e-14)
    num = numerical_grad(lambda: ag.matmul(a, b).sum().item(), a, step=1e-6)
    assert rel_error(a.grad, num).max() <= 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(3, 4\).*\(3, 2\)"):
        ag.matmul(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 2))))


def test_batched_matmul_grads():
    fd_check(ag.matmul, rand((2, 3, 4), 3), rand((4, 5), 4))
    fd_check(ag.matmul, rand((2, 2, 3, 4), 5), rand((2, 2, 4, 3), 6))


# ---------------------------------------------------------------- softmax

def test_softmax_symmetric():
    assert ag.softmax(Tensor([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_no_overflow():
    p = ag.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0) and p[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_against_extended_precision():
    mpmath.mp.dps = 50
    z = [mpmath.exp(v) for v in (1, 2, 3)]
    expected = [float(v / sum(z)) for v in z]
    got = ag.softmax(Tensor([1.0, 2.0, 3.0])).data
    assert np.allclose(got, expected, rtol=1e-14, atol=0)
    assert np.allclose(got, [0.0900, 0.2447, 0.6652], atol=5e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_softmax_sums_to_one(xs):
    p = ag.softmax(Tensor(np.array(xs))).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all((p >= 0) & (p <= 1))


def test_softmax_mask_zeroes_and_blocks_gradient():
    x = rand((3, 3), 7)
    mask = np.tril(np.ones((3, 3), dtype=bool))
    p = ag.softmax(x, mask=mask)
    assert np.all(p.data[~mask] == 0.0)
    (p * Tensor(np.arange(9.0).reshape(3, 3))).sum().backward()
    assert np.all(x.grad[~mask] == 0.0)


def test_softmax_grad():
    fd_check(lambda x: ag.softmax(x, axis=-1), rand((3, 5), 8))
    fd_check(lambda x: ag.softmax(x, axis=0), rand((4, 2), 9))


# ---------------------------------------------------------------- layer norm

def test_layer_norm_constant_vector_is_zero():
    out = ag.layer_norm(Tensor(np.full(4, 3.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)), 1e-5)
    assert np.array_equal(out.data, np.zeros(4))


def test_layer_norm_two_values():
    out = ag.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert out.data.tolist() == [-1.0, 1.0]


def test_layer_norm_zero_gain_gives_bias():
    bias = Tensor([0.5, -1.0, 2.0])
    out = ag.layer_norm(rand((4, 3), 1), Tensor(np.zeros(3)), bias)
    assert np.array_equal(out.data, np.broadcast_to(bias.data, (4, 3)))


def test_layer_norm_grad():
    fd_check(lambda x, g, b: ag.layer_norm(x, g, b, 1e-5), rand((2, 3, 6), 10), rand(6, 11), rand(6, 12))


# ---------------------------------------------------------------- gelu

def test_gelu_values():
    assert ag.gelu(Tensor([0.0])).data[0] == 0.0
    phi1 = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    assert ag.gelu(Tensor([1.0])).data[0] == pytest.approx(phi1, abs=1e-15)
    assert ag.gelu(Tensor([1.0])).data[0] == pytest.approx(0.841345, abs=5e-7)


def test_gelu_negative_tail():
    # |x * Phi(x)| <= |x| * pdf(x) / |x| for x < 0 (Mills ratio bound)
    bound = math.exp(-50.0) / math.sqrt(2.0 * math.pi)
    v = ag.gelu(Tensor([-10.0])).data[0]
    assert abs(v) < 1e-9 and abs(v) <= 10.0 * bound


def test_gelu_grad():
    fd_check(ag.gelu, rand((3, 7), 13))


# ---------------------------------------------------------------- other ops

@pytest.mark.parametrize("op", [
    lambda a, b: a + b, lambda a, b: a - b, lambda a, b: a * b,
    lambda a, b: a / (ag.exp(b) + 1.0),
])
def test_broadcasting_binary_grads(op):
    fd_check(op, rand((3, 4), 14), rand((4,), 15))


@pytest.mark.parametrize("op", [
    ag.exp, ag.expm1, ag.square, lambda x: ag.log(ag.exp(x) + 1.0),
    lambda x: x.sum(axis=1), lambda x: x.reshape(4, 3), lambda x: x.transpose(1, 0),
    lambda x: x[1:, ::2], lambda x: ag.log_softmax(x),
])
def test_unary_grads(op):
    fd_check(op, rand((3, 4), 16))


def test_embedding_scatter_grad():
    table = rand((5, 3), 17)
    ids = np.array([[0, 2, 2], [4, 0, 1]])
    fd_check(lambda t: ag.embedding(t, ids), table)


def test_token_log_probs_grad():
    logits = rand((2, 3, 6), 18)
    targets = np.array([[0, 5, 2], [1, 1, 3]])
    fd_check(lambda z: ag.token_log_probs(z, targets), logits)
    expected = ag.log_softmax(Tensor(logits.data)).data
    got = ag.token_log_probs(Tensor(logits.data), targets).data
    assert np.allclose(got, np.take_along_axis(expected, targets[..., None], -1)[..., 0], atol=1e-15)


def test_concat_grad():
    fd_check(lambda a, b: ag.concat([a, b], axis=1), rand((2, 3), 19), rand((2, 2), 20))


# ---------------------------------------------------------------- backward semantics

def test_backward_sum_gives_ones():
    x = rand((2, 3))
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    with pytest.raises(GraphError):
        (rand((2, 2)) * 2.0).backward()


def test_second_backward_on_same_graph_is_rejected():
    x = rand(3)
    loss = (x * x).sum()
    loss.backward()
    first = x.grad.copy()
    with pytest.raises(GraphError):
        loss.backward()
    assert np.array_equal(x.grad, first)


def test_fresh_graphs_give_identical_grads():
    x = rand(4)
    (ag.exp(x) * x).sum().backward()
    first = x.grad.copy()
    (ag.exp(x) * x).sum().backward()
    assert np.array_equal(x.grad, first)


def test_unreachable_leaf_grad_stays_zero():
    x, y = rand(3, 1), rand(3, 2)
    (x * 2.0).sum().backward()
    assert np.array_equal(y.grad, np.zeros(3))


def test_reused_node_accumulates_within_one_pass():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(6.0 + 27.0)


def test_float32_mode_is_preserved():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ag.gelu(ag.layer_norm(x * 2.0 + 1.0, Tensor(np.ones(2, np.float32)), Tensor(np.zeros(2, np.float32))))
    assert y.dtype == np.float32
    y.sum().backward()
    assert x.grad.dtype == np.float32
