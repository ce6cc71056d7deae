"""Unit tests for the reverse-mode tensor core and Adam."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from microforge import autodiff as ad
from microforge.autodiff import Adam, MissingGradError, TapeError, Tensor


def fd_check(fn, args, wrt, h=1e-5, rel=1e-4, probes=10, seed=0):
    """Central finite differences on ``probes`` random entries of args[wrt]."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=(i == wrt)) for i, a in enumerate(args)]
    out = fn(*tensors)
    loss = ad.mean(out * out)
    loss.backward()
    grad = tensors[wrt].grad
    flat = args[wrt].ravel()
    idxs = rng.choice(flat.size, size=min(probes, flat.size), replace=False)
    for idx in idxs:
        orig = flat[idx]
        flat[idx] = orig + h
        lp = float(np.mean(fn(*[Tensor(a) for a in args]).data ** 2))
        flat[idx] = orig - h
        lm = float(np.mean(fn(*[Tensor(a) for a in args]).data ** 2))
        flat[idx] = orig
        numeric = (lp - lm) / (2 * h)
        analytic = grad.ravel()[idx]
        denom = max(abs(numeric), abs(analytic), 1e-8)
        assert abs(numeric - analytic) / denom < rel, (
            f"fd mismatch at {idx}: {numeric} vs {analytic}")


def rand(*shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


# -- forward semantics --------------------------------------------------


def test_matmul_identity():
    a = rand(3, 5, seed=1)
    out = ad.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_array_equal(out.data, a)


def test_matmul_matches_naive_triple_loop():
    a, b = rand(5, 7, seed=2), rand(7, 4, seed=3)
    naive = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            for k in range(7):
                naive[i, j] += a[i, k] * b[k, j]
    out = ad.matmul(Tensor(a), Tensor(b))
    np.testing.assert_allclose(out.data, naive, atol=1e-12)


def test_softmax_uniform_on_zeros():
    out = ad.softmax(Tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(out.data, np.full((1, 3), 1.0 / 3.0), atol=1e-15)


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 1000))
@settings(max_examples=25, deadline=None)
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = np.random.default_rng(seed).standard_normal((rows, cols)) * 10
    out = ad.softmax(Tensor(x))
    np.testing.assert_allclose(out.data.sum(axis=-1), np.ones(rows), atol=1e-12)


def test_layer_norm_moments():
    x = rand(6, 16, seed=4) * 3 + 2
    g, b = Tensor(np.ones(16)), Tensor(np.zeros(16))
    out = ad.layer_norm(Tensor(x), g, b).data
    assert np.all(np.abs(out.mean(axis=-1)) < 1e-10)
    assert np.all(np.abs(out.var(axis=-1) - 1.0) < 1e-8)


def test_gelu_fixed_points():
    out = ad.gelu(Tensor(np.array([0.0, 100.0]))).data
    assert out[0] == 0.0
    np.testing.assert_allclose(out[1], 100.0, rtol=1e-12)


# -- gradients ----------------------------------------------------------


def test_linear_loss_gradient_is_exact():
    x = rand(4, 5, seed=5)
    w = Tensor(rand(4, 5, seed=6), requires_grad=True)
    loss = ad.tsum(w * Tensor(x))
    loss.backward()
    np.testing.assert_array_equal(w.grad, x)


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", lambda a, b: a + b, [(3, 4), (3, 4)]),
    ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub", lambda a, b: a - b, [(3, 4), (3, 4)]),
    ("mul", lambda a, b: a * b, [(3, 4), (3, 4)]),
    ("matmul", ad.matmul, [(3, 5), (5, 2)]),
    ("matmul_batched", ad.matmul, [(2, 3, 5), (2, 5, 4)]),
    ("transpose", lambda a: ad.transpose(a, (1, 0)), [(3, 4)]),
    ("reshape", lambda a: ad.reshape(a, (12,)), [(3, 4)]),
    ("concat", lambda a, b: ad.concat([a, b], axis=1), [(2, 3), (2, 4)]),
    ("slice", lambda a: ad.slice_axis(a, 1, 1, 3), [(2, 5)]),
    ("mean", lambda a: ad.mean(a, axis=1), [(3, 6)]),
    ("sum", lambda a: ad.tsum(a, axis=0), [(3, 6)]),
    ("softmax", ad.softmax, [(4, 7)]),
    ("gelu", ad.gelu, [(3, 5)]),
])
def test_op_gradients_match_finite_differences(name, fn, shapes):
    args = [rand(*s, seed=10 + i) for i, s in enumerate(shapes)]
    for wrt in range(len(args)):
        fd_check(fn, [a.copy() for a in args], wrt, seed=hash(name) % 2**31)


def test_layer_norm_gradient_many_probes():
    x = rand(10, 16, seed=20)
    g = rand(16, seed=21) + 1.5
    b = rand(16, seed=22)
    fn = lambda t, gg, bb: ad.layer_norm(t, gg, bb)
    for wrt in range(3):
        fd_check(fn, [x.copy(), g.copy(), b.copy()], wrt, probes=34, seed=30 + wrt)


def test_gather_rows_gradient_2d():
    x = rand(6, 4, seed=23)
    idx = np.array([0, 2, 2, 5])
    fd_check(lambda t: ad.gather_rows(t, idx), [x], 0, seed=31)


def test_gather_rows_gradient_batched():
    x = rand(2, 6, 4, seed=24)
    idx = np.array([[0, 2, 2], [1, 3, 5]])
    fd_check(lambda t: ad.gather_rows(t, idx), [x], 0, seed=32)


def test_gather_rows_duplicate_indices_accumulate():
    x = Tensor(rand(4, 3, seed=25), requires_grad=True)
    out = ad.gather_rows(x, np.array([1, 1, 1]))
    ad.tsum(out).backward()
    np.testing.assert_array_equal(x.grad[1], np.full(3, 3.0))
    np.testing.assert_array_equal(x.grad[0], np.zeros(3))


def test_fanout_accumulates():
    x = Tensor(np.array([2.0]), requires_grad=True)
    ad.tsum(x + x).backward()
    np.testing.assert_array_equal(x.grad, np.array([2.0]))


def test_backward_requires_scalar():
    x = Tensor(rand(3, 3, seed=26), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        (x * x).backward()


def test_backward_twice_raises():
    x = Tensor(np.array(2.0), requires_grad=True)
    loss = x * x
    loss.backward()
    with pytest.raises(TapeError):
        loss.backward()


# -- optimizer ----------------------------------------------------------


def test_adam_descends_quadratic():
    w = Tensor(np.array(1.0), requires_grad=True)
    (w * w).backward()
    Adam({"w": w}, lr=0.1).step()
    assert float(w.data) < 1.0


def test_adam_zero_grad_leaves_parameters():
    w = Tensor(np.array(3.0), requires_grad=True)
    w.grad = np.zeros(())
    Adam({"w": w}, lr=0.1).step()
    assert float(w.data) == 3.0


def test_adam_missing_grad_raises():
    w = Tensor(np.array(3.0), requires_grad=True)
    with pytest.raises(MissingGradError):
        Adam({"w": w}, lr=0.1).step()


def test_adam_converges_on_two_parameter_quadratic():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.05)
    for _ in range(200):
        loss = ad.tsum(w * w)
        loss.backward()
        opt.step()
    assert float(np.sum(w.data ** 2)) < 1e-6


def test_adam_step_clears_grads():
    w = Tensor(np.array(1.0), requires_grad=True)
    (w * w).backward()
    opt = Adam({"w": w}, lr=0.1)
    opt.step()
    assert w.grad is None


# -- init helper --------------------------------------------------------


def test_truncated_normal_respects_bound():
    rng = np.random.default_rng(0)
    x = ad.truncated_normal(rng, (2000,), std=0.02, bound=2.0)
    assert np.all(np.abs(x) <= 2.0 * 0.02 + 1e-15)
    assert np.std(x) > 0.01  # not degenerate


def test_truncated_normal_deterministic():
    a = ad.truncated_normal(np.random.default_rng(5), (64, 64))
    b = ad.truncated_normal(np.random.default_rng(5), (64, 64))
    np.testing.assert_array_equal(a, b)
