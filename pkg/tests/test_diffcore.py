import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddmlab.diffcore import (
    Adam, AdamConfig, AdamState, ContractError, NondeterminismError, NonFiniteError, Tensor,
    adam_step, backward, checkpoint_segment, concat, grad, no_grad,
)
from oracles import central_diff, max_rel_err


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


def test_square_grad():
    x = leaf(3.0)
    (g,) = grad(x * x, [x])
    assert g == pytest.approx(6.0)


def test_sum_grad_is_ones():
    x = leaf(np.arange(4.0))
    (g,) = grad(x.sum(), [x])
    np.testing.assert_array_equal(g, np.ones(4))


def test_grad_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ContractError):
        grad(x * 2.0, [x])


def test_unreachable_leaf_gets_zero():
    x, y = leaf(np.ones(2)), leaf(np.ones(3))
    gx, gy = grad((x * x).sum(), [x, y])
    np.testing.assert_array_equal(gy, np.zeros(3))
    np.testing.assert_array_equal(gx, 2 * np.ones(2))


def test_non_finite_raises():
    x = leaf(np.array([0.0, 1.0]))
    with np.errstate(all="ignore"):
        with pytest.raises(NonFiniteError):
            1.0 / x
        with pytest.raises(NonFiniteError):
            (x * 1e200).exp()


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with no_grad():
        y = x * 3.0
    assert y.node is None and not y.requires_grad


def test_numpy_scalar_on_left_stays_tensor():
    x = leaf(np.ones(2))
    y = np.float64(2.0) * x
    assert isinstance(y, Tensor)
    np.testing.assert_array_equal(grad(y.sum(), [x])[0], [2.0, 2.0])


# finite-difference check of every differentiable op, float64

def _ops():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 4))
    B = rng.standard_normal((4, 2))
    row = rng.standard_normal((1, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    return {
        "add_broadcast": (A, lambda t: (t + Tensor(row)).sum()),
        "radd_rsub": (A, lambda t: ((2.0 + t) * (1.0 - t)).sum()),
        "sub": (A, lambda t: (t - Tensor(A * 0.5) * t).sum()),
        "neg": (A, lambda t: (-t * t).sum()),
        "mul": (A, lambda t: (t * t * Tensor(pos)).sum()),
        "div": (pos, lambda t: (Tensor(A) / t + 1.0 / t).sum()),
        "pow": (pos, lambda t: (t ** 3 + t ** 0.5).sum()),
        "matmul": (A, lambda t: ((t @ Tensor(B)) ** 2).sum()),
        "rmatmul": (B, lambda t: ((A @ t) ** 2).sum()),
        "exp": (A, lambda t: (t * 0.3).exp().sum()),
        "sqrt": (pos, lambda t: t.sqrt().sum()),
        "sin_cos": (A, lambda t: (t.sin() * t.cos()).sum()),
        "silu": (A * 4, lambda t: t.silu().sum()),
        "sum_axis": (A, lambda t: (t.sum(axis=0) ** 2).sum() + (t.sum(axis=1, keepdims=True) ** 2).sum()),
        "mean": (A, lambda t: (t.mean(axis=1) ** 2).mean()),
        "reshape": (A, lambda t: ((t.reshape(4, 3) @ Tensor(A[:, :2])) ** 2).sum()),
        "transpose": (A, lambda t: (t.T @ Tensor(pos)).sum()),
        "concat": (A, lambda t: (concat([t, t * t], axis=1) ** 2).sum()),
    }


@pytest.mark.parametrize("name", sorted(_ops()))
def test_op_gradient_matches_finite_differences(name):
    x0, f = _ops()[name]
    t = leaf(x0)
    (g,) = grad(f(t), [t])
    fd = central_diff(lambda x: f(Tensor(x)).item(), x0)
    assert max_rel_err(g, fd, floor=1e-6) < 1e-5


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_grad_is_linear(seed, a, b):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 3))
    f = lambda t: (t.sin() * t).sum()  # noqa: E731
    h = lambda t: ((t @ t) ** 2).sum()  # noqa: E731
    x = leaf(x0)
    (combined,) = grad(f(x) * a + h(x) * b, [x])
    (gf,) = grad(f(x), [x])
    (gh,) = grad(h(x), [x])
    np.testing.assert_allclose(combined, a * gf + b * gh, rtol=1e-10, atol=1e-10)


def test_backward_with_vector_seed():
    x = leaf(np.array([1.0, 2.0]))
    y = x * x
    (g,) = backward([y], [np.array([1.0, 10.0])], [x])
    np.testing.assert_allclose(g, [2.0, 40.0])


# checkpointing

def test_checkpoint_identity_segment():
    x = leaf(np.array([1.0, -2.0]))
    y = checkpoint_segment(lambda t: t, x)
    np.testing.assert_array_equal(y.data, x.data)
    np.testing.assert_array_equal(grad(y.sum(), [x])[0], [1.0, 1.0])


def test_checkpoint_square():
    x = leaf(3.0)
    y = checkpoint_segment(lambda t: t * t, x)
    assert y.item() == 9.0
    assert grad(y, [x])[0] == pytest.approx(6.0)


def _chain(x, w, steps, segmented):
    def seg(h, w):
        return (h @ w).silu() * 0.9 + h * 0.1

    for _ in range(steps):
        x = checkpoint_segment(seg, x, w) if segmented else seg(x, w)
    return (x * x).sum()


@pytest.mark.parametrize("steps", [1, 5, 20])
def test_checkpoint_transparent(steps):
    rng = np.random.default_rng(steps)
    x0, w0 = rng.standard_normal((4, 3)), rng.standard_normal((3, 3)) * 0.5
    ref = grad(_chain(leaf(x0), w := leaf(w0), steps, False), [w])[0]
    x = leaf(x0)
    w2 = leaf(w0)
    loss = _chain(x, w2, steps, True)
    gw, gx = grad(loss, [w2, x])
    assert max_rel_err(gw, ref, floor=1e-300) < 1e-10
    gx_ref = grad(_chain(x2 := leaf(x0), leaf(w0), steps, False), [x2])[0]
    assert max_rel_err(gx, gx_ref, floor=1e-300) < 1e-10


def test_checkpoint_multi_output():
    x = leaf(np.array([1.0, 2.0]))
    a, b = checkpoint_segment(lambda t: (t * t, t.sin()), x)
    (g,) = grad((a + b).sum(), [x])
    np.testing.assert_allclose(g, 2 * x.data + np.cos(x.data))


def test_checkpoint_detects_hidden_randomness():
    rng = np.random.default_rng(0)
    x = leaf(np.ones(3))
    y = checkpoint_segment(lambda t: t * Tensor(rng.standard_normal(3)), x)
    with pytest.raises(NondeterminismError):
        grad(y.sum(), [x])


# Adam

def test_adam_zero_grad_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_first_step_hand_value():
    # m_hat = 1, v_hat = 1 -> update = lr / (1 + eps)
    p = {"w": np.array([0.5])}
    new, st_ = adam_step(p, {"w": np.array([1.0])}, AdamState(AdamConfig(lr=1e-3)))
    assert new["w"][0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), rel=0, abs=1e-15)
    assert st_.step == 1
    assert p["w"][0] == 0.5  # inputs untouched


def test_adam_constant_grad_decreases_monotonically():
    opt = Adam(AdamConfig(lr=1e-3))
    p = {"w": np.array([0.0])}
    seen = [0.0]
    for _ in range(2):
        p = opt.step(p, {"w": np.array([1.0])})
        seen.append(p["w"][0])
    assert seen[0] > seen[1] > seen[2]
    assert seen[2] == pytest.approx(-2e-3, rel=1e-6)


def test_adam_second_step_hand_value():
    cfg = AdamConfig(lr=0.1)
    p, s = adam_step({"w": np.array([0.0])}, {"w": np.array([2.0])}, AdamState(cfg))
    p, s = adam_step(p, {"w": np.array([-1.0])}, s)
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    expected = -0.1 * 2 / (2 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p["w"][0] == pytest.approx(expected, rel=1e-12)


def test_adam_shape_mismatch():
    with pytest.raises(ContractError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())
    with pytest.raises(ContractError):
        adam_step({"w": np.zeros(2)}, {"v": np.zeros(2)}, AdamState())
