import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ddmlab.diffcore import ContractError, Tensor, grad
from ddmlab.errors import ConfigError
from ddmlab.mmd import (
    FeatureMap, KernelSpec, featurize, gram, kernel_eval, make_feature_map, median_bandwidth, mmd2_unbiased,
    random_projection_map, train_encoder,
)
from oracles import central_diff, max_rel_err, mmd2_double_sum


def test_kernel_examples():
    assert kernel_eval(KernelSpec("cubic"), [0, 0], [0, 0]) == 1.0
    assert kernel_eval(KernelSpec("cubic", d=2), [1, 1], [1, 1]) == 8.0
    assert kernel_eval(KernelSpec("rbf", sigma=1.0), [0, 0], [1, 1]) == pytest.approx(np.exp(-1.0), abs=1e-15)
    assert kernel_eval(KernelSpec("linear"), [1, 2], [3, 4]) == 11.0


def test_kernel_validation():
    with pytest.raises(ConfigError):
        KernelSpec("poly")
    with pytest.raises(ConfigError):
        KernelSpec("rbf", sigma=0.0)
    with pytest.raises(ContractError):
        kernel_eval(KernelSpec("linear"), [1, 2], [1, 2, 3])


vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3)


@settings(max_examples=50, deadline=None)
@given(vec, vec)
def test_kernel_symmetry_and_ranges(u, v):
    for spec in (KernelSpec("linear"), KernelSpec("cubic"), KernelSpec("rbf", sigma=0.7)):
        assert kernel_eval(spec, u, v) == kernel_eval(spec, v, u)
    r = kernel_eval(KernelSpec("rbf", sigma=0.7), u, v)
    assert 0.0 <= r <= 1.0
    uu = np.dot(u, u)
    assert kernel_eval(KernelSpec("cubic"), u, u) == pytest.approx((uu / 3 + 1) ** 3)
    assert kernel_eval(KernelSpec("cubic"), u, u) >= 1.0


def test_gram_matches_pointwise():
    rng = np.random.default_rng(0)
    X, Y = rng.standard_normal((2, 5, 3))
    for spec in (KernelSpec("linear"), KernelSpec("cubic"), KernelSpec("rbf", sigma=1.3)):
        K = gram(spec, X, Y).data
        ref = np.array([[kernel_eval(spec, x, y) for y in Y] for x in X])
        np.testing.assert_allclose(K, ref, rtol=1e-13)


def test_linear_double_sum_example():
    fx = np.array([[1.0, 0.0], [0.0, 1.0]])
    fy = np.array([[0.0, 0.0], [1.0, 1.0]])
    spec = KernelSpec("linear")
    est = mmd2_unbiased(fx, fy, spec, include_constant=True)
    oracle = mmd2_double_sum(lambda a, b: float(a @ b), fx, fy)
    assert est.value == pytest.approx(oracle, abs=1e-15)
    # xx: (0 + 0)/2 = 0; xy: 2/4 * (0+1+0+1) = 1; yy: 0 -> -1
    assert est.value == pytest.approx(-1.0)


@pytest.mark.parametrize("kind", ["linear", "cubic", "rbf"])
@pytest.mark.parametrize("const", [True, False])
def test_estimator_matches_double_sums(kind, const):
    rng = np.random.default_rng(1)
    fx, fy = rng.standard_normal((2, 7, 3))
    spec = KernelSpec(kind)
    est = mmd2_unbiased(fx, fy, spec, include_constant=const)
    oracle_spec = KernelSpec(kind, sigma=est.sigma) if kind == "rbf" else spec
    oracle = mmd2_double_sum(lambda a, b: kernel_eval(oracle_spec, a, b), fx, fy, const)
    assert est.value == pytest.approx(oracle, rel=1e-12, abs=1e-14)


def test_median_bandwidth_by_hand():
    x = np.array([[0.0, 0.0], [1.0, 0.0]])
    y = np.array([[0.0, 2.0], [3.0, 0.0]])
    pts = np.vstack([x, y])
    d2 = [np.sum((pts[i] - pts[j]) ** 2) for i in range(4) for j in range(i + 1, 4)]
    assert median_bandwidth(x, y) == pytest.approx(np.sqrt(np.median(d2) / 2))
    with pytest.raises(ConfigError):
        median_bandwidth(np.zeros((3, 2)))


def test_estimator_errors():
    with pytest.raises(ConfigError):
        mmd2_unbiased(np.zeros((1, 2)), np.zeros((1, 2)), KernelSpec("linear"))
    with pytest.raises(ContractError):
        mmd2_unbiased(np.zeros((3, 2)), np.zeros((4, 2)), KernelSpec("linear"))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    fx, fy = rng.standard_normal((2, 9, 2))
    spec = KernelSpec("rbf", sigma=1.0)
    a = mmd2_unbiased(fx, fy, spec).value
    b = mmd2_unbiased(fx[rng.permutation(9)], fy[rng.permutation(9)], spec).value
    assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


@pytest.mark.parametrize("kind", ["linear", "cubic", "rbf"])
def test_estimator_gradient(kind):
    rng = np.random.default_rng(2)
    fx0, fy = rng.standard_normal((2, 6, 2))
    sigma = 0.9 if kind == "rbf" else None
    spec = KernelSpec(kind, sigma)
    x = Tensor(fx0, requires_grad=True)
    (g,) = grad(mmd2_unbiased(x, fy, spec, include_constant=False).tensor, [x])
    fd = central_diff(lambda v: mmd2_unbiased(v, fy, spec, include_constant=False).value, fx0)
    assert max_rel_err(g, fd, floor=1e-7) < 1e-5


def test_unbiased_same_distribution():
    rng = np.random.default_rng(10)
    spec = KernelSpec("rbf", sigma=1.0)
    vals = np.array([mmd2_unbiased(rng.standard_normal((64, 2)), rng.standard_normal((64, 2)), spec).value
                     for _ in range(2000)])
    assert abs(vals.mean()) <= 3 * vals.std(ddof=1) / np.sqrt(len(vals))


def test_linear_mean_shift():
    rng = np.random.default_rng(11)
    spec = KernelSpec("linear")
    vals = [mmd2_unbiased(rng.standard_normal((128, 2)), rng.standard_normal((128, 2)) + [1.0, 0.0], spec).value
            for _ in range(500)]
    assert np.mean(vals) == pytest.approx(1.0, abs=0.05)


def test_feature_maps():
    x = np.random.default_rng(0).standard_normal((5, 2))
    np.testing.assert_array_equal(featurize(FeatureMap("identity", 2), x).data, x)
    a, b = random_projection_map(2, seed=3), random_projection_map(2, seed=3)
    np.testing.assert_array_equal(featurize(a, x).data, featurize(b, x).data)
    assert a.checksum() == b.checksum() and a.out_dim == 16
    with pytest.raises(ValueError):
        a.layers[0][0][0, 0] = 1.0  # frozen
    with pytest.raises(ContractError):
        featurize(a, np.zeros((3, 3)))
    with pytest.raises(ConfigError):
        make_feature_map("inception")
    with pytest.raises(ConfigError):
        make_feature_map("encoder")


@pytest.mark.parametrize("kind", ["randproj", "encoder"])
def test_featurize_gradient(kind):
    rng = np.random.default_rng(4)
    data = rng.standard_normal((256, 2))
    fmap = make_feature_map(kind, 2, seed=0, data=data, **({"iterations": 50} if kind == "encoder" else {}))
    x0 = rng.standard_normal((4, 2))
    x = Tensor(x0, requires_grad=True)
    (g,) = grad(featurize(fmap, x).sum(), [x])
    fd = central_diff(lambda v: float(featurize(fmap, v).data.sum()), x0)
    assert max_rel_err(g, fd, floor=1e-7) < 1e-5


def test_encoder_deterministic():
    data = np.random.default_rng(5).standard_normal((300, 2))
    a = train_encoder(data, seed=1, iterations=30)
    b = train_encoder(data, seed=1, iterations=30)
    assert a.checksum() == b.checksum() and a.out_dim == 8
