"""Kernels, frozen feature maps and the unbiased MMD^2 estimator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamConfig, AdamState, ContractError, Tensor, adam_step, as_tensor, grad, no_grad
from .errors import ConfigError

KERNELS = ("linear", "cubic", "rbf")
FEATURE_MAPS = ("identity", "randproj", "encoder")


@dataclass(frozen=True)
class KernelSpec:
    """``sigma=None`` selects the median heuristic for the RBF bandwidth.

    ``d`` is the 1/d scaling of the cubic kernel; ``None`` uses the feature
    dimension.
    """

    kind: str = "cubic"
    sigma: float | None = None
    d: int | None = None

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kind!r}; expected one of {KERNELS}")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigError(f"rbf sigma must be positive, got {self.sigma}")

    @property
    def label(self) -> str:
        return self.kind


def median_bandwidth(*batches) -> float:
    """sigma with sigma^2 = median pairwise squared distance of the pooled rows / 2."""
    z = np.concatenate([np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
                        for b in batches])
    sq = np.sum(z * z, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * z @ z.T
    iu = np.triu_indices(len(z), k=1)
    med = float(np.median(np.maximum(d2[iu], 0.0)))
    if med <= 0.0:
        raise ConfigError("median heuristic undefined: all pooled points coincide")
    return float(np.sqrt(med / 2.0))


def kernel_eval(spec: KernelSpec, u, v) -> float:
    """k(u, v) for two single feature vectors."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ContractError(f"feature dimension mismatch: {u.shape} vs {v.shape}")
    if spec.kind == "linear":
        return float(u @ v)
    if spec.kind == "cubic":
        d = spec.d or len(u)
        return float((u @ v / d + 1.0) ** 3)
    if spec.sigma is None:
        raise ConfigError("kernel_eval on rbf needs an explicit sigma")
    diff = u - v
    return float(np.exp(-(diff @ diff) / (2.0 * spec.sigma**2)))


def gram(spec: KernelSpec, X, Y, sigma: float | None = None) -> Tensor:
    """Kernel matrix K[i, j] = k(X_i, Y_j) as a differentiable Tensor."""
    X, Y = as_tensor(X), as_tensor(Y)
    if X.shape[1] != Y.shape[1]:
        raise ContractError(f"feature dimension mismatch: {X.shape[1]} vs {Y.shape[1]}")
    inner = X @ Y.T
    if spec.kind == "linear":
        return inner
    if spec.kind == "cubic":
        d = spec.d or X.shape[1]
        return (inner * (1.0 / d) + 1.0) ** 3
    sigma = sigma if sigma is not None else spec.sigma
    if sigma is None:
        raise ConfigError("rbf gram needs a bandwidth")
    xx = (X * X).sum(axis=1, keepdims=True)
    yy = (Y * Y).sum(axis=1).reshape(1, -1)
    return ((xx + yy - inner * 2.0) * (-1.0 / (2.0 * sigma**2))).exp()


@dataclass
class MMDEstimate:
    value: float
    n: int
    kernel: KernelSpec
    include_constant: bool
    sigma: float | None = None
    tensor: Tensor | None = field(default=None, repr=False)


def mmd2_unbiased(fx, fy, spec: KernelSpec, include_constant: bool = True) -> MMDEstimate:
    """Unbiased MMD^2 between generated features ``fx`` and real features ``fy``.

    Terms: mean over i != j of k(x_i, x_j), minus 2/N^2 times the full
    cross sum, plus (optionally) the mean over i != j of k(y_i, y_j).
    Gradients flow through ``fx`` only.
    """
    fx = as_tensor(fx)
    fy_data = fy.data if isinstance(fy, Tensor) else np.asarray(fy, dtype=fx.dtype)
    n = fx.shape[0]
    if n < 2:
        raise ConfigError(f"unbiased MMD^2 needs N >= 2, got N={n}")
    if fy_data.shape != fx.shape:
        raise ContractError(f"generated {fx.shape} and real {fy_data.shape} batches must match")
    sigma = None
    if spec.kind == "rbf":
        sigma = spec.sigma if spec.sigma is not None else median_bandwidth(fx, fy_data)
    fy_t = Tensor(fy_data)
    offdiag = 1.0 - np.eye(n, dtype=fx.dtype)
    k_xx = (gram(spec, fx, fx, sigma) * offdiag).sum() * (1.0 / (n * (n - 1)))
    k_xy = gram(spec, fx, fy_t, sigma).sum() * (2.0 / (n * n))
    loss = k_xx - k_xy
    if include_constant:
        with no_grad():
            k_yy = (gram(spec, fy_t, fy_t, sigma) * offdiag).sum() * (1.0 / (n * (n - 1)))
        loss = loss + k_yy.data
    return MMDEstimate(loss.item(), n, spec, include_constant, sigma, loss)


# -- feature maps --------------------------------------------------------------

@dataclass
class FeatureMap:
    """Frozen feature map. ``layers`` is a list of (W, b) arrays with silu between."""

    kind: str = "identity"
    in_dim: int = 2
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in FEATURE_MAPS:
            raise ConfigError(f"unknown feature map {self.kind!r}; expected one of {FEATURE_MAPS}")
        for W, b in self.layers:
            W.setflags(write=False)
            b.setflags(write=False)

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1] if self.layers else self.in_dim

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256(self.kind.encode())
        for W, b in self.layers:
            h.update(np.ascontiguousarray(W).tobytes())
            h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()


def featurize(fmap: FeatureMap, batch) -> Tensor:
    x = as_tensor(batch)
    if x.ndim != 2 or x.shape[1] != fmap.in_dim:
        raise ContractError(f"feature map expects (n, {fmap.in_dim}) input, got {x.shape}")
    if fmap.kind == "identity":
        return x
    h = x
    for W, b in fmap.layers:
        h = (h @ W.astype(x.dtype) + b.astype(x.dtype)).silu()
    return h


def random_projection_map(in_dim: int = 2, out_dim: int = 16, seed: int = 0) -> FeatureMap:
    rng = np.random.default_rng([seed, 0xF00D])
    W = rng.standard_normal((in_dim, out_dim)) / np.sqrt(in_dim) * 2.0
    b = rng.uniform(-1.0, 1.0, size=out_dim)
    return FeatureMap("randproj", in_dim, [(W, b)])


def train_encoder(data: np.ndarray, seed: int = 0, out_dim: int = 8, width: int = 64,
                  iterations: int = 1500, batch_size: int = 128, noise: float = 0.1,
                  lr: float = 3e-3) -> FeatureMap:
    """Fit a small denoising autoencoder on ``data``; return its frozen encoder.

    Encoder: in -> width -> out_dim (silu after each layer); decoder mirrors it
    with a linear output. Deterministic given ``seed`` and ``data``.
    """
    data = np.asarray(data, dtype=np.float64)
    in_dim = data.shape[1]
    rng = np.random.default_rng([seed, 0xE1C0])
    dims = [(in_dim, width), (width, out_dim), (out_dim, width), (width, in_dim)]
    w = {}
    for i, (a, b) in enumerate(dims):
        w[f"W{i}"] = rng.standard_normal((a, b)) / np.sqrt(a)
        w[f"b{i}"] = np.zeros(b)
    state = AdamState(AdamConfig(lr=lr))
    for _ in range(iterations):
        x = data[rng.integers(0, len(data), size=batch_size)]
        noisy = x + noise * rng.standard_normal(x.shape)
        leaves = {k: Tensor(v, requires_grad=True) for k, v in w.items()}
        h = Tensor(noisy)
        for i in range(4):
            h = h @ leaves[f"W{i}"] + leaves[f"b{i}"]
            if i < 3:
                h = h.silu()
        diff = h - x
        loss = (diff * diff).sum() * (1.0 / batch_size)
        gs = grad(loss, list(leaves.values()))
        w, state = adam_step(w, dict(zip(w, gs)), state)
    return FeatureMap("encoder", in_dim, [(w["W0"], w["b0"]), (w["W1"], w["b1"])])


def make_feature_map(kind: str, in_dim: int = 2, seed: int = 0, data: np.ndarray | None = None,
                     **kwargs) -> FeatureMap:
    if kind == "identity":
        return FeatureMap("identity", in_dim)
    if kind == "randproj":
        return random_projection_map(in_dim, seed=seed, **kwargs)
    if kind == "encoder":
        if data is None:
            raise ConfigError("the encoder feature map is trained on data; none given")
        return train_encoder(data, seed=seed, **kwargs)
    raise ConfigError(f"unknown feature map {kind!r}; expected one of {FEATURE_MAPS}")


@dataclass(frozen=True)
class MMDConfig:
    kernel: KernelSpec = field(default_factory=KernelSpec)
    feature_map: str = "identity"
    batch_size: int = 128

    def __post_init__(self):
        if self.feature_map not in FEATURE_MAPS:
            raise ConfigError(f"unknown feature map {self.feature_map!r}")
        if self.batch_size < 2:
            raise ConfigError(f"MMD batch size must be >= 2, got {self.batch_size}")
