"""MLP noise-prediction network and its denoising-loss pretraining loop."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .diffcore import AdamConfig, AdamState, ContractError, Tensor, adam_step, as_tensor, concat, grad
from .errors import ConfigError, NonFiniteError, TrainingError
from .schedule import NoiseSchedule, corrupt_batch

log = logging.getLogger(__name__)

MAX_FREQUENCY = 1000.0


@dataclass(frozen=True)
class DenoiserSpec:
    dim: int = 2
    width: int = 128
    depth: int = 4
    time_dim: int = 32
    T: int = 100

    def __post_init__(self):
        for name in ("dim", "width", "depth", "time_dim", "T"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"DenoiserSpec.{name} must be a positive integer, got {v!r}")
        if self.time_dim % 2:
            raise ConfigError(f"DenoiserSpec.time_dim must be even, got {self.time_dim}")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        fan_in = self.dim + self.time_dim
        for i in range(self.depth):
            shapes[f"h{i}.W"] = (fan_in, self.width)
            shapes[f"h{i}.b"] = (self.width,)
            fan_in = self.width
        shapes["out.W"] = (fan_in, self.dim)
        shapes["out.b"] = (self.dim,)
        return shapes


@dataclass
class DenoiserParams:
    """Weights of the denoiser, keyed by layer name, in a fixed order.

    Values are numpy arrays for storage and optimisation, or Tensor leaves
    when bound for differentiation (see :meth:`bind`).
    """

    spec: DenoiserSpec
    weights: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = self.spec.layer_shapes()
        if list(self.weights) != list(shapes):
            raise ContractError(f"weight names {list(self.weights)} do not match spec {list(shapes)}")
        for k, s in shapes.items():
            if tuple(np.shape(self.weights[k].data if isinstance(self.weights[k], Tensor)
                              else self.weights[k])) != s:
                raise ContractError(f"weight {k!r} has wrong shape for spec (expected {s})")

    @property
    def dtype(self):
        w = next(iter(self.weights.values()))
        return w.dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: (v.data if isinstance(v, Tensor) else v) for k, v in self.weights.items()}

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.spec, {k: v.copy() for k, v in self.arrays().items()})

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.spec, {k: v.astype(dtype) for k, v in self.arrays().items()})

    def bind(self) -> "DenoiserParams":
        """View whose weights are fresh Tensor leaves that require gradients."""
        return DenoiserParams(self.spec, {k: Tensor(v, requires_grad=True, name=k)
                                          for k, v in self.arrays().items()})

    def leaves(self) -> list[Tensor]:
        return [v for v in self.weights.values() if isinstance(v, Tensor)]

    def with_weights(self, weights: dict[str, np.ndarray]) -> "DenoiserParams":
        return DenoiserParams(self.spec, dict(weights))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in self.arrays().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


def init_denoiser(spec: DenoiserSpec, rng: np.random.Generator, dtype=np.float32) -> DenoiserParams:
    weights = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            weights[name] = np.zeros(shape, dtype=dtype)
        else:
            weights[name] = (rng.standard_normal(shape) / np.sqrt(shape[0])).astype(dtype)
    return DenoiserParams(spec, weights)


def time_embedding(t, spec: DenoiserSpec, n: int, dtype) -> Tensor:
    """Sinusoidal embedding of ``t / T`` with geometric frequencies in [1, 1000]."""
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    freqs = np.exp(np.linspace(0.0, np.log(MAX_FREQUENCY), spec.time_dim // 2))
    phase = Tensor((t / spec.T)[:, None] * freqs[None, :], dtype=dtype)
    return concat([phase.sin(), phase.cos()], axis=1)


def predict_noise(params: DenoiserParams, x_t, t) -> Tensor:
    """Noise prediction for a batch ``x_t`` of shape ``(n, dim)``.

    ``t`` is a scalar timestep or one per row.
    """
    spec = params.spec
    x = as_tensor(x_t)
    if x.ndim != 2 or x.shape[1] != spec.dim:
        raise ContractError(f"x_t must have shape (n, {spec.dim}), got {x.shape}")
    w = params.weights
    h = concat([x, time_embedding(t, spec, x.shape[0], x.dtype)], axis=1)
    for i in range(spec.depth):
        h = (h @ w[f"h{i}.W"] + w[f"h{i}.b"]).silu()
    return h @ w["out.W"] + w["out.b"]


def denoising_loss(params: DenoiserParams, x_t, t, eps) -> Tensor:
    """Batch mean of the squared noise-prediction error (summed over coordinates)."""
    diff = predict_noise(params, x_t, t) - as_tensor(eps)
    return (diff * diff).sum() * (1.0 / diff.shape[0])


def pretrain(params: DenoiserParams, dataset: np.ndarray, sched: NoiseSchedule,
             opt: AdamConfig, iterations: int, rng: np.random.Generator,
             batch_size: int = 128, log_every: int = 0) -> tuple[DenoiserParams, list[float]]:
    """Train with the simplified denoising objective; returns new params and per-iteration losses."""
    dataset = np.asarray(dataset)
    if dataset.ndim != 2 or len(dataset) == 0:
        raise ContractError("dataset must be a nonempty 2-D array")
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")
    dtype = params.dtype
    weights = params.copy().arrays()
    state = AdamState(opt)
    history: list[float] = []
    for it in range(iterations):
        idx = rng.integers(0, len(dataset), size=batch_size)
        x_t, t, eps = corrupt_batch(dataset[idx].astype(dtype), rng, sched)
        bound = params.with_weights(weights).bind()
        try:
            loss = denoising_loss(bound, x_t, t, eps)
        except NonFiniteError as exc:
            raise TrainingError(f"non-finite value at iteration {it}: {exc}", history) from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at iteration {it}", history)
        grads = grad(loss, bound.leaves())
        weights, state = adam_step(weights, dict(zip(weights, grads)), state)
        history.append(value)
        if log_every and (it + 1) % log_every == 0:
            log.info("pretrain iter %d loss %.5f", it + 1, float(np.mean(history[-log_every:])))
    return params.with_weights(weights), history
