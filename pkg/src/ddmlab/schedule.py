"""Linear beta schedules and the closed-form forward (noising) process."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ContractError, Tensor, as_tensor
from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients, indexed so that ``alpha_bar[0] == 1``.

    ``beta``, ``alpha`` and ``alpha_bar`` all have length ``T + 1``; entry
    ``t`` belongs to timestep ``t`` and entry 0 is the clean-data convention
    (``beta[0] = 0``).
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for arr in (self.beta, self.alpha, self.alpha_bar):
            arr.setflags(write=False)

    def sqrt_alpha_bar(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bar[t]))

    def sqrt_one_minus_alpha_bar(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bar[t]))

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.beta, self.alpha, self.alpha_bar):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, int(T), dtype=np.float64)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(int(T), beta, alpha, alpha_bar)


def _check_t(t: int, sched: NoiseSchedule, allow_zero: bool = False) -> None:
    lo = 0 if allow_zero else 1
    if not (lo <= int(t) <= sched.T):
        raise ContractError(f"timestep {t} outside [{lo}, {sched.T}]")


def forward_marginal(x0, t: int, eps, sched: NoiseSchedule, *, allow_zero: bool = False):
    """Sample of x_t given x_0: ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``.

    Works on numpy arrays or Tensors. ``t`` is a scalar timestep; use
    :func:`corrupt_batch` for per-row timesteps. ``allow_zero`` admits the
    ``t = 0`` convention (returns ``x0``).
    """
    _check_t(t, sched, allow_zero)
    if np.shape(x0) != np.shape(eps):
        raise ContractError(f"eps shape {np.shape(eps)} != x0 shape {np.shape(x0)}")
    a = sched.sqrt_alpha_bar(t)
    b = sched.sqrt_one_minus_alpha_bar(t)
    if isinstance(x0, Tensor) or isinstance(eps, Tensor):
        return as_tensor(x0) * a + as_tensor(eps) * b
    x0 = np.asarray(x0)
    return (a * x0 + b * np.asarray(eps)).astype(np.result_type(x0, eps), copy=False)


def corrupt_batch(batch: np.ndarray, rng: np.random.Generator, sched: NoiseSchedule):
    """Noise each row at an independent uniform timestep in ``1..T``.

    Returns ``(x_t, t, eps)`` with ``t`` of shape ``(n,)``.
    """
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.shape[0] == 0:
        raise ContractError(f"batch must be a nonempty 2-D array, got shape {batch.shape}")
    n = batch.shape[0]
    t = rng.integers(1, sched.T + 1, size=n)
    eps = rng.standard_normal(batch.shape).astype(batch.dtype, copy=False)
    a = np.sqrt(sched.alpha_bar[t]).astype(batch.dtype)[:, None]
    b = np.sqrt(1.0 - sched.alpha_bar[t]).astype(batch.dtype)[:, None]
    return a * batch + b * eps, t, eps


def scaled_beta_range(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> tuple[float, float]:
    """Endpoints rescaled by 1000/T so that a short chain still ends near N(0, I).

    At T=1000 this is the identity; at T=100 it gives (1e-3, 0.2).
    """
    scale = 1000.0 / T
    return beta_start * scale, min(beta_end * scale, 0.999)
