"""Timestep subsets and the DDIM / DDPM reverse-process samplers.

The step functions work on Tensors so the same code runs inside the
differentiable finetuning chain and in plain (no-grad) sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable

import numpy as np

from .denoiser import DenoiserParams, predict_noise
from .diffcore import ContractError, Tensor, as_tensor, checkpoint_segment, no_grad
from .errors import ConfigError
from .schedule import NoiseSchedule


class SamplerKind(str, Enum):
    DDPM = "ddpm"
    DDIM = "ddim"


@dataclass(frozen=True)
class TimestepSubset:
    method: str
    T: int
    timesteps: tuple[int, ...]  # descending, ends at >= 1; 0 is the implicit target

    @property
    def budget(self) -> int:
        return len(self.timesteps)

    def pairs(self) -> list[tuple[int, int]]:
        """(t, t_prev) for every step of the chain, ending at t_prev = 0."""
        seq = list(self.timesteps) + [0]
        return list(zip(seq[:-1], seq[1:]))


def select_timesteps(method: str, T: int, budget: int) -> TimestepSubset:
    """Linear ``floor(c*i)`` (c = T/budget) or quadratic ``floor(c*i^2)`` (c = T/budget^2).

    The largest selected timestep is T. Flooring collisions are an error,
    never silently dropped.
    """
    if not 1 <= budget <= T:
        raise ConfigError(f"budget must be in [1, T={T}], got {budget}")
    i = np.arange(1, budget + 1, dtype=np.int64)
    if method == "linear":
        # integer arithmetic: floor(T*i/budget) is exact
        taus = (T * i) // budget
    elif method == "quadratic":
        taus = (T * i * i) // (budget * budget)
    else:
        raise ConfigError(f"unknown timestep selection method {method!r}")
    taus = np.clip(taus, 1, T)
    uniq = np.unique(taus)
    if len(uniq) < budget:
        raise ConfigError(
            f"{method} selection with T={T}, budget={budget} collapses to {len(uniq)} distinct timesteps")
    return TimestepSubset(method, T, tuple(int(v) for v in uniq[::-1]))


def ddim_update(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """Deterministic (sigma = 0) DDIM update given a noise prediction."""
    ab_t = float(sched.alpha_bar[t])
    ab_p = float(sched.alpha_bar[t_prev])
    x_t, eps_hat = as_tensor(x_t), as_tensor(eps_hat)
    x0_pred = (x_t - eps_hat * np.sqrt(1.0 - ab_t)) * (1.0 / np.sqrt(ab_t))
    return x0_pred * np.sqrt(ab_p) + eps_hat * np.sqrt(1.0 - ab_p)


def ddim_step(params: DenoiserParams, x_t, t: int, t_prev: int, sched: NoiseSchedule):
    if t_prev == t:
        return as_tensor(x_t)
    if not 0 <= t_prev < t <= sched.T:
        raise ContractError(f"ddim_step needs 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    return ddim_update(x_t, predict_noise(params, x_t, t), t, t_prev, sched)


def ddpm_coefficients(t: int, t_prev: int, sched: NoiseSchedule) -> tuple[float, float, float]:
    """(1/sqrt(a), b/sqrt(1-abar_t), sigma) for a jump t -> t_prev.

    ``a = abar_t / abar_{t_prev}`` and ``b = 1 - a`` reduce to alpha_t and
    beta_t when ``t_prev = t - 1``; sigma^2 = b.
    """
    a = float(sched.alpha_bar[t] / sched.alpha_bar[t_prev])
    b = 1.0 - a
    return 1.0 / np.sqrt(a), b / np.sqrt(1.0 - float(sched.alpha_bar[t])), np.sqrt(b)


def ddpm_update(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule, noise=None):
    c_in, c_eps, sigma = ddpm_coefficients(t, t_prev, sched)
    mean = (as_tensor(x_t) - as_tensor(eps_hat) * c_eps) * c_in
    if noise is None or t_prev == 0:
        return mean
    return mean + as_tensor(noise) * sigma


def ddpm_step(params: DenoiserParams, x_t, t: int, sched: NoiseSchedule, noise=None,
              t_prev: int | None = None):
    """Ancestral step ``mu_theta(x_t, t) + sigma_t * noise``; noise is ignored on the final step."""
    t_prev = t - 1 if t_prev is None else t_prev
    if not 0 <= t_prev < t <= sched.T:
        raise ContractError(f"ddpm_step needs 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    return ddpm_update(x_t, predict_noise(params, x_t, t), t, t_prev, sched, noise)


@dataclass
class SampleBatch:
    x0: np.ndarray
    x_T: np.ndarray
    noises: list[np.ndarray] = field(default_factory=list)
    subset: TimestepSubset | None = None
    kind: SamplerKind = SamplerKind.DDIM
    seed: int | None = None

    def to_csv(self, path: str | Path) -> None:
        from .data import write_points_csv

        path = Path(path)
        write_points_csv(path, self.x0)
        meta = {"seed": self.seed, "kind": SamplerKind(self.kind).value,
                "method": self.subset.method if self.subset else None,
                "timesteps": list(self.subset.timesteps) if self.subset else None,
                "n": int(len(self.x0))}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def draw_chain_noise(subset: TimestepSubset, kind: SamplerKind, n: int, dim: int,
                     rng: np.random.Generator, dtype=np.float32):
    """Initial x_T plus, for DDPM, one noise array per non-final step."""
    x_T = rng.standard_normal((n, dim)).astype(dtype)
    noises = []
    if SamplerKind(kind) is SamplerKind.DDPM:
        noises = [rng.standard_normal((n, dim)).astype(dtype) for _ in range(subset.budget - 1)]
    return x_T, noises


def run_chain(params: DenoiserParams, subset: TimestepSubset, kind: SamplerKind, x_T,
              noises, sched: NoiseSchedule, checkpoint: bool = True) -> Tensor:
    """Iterate the reverse process over ``subset`` down to t = 0.

    With ``checkpoint`` each timestep is one recompute-on-backward segment
    whose explicit inputs are the state, that step's noise and the weights.
    """
    kind = SamplerKind(kind)
    if subset.T != sched.T:
        raise ContractError(f"subset built for T={subset.T}, schedule has T={sched.T}")
    names = list(params.weights)
    weights = [params.weights[k] for k in names]
    x = as_tensor(x_T)
    for i, (t, t_prev) in enumerate(subset.pairs()):
        noise = noises[i] if kind is SamplerKind.DDPM and t_prev > 0 else None
        step = _make_step(params, names, kind, t, t_prev, sched, noise is not None)
        args = (x, as_tensor(noise)) if noise is not None else (x,)
        x = checkpoint_segment(step, *args, *weights) if checkpoint else step(*args, *weights)
    return x


def _make_step(params: DenoiserParams, names, kind, t, t_prev, sched, has_noise) -> Callable:
    def step(x, *rest):
        noise, w = (rest[0], rest[1:]) if has_noise else (None, rest)
        p = params.with_weights(dict(zip(names, w)))
        if kind is SamplerKind.DDIM:
            return ddim_step(p, x, t, t_prev, sched)
        return ddpm_step(p, x, t, sched, noise, t_prev=t_prev)
    return step


def sample_chain(params: DenoiserParams, subset: TimestepSubset, kind: SamplerKind, n: int,
                 rng: np.random.Generator, sched: NoiseSchedule, x_T=None) -> SampleBatch:
    """Draw ``n`` samples. DDIM is deterministic given ``x_T``."""
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    kind = SamplerKind(kind)
    dtype = params.dtype
    drawn_x_T, noises = draw_chain_noise(subset, kind, n, params.spec.dim, rng, dtype)
    x_T = drawn_x_T if x_T is None else np.asarray(x_T, dtype=dtype)
    with no_grad():
        x0 = run_chain(params.astype(dtype), subset, kind, x_T, noises, sched, checkpoint=False)
    return SampleBatch(x0.data, x_T, noises, subset, kind)
