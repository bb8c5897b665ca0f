"""MMD finetuning of a pretrained denoiser under a fixed timestep budget.

The loss is the unbiased MMD^2 between features of samples produced by the
budgeted chain and features of a real batch. Gradients go through every
chain step; each step is a checkpointed segment, and DDPM noises are drawn
up front so the chain is a deterministic function of (weights, x_T, noises).
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import DenoiserParams
from .diffcore import AdamConfig, AdamState, Tensor, adam_step, grad
from .errors import ConfigError, NonFiniteError, TrainingError
from .mmd import FeatureMap, MMDConfig, featurize, gram, mmd2_unbiased
from .sampler import SamplerKind, TimestepSubset, draw_chain_noise, run_chain
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 50
# the "initial value" for the divergence guard is the mean |loss| of this many first iterations
DIVERGENCE_BASELINE = 10


@dataclass(frozen=True)
class FinetuneConfig:
    subset: TimestepSubset
    kind: SamplerKind = SamplerKind.DDIM
    mmd: MMDConfig = field(default_factory=MMDConfig)
    adam: AdamConfig = field(default_factory=lambda: AdamConfig(lr=5e-6))
    iterations: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError(f"finetune iterations must be >= 1, got {self.iterations}")
        object.__setattr__(self, "kind", SamplerKind(self.kind))

    @property
    def batch_size(self) -> int:
        return self.mmd.batch_size


@dataclass
class FinetuneHistory:
    loss: list[float] = field(default_factory=list)
    heldout: dict[int, float] = field(default_factory=dict)
    millis: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.loss)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "heldout_mmd2", "millis"])
            for i, (l, ms) in enumerate(zip(self.loss, self.millis), start=1):
                h = self.heldout.get(i)
                w.writerow([i, f"{l:.9g}", "" if h is None else f"{h:.9g}", f"{ms:.9g}"])


@dataclass
class LossResult:
    loss: Tensor           # optimizer-facing value (real-real term omitted)
    reported: float        # full unbiased MMD^2 estimate
    params: DenoiserParams  # bound view whose leaves receive gradients
    samples: Tensor


def generator_loss(params: DenoiserParams, cfg: FinetuneConfig, real_batch: np.ndarray,
                   rng: np.random.Generator, sched: NoiseSchedule, fmap: FeatureMap,
                   checkpoint: bool = True) -> LossResult:
    """Differentiable MMD^2 of one generated batch against ``real_batch``."""
    n = cfg.batch_size
    real_batch = np.asarray(real_batch)
    if real_batch.shape[0] != n:
        raise ConfigError(f"real batch has {real_batch.shape[0]} rows, expected N={n}")
    bound = params if params.leaves() else params.bind()
    dtype = bound.dtype
    x_T, noises = draw_chain_noise(cfg.subset, cfg.kind, n, params.spec.dim, rng, dtype)
    try:
        x0 = run_chain(bound, cfg.subset, cfg.kind, x_T, noises, sched, checkpoint=checkpoint)
        fx = featurize(fmap, x0)
        fy = featurize(fmap, real_batch.astype(dtype)).data
        est = mmd2_unbiased(fx, fy, cfg.mmd.kernel, include_constant=False)
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value in sampling chain "
                            f"(timesteps {cfg.subset.timesteps}, {cfg.kind.value}): {exc}") from exc
    reported = est.value + _real_real_term(fy, cfg, est.sigma)
    return LossResult(est.tensor, reported, bound, x0)


def _real_real_term(fy: np.ndarray, cfg: FinetuneConfig, sigma) -> float:
    n = len(fy)
    k = gram(cfg.mmd.kernel, fy, fy, sigma).data
    return float((k.sum() - np.trace(k)) / (n * (n - 1)))


def finetune(params: DenoiserParams, cfg: FinetuneConfig, train_data: np.ndarray,
             sched: NoiseSchedule, fmap: FeatureMap, rng: np.random.Generator | None = None,
             heldout: np.ndarray | None = None, eval_every: int = 0, eval_reps: int = 4,
             checkpoint: bool = True) -> tuple[DenoiserParams, FinetuneHistory]:
    """Run ``cfg.iterations`` Adam steps on the MMD^2 loss; ``params`` is left untouched.

    Real batches are drawn with replacement from ``train_data``. When
    ``heldout`` and ``eval_every`` are given, a held-out MMD^2 snapshot is
    stored every ``eval_every`` iterations.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    train_data = np.asarray(train_data)
    n = cfg.batch_size
    if len(train_data) < n:
        raise ConfigError(f"training pool has {len(train_data)} rows, fewer than N={n}")
    weights = params.copy().arrays()
    state = AdamState(cfg.adam)
    history = FinetuneHistory()
    baseline = None
    over = 0
    for it in range(1, cfg.iterations + 1):
        start = time.perf_counter()
        real = train_data[rng.integers(0, len(train_data), size=n)]
        res = generator_loss(params.with_weights(weights), cfg, real, rng, sched, fmap, checkpoint)
        grads = grad(res.loss, res.params.leaves())
        weights, state = adam_step(weights, dict(zip(weights, grads)), state)
        history.loss.append(res.reported)
        history.millis.append((time.perf_counter() - start) * 1000.0)
        if it == min(DIVERGENCE_BASELINE, cfg.iterations):
            baseline = float(np.mean(np.abs(history.loss)))
        if baseline is not None:
            over = over + 1 if res.reported > DIVERGENCE_FACTOR * baseline else 0
            if over >= DIVERGENCE_PATIENCE:
                raise TrainingError(
                    f"finetuning diverged: loss above {DIVERGENCE_FACTOR}x initial ({baseline:.4g}) "
                    f"for {DIVERGENCE_PATIENCE} iterations (iteration {it})", history)
        if heldout is not None and eval_every and it % eval_every == 0:
            from .evaluate import heldout_mmd2

            rep = heldout_mmd2(params.with_weights(weights), cfg.subset, cfg.kind, heldout, cfg.mmd,
                               fmap, eval_reps, np.random.default_rng([cfg.seed, it]), sched)
            history.heldout[it] = rep.value
            log.info("finetune iter %d loss %.5g heldout %.5g", it, res.reported, rep.value)
    return params.with_weights(weights), history
