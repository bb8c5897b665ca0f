"""Sample-quality metrics: held-out MMD^2, Frechet feature distance,
k-NN precision/recall, nearest-neighbour audit, and slerp."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .denoiser import DenoiserParams
from .diffcore import ContractError, no_grad
from .errors import ConfigError
from .mmd import FeatureMap, MMDConfig, featurize, mmd2_unbiased
from .sampler import SamplerKind, TimestepSubset, sample_chain
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

COV_JITTER = 1e-10


@dataclass
class MetricReport:
    metric: str
    value: float
    std: float
    reps: int
    fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reps < 1:
            raise ContractError(f"reps must be >= 1, got {self.reps}")


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _features(fmap: FeatureMap, x) -> np.ndarray:
    with no_grad():
        return featurize(fmap, np.asarray(x, dtype=np.float64)).data


def heldout_mmd2(params: DenoiserParams, subset: TimestepSubset, kind: SamplerKind,
                 heldout: np.ndarray, mmdcfg: MMDConfig, fmap: FeatureMap, reps: int,
                 rng: np.random.Generator, sched: NoiseSchedule, n: int | None = None) -> MetricReport:
    """Mean and std over ``reps`` of the constant-included MMD^2 between a
    fresh generated batch and a held-out batch drawn without replacement."""
    if reps < 1:
        raise ConfigError(f"reps must be >= 1, got {reps}")
    n = mmdcfg.batch_size if n is None else n
    heldout = np.asarray(heldout)
    if len(heldout) < n:
        raise ConfigError(f"held-out pool has {len(heldout)} rows, fewer than N={n}")
    vals = []
    for _ in range(reps):
        gen = sample_chain(params, subset, kind, n, rng, sched).x0
        real = heldout[rng.choice(len(heldout), size=n, replace=False)]
        est = mmd2_unbiased(_features(fmap, gen), _features(fmap, real), mmdcfg.kernel, True)
        vals.append(est.value)
    vals = np.array(vals)
    fp = fingerprint({"subset": subset.timesteps, "kind": SamplerKind(kind).value,
                      "kernel": mmdcfg.kernel, "fmap": fmap.kind, "n": n})
    return MetricReport("heldout_mmd2", float(vals.mean()), float(vals.std(ddof=1)) if reps > 1 else 0.0,
                        reps, fp, {"values": vals.tolist()})


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_feature_distance(fx, fy, return_info: bool = False):
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)) of Gaussian fits.

    tr((S1 S2)^(1/2)) is computed as tr((S1^(1/2) S2 S1^(1/2))^(1/2)), the
    symmetrised product, via eigendecompositions. A singular covariance is
    regularised by adding 1e-10 to its diagonal; ``return_info`` reports it.
    """
    fx = np.asarray(fx, dtype=np.float64)
    fy = np.asarray(fy, dtype=np.float64)
    if fx.ndim == 1:
        fx = fx[:, None]
    if fy.ndim == 1:
        fy = fy[:, None]
    if len(fx) < 2 or len(fy) < 2:
        raise ContractError("Frechet distance needs at least 2 rows per batch")
    if fx.shape[1] != fy.shape[1]:
        raise ContractError(f"feature dimension mismatch {fx.shape[1]} vs {fy.shape[1]}")
    mu1, mu2 = fx.mean(axis=0), fy.mean(axis=0)
    s1 = np.atleast_2d(np.cov(fx, rowvar=False))
    s2 = np.atleast_2d(np.cov(fy, rowvar=False))
    regularized = False
    for s in (s1, s2):
        if np.linalg.eigvalsh(s).min() <= 0.0:
            regularized = True
    if regularized:
        eye = np.eye(len(s1))
        s1, s2 = s1 + COV_JITTER * eye, s2 + COV_JITTER * eye
        log.warning("singular covariance in Frechet distance; added %g to the diagonal", COV_JITTER)
    r1 = _sqrtm_psd(s1)
    cross = np.trace(_sqrtm_psd(r1 @ s2 @ r1))
    diff = mu1 - mu2
    value = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * cross)
    if return_info:
        return value, {"regularized": regularized, "jitter": COV_JITTER if regularized else 0.0}
    return value


def _pairwise(a: np.ndarray, b: np.ndarray, block: int = 1 << 22) -> np.ndarray:
    """Exact Euclidean distances, computed from differences in row blocks."""
    out = np.empty((len(a), len(b)))
    step = max(1, block // max(1, b.size))
    for i in range(0, len(a), step):
        d = a[i:i + step, None, :] - b[None, :, :]
        out[i:i + step] = np.sqrt(np.sum(d * d, axis=-1))
    return out


def _knn_radii(x: np.ndarray, k: int) -> np.ndarray:
    d = _pairwise(x, x)
    # column 0 after sorting is the point itself
    return np.sort(d, axis=1)[:, k]


def knn_precision_recall(real_feats, gen_feats, k: int = 3) -> tuple[float, float]:
    """Precision: share of generated points inside some real point's k-NN ball.
    Recall: share of real points inside some generated point's k-NN ball."""
    real = np.asarray(real_feats, dtype=np.float64)
    gen = np.asarray(gen_feats, dtype=np.float64)
    if k < 1 or k >= len(real) or k >= len(gen):
        raise ConfigError(f"k={k} must be in [1, set size) (sizes {len(real)}, {len(gen)})")
    r_real = _knn_radii(real, k)
    r_gen = _knn_radii(gen, k)
    d = _pairwise(gen, real)  # [gen, real]
    precision = float(np.mean((d <= r_real[None, :]).any(axis=1)))
    recall = float(np.mean((d <= r_gen[:, None]).any(axis=0)))
    return precision, recall


@dataclass
class NeighborTable:
    indices: np.ndarray    # (n_gen, K) into the training set
    distances: np.ndarray  # (n_gen, K), ascending per row

    @property
    def nearest(self) -> np.ndarray:
        return self.distances[:, 0]

    def to_csv(self, path: str | Path) -> None:
        K = self.indices.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample"] + [f"{c}{j + 1}" for j in range(K) for c in ("index", "distance")])
            for i, (idx, dist) in enumerate(zip(self.indices, self.distances)):
                row = [i]
                for j in range(K):
                    row += [int(idx[j]), f"{dist[j]:.9g}"]
                w.writerow(row)


def nn_audit(gen_batch, train_set, K: int, fmap: FeatureMap | None = None) -> NeighborTable:
    """Exact top-K Euclidean neighbours (in feature space) of each generated sample."""
    train_set = np.asarray(train_set, dtype=np.float64)
    if not 1 <= K <= len(train_set):
        raise ConfigError(f"K={K} must be in [1, {len(train_set)}]")
    g = np.asarray(gen_batch, dtype=np.float64)
    if fmap is not None:
        g, train_set = _features(fmap, g), _features(fmap, train_set)
    d = _pairwise(g, train_set)
    idx = np.argsort(d, axis=1, kind="stable")[:, :K]
    return NeighborTable(idx, np.take_along_axis(d, idx, axis=1))


def slerp(x0, x1, alpha: float) -> np.ndarray:
    """Spherical interpolation; linear fallback when the angle is below 1e-6."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    n0, n1 = np.linalg.norm(x0), np.linalg.norm(x1)
    if n0 == 0.0 or n1 == 0.0:
        raise ContractError("slerp endpoints must be nonzero")
    if alpha == 0.0:
        return x0.copy()
    if alpha == 1.0:
        return x1.copy()
    theta = float(np.arccos(np.clip(np.sum(x0 * x1) / (n0 * n1), -1.0, 1.0)))
    if theta < 1e-6:
        return (1.0 - alpha) * x0 + alpha * x1
    s = np.sin(theta)
    return np.sin((1.0 - alpha) * theta) / s * x0 + np.sin(alpha * theta) / s * x1


METRIC_COLUMNS = ["run_id", "metric", "value", "std", "reps", "kernel", "feature_map", "budget", "sampler"]


def append_metrics(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([r["run_id"], r["metric"], f"{r['value']:.9g}", f"{r['std']:.9g}", r["reps"],
                        r["kernel"], r["feature_map"], r["budget"], r["sampler"]])
