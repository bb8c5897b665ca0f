"""Synthetic 2-D datasets, train/held-out splits and on-disk persistence."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .denoiser import DenoiserParams, DenoiserSpec
from .errors import ConfigError

KINDS = ("ring8", "swissroll", "checkerboard")

RING_RADIUS = 2.0
RING_STD = 0.05
SWISS_NOISE = 0.1
# mean and per-coordinate std of the raw swiss roll (t ~ U[1.5pi, 4.5pi],
# point (t cos t, t sin t) / 5 plus N(0, 0.1^2) noise), by quadrature
SWISS_MEAN = (0.4, 0.04244131815783856)
SWISS_STD = (1.3283722588989975, 1.3938334164187087)


@dataclass(frozen=True)
class ToyDistribution:
    kind: str = "ring8"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}; expected one of {KINDS}")

    @property
    def dim(self) -> int:
        return 2

    def standardization(self) -> tuple[np.ndarray, np.ndarray]:
        """Fixed (mean, std) constants used to standardise raw draws."""
        if self.kind == "ring8":
            s = np.sqrt(RING_RADIUS**2 / 2 + RING_STD**2)
            return np.zeros(2), np.array([s, s])
        if self.kind == "swissroll":
            return np.array(SWISS_MEAN), np.array(SWISS_STD)
        # checkerboard: analytic moments of the uniform mixture over filled cells
        cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
        lo = np.array(cells, dtype=float) - 2.0
        m1 = (lo + 0.5).mean(axis=0)
        m2 = (lo**2 + lo + 1.0 / 3.0).mean(axis=0)
        return m1, np.sqrt(m2 - m1**2)


def ring_centers() -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return RING_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def sample_raw(dist: ToyDistribution, n: int, rng: np.random.Generator, return_labels: bool = False):
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    labels = None
    if dist.kind == "ring8":
        labels = rng.integers(0, 8, size=n)
        x = ring_centers()[labels] + RING_STD * rng.standard_normal((n, 2))
    elif dist.kind == "swissroll":
        t = 1.5 * np.pi * (1 + 2 * rng.random(n))
        x = np.stack([t * np.cos(t), t * np.sin(t)], axis=1) / 5.0
        x = x + SWISS_NOISE * rng.standard_normal((n, 2))
    else:
        cells = np.array([(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0])
        labels = rng.integers(0, len(cells), size=n)
        x = cells[labels] - 2.0 + rng.random((n, 2))
    return (x, labels) if return_labels else x


def sample_toy(dist: ToyDistribution, n: int, rng: np.random.Generator, return_labels: bool = False):
    """Draw ``n`` standardised points (float64, shape ``(n, 2)``)."""
    raw, labels = sample_raw(dist, n, rng, return_labels=True)
    mean, std = dist.standardization()
    x = (raw - mean) / std
    return (x, labels) if return_labels else x


def destandardize(dist: ToyDistribution, x: np.ndarray) -> np.ndarray:
    mean, std = dist.standardization()
    return np.asarray(x) * std + mean


@dataclass
class Dataset:
    """A generated dataset with its provenance."""

    kind: str
    seed: int
    data: np.ndarray

    @property
    def n(self) -> int:
        return len(self.data)

    def split(self, ratio: float = 0.8, seed: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        return train_heldout_split(self.data, ratio, self.seed if seed is None else seed)


def make_dataset(kind: str, n: int, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(kind, seed, sample_toy(ToyDistribution(kind), n, rng))


def train_heldout_split(data: np.ndarray, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Pure function of (seed, len(data), ratio): permute, then cut."""
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"split ratio must be in (0, 1), got {ratio}")
    n = len(data)
    cut = int(round(ratio * n))
    if cut < 1 or cut >= n:
        raise ConfigError(f"dataset of {n} rows too small for ratio {ratio}")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    return data[perm[:cut]], data[perm[cut:]]


# -- CSV + sidecar -------------------------------------------------------------

def fmt(v: float) -> str:
    return f"{float(v):.9g}"


def write_points_csv(path: Path, x: np.ndarray, header: list[str] | None = None) -> None:
    x = np.asarray(x)
    header = header or [f"x{i}" for i in range(x.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in x:
            w.writerow([fmt(v) for v in row])


def read_points_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(len(rows) - 1, -1)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    write_points_csv(path, ds.data)
    mean, std = ToyDistribution(ds.kind).standardization()
    meta = {"kind": ds.kind, "seed": ds.seed, "n": ds.n,
            "standardization": {"mean": mean.tolist(), "std": std.tolist()}}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = read_points_csv(path)
    if len(data) != meta["n"]:
        raise ValueError(f"{path}: metadata says {meta['n']} rows, file has {len(data)}")
    return Dataset(meta["kind"], meta["seed"], data)


# -- checkpoints ----------------------------------------------------------------

MAGIC = "DDMLAB-CHECKPOINT"
FORMAT_VERSION = 1
END_HEADER = "END-HEADER"


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class LengthMismatchError(CheckpointError):
    pass


def serialize_model(params: DenoiserParams, path: str | Path) -> None:
    """Write a text header (magic, version, spec, manifest) then raw <f4 payload."""
    manifest, chunks, offset = [], [], 0
    for name, arr in params.arrays().items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": a.nbytes})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = {"format": MAGIC, "version": FORMAT_VERSION, "dtype": "float32-le",
              "spec": asdict(params.spec), "payload_bytes": offset, "tensors": manifest}
    text = f"{MAGIC}\n{json.dumps(header, indent=2)}\n{END_HEADER}\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(text.encode("utf-8"))
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def deserialize_model(path: str | Path) -> DenoiserParams:
    blob = Path(path).read_bytes()
    first, _, rest = blob.partition(b"\n")
    if first.decode("utf-8", "replace") != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic {first[:32]!r})")
    marker = f"\n{END_HEADER}\n".encode()
    head, sep, payload = rest.partition(marker)
    if not sep:
        raise LengthMismatchError(f"{path}: header terminator missing")
    header = json.loads(head.decode("utf-8"))
    if header.get("version") != FORMAT_VERSION:
        raise VersionError(f"{path}: checkpoint version {header.get('version')} "
                           f"is not supported (this build reads version {FORMAT_VERSION})")
    if len(payload) != header["payload_bytes"]:
        raise LengthMismatchError(f"{path}: payload is {len(payload)} bytes, "
                                  f"manifest declares {header['payload_bytes']}")
    weights = {}
    for entry in header["tensors"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(buf) != entry["nbytes"]:
            raise LengthMismatchError(f"{path}: tensor {entry['name']!r} truncated")
        weights[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return DenoiserParams(DenoiserSpec(**header["spec"]), weights)
