"""Experiment configuration: YAML schema, dotted overrides and validation.

Schema (every key optional except ``seed``; defaults shown)::

    seed: 0                       # mandatory integer
    output_dir: runs
    dataset:   {kind: ring8, n: 20000, split: 0.8}
    schedule:  {T: 100, beta_start: null, beta_end: null}   # null -> 1e-4, 2e-2 scaled by 1000/T
    denoiser:  {width: 128, depth: 4, time_dim: 32}
    pretrain:  {iterations: 20000, batch_size: 128, lr: 2.0e-4}
    finetune:
      checkpoint: null            # defaults to <output_dir>/pretrain/model.ckpt
      budget: 5
      method: linear              # linear | quadratic
      sampler: ddim               # ddim | ddpm
      kernel: cubic               # linear | cubic | rbf
      rbf_sigma: median           # positive number or "median"
      feature_map: identity       # identity | randproj | encoder
      lr: 5.0e-6
      beta1: 0.9
      beta2: 0.999
      eps: 1.0e-8
      iterations: 500
      batch_size: 128
    eval:
      reps: 10
      n: 500
      metrics: [heldout_mmd2, ffd, precision_recall]
      k: 3
      kernel: rbf                 # held-out MMD^2 kernel, independent of the finetuning kernel
      rbf_sigma: 0.5              # positive number or "median"
      feature_map: identity       # feature space for held-out MMD^2, FFD and precision/recall
      nn_k: 5                     # neighbours listed by nn-audit
      n_interp: 16                # latent pairs for interpolate
    ablate:
      kernels: [linear, cubic, rbf]
      budgets: [5, 10, 20]        # kernel and sampler sweeps
      schedule_budgets: [5, 10]   # quadratic selection collapses at T=100, budget 20
      jobs: 1                     # >1 runs independent cells in worker processes
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .mmd import FEATURE_MAPS, KERNELS, KernelSpec, MMDConfig
from .schedule import scaled_beta_range

DATA_KINDS = ("ring8", "swissroll", "checkerboard")
METRICS = ("heldout_mmd2", "ffd", "precision_recall")

DEFAULTS: dict[str, Any] = {
    "seed": None,
    "output_dir": "runs",
    "dataset": {"kind": "ring8", "n": 20000, "split": 0.8},
    "schedule": {"T": 100, "beta_start": None, "beta_end": None},
    "denoiser": {"width": 128, "depth": 4, "time_dim": 32},
    "pretrain": {"iterations": 20000, "batch_size": 128, "lr": 2e-4},
    "finetune": {
        "checkpoint": None, "budget": 5, "method": "linear",
        "sampler": "ddim", "kernel": "cubic", "rbf_sigma": "median", "feature_map": "identity",
        "lr": 5e-6, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8, "iterations": 500, "batch_size": 128,
    },
    "eval": {"reps": 10, "n": 500, "metrics": list(METRICS), "k": 3, "kernel": "rbf", "rbf_sigma": 0.5,
             "feature_map": "identity",
             "nn_k": 5, "n_interp": 16},
    "ablate": {"kernels": list(KERNELS), "budgets": [5, 10, 20], "schedule_budgets": [5, 10], "jobs": 1},
}


def _merge(base: dict, new: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in new.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"{where}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where}: expected a mapping, got {val!r}")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=c`` -> (["a", "b"], yaml-typed c)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"override {text!r} has an empty key segment")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value: {exc}") from exc
    return parts, value


def apply_override(tree: dict, parts: list[str], value: Any) -> None:
    node = tree
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"{'.'.join(parts[:i + 1])}: unknown section")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"{'.'.join(parts)}: unknown key")
    node[parts[-1]] = value


def load_config(path: str | Path | None, overrides: list[str] = ()) -> dict:
    """Read YAML (or start from defaults), apply overrides, validate."""
    raw: dict = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    for text in overrides:
        apply_override(cfg, *parse_override(text))
    return validate(cfg)


def _int(cfg: dict, key: str, lo: int, where: str) -> None:
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{where}.{key}: expected an integer >= {lo}, got {v!r}")


def _pos(cfg: dict, key: str, where: str) -> None:
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
        raise ConfigError(f"{where}.{key}: expected a positive number, got {v!r}")
    cfg[key] = float(v)


def _choice(cfg: dict, key: str, options, where: str) -> None:
    if cfg[key] not in options:
        raise ConfigError(f"{where}.{key}: {cfg[key]!r} not one of {list(options)}")


def validate(cfg: dict) -> dict:
    """Type/range checks with field-level messages; fills derived defaults in place."""
    seed = cfg["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed: a non-negative integer is mandatory, got {seed!r}")
    if not isinstance(cfg["output_dir"], str) or not cfg["output_dir"]:
        raise ConfigError(f"output_dir: expected a path string, got {cfg['output_dir']!r}")

    d = cfg["dataset"]
    _choice(d, "kind", DATA_KINDS, "dataset")
    _int(d, "n", 4, "dataset")
    if not isinstance(d["split"], (int, float)) or not 0 < d["split"] < 1:
        raise ConfigError(f"dataset.split: expected a number in (0, 1), got {d['split']!r}")

    s = cfg["schedule"]
    _int(s, "T", 1, "schedule")
    lo, hi = scaled_beta_range(s["T"])
    s["beta_start"] = lo if s["beta_start"] is None else s["beta_start"]
    s["beta_end"] = hi if s["beta_end"] is None else s["beta_end"]
    _pos(s, "beta_start", "schedule")
    _pos(s, "beta_end", "schedule")
    if not s["beta_start"] <= s["beta_end"] < 1:
        raise ConfigError(f"schedule: need beta_start <= beta_end < 1, got {s['beta_start']}, {s['beta_end']}")

    for key in ("width", "depth", "time_dim"):
        _int(cfg["denoiser"], key, 1, "denoiser")
    if cfg["denoiser"]["time_dim"] % 2:
        raise ConfigError("denoiser.time_dim: must be even")

    p = cfg["pretrain"]
    _int(p, "iterations", 1, "pretrain")
    _int(p, "batch_size", 1, "pretrain")
    _pos(p, "lr", "pretrain")

    f = cfg["finetune"]
    _int(f, "budget", 1, "finetune")
    if f["budget"] > s["T"]:
        raise ConfigError(f"finetune.budget: {f['budget']} exceeds T={s['T']}")
    _choice(f, "method", ("linear", "quadratic"), "finetune")
    _choice(f, "sampler", ("ddim", "ddpm"), "finetune")
    _choice(f, "kernel", KERNELS, "finetune")
    _choice(f, "feature_map", FEATURE_MAPS, "finetune")
    if f["rbf_sigma"] != "median":
        _pos(f, "rbf_sigma", "finetune")
    for key in ("lr", "eps"):
        _pos(f, key, "finetune")
    for key in ("beta1", "beta2"):
        if not isinstance(f[key], (int, float)) or not 0 <= f[key] < 1:
            raise ConfigError(f"finetune.{key}: expected a number in [0, 1), got {f[key]!r}")
    _int(f, "iterations", 1, "finetune")
    _int(f, "batch_size", 2, "finetune")
    if f["checkpoint"] is not None and not isinstance(f["checkpoint"], str):
        raise ConfigError(f"finetune.checkpoint: expected a path or null, got {f['checkpoint']!r}")

    e = cfg["eval"]
    for key, lo in (("reps", 1), ("n", 2), ("k", 1), ("nn_k", 1), ("n_interp", 1)):
        _int(e, key, lo, "eval")
    if not isinstance(e["metrics"], list) or not set(e["metrics"]) <= set(METRICS):
        raise ConfigError(f"eval.metrics: expected a subset of {list(METRICS)}, got {e['metrics']!r}")
    _choice(e, "feature_map", FEATURE_MAPS, "eval")
    _choice(e, "kernel", KERNELS, "eval")
    if e["rbf_sigma"] != "median":
        _pos(e, "rbf_sigma", "eval")
    if e["k"] >= e["n"]:
        raise ConfigError(f"eval.k: {e['k']} must be smaller than eval.n={e['n']}")

    a = cfg["ablate"]
    if not isinstance(a["kernels"], list) or not a["kernels"] or not set(a["kernels"]) <= set(KERNELS):
        raise ConfigError(f"ablate.kernels: expected a nonempty subset of {list(KERNELS)}, got {a['kernels']!r}")
    for key in ("budgets", "schedule_budgets"):
        if not isinstance(a[key], list) or not a[key]:
            raise ConfigError(f"ablate.{key}: expected a nonempty list, got {a[key]!r}")
        for b in a[key]:
            if isinstance(b, bool) or not isinstance(b, int) or not 1 <= b <= s["T"]:
                raise ConfigError(f"ablate.{key}: {b!r} is not an integer in [1, T={s['T']}]")
    _int(a, "jobs", 1, "ablate")
    return cfg


def mmd_config(cfg: dict, kernel: str | None = None) -> MMDConfig:
    """The finetuning objective's MMD settings."""
    f = cfg["finetune"]
    sigma = None if f["rbf_sigma"] == "median" else float(f["rbf_sigma"])
    return MMDConfig(KernelSpec(kernel or f["kernel"], sigma), f["feature_map"], f["batch_size"])


def eval_mmd_config(cfg: dict) -> MMDConfig:
    """Held-out MMD^2 settings; batch size is eval.n."""
    e = cfg["eval"]
    sigma = None if e["rbf_sigma"] == "median" else float(e["rbf_sigma"])
    return MMDConfig(KernelSpec(e["kernel"], sigma), e["feature_map"], e["n"])


def config_hash(cfg: dict, *extra) -> str:
    blob = json.dumps([cfg, *extra], sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def dump_config(cfg: dict, path: Path) -> None:
    path.write_text(yaml.safe_dump(cfg, sort_keys=True))
