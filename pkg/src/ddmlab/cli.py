"""Command-line experiment runner.

Usage: ``ddmlab COMMAND [-c config.yaml] [--set key.path=value ...]``.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import functools
import hashlib
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import config_hash, dump_config, eval_mmd_config, load_config, mmd_config
from .data import deserialize_model, fmt, make_dataset, serialize_model
from .denoiser import DenoiserSpec, init_denoiser, pretrain
from .diffcore import AdamConfig, no_grad
from .errors import ConfigError
from .evaluate import (
    METRIC_COLUMNS, append_metrics, frechet_feature_distance, heldout_mmd2, knn_precision_recall,
    nn_audit, slerp,
)
from .finetune import FinetuneConfig, finetune
from .mmd import FeatureMap, MMDConfig, featurize, make_feature_map
from .sampler import SamplerKind, TimestepSubset, sample_chain, select_timesteps
from .schedule import make_schedule

log = logging.getLogger("ddmlab")

COMMANDS = ("pretrain", "finetune", "sample", "eval", "ablate-kernels", "ablate-schedule",
            "ablate-sampler", "interpolate", "nn-audit")
ALPHAS = tuple(i / 10 for i in range(11))


class RunError(RuntimeError):
    """Runtime failure reported with exit status 1."""


def _rng(cfg: dict, *labels) -> np.random.Generator:
    """Independent stream per (seed, labels); same labels give the same stream."""
    tag = int(hashlib.sha256(repr(labels).encode()).hexdigest()[:8], 16)
    return np.random.default_rng([cfg["seed"], tag])


class Lab:
    """Everything a command derives from the resolved config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self._fmaps: dict[str, FeatureMap] = {}

    @functools.cached_property
    def split(self) -> tuple[np.ndarray, np.ndarray]:
        d = self.cfg["dataset"]
        return make_dataset(d["kind"], d["n"], self.cfg["seed"]).split(d["split"])

    @property
    def train(self) -> np.ndarray:
        return self.split[0]

    @property
    def heldout(self) -> np.ndarray:
        return self.split[1]

    @functools.cached_property
    def sched(self):
        s = self.cfg["schedule"]
        return make_schedule(s["T"], s["beta_start"], s["beta_end"])

    def fmap(self, kind: str) -> FeatureMap:
        if kind not in self._fmaps:
            self._fmaps[kind] = make_feature_map(kind, self.train.shape[1], self.cfg["seed"], self.train)
        return self._fmaps[kind]

    def subset(self, budget: int | None = None, method: str | None = None) -> TimestepSubset:
        f = self.cfg["finetune"]
        return select_timesteps(method or f["method"], self.cfg["schedule"]["T"], budget or f["budget"])

    @property
    def root(self) -> Path:
        return Path(self.cfg["output_dir"])

    def checkpoint_path(self, override: str | None = None) -> Path:
        return Path(override or self.cfg["finetune"]["checkpoint"] or self.root / "pretrain" / "model.ckpt")

    def load(self, override: str | None = None):
        path = self.checkpoint_path(override)
        if not path.exists():
            raise RunError(f"checkpoint {path} not found; run `pretrain` first or set finetune.checkpoint")
        params = deserialize_model(path)
        if params.spec.T != self.cfg["schedule"]["T"]:
            raise ConfigError(f"schedule.T={self.cfg['schedule']['T']} but checkpoint {path} "
                              f"was trained with T={params.spec.T}")
        return params

    def run_dir(self, command: str, *extra) -> tuple[str, Path]:
        """Deterministic run id (output_dir excluded so reruns elsewhere match)."""
        key = {k: v for k, v in self.cfg.items() if k != "output_dir"}
        run_id = config_hash(key, command, *extra)
        out = self.root / f"{command}-{run_id}"
        out.mkdir(parents=True, exist_ok=True)
        dump_config(self.cfg, out / "config.yaml")
        return run_id, out


def _finetune_cfg(lab: Lab, subset: TimestepSubset, sampler: str, mmd: MMDConfig) -> FinetuneConfig:
    f = lab.cfg["finetune"]
    adam = AdamConfig(lr=f["lr"], beta1=f["beta1"], beta2=f["beta2"], eps=f["eps"])
    return FinetuneConfig(subset, SamplerKind(sampler), mmd, adam, f["iterations"], lab.cfg["seed"])


def _finetune(lab: Lab, params, subset, sampler: str, mmd: MMDConfig, *labels):
    fcfg = _finetune_cfg(lab, subset, sampler, mmd)
    rng = _rng(lab.cfg, "finetune", *labels)
    return finetune(params, fcfg, lab.train, lab.sched, lab.fmap(mmd.feature_map), rng)


def _row(run_id, metric, value, std, reps, kernel, fmap, budget, sampler) -> dict:
    return dict(zip(METRIC_COLUMNS, (run_id, metric, value, std, reps, kernel, fmap, budget, sampler)))


def _batched_metric(lab: Lab, params, subset, sampler, fn, label) -> np.ndarray:
    """fn(gen, real) over eval.reps fresh (generated, held-out) pairs of size eval.n."""
    e = lab.cfg["eval"]
    if len(lab.heldout) < e["n"]:
        raise ConfigError(f"eval.n={e['n']} exceeds the held-out pool ({len(lab.heldout)} rows)")
    rng = _rng(lab.cfg, "eval", label, subset.method, subset.budget, sampler)
    vals = []
    for _ in range(e["reps"]):
        gen = sample_chain(params, subset, sampler, e["n"], rng, lab.sched).x0
        real = lab.heldout[rng.choice(len(lab.heldout), size=e["n"], replace=False)]
        vals.append(fn(gen, real))
    return np.asarray(vals, dtype=np.float64)


def _features(fmap: FeatureMap, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return featurize(fmap, np.asarray(x, dtype=np.float64)).data


def evaluate_rows(lab: Lab, params, subset: TimestepSubset, sampler: str, run_id: str,
                  sampler_label: str | None = None, metrics=None) -> list[dict]:
    e = lab.cfg["eval"]
    metrics = e["metrics"] if metrics is None else metrics
    label = sampler_label or sampler
    mmd = eval_mmd_config(lab.cfg)
    rows = []
    std = lambda v: float(v.std(ddof=1)) if len(v) > 1 else 0.0  # noqa: E731
    if "heldout_mmd2" in metrics:
        rep = heldout_mmd2(params, subset, sampler, lab.heldout, mmd, lab.fmap(mmd.feature_map), e["reps"],
                           _rng(lab.cfg, "eval", "mmd", subset.method, subset.budget, sampler), lab.sched,
                           n=e["n"])
        rows.append(_row(run_id, "heldout_mmd2", rep.value, rep.std, rep.reps, mmd.kernel.kind,
                         mmd.feature_map, subset.budget, label))
    efm = lab.fmap(e["feature_map"])
    if "ffd" in metrics:
        v = _batched_metric(lab, params, subset, sampler,
                            lambda g, r: frechet_feature_distance(_features(efm, g), _features(efm, r)), "ffd")
        rows.append(_row(run_id, "ffd", float(v.mean()), std(v), len(v), "", e["feature_map"],
                         subset.budget, label))
    if "precision_recall" in metrics:
        v = _batched_metric(lab, params, subset, sampler,
                            lambda g, r: knn_precision_recall(_features(efm, r), _features(efm, g), e["k"]), "pr")
        for j, name in enumerate(("precision", "recall")):
            rows.append(_row(run_id, name, float(v[:, j].mean()), std(v[:, j]), len(v), "",
                             e["feature_map"], subset.budget, label))
    return rows


def write_metrics(path: Path, rows: list[dict]) -> None:
    path.unlink(missing_ok=True)
    append_metrics(path, rows)


def _fresh_checkpoint(path: Path) -> None:
    if path.exists():
        raise RunError(f"{path} already exists; checkpoints are never overwritten "
                       f"(choose another output_dir or remove it)")


# -- commands -------------------------------------------------------------------

def cmd_pretrain(lab: Lab, args) -> None:
    cfg = lab.cfg
    out = lab.root / "pretrain"
    _fresh_checkpoint(out / "model.ckpt")
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    d, p = cfg["denoiser"], cfg["pretrain"]
    spec = DenoiserSpec(dim=lab.train.shape[1], width=d["width"], depth=d["depth"],
                        time_dim=d["time_dim"], T=cfg["schedule"]["T"])
    params = init_denoiser(spec, _rng(cfg, "init"))
    params, history = pretrain(params, lab.train, lab.sched, AdamConfig(lr=p["lr"]), p["iterations"],
                               _rng(cfg, "pretrain"), batch_size=p["batch_size"],
                               log_every=max(1, p["iterations"] // 20))
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(history, start=1):
            w.writerow([i, fmt(v)])
    serialize_model(params, out / "model.ckpt")
    print(out / "model.ckpt")


def cmd_finetune(lab: Lab, args) -> None:
    params = lab.load(args.checkpoint)
    f = lab.cfg["finetune"]
    run_id, out = lab.run_dir("finetune", params.checksum())
    _fresh_checkpoint(out / "model.ckpt")
    tuned, history = _finetune(lab, params, lab.subset(), f["sampler"], mmd_config(lab.cfg), "main")
    history.to_csv(out / "history.csv")
    serialize_model(tuned, out / "model.ckpt")
    print(out / "model.ckpt")


def cmd_sample(lab: Lab, args) -> None:
    params = lab.load(args.checkpoint)
    f = lab.cfg["finetune"]
    run_id, out = lab.run_dir("sample", params.checksum())
    batch = sample_chain(params, lab.subset(), f["sampler"], lab.cfg["eval"]["n"],
                         _rng(lab.cfg, "sample"), lab.sched)
    batch.seed = lab.cfg["seed"]
    batch.to_csv(out / "samples.csv")
    print(out / "samples.csv")


def cmd_eval(lab: Lab, args) -> None:
    params = lab.load(args.checkpoint)
    run_id, out = lab.run_dir("eval", params.checksum())
    rows = evaluate_rows(lab, params, lab.subset(), lab.cfg["finetune"]["sampler"], run_id)
    write_metrics(out / "metrics.csv", rows)
    print(out / "metrics.csv")


# ablation cells are top-level functions of (cfg, checkpoint, cell) so they can run in workers

def _kernel_cell(cfg: dict, ckpt: str, run_id: str, kernel: str, budget: int) -> list[dict]:
    lab = Lab(cfg)
    params = lab.load(ckpt)
    subset = lab.subset(budget)
    sampler = cfg["finetune"]["sampler"]
    tuned, _ = _finetune(lab, params, subset, sampler, mmd_config(cfg, kernel), "kernel", kernel, budget)
    rows = evaluate_rows(lab, tuned, subset, sampler, run_id, metrics=["ffd"])
    for r in rows:
        r["kernel"] = kernel
    return rows


def _schedule_cell(cfg: dict, ckpt: str, run_id: str, method: str, budget: int) -> list[dict]:
    lab = Lab(cfg)
    params = lab.load(ckpt)
    subset = lab.subset(budget, method)
    sampler = cfg["finetune"]["sampler"]
    tuned, _ = _finetune(lab, params, subset, sampler, mmd_config(cfg), "schedule", method, budget)
    rows = evaluate_rows(lab, tuned, subset, sampler, run_id, f"{sampler}+ft:{method}", ["ffd"])
    for r in rows:
        r["kernel"] = cfg["finetune"]["kernel"]
    return rows


def _sampler_cell(cfg: dict, ckpt: str, run_id: str, sampler: str, budget: int) -> list[dict]:
    lab = Lab(cfg)
    params = lab.load(ckpt)
    subset = lab.subset(budget)
    metrics = ["heldout_mmd2", "ffd"]
    rows = evaluate_rows(lab, params, subset, sampler, run_id, sampler, metrics)
    tuned, _ = _finetune(lab, params, subset, sampler, mmd_config(cfg), "sampler", sampler, budget)
    rows += evaluate_rows(lab, tuned, subset, sampler, run_id, f"{sampler}+ft", metrics)
    return rows


def _sweep(lab: Lab, args, command: str, cell, grid: list[tuple]) -> None:
    ckpt = str(lab.checkpoint_path(args.checkpoint))
    params = lab.load(ckpt)
    run_id, out = lab.run_dir(command, params.checksum())
    jobs = args.jobs or lab.cfg["ablate"]["jobs"]
    calls = [(lab.cfg, ckpt, run_id, *g) for g in grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(cell, *zip(*calls)))
    else:
        results = [cell(*c) for c in calls]
    write_metrics(out / "metrics.csv", [r for rows in results for r in rows])
    print(out / "metrics.csv")


def cmd_ablate_kernels(lab: Lab, args) -> None:
    a = lab.cfg["ablate"]
    _sweep(lab, args, "ablate-kernels", _kernel_cell, [(k, b) for k in a["kernels"] for b in a["budgets"]])


def cmd_ablate_schedule(lab: Lab, args) -> None:
    budgets = lab.cfg["ablate"]["schedule_budgets"]
    for m in ("linear", "quadratic"):  # fail fast on collapsing selections
        for b in budgets:
            lab.subset(b, m)
    _sweep(lab, args, "ablate-schedule", _schedule_cell, [(m, b) for m in ("linear", "quadratic") for b in budgets])


def cmd_ablate_sampler(lab: Lab, args) -> None:
    budgets = lab.cfg["ablate"]["budgets"]
    _sweep(lab, args, "ablate-sampler", _sampler_cell, [(s, b) for s in ("ddpm", "ddim") for b in budgets])


def cmd_interpolate(lab: Lab, args) -> None:
    """DDIM samples along slerp paths between pairs of initial noises."""
    params = lab.load(args.checkpoint)
    run_id, out = lab.run_dir("interpolate", params.checksum())
    rng = _rng(lab.cfg, "interpolate")
    n, dim = lab.cfg["eval"]["n_interp"], params.spec.dim
    z0, z1 = rng.standard_normal((n, dim)), rng.standard_normal((n, dim))
    subset = lab.subset()
    with open(out / "interpolate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "alpha"] + [f"noise{j}" for j in range(dim)] + [f"sample{j}" for j in range(dim)])
        for alpha in ALPHAS:
            z = np.stack([slerp(z0[i], z1[i], alpha) for i in range(n)])
            x = sample_chain(params, subset, SamplerKind.DDIM, n, rng, lab.sched, x_T=z).x0
            for i in range(n):
                w.writerow([i, fmt(alpha)] + [fmt(v) for v in z[i]] + [fmt(v) for v in x[i]])
    print(out / "interpolate.csv")


def cmd_nn_audit(lab: Lab, args) -> None:
    params = lab.load(args.checkpoint)
    run_id, out = lab.run_dir("nn-audit", params.checksum())
    e, f = lab.cfg["eval"], lab.cfg["finetune"]
    gen = sample_chain(params, lab.subset(), f["sampler"], e["n"], _rng(lab.cfg, "nn-audit"), lab.sched).x0
    table = nn_audit(gen, lab.train, e["nn_k"], lab.fmap(e["feature_map"]))
    table.to_csv(out / "neighbors.csv")
    print(out / "neighbors.csv")


HANDLERS = {
    "pretrain": cmd_pretrain, "finetune": cmd_finetune, "sample": cmd_sample, "eval": cmd_eval,
    "ablate-kernels": cmd_ablate_kernels, "ablate-schedule": cmd_ablate_schedule,
    "ablate-sampler": cmd_ablate_sampler, "interpolate": cmd_interpolate, "nn-audit": cmd_nn_audit,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddmlab", description="Few-step diffusion finetuning experiments.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("-c", "--config", help="YAML experiment config (defaults used when omitted)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override, e.g. finetune.budget=10 (repeatable)")
    parser.add_argument("--checkpoint", help="model to load instead of finetune.checkpoint")
    parser.add_argument("--jobs", type=int, default=0, help="worker processes for ablation sweeps")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(command: str, config_path: str | None = None, overrides=(), checkpoint: str | None = None,
        jobs: int = 0) -> int:
    """Programmatic entry point; returns the process exit status."""
    argv = [command] + (["-c", config_path] if config_path else [])
    for o in overrides:
        argv += ["--set", o]
    if checkpoint:
        argv += ["--checkpoint", checkpoint]
    if jobs:
        argv += ["--jobs", str(jobs)]
    return main(argv)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 0:
            raise ConfigError(f"--jobs: expected a non-negative integer, got {args.jobs}")
        lab = Lab(load_config(args.config, args.overrides))
        HANDLERS[args.command](lab, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # every other failure is a runtime failure with diagnostics
        log.debug("traceback", exc_info=True)
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
