"""Shared fixtures. The pretrained ring8 model is built once per session and
cached on disk, keyed by the training settings and the source it depends on."""

import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import pytest

import ddmlab
from ddmlab.data import deserialize_model, make_dataset, serialize_model
from ddmlab.denoiser import DenoiserSpec, init_denoiser, pretrain
from ddmlab.diffcore import AdamConfig
from ddmlab.schedule import make_schedule, scaled_beta_range

PRETRAIN = {"kind": "ring8", "n": 20000, "seed": 0, "T": 100, "iterations": 20000, "lr": 2e-4,
            "batch_size": 128}


class Ring8:
    def __init__(self, params, history, train, heldout, sched):
        self.params, self.history = params, history
        self.train, self.heldout, self.sched = train, heldout, sched


def _source_key() -> str:
    h = hashlib.sha256(json.dumps(PRETRAIN, sort_keys=True).encode())
    root = Path(ddmlab.__file__).parent
    for name in ("diffcore.py", "schedule.py", "denoiser.py", "data.py"):
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def ring8(request) -> Ring8:
    p = PRETRAIN
    ds = make_dataset(p["kind"], p["n"], p["seed"])
    train, heldout = ds.split()
    sched = make_schedule(p["T"], *scaled_beta_range(p["T"]))
    cache = Path(request.config.cache.mkdir("ddmlab")) / f"ring8-{_source_key()}"
    ckpt, hist = cache.with_suffix(".ckpt"), cache.with_suffix(".npy")
    if ckpt.exists() and hist.exists():
        return Ring8(deserialize_model(ckpt), np.load(hist).tolist(), train, heldout, sched)
    params = init_denoiser(DenoiserSpec(T=p["T"]), np.random.default_rng(p["seed"]))
    params, history = pretrain(params, train, sched, AdamConfig(lr=p["lr"]), p["iterations"],
                               np.random.default_rng([p["seed"], 1]), batch_size=p["batch_size"])
    serialize_model(params, ckpt)
    np.save(hist, np.array(history))
    # reload so the fixture sees exactly the float32 round-trip the CLI sees
    return Ring8(deserialize_model(ckpt), history, train, heldout, sched)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(mod.RESULTS):
        for line in mod.RESULTS[c]:
            terminalreporter.write_line(line)
