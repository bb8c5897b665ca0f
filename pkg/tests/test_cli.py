import re
from pathlib import Path

import numpy as np
import pytest
import yaml

from ddmlab.cli import main, run
from ddmlab.config import load_config, parse_override
from ddmlab.errors import ConfigError

TINY = ["seed=1", "dataset.n=600", "denoiser.width=16", "denoiser.depth=2", "denoiser.time_dim=8",
        "pretrain.iterations=40", "finetune.iterations=3", "finetune.batch_size=16", "eval.reps=2",
        "eval.n=40", "eval.n_interp=3", "ablate.budgets=[2, 3, 4]", "ablate.schedule_budgets=[2, 3]"]


def invoke(command, out, *extra, config=None, jobs=0):
    return run(command, config, TINY + [f"output_dir={out}", *extra], jobs=jobs)


@pytest.fixture(scope="module")
def lab_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    assert invoke("pretrain", out) == 0
    return out


def only(out: Path, pattern: str) -> Path:
    hits = sorted(out.glob(pattern))
    assert len(hits) == 1, hits
    return hits[0]


def test_config_defaults_and_overrides():
    cfg = load_config(None, ["seed=3", "finetune.budget=10", "finetune.rbf_sigma=0.5"])
    assert cfg["finetune"]["budget"] == 10 and cfg["finetune"]["rbf_sigma"] == 0.5
    assert cfg["schedule"]["beta_start"] == pytest.approx(1e-3)
    assert cfg["schedule"]["beta_end"] == pytest.approx(0.2)
    assert parse_override("a.b=[1, 2]") == (["a", "b"], [1, 2])


@pytest.mark.parametrize("overrides, field", [
    ([], "seed"),
    (["seed=0", "pretrain.iterations=0"], "pretrain.iterations"),
    (["seed=0", "finetune.kernel=poly"], "finetune.kernel"),
    (["seed=0", "finetune.colour=red"], "finetune.colour"),
    (["seed=0", "finetune.budget=101"], "finetune.budget"),
    (["seed=0", "eval.k=600"], "eval.k"),
    (["seed=0", "nonsense"], "nonsense"),
])
def test_config_errors_name_the_field(overrides, field):
    with pytest.raises(ConfigError, match=re.escape(field)):
        load_config(None, overrides)


def test_exit_codes(tmp_path, capsys):
    assert main(["pretrain", "--set", "seed=0", "--set", "pretrain.iterations=0",
                 "--set", f"output_dir={tmp_path}"]) == 2
    assert "pretrain.iterations" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: [unclosed\n")
    assert main(["eval", "-c", str(bad)]) == 2
    assert main(["not-a-command"]) == 2
    assert invoke("eval", tmp_path / "empty") == 1  # no checkpoint yet
    assert "not found" in capsys.readouterr().err


def test_yaml_config_file(tmp_path, lab_dir):
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(yaml.safe_dump({"seed": 1, "finetune": {"sampler": "ddpm"}}))
    assert invoke("sample", lab_dir, config=str(cfg)) == 0


def test_pretrain_never_overwrites(lab_dir):
    ckpt = lab_dir / "pretrain" / "model.ckpt"
    before = ckpt.read_bytes()
    assert invoke("pretrain", lab_dir) == 1
    assert ckpt.read_bytes() == before
    loss = (lab_dir / "pretrain" / "loss.csv").read_text()
    assert loss.startswith("iteration,loss\n") and loss.count("\n") == 41


def test_finetune_writes_new_checkpoint(lab_dir):
    assert invoke("finetune", lab_dir) == 0
    d = only(lab_dir, "finetune-*")
    assert (d / "model.ckpt").exists() and (d / "history.csv").read_text().count("\n") == 4
    assert invoke("finetune", lab_dir) == 1  # same run id, checkpoint exists
    assert invoke("eval", lab_dir, "eval.metrics=[heldout_mmd2]", f"finetune.checkpoint={d / 'model.ckpt'}") == 0


def test_ablate_kernels_grid_and_reproducible(lab_dir, tmp_path):
    assert invoke("ablate-kernels", lab_dir) == 0
    first = only(lab_dir, "ablate-kernels-*") / "metrics.csv"
    lines = first.read_text().splitlines()
    assert lines[0] == "run_id,metric,value,std,reps,kernel,feature_map,budget,sampler"
    assert len(lines) == 10
    assert {(r.split(",")[5], r.split(",")[7]) for r in lines[1:]} == {
        (k, str(b)) for k in ("linear", "cubic", "rbf") for b in (2, 3, 4)}
    other = tmp_path / "again"
    assert run("ablate-kernels", None, TINY + [f"output_dir={other}"],
               checkpoint=str(lab_dir / "pretrain" / "model.ckpt"), jobs=2) == 0
    assert only(other, "ablate-kernels-*").joinpath("metrics.csv").read_bytes() == first.read_bytes()


def test_ablate_schedule_and_sampler(lab_dir):
    assert invoke("ablate-schedule", lab_dir) == 0
    rows = only(lab_dir, "ablate-schedule-*").joinpath("metrics.csv").read_text().splitlines()[1:]
    assert len(rows) == 4
    assert invoke("ablate-sampler", lab_dir) == 0
    rows = only(lab_dir, "ablate-sampler-*").joinpath("metrics.csv").read_text().splitlines()[1:]
    assert {r.split(",")[8] for r in rows} == {"ddpm", "ddpm+ft", "ddim", "ddim+ft"}
    assert len(rows) == 2 * 3 * 2 * 2
    assert invoke("ablate-schedule", lab_dir, "ablate.schedule_budgets=[20]") == 2  # quadratic collapses


def test_interpolate_and_nn_audit(lab_dir):
    assert invoke("interpolate", lab_dir) == 0
    text = only(lab_dir, "interpolate-*").joinpath("interpolate.csv").read_text()
    rows = [r.split(",") for r in text.splitlines()[1:]]
    assert len(rows) == 11 * 3
    assert sorted({float(r[1]) for r in rows}) == pytest.approx([i / 10 for i in range(11)])
    assert invoke("nn-audit", lab_dir) == 0
    nn = only(lab_dir, "nn-audit-*").joinpath("neighbors.csv").read_text().splitlines()
    assert len(nn) == 41 and nn[0].startswith("sample,index1,distance1")


def test_every_artifact_dir_has_resolved_config(lab_dir):
    dirs = [p.parent for p in lab_dir.glob("*/config.yaml")]
    assert len(dirs) >= 5
    for d in dirs:
        cfg = yaml.safe_load((d / "config.yaml").read_text())
        assert cfg["seed"] == 1 and cfg["denoiser"]["width"] == 16
        assert cfg["schedule"]["beta_end"] == pytest.approx(0.2)
        for csv_file in d.glob("*.csv"):
            assert csv_file.read_text().endswith("\n")


def test_float_format_nine_digits(lab_dir):
    text = only(lab_dir, "ablate-kernels-*").joinpath("metrics.csv").read_text()
    for row in text.splitlines()[1:]:
        value = row.split(",")[2]
        assert value == f"{float(value):.9g}"
        assert np.isfinite(float(value))
