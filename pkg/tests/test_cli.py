import json

import pytest
from click.testing import CliRunner

from im2im_adv.cli import main
from im2im_adv.report import CSV_COLUMNS

TINY = """
n_test = 6
[dataset]
n = 20
height = 16
width = 16
classes = 3
seed = 1
[train]
epochs = 3
width = 8
[flow]
xi_f = 1.0
iters = 5
[universal]
xi = 500.0
max_passes = 1
[grid]
rotations = [0.0, 2.0]
[sweep]
xi = [10.0, 500.0]
xi_f = [1.0, 2.0]
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return p


def _run(args):
    res = CliRunner().invoke(main, args)
    return res


def test_train_toy_and_evaluate(cfg, tmp_path):
    out = tmp_path / "o"
    res = _run(["--config", str(cfg), "--out", str(out), "train-toy", "--epochs", "2"])
    assert res.exit_code == 0, res.output
    info = json.loads(res.output)
    assert (out / "model").exists() and 0 <= info["classifier_train_accuracy"] <= 1
    res = _run(["--config", str(cfg), "--out", str(out), "evaluate", "--checkpoint", str(out / "model")])
    assert res.exit_code == 0, res.output
    assert res.output.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert len(res.output.splitlines()) == 7


@pytest.mark.parametrize("args", [
    ["attack", "flow", "--xi-f", "1", "--iters", "3"],
    ["attack", "universal", "--xi", "200", "--p", "inf"],
    ["attack", "physical", "--norm", "l2"],
])
def test_attack_commands(cfg, tmp_path, args):
    res = _run(["--config", str(cfg), "--out", str(tmp_path), "--seed", "2", *args])
    assert res.exit_code == 0, res.output
    lines = res.output.splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS) and len(lines) == 7
    assert list(tmp_path.glob("*/figures/*.png"))


def test_rule_violation_exits_nonzero(cfg, tmp_path):
    res = _run(["--config", str(cfg), "--out", str(tmp_path), "attack", "flow", "--domain", "input", "--timing", "training"])
    assert res.exit_code == 2 and "rule violated" in res.output


def test_report_reaggregates(cfg, tmp_path):
    _run(["--config", str(cfg), "--out", str(tmp_path), "attack", "flow", "--iters", "3", "--no-figures"])
    res = _run(["report", str(tmp_path / "flow")])
    assert res.exit_code == 0, res.output
    lines = res.output.splitlines()
    assert lines[0] == "metric,mean,std,n" and any(l.startswith("psnr,") for l in lines)
    assert list((tmp_path / "flow" / "figures").glob("flow_*.png"))


def test_sweep_command(cfg, tmp_path):
    res = _run(["--config", str(cfg), "--out", str(tmp_path), "sweep"])
    assert res.exit_code == 0, res.output
    lines = res.output.splitlines()
    assert len(lines) == 1 + 2 + 2 + 1
    assert (tmp_path / "summary.csv").exists()
    assert (tmp_path / "figures" / "flow_sweep.png").exists()
