import subprocess
import sys

import numpy as np
import pytest

from steamflow.cli import main
from steamflow.harness import read_csv
from steamflow.neural import parse_sections
from steamflow.persistence import load_controller, save_controller

QUICK_CONFIG = "excitation_segments = 60\nidentification_epochs = 40\nmrc_epochs = 15\nmrc_windows = 4\n"


@pytest.fixture
def quick_cfg(tmp_path):
    path = tmp_path / "quick.cfg"
    path.write_text(QUICK_CONFIG)
    return path


def test_help_runs_as_module():
    out = subprocess.run([sys.executable, "-m", "steamflow", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("identify", "train", "run", "reproduce"):
        assert cmd in out.stdout


@pytest.mark.parametrize("argv", [[], ["fly"], ["run", "--controller", "pid"], ["run", "--seed", "x"]])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 1


def test_bad_config_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("colour = red\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "unknown key" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.cfg"), "--out", str(tmp_path)]) == 1


def test_identify_outputs(tmp_path, quick_cfg, capsys):
    assert main(["identify", "--config", str(quick_cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "dataset.csv").read_text().startswith("t,u,y\n")
    sections = parse_sections((tmp_path / "models.txt").read_text())
    assert "narx.model" in sections and "narma_l2.model" in sections
    assert "validation one-step RMSE" in capsys.readouterr().out


def test_training_failure_exits_2(tmp_path, quick_cfg, capsys):
    cfg = tmp_path / "flat.cfg"
    cfg.write_text(QUICK_CONFIG + "excitation_u_min = 1.0\nexcitation_u_max = 1.0\n")
    assert main(["identify", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["train", "--controller", "narma_l2", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "degenerate" in capsys.readouterr().err


def test_train_then_run_loaded(tmp_path, quick_cfg, capsys):
    out = str(tmp_path)
    assert main(["train", "--controller", "narma_l2", "--config", str(quick_cfg), "--out", out]) == 0
    ctl_path = tmp_path / "narma_l2.ctl"
    assert ctl_path.exists()
    assert main(["run", "--load", str(ctl_path), "--reference", "step", "--out", out]) == 0
    printed = capsys.readouterr().out
    assert "steady_state" in printed
    data = read_csv(tmp_path / "narma_l2_step.csv")
    assert data["t"].size == 300
    assert (tmp_path / "narma_l2_step.svg").read_text().lstrip().startswith("<?xml")
    # a mismatched --controller is a validation error
    assert main(["run", "--load", str(ctl_path), "--controller", "nn_predictive", "--out", out]) == 1


def test_run_with_noise_and_sine(tmp_path, quick_cfg):
    assert main(["run", "--controller", "narma_l2", "--reference", "sine", "--noise", "--config", str(quick_cfg),
                 "--out", str(tmp_path)]) == 0
    data = read_csv(tmp_path / "narma_l2_sine_noise.csv")
    assert data["t"].size == 1000
    assert not np.array_equal(data["y_true"], data["y_measured"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_controller_fault_exits_3(tmp_path, quick_bundle, capsys):
    ctl = quick_bundle.get("model_reference")
    # finite weights whose output overflows: loads fine, faults at the first step
    broken = ctl.controller_net.copy()
    broken.weights[-1][:] = 1e308
    broken.biases[-1][:] = 1e308
    saved = ctl.controller_net
    try:
        ctl.controller_net = broken
        save_controller(ctl, tmp_path / "broken.ctl")
    finally:
        ctl.controller_net = saved
    assert np.isfinite(load_controller(tmp_path / "broken.ctl").controller_net.get_flat()).all()
    assert main(["run", "--load", str(tmp_path / "broken.ctl"), "--out", str(tmp_path)]) == 3
    assert "controller fault at step 0" in capsys.readouterr().err
    # the partial record is still written
    assert (tmp_path / "model_reference_step.csv").read_text() == "t,r,y_true,y_measured,u\n"


def test_reproduce_rejects_two_seeds(tmp_path, capsys):
    assert main(["reproduce", "--seeds", "0", "1", "--out", str(tmp_path)]) == 1
