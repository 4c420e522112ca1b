import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conftest import QUICK
from steamflow.controllers import ControllerFault, MrcController, NarmaL2Controller, NmpcController
from steamflow.harness import (CONTROLLERS, PUBLISHED, ConfigError, Report, RunRecord, Scenario, build_from_config,
                               emit_csv, emit_plot, family_scenario, format_report, parse_config, read_csv,
                               reproduce_tables, run_scenario, train_controllers)
from steamflow.persistence import controller_from_text, controller_to_text, load_controller, save_controller
from steamflow.signals import NoiseConfig, ReferenceSignal


def records_equal(a, b):
    return all(np.asarray(getattr(a, k)).tobytes() == np.asarray(getattr(b, k)).tobytes()
               for k in ("t", "r", "y_true", "y_measured", "u")) and a.warnings == b.warnings


@pytest.mark.parametrize("name", CONTROLLERS)
def test_zero_reference_equilibrium(nominal_bundle, name):
    rec = run_scenario(Scenario(name, ReferenceSignal.step(0.0), duration=10.0), nominal_bundle)
    assert rec.fault is None
    assert np.max(np.abs(rec.y_true)) < 0.02
    assert np.max(np.abs(rec.u)) < 0.02 / 0.025


def test_step_scenario_reaches_reference(nominal_bundle):
    rec = run_scenario(Scenario("model_reference"), nominal_bundle)
    assert rec.metric_error is None
    assert rec.metrics.steady_state == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("name", CONTROLLERS)
def test_runs_are_deterministic(quick_bundle, name):
    sc = Scenario(name, noise=NoiseConfig(enabled=True, seed=3), duration=5.0)
    assert records_equal(run_scenario(sc, quick_bundle), run_scenario(sc, quick_bundle))


def test_record_shape(quick_bundle):
    rec = run_scenario(Scenario("narma_l2", duration=2.0), quick_bundle)
    assert len(rec) == 20 and len(rec.warnings) == 20
    assert all(len(getattr(rec, k)) == 20 for k in ("t", "r", "y_true", "y_measured", "u"))
    assert rec.y_true[0] == 0.0


def test_noise_isolation(quick_bundle):
    rec = run_scenario(Scenario("model_reference", duration=5.0), quick_bundle)
    assert np.array_equal(rec.y_measured, rec.y_true)
    noisy = run_scenario(Scenario("model_reference", noise=NoiseConfig(enabled=True), duration=5.0), quick_bundle)
    assert not np.array_equal(noisy.y_measured, noisy.y_true)


def test_noise_seed_only_changes_measurement(quick_bundle):
    before = quick_bundle.get("model_reference").controller_net.get_flat().copy()
    a = run_scenario(Scenario("model_reference", noise=NoiseConfig(enabled=True, seed=1), duration=5.0),
                     quick_bundle)
    b = run_scenario(Scenario("model_reference", noise=NoiseConfig(enabled=True, seed=2), duration=5.0),
                     quick_bundle)
    assert not np.array_equal(a.y_measured - a.y_true, b.y_measured - b.y_true)
    assert np.array_equal(before, quick_bundle.get("model_reference").controller_net.get_flat())


def test_training_seed_does_not_change_noise(quick_bundle):
    other = train_controllers(1, QUICK, only=("model_reference",))
    a_net = quick_bundle.get("model_reference").controller_net.get_flat()
    assert not np.array_equal(a_net, other.get("model_reference").controller_net.get_flat())
    sc = Scenario("model_reference", noise=NoiseConfig(enabled=True, seed=7), duration=5.0)
    a, b = run_scenario(sc, quick_bundle), run_scenario(sc, other)
    np.testing.assert_allclose(a.y_measured - a.y_true, b.y_measured - b.y_true, rtol=0, atol=1e-15)


@pytest.mark.parametrize("name", CONTROLLERS)
def test_causality_by_truncation(quick_bundle, name):
    long = run_scenario(Scenario(name, noise=NoiseConfig(enabled=True), duration=6.0), quick_bundle)
    short = run_scenario(Scenario(name, noise=NoiseConfig(enabled=True), duration=3.0), quick_bundle)
    n = len(short)
    for key in ("r", "y_true", "y_measured", "u"):
        assert np.array_equal(getattr(long, key)[:n], getattr(short, key))


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario("pid")
    with pytest.raises(ValueError):
        Scenario(duration=0.5)
    assert Scenario().duration == 30.0
    assert Scenario(reference=ReferenceSignal.sine()).duration == 100.0


def test_mismatched_sample_time_rejected(quick_bundle):
    with pytest.raises(ValueError):
        run_scenario(Scenario(sample_time=0.05, duration=2.0), quick_bundle)


class FaultyController:
    u_limits = None

    def __init__(self, fail_at):
        self.fail_at = fail_at

    def reset(self):
        self.k = 0
        return self

    def control(self, r, y):
        self.k += 1
        if self.k > self.fail_at:
            raise ControllerFault("synthetic fault")
        return 1.0


def test_fault_returns_partial_record():
    rec = run_scenario(Scenario(duration=2.0), FaultyController(5))
    assert rec.fault is not None and rec.fault.step == 5
    assert rec.fault.time == pytest.approx(0.5)
    assert len(rec) == 5 and rec.metrics is None
    assert "synthetic" in rec.fault.message


def test_saturation_is_flagged():
    class Saturating(FaultyController):
        u_limits = (-1.0, 1.0)

    rec = run_scenario(Scenario(duration=1.0), Saturating(100))
    assert all("saturated" in w for w in rec.warnings)


def small_record(n):
    t = 0.1 * np.arange(n)
    return RunRecord(t, np.ones(n), np.sin(t) / 3, np.sin(t) / 3 + 1e-3, 40 * np.cos(t) + 1 / 7)


def test_csv_layout(tmp_path):
    path = tmp_path / "r.csv"
    emit_csv(small_record(3), path)
    lines = path.read_text().split("\n")
    assert lines[-1] == "" and len(lines) - 1 == 4
    assert lines[0] == "t,r,y_true,y_measured,u"


def test_csv_round_trip(tmp_path):
    rec = small_record(50)
    emit_csv(rec, tmp_path / "r.csv")
    back = read_csv(tmp_path / "r.csv")
    for key in ("t", "r", "y_true", "y_measured", "u"):
        np.testing.assert_allclose(back[key], getattr(rec, key), rtol=1e-11, atol=1e-10)


def test_empty_csv(tmp_path):
    emit_csv(small_record(0), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "t,r,y_true,y_measured,u\n"
    assert read_csv(tmp_path / "e.csv")["t"].size == 0


def test_unwritable_paths(tmp_path):
    with pytest.raises(OSError):
        emit_csv(small_record(3), tmp_path / "missing" / "r.csv")
    with pytest.raises(OSError):
        emit_plot(small_record(3), tmp_path / "missing" / "r.svg")


def svg_strokes(path):
    root = ET.parse(path).getroot()
    assert root.tag.endswith("svg")
    return {el.get("style") for el in root.iter() if el.get("style") and "stroke:" in el.get("style")}


@pytest.mark.parametrize("n", [2, 200])
def test_plot_is_valid_svg(tmp_path, n):
    path = tmp_path / "p.svg"
    emit_plot(small_record(n), path, title="t")
    styles = svg_strokes(path)
    assert any("#1f77b4" in s for s in styles) and any("#d62728" in s for s in styles)
    assert any("dasharray" in s for s in styles if "#1f77b4" in s)


def test_plot_bytes_are_reproducible(tmp_path):
    emit_plot(small_record(20), tmp_path / "a.svg")
    emit_plot(small_record(20), tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_parse_config():
    text = "# scenario\ncontroller = nn_predictive\nreference = sine\nnoise = yes\nseed = 4\nrho = 0.1 # weight\n"
    values = parse_config(text)
    assert values == {"controller": "nn_predictive", "reference": "sine", "noise": True, "seed": 4, "rho": 0.1}
    sc, settings = build_from_config(values)
    assert sc.reference.kind == "sine" and sc.reference.amplitude == 4.0 and sc.duration == 100.0
    assert sc.noise.enabled and sc.noise.seed == 4
    assert settings.rho == 0.1 and sc.seed == 4


@pytest.mark.parametrize("text", ["colour = red\n", "seed = 1\nseed = 2\n", "seed = one\n", "noise = maybe\n",
                                  "just words\n", "reference = ramp\n", "controller = pid\n"])
def test_bad_config_rejected(text):
    with pytest.raises(ValueError):
        build_from_config(parse_config(text))


def test_config_error_is_specific():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("colour = red\n")


def test_family_scenarios_share_the_seed():
    sc = family_scenario("sine_noise", "narma_l2", 3)
    assert sc.reference.kind == "sine" and sc.noise.enabled and sc.noise.seed == 3 and sc.seed == 3
    assert not family_scenario("step", "narma_l2", 3).noise.enabled


def synthetic_report():
    seeds = [0, 1, 2]
    cell = {"rise_time": 1.0, "overshoot_pct": 2.0, "settling_time": 3.0, "steady_state": 1.0}
    results = {"step": {c: {s: dict(cell) for s in seeds} for c in CONTROLLERS},
               "sine": {c: {s: {"peak_value": 3.9 + 0.01 * s} for s in seeds} for c in CONTROLLERS}}
    results["step"]["nn_predictive"][1] = "failed"
    results["step"]["narma_l2"][2]["settling_time"] = math.inf
    return Report(seeds, results)


def test_report_format():
    rep = synthetic_report()
    text = format_report(rep)
    assert "failed" in text and "unsettled" in text
    for c in CONTROLLERS:
        for v in PUBLISHED["step"][c].values():
            assert f"{v:.3f}" in text
    assert "3.800" in text and "3.000" in text and "2.600" in text
    assert rep.median("sine", "model_reference", "peak_value") == pytest.approx(3.91)
    assert rep.values("step", "nn_predictive", "rise_time") == [1.0, 1.0]
    # an unsettled seed counts as the worst value, it is not dropped
    assert rep.median("step", "narma_l2", "settling_time") == 3.0
    assert rep.values("step", "narma_l2", "settling_time")[-1] == math.inf


def test_noise_table_publishes_table_values():
    assert [PUBLISHED["step_noise"][c]["settling_time"] for c in CONTROLLERS] == [19, 18, 25]
    assert [PUBLISHED["sine_noise"][c]["peak_value"] for c in CONTROLLERS] == [2.8, 3.7, 2.3]


def test_reproduce_needs_three_seeds():
    with pytest.raises(ValueError):
        reproduce_tables([0, 1])


def test_reproduce_marks_failed_training():
    from dataclasses import replace
    settings = replace(QUICK, excitation_u_min=1.0, excitation_u_max=1.0, excitation_segments=4)
    rep = reproduce_tables([0, 1, 2], settings, families=("step",))
    assert all(rep.results["step"]["narma_l2"][s] == "failed" for s in (0, 1, 2))
    assert "failed" in rep.text


@pytest.mark.parametrize("name", CONTROLLERS)
def test_controller_persistence_round_trip(quick_bundle, tmp_path, name):
    ctl = quick_bundle.get(name)
    save_controller(ctl, tmp_path / "c.ctl")
    back = load_controller(tmp_path / "c.ctl")
    assert type(back) is type(ctl)
    assert controller_to_text(back) == controller_to_text(ctl)
    sc = Scenario(name, duration=3.0)
    assert records_equal(run_scenario(sc, ctl), run_scenario(sc, back))


def test_persistence_rejects_unknown_type():
    with pytest.raises(ValueError):
        controller_from_text("[controller]\ntype = pid\nu_limits = none\n")
    with pytest.raises(TypeError):
        controller_to_text(object())


def test_loaded_controllers_have_expected_types(quick_bundle):
    kinds = {"narma_l2": NarmaL2Controller, "model_reference": MrcController, "nn_predictive": NmpcController}
    for name, kind in kinds.items():
        assert isinstance(controller_from_text(controller_to_text(quick_bundle.get(name))), kind)
