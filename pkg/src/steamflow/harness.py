"""Closed-loop scenario runner, trace output and the multi-seed comparison report."""

from __future__ import annotations

import csv
import math
import statistics
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .controllers import (ControllerFault, MrcTrainingSignals, NarmaL2Controller, NmpcController,
                          ReferenceModel, train_mrc)
from .neural import TrainConfig, TrainingError
from .plant import PlantInputError, make_plant
from .signals import (MetricUndefinedError, NoiseConfig, NoiseGenerator, ReferenceSignal, step_metrics,
                      track_metrics)
from .sysid import ExcitationConfig, NarmaL2Model, NarxModel, collect_dataset

CONTROLLERS = ("narma_l2", "model_reference", "nn_predictive")
LABELS = {"narma_l2": "NARMA-L2", "model_reference": "Model Reference", "nn_predictive": "NN Predictive"}

STEP_METRICS = ("rise_time", "overshoot_pct", "settling_time", "steady_state")
SINE_METRICS = ("peak_value",)

# published figures, per scenario family and controller
PUBLISHED = {
    "step": {
        "narma_l2": {"rise_time": 2.4, "overshoot_pct": 6.0, "settling_time": 11.0, "steady_state": 1.0},
        "model_reference": {"rise_time": 2.45, "overshoot_pct": 1.02, "settling_time": 9.0, "steady_state": 1.0},
        "nn_predictive": {"rise_time": 2.45, "overshoot_pct": 13.33, "settling_time": 14.3, "steady_state": 1.0},
    },
    "step_noise": {
        "narma_l2": {"rise_time": 2.6, "overshoot_pct": 8.33, "settling_time": 19.0, "steady_state": 1.0},
        "model_reference": {"rise_time": 2.75, "overshoot_pct": 3.33, "settling_time": 18.0, "steady_state": 1.0},
        "nn_predictive": {"rise_time": 2.75, "overshoot_pct": 15.0, "settling_time": 25.0, "steady_state": 1.0},
    },
    "sine": {
        "narma_l2": {"peak_value": 3.0},
        "model_reference": {"peak_value": 3.8},
        "nn_predictive": {"peak_value": 2.6},
    },
    "sine_noise": {
        "narma_l2": {"peak_value": 2.8},
        "model_reference": {"peak_value": 3.7},
        "nn_predictive": {"peak_value": 2.3},
    },
}

FAMILIES = {
    "step": ("step", False, "step reference, no sensor noise"),
    "step_noise": ("step", True, "step reference, sensor noise"),
    "sine": ("sine", False, "sine reference, no sensor noise"),
    "sine_noise": ("sine", True, "sine reference, sensor noise"),
}


@dataclass(frozen=True)
class TrainingSettings:
    """Everything that shapes the trained plant models and controllers.

    Controller plant models are identified on a wide excitation: holding
    the output at 1 needs about 40 V and the sine reference needs about
    +/-160 V, far outside the narrow 1-2 V identification experiment.
    """

    sample_time: float = 0.1
    excitation_u_min: float = -250.0
    excitation_u_max: float = 250.0
    excitation_interval_min: float = 2.0
    excitation_interval_max: float = 10.0
    excitation_segments: int = 150
    identification_epochs: int = 300
    hidden_size: int = 6
    delays: int = 4
    narma_horizon: int = 12
    g_floor: float = 1e-3
    mrc_epochs: int = 65
    mrc_move_penalty: float = 0.01
    mrc_gain_spread: float = 0.05
    mrc_windows: int = 10
    zeta: float = 0.8
    omega_n: float = 1.0
    N1: int = 1
    N2: int = 7
    Nu: int = 2
    rho: float = 0.05
    u_min: float = -250.0
    u_max: float = 250.0

    def __post_init__(self):
        if not self.sample_time > 0:
            raise ValueError("sample_time must be > 0")
        if not self.u_min < self.u_max:
            raise ValueError("u_min must be < u_max")
        for name in ("identification_epochs", "mrc_epochs", "hidden_size", "delays", "narma_horizon",
                     "excitation_segments", "mrc_windows"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def u_limits(self):
        return (self.u_min, self.u_max)

    def excitation(self, seed) -> ExcitationConfig:
        return ExcitationConfig(self.excitation_u_min, self.excitation_u_max, self.excitation_interval_min,
                                self.excitation_interval_max, self.excitation_segments, self.sample_time, seed)


@dataclass
class ControllerBundle:
    """The three trained controllers for one training seed, plus the models behind them."""

    seed: int
    settings: TrainingSettings
    controllers: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    @property
    def sample_time(self):
        return self.settings.sample_time

    def get(self, name):
        if name not in CONTROLLERS:
            raise ValueError(f"unknown controller {name!r}; expected one of {', '.join(CONTROLLERS)}")
        if name in self.failures:
            raise TrainingError(f"{name} training failed: {self.failures[name]}")
        return self.controllers[name]


def identify_models(seed=0, settings: TrainingSettings = TrainingSettings(), which=("narx", "narma_l2")):
    """Collect excitation data and fit the requested plant models; returns ``(data, models, failures)``."""
    s = settings
    data = collect_dataset(s.excitation(seed), make_plant(sample_time=s.sample_time))
    models, failures = {}, {}
    if "narx" in which:
        try:
            models["narx"] = NarxModel(s.delays, s.delays, s.hidden_size, s.identification_epochs,
                                       seed).fit(data.u, data.y, s.sample_time)
        except TrainingError as exc:
            failures["narx"] = str(exc)
    if "narma_l2" in which:
        try:
            models["narma_l2"] = NarmaL2Model(s.delays, s.delays, s.hidden_size, s.identification_epochs, seed,
                                              horizon=s.narma_horizon, g_floor=s.g_floor).fit(
                                                  data.u, data.y, s.sample_time)
        except TrainingError as exc:
            failures["narma_l2"] = str(exc)
    return data, models, failures


def train_controllers(seed=0, settings: TrainingSettings = TrainingSettings(), only=CONTROLLERS):
    """Identify plant models and build the requested controllers; failures are recorded, not raised."""
    s = settings
    which = [m for m, users in (("narma_l2", ("narma_l2",)), ("narx", ("model_reference", "nn_predictive")))
             if any(c in only for c in users)]
    _, models, id_failures = identify_models(seed, s, which)
    bundle = ControllerBundle(seed, s, models=models)
    if "narma_l2" in only:
        if "narma_l2" in models:
            bundle.controllers["narma_l2"] = NarmaL2Controller(models["narma_l2"], s.g_floor, s.u_limits)
        else:
            bundle.failures["narma_l2"] = id_failures["narma_l2"]
    for name in ("model_reference", "nn_predictive"):
        if name not in only:
            continue
        if "narx" not in models:
            bundle.failures[name] = id_failures["narx"]
            continue
        if name == "nn_predictive":
            bundle.controllers[name] = NmpcController(models["narx"], s.N1, s.N2, s.Nu, s.rho, s.u_limits)
            continue
        signals = MrcTrainingSignals(gain_spread=s.mrc_gain_spread, n_windows=s.mrc_windows)
        try:
            bundle.controllers[name] = train_mrc(models["narx"], ReferenceModel(s.zeta, s.omega_n, s.sample_time),
                                                 TrainConfig(epochs=s.mrc_epochs, seed=seed), signals,
                                                 s.hidden_size, s.u_limits, s.mrc_move_penalty)
        except TrainingError as exc:
            bundle.failures[name] = str(exc)
    return bundle


@dataclass(frozen=True)
class Scenario:
    controller: str = "model_reference"
    reference: ReferenceSignal = ReferenceSignal()
    noise: NoiseConfig = NoiseConfig()
    duration: float = None
    sample_time: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ValueError(f"unknown controller {self.controller!r}; expected one of {', '.join(CONTROLLERS)}")
        if not self.sample_time > 0:
            raise ValueError("sample_time must be > 0")
        if self.duration is None:
            object.__setattr__(self, "duration", 30.0 if self.reference.kind == "step" else 100.0)
        if not self.duration >= 10 * self.sample_time:
            raise ValueError("duration must be at least 10 sample intervals")

    @property
    def n_steps(self):
        return int(round(self.duration / self.sample_time))


@dataclass
class Fault:
    step: int
    time: float
    message: str


@dataclass
class RunRecord:
    t: np.ndarray
    r: np.ndarray
    y_true: np.ndarray
    y_measured: np.ndarray
    u: np.ndarray
    warnings: list = field(default_factory=list)
    metrics: object = None
    metric_error: str = None
    fault: Fault = None

    def __len__(self):
        return len(self.t)


def _preview(ctl, reference, t, ts):
    if isinstance(ctl, NarmaL2Controller):
        return reference(t + ctl.preview * ts)
    if isinstance(ctl, NmpcController):
        return [reference(t + j * ts) for j in range(1, ctl.N2 + 1)]
    return reference(t)


def _flags(ctl, u):
    out = []
    lim = getattr(ctl, "u_limits", None)
    if lim is not None and (u <= lim[0] or u >= lim[1]):
        out.append("saturated")
    if isinstance(ctl, NarmaL2Controller) and ctl.floor_engaged:
        out.append("g_floor")
    if isinstance(ctl, NmpcController) and ctl.last_step is not None and not ctl.last_step.converged:
        out.append("not_converged")
    return tuple(out)


def run_scenario(sc: Scenario, trained) -> RunRecord:
    """Simulate one closed-loop run on a fresh plant.

    ``trained`` is a :class:`ControllerBundle` or a controller instance.
    The controller sees ``y_true + noise``; the plant itself is noise
    free.  A controller fault stops the run and the partial record keeps
    the fault position.
    """
    ctl = trained.get(sc.controller) if isinstance(trained, ControllerBundle) else trained
    if isinstance(trained, ControllerBundle) and not math.isclose(trained.sample_time, sc.sample_time):
        raise ValueError("scenario sample_time differs from the controllers' training sample time")
    ts = sc.sample_time
    plant = make_plant(sample_time=ts)
    ctl.reset()
    noise = NoiseGenerator(sc.noise, ts)
    n = sc.n_steps
    cols = {k: np.zeros(n) for k in ("t", "r", "y_true", "y_measured", "u")}
    warnings, fault = [], None
    done = n
    for k in range(n):
        t = k * ts
        r = sc.reference(t)
        y = plant.output()
        y_meas = y + next(noise)
        try:
            u = ctl.control(_preview(ctl, sc.reference, t, ts), y_meas)
            plant.step(u)
        except (ControllerFault, PlantInputError) as exc:
            fault = Fault(k, t, str(exc))
            done = k
            break
        for key, value in zip(cols, (t, r, y, y_meas, u)):
            cols[key][k] = value
        warnings.append(_flags(ctl, u))
    rec = RunRecord(**{k: v[:done] for k, v in cols.items()}, warnings=warnings, fault=fault)
    if fault is None:
        try:
            if sc.reference.kind == "step":
                rec.metrics = step_metrics(rec.t, rec.y_true, target=sc.reference.amplitude,
                                           t_start=sc.reference.start_time, unsettled="inf")
                if math.isinf(rec.metrics.settling_time):
                    rec.metric_error = "settling_time: still outside the band at the end of the run"
            else:
                rec.metrics = track_metrics(rec.y_true)
        except MetricUndefinedError as exc:
            rec.metric_error = str(exc)
    return rec


def emit_csv(record: RunRecord, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "r", "y_true", "y_measured", "u"])
        for row in zip(record.t, record.r, record.y_true, record.y_measured, record.u):
            w.writerow([format(float(v), ".12g") for v in row])


def read_csv(path) -> dict:
    """Columns of a file written by :func:`emit_csv` as float arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array(body, dtype=float).reshape(len(body), len(header))
    return {name: data[:, i] for i, name in enumerate(header)}


def emit_plot(record: RunRecord, path, title=None):
    """SVG plot of reference and plant output against time."""
    import matplotlib
    from matplotlib.figure import Figure

    with matplotlib.rc_context({"svg.hashsalt": "steamflow", "svg.fonttype": "none"}):
        fig = Figure(figsize=(8, 4.5))
        ax = fig.add_subplot()
        ax.plot(record.t, record.r, color="#1f77b4", linestyle="--", linewidth=1.5, label="reference r")
        ax.plot(record.t, record.y_true, color="#d62728", linestyle="-", linewidth=1.5, label="plant output y")
        ax.set_xlabel("time (s)")
        ax.set_ylabel("steam flow")
        if title:
            ax.set_title(title)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="best")
        fig.savefig(path, format="svg", metadata={"Date": None})


# configuration files --------------------------------------------------------

SCENARIO_KEYS = {
    "controller": str, "reference": str, "amplitude": float, "start_time": float, "frequency": float,
    "phase": float, "noise": bool, "noise_amplitude": float, "noise_correlation_time": float,
    "noise_seed": int, "duration": float, "sample_time": float, "seed": int,
}
SETTINGS_KEYS = {f.name: type(getattr(TrainingSettings(), f.name)) for f in fields(TrainingSettings)}


class ConfigError(ValueError):
    pass


def _convert(key, text, kind):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        return kind(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines (``#`` comments); unknown or repeated keys are rejected."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key = value")
        kind = SCENARIO_KEYS.get(key) or SETTINGS_KEYS.get(key)
        if kind is None:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: {key!r} given twice")
        out[key] = _convert(key, value, kind)
    return out


def build_from_config(values: dict):
    """``(Scenario, TrainingSettings)`` from parsed config values (missing keys take defaults)."""
    values = dict(values)
    kind = values.get("reference", "step")
    if kind == "step":
        ref = ReferenceSignal.step(values.get("amplitude", 1.0), values.get("start_time", 0.0))
    elif kind == "sine":
        ref = ReferenceSignal.sine(values.get("amplitude", 4.0), values.get("frequency", 0.2),
                                   values.get("phase", 0.0))
    else:
        raise ConfigError(f"reference must be step or sine, got {kind!r}")
    seed = values.get("seed", 0)
    noise = NoiseConfig(values.get("noise", False), values.get("noise_amplitude", 0.05),
                        values.get("noise_correlation_time", 0.5), values.get("noise_seed", seed))
    settings = TrainingSettings(**{k: v for k, v in values.items() if k in SETTINGS_KEYS})
    sc = Scenario(values.get("controller", "model_reference"), ref, noise, values.get("duration"),
                  values.get("sample_time", settings.sample_time), seed)
    return sc, settings


# comparison report ----------------------------------------------------------

@dataclass
class Report:
    seeds: list
    # results[family][controller][seed] -> {metric: value} or a status string
    results: dict
    text: str = ""

    def values(self, family, controller, metric):
        out = []
        for seed in self.seeds:
            cell = self.results[family][controller][seed]
            if isinstance(cell, dict):
                out.append(cell[metric])
        return out

    def median(self, family, controller, metric):
        vals = self.values(family, controller, metric)
        return statistics.median(vals) if vals else math.nan


def family_scenario(family, controller, seed, sample_time=0.1):
    kind, noisy, _ = FAMILIES[family]
    ref = ReferenceSignal.step() if kind == "step" else ReferenceSignal.sine()
    return Scenario(controller, ref, NoiseConfig(enabled=noisy, seed=seed), None, sample_time, seed)


def _metric_cells(rec: RunRecord, metrics):
    if rec.fault is not None:
        return "fault"
    if rec.metrics is None:
        return "undefined"
    return {m: float(getattr(rec.metrics, m)) for m in metrics}


def reproduce_tables(seeds, settings: TrainingSettings = TrainingSettings(), families=tuple(FAMILIES)) -> Report:
    """Train all controllers per seed, run every scenario family and tabulate per-seed values and medians."""
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("need at least 3 seeds")
    results = {f: {c: {} for c in CONTROLLERS} for f in families}
    for seed in seeds:
        bundle = train_controllers(seed, settings)
        for c in CONTROLLERS:
            for f in families:
                if c in bundle.failures:
                    results[f][c][seed] = "failed"
                    continue
                metrics = STEP_METRICS if FAMILIES[f][0] == "step" else SINE_METRICS
                rec = run_scenario(family_scenario(f, c, seed, settings.sample_time), bundle)
                results[f][c][seed] = _metric_cells(rec, metrics)
    rep = Report(seeds, results)
    rep.text = format_report(rep)
    return rep


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if math.isinf(v):
        return "unsettled"
    return f"{v:.3f}"


def format_report(rep: Report) -> str:
    lines = [f"closed-loop comparison over training seeds {', '.join(str(s) for s in rep.seeds)}", ""]
    for family, per_ctl in rep.results.items():
        metrics = STEP_METRICS if FAMILIES[family][0] == "step" else SINE_METRICS
        lines.append(f"== {FAMILIES[family][2]} ==")
        head = ["controller", "metric"] + [f"seed {s}" for s in rep.seeds] + ["median", "published"]
        rows = [head]
        for c in CONTROLLERS:
            for i, m in enumerate(metrics):
                row = [LABELS[c] if i == 0 else "", m]
                for s in rep.seeds:
                    cell = per_ctl[c][s]
                    row.append(_fmt(cell[m]) if isinstance(cell, dict) else cell)
                row.append(_fmt(rep.median(family, c, m)))
                row.append(_fmt(PUBLISHED[family][c].get(m)))
                rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        for r in rows:
            lines.append("  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(r, widths))).rstrip())
        lines.append("")
    return "\n".join(lines)

