"""Text persistence for identified models and trained controllers.

A file is a sequence of ``[section]`` blocks.  One section holds
``key = value`` settings (controller type, horizons, limits, ...); the
networks follow in the format of :func:`steamflow.neural.format_mlp`.
Floats are written with 17 significant digits so a round trip is exact.
"""

from __future__ import annotations

from pathlib import Path

from .controllers import (MrcController, NarmaL2Controller, NmpcController, ReferenceModel)
from .neural import format_mlp, parse_mlp, parse_sections
from .sysid import NarmaL2Model, NarxModel, _center_half


def _num(v):
    return format(float(v), ".17g")


def _kv_block(name, items):
    lines = [f"[{name}]"]
    for key, value in items.items():
        if isinstance(value, (tuple, list)):
            value = " ".join(_num(v) for v in value)
        elif isinstance(value, float):
            value = _num(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _read_kv(sections, name):
    if name not in sections:
        raise ValueError(f"missing section [{name}]")
    out = {}
    for line in sections[name]:
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"expected key = value in [{name}], got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _pair(text):
    lo, hi = (float(v) for v in text.split())
    return lo, hi


def _limits(text):
    return None if text == "none" else _pair(text)


def narx_to_text(model: NarxModel, name="narx") -> str:
    head = _kv_block(f"{name}.model", {
        "kind": "narx",
        "input_delays": model.input_delays,
        "output_delays": model.output_delays,
        "hidden_size": model.hidden_size,
        "sample_time": float(model.sample_time_),
        "u_range": model.u_range_,
        "y_range": model.y_range_,
    })
    return head + format_mlp(model.net_, f"{name}.net")


def narx_from_sections(sections, name="narx") -> NarxModel:
    kv = _read_kv(sections, f"{name}.model")
    if kv.get("kind") != "narx":
        raise ValueError(f"[{name}.model] is not a NARX model")
    m = NarxModel(input_delays=int(kv["input_delays"]), output_delays=int(kv["output_delays"]),
                  hidden_size=int(kv["hidden_size"]))
    m.net_ = parse_mlp(sections, f"{name}.net")
    m.sample_time_ = float(kv["sample_time"])
    m.u_range_ = _pair(kv["u_range"])
    m.y_range_ = _pair(kv["y_range"])
    return m


def narma_l2_to_text(model: NarmaL2Model, name="narma_l2") -> str:
    head = _kv_block(f"{name}.model", {
        "kind": "narma_l2",
        "input_delays": model.input_delays,
        "output_delays": model.output_delays,
        "hidden_size": model.hidden_size,
        "horizon": model.horizon,
        "g_floor": float(model.g_floor),
        "sample_time": float(model.sample_time_),
        "u_range": model.u_range_,
        "y_range": model.y_range_,
    })
    return head + format_mlp(model.f_net_, f"{name}.f") + format_mlp(model.g_net_, f"{name}.g")


def narma_l2_from_sections(sections, name="narma_l2") -> NarmaL2Model:
    kv = _read_kv(sections, f"{name}.model")
    if kv.get("kind") != "narma_l2":
        raise ValueError(f"[{name}.model] is not a NARMA-L2 model")
    m = NarmaL2Model(input_delays=int(kv["input_delays"]), output_delays=int(kv["output_delays"]),
                     hidden_size=int(kv["hidden_size"]), horizon=int(kv["horizon"]),
                     g_floor=float(kv["g_floor"]))
    m.f_net_ = parse_mlp(sections, f"{name}.f")
    m.g_net_ = parse_mlp(sections, f"{name}.g")
    m.sample_time_ = float(kv["sample_time"])
    m.u_range_ = _pair(kv["u_range"])
    m.y_range_ = _pair(kv["y_range"])
    m.u_center_, m.u_half_ = _center_half(m.u_range_)
    m.y_center_, m.y_half_ = _center_half(m.y_range_)
    return m


def _limits_text(limits):
    return "none" if limits is None else limits


def controller_to_text(ctl) -> str:
    """Serialize any of the three controllers with the networks it needs at run time."""
    if isinstance(ctl, NarmaL2Controller):
        head = _kv_block("controller", {"type": "narma_l2", "g_floor": float(ctl.g_floor),
                                        "u_limits": _limits_text(ctl.u_limits)})
        return head + narma_l2_to_text(ctl.model)
    if isinstance(ctl, MrcController):
        rm = ctl.ref_model or ReferenceModel()
        head = _kv_block("controller", {"type": "model_reference", "u_limits": _limits_text(ctl.u_limits),
                                        "zeta": rm.zeta, "omega_n": rm.omega_n,
                                        "sample_time": rm.sample_time})
        return head + format_mlp(ctl.controller_net, "model_reference.net")
    if isinstance(ctl, NmpcController):
        head = _kv_block("controller", {"type": "nn_predictive", "N1": ctl.N1, "N2": ctl.N2, "Nu": ctl.Nu,
                                        "rho": float(ctl.rho), "u_limits": _limits_text(ctl.u_limits),
                                        "maxiter": ctl.maxiter, "restarts": int(bool(ctl.restarts))})
        return head + narx_to_text(ctl.model)
    raise TypeError(f"cannot serialize {type(ctl).__name__}")


def controller_from_text(text: str):
    sections = parse_sections(text)
    kv = _read_kv(sections, "controller")
    kind = kv.get("type")
    limits = _limits(kv["u_limits"])
    if kind == "narma_l2":
        return NarmaL2Controller(narma_l2_from_sections(sections), float(kv["g_floor"]), limits)
    if kind == "model_reference":
        rm = ReferenceModel(float(kv["zeta"]), float(kv["omega_n"]), float(kv["sample_time"]))
        return MrcController(parse_mlp(sections, "model_reference.net"), rm, limits)
    if kind == "nn_predictive":
        return NmpcController(narx_from_sections(sections), int(kv["N1"]), int(kv["N2"]), int(kv["Nu"]),
                              float(kv["rho"]), limits, int(kv["maxiter"]), bool(int(kv["restarts"])))
    raise ValueError(f"unknown controller type {kind!r}")


def save_controller(ctl, path):
    Path(path).write_text(controller_to_text(ctl))


def load_controller(path):
    return controller_from_text(Path(path).read_text())
