"""Command-line entry point: identify, train, run, reproduce.

Exit codes: 0 success, 1 invalid input or configuration, 2 training
failure, 3 controller fault during a run.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (CONTROLLERS, ConfigError, ControllerBundle, build_from_config, emit_csv, emit_plot,
                      identify_models, parse_config, reproduce_tables, run_scenario, train_controllers)
from .neural import TrainingError
from .persistence import controller_to_text, load_controller, narma_l2_to_text, narx_to_text

EXIT_OK, EXIT_INVALID, EXIT_TRAINING, EXIT_FAULT = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _common(p, controller=False):
    p.add_argument("--seed", type=int, help="training seed (default 0)")
    p.add_argument("--config", type=Path, help="key = value configuration file")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory")
    if controller:
        p.add_argument("--controller", choices=CONTROLLERS)


def build_parser():
    parser = _Parser(prog="steamflow", description="Neural control of a steam valve plant.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("identify", help="collect excitation data and fit the NARX and NARMA-L2 models")
    _common(p)

    p = sub.add_parser("train", help="train one controller and save it")
    _common(p, controller=True)

    p = sub.add_parser("run", help="run one closed-loop scenario")
    _common(p, controller=True)
    p.add_argument("--reference", choices=("step", "sine"))
    p.add_argument("--noise", action=argparse.BooleanOptionalAction, default=None,
                   help="add sensor noise to the fed-back measurement")
    p.add_argument("--load", type=Path, help="use a controller saved by 'train' instead of training")

    p = sub.add_parser("reproduce", help="multi-seed comparison tables")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    return parser


def _load_config(args):
    values = parse_config(args.config.read_text()) if args.config else {}
    if args.seed is not None:
        values["seed"] = args.seed
    if getattr(args, "controller", None):
        values["controller"] = args.controller
    if getattr(args, "reference", None) and args.reference != values.get("reference"):
        values["reference"] = args.reference
        values.pop("amplitude", None)
    if getattr(args, "noise", None) is not None:
        values["noise"] = args.noise
    return build_from_config(values)


def cmd_identify(args, out):
    sc, settings = _load_config(args)
    data, models, failures = identify_models(sc.seed, settings)
    data.to_csv(out / "dataset.csv")
    if failures:
        for name, msg in failures.items():
            print(f"{name}: identification failed: {msg}", file=sys.stderr)
        return EXIT_TRAINING
    (out / "models.txt").write_text(narx_to_text(models["narx"]) + narma_l2_to_text(models["narma_l2"]))
    for name, m in models.items():
        print(f"{name}: validation one-step RMSE {m.validation_rmse_:.6g}")
    return EXIT_OK


def cmd_train(args, out):
    sc, settings = _load_config(args)
    bundle = train_controllers(sc.seed, settings, only=(sc.controller,))
    ctl = bundle.get(sc.controller)
    path = out / f"{sc.controller}.ctl"
    path.write_text(controller_to_text(ctl))
    print(f"saved {path}")
    return EXIT_OK


def cmd_run(args, out):
    sc, settings = _load_config(args)
    if args.load:
        ctl = load_controller(args.load)
        name = {"NarmaL2Controller": "narma_l2", "MrcController": "model_reference",
                "NmpcController": "nn_predictive"}[type(ctl).__name__]
        if getattr(args, "controller", None) and args.controller != name:
            raise ConfigError(f"--controller {args.controller} does not match the loaded {name} controller")
        sc = replace(sc, controller=name)
        trained = ControllerBundle(sc.seed, settings, controllers={name: ctl})
    else:
        trained = train_controllers(sc.seed, settings, only=(sc.controller,))
    rec = run_scenario(sc, trained)
    stem = f"{sc.controller}_{sc.reference.kind}{'_noise' if sc.noise.enabled else ''}"
    emit_csv(rec, out / f"{stem}.csv")
    emit_plot(rec, out / f"{stem}.svg", title=stem.replace("_", " "))
    if rec.fault is not None:
        print(f"controller fault at step {rec.fault.step} (t={rec.fault.time:g} s): {rec.fault.message}",
              file=sys.stderr)
        return EXIT_FAULT
    if rec.metrics is None:
        print(f"metrics: {rec.metric_error}")
    else:
        for key, value in vars(rec.metrics).items():
            print(f"{key}: {value:.6g}")
    return EXIT_OK


def cmd_reproduce(args, out):
    sc, settings = _load_config(args)
    report = reproduce_tables(args.seeds, settings)
    (out / "report.txt").write_text(report.text)
    print(report.text, end="")
    return EXIT_OK


COMMANDS = {"identify": cmd_identify, "train": cmd_train, "run": cmd_run, "reproduce": cmd_reproduce}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, out)
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
