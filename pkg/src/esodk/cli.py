"""Command line entry point: ``esodk collect | train | dimstudy | run | compare``.

Results go to CSV (a file with ``--out``, stdout otherwise). Failures print one
JSON object on stderr, ``{"error": <kind>, "message": ...}``, and exit with the
code listed in :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, replace

from . import koopman
from .config import ConfigError, HarnessConfig, load_config
from .controllers import BicycleModel
from .data import collect_dataset, coverage
from .eso import EsoGains, EsoInfeasible, design_gains
from .sim import CONTROLLERS, compare, metrics_csv

log = logging.getLogger("esodk")

EXIT_CODES = {
    "usage": 2,
    "config": 3,
    "missing-file": 4,
    "diverged": 5,
    "training-diverged": 6,
    "eso-infeasible": 7,
    "internal": 1,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail("usage", f"{self.prog}: {message}")


def _fail(kind: str, message: str):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    sys.exit(EXIT_CODES[kind])


def _emit(text: str, out):
    if out:
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _config(args) -> HarnessConfig:
    return load_config(args.config) if args.config else HarnessConfig()


def _require(path, what):
    if not path or not os.path.exists(path):
        raise CliError("missing-file", f"{what} not found: {path}")


def _load_model(path):
    _require(path, "checkpoint")
    try:
        return koopman.load_checkpoint(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError("config", f"bad checkpoint {path}: {exc}") from exc


def _load_data(path):
    _require(path, "dataset")
    return koopman.TrajectoryDataset.load(path)


def _gains(cfg: HarnessConfig, model) -> EsoGains:
    if cfg.eso.beta1 is not None:
        try:
            return EsoGains.checked(model, cfg.eso.beta1, cfg.eso.beta2)
        except ValueError as exc:
            raise CliError("eso-infeasible", str(exc)) from exc
    return design_gains(model, cfg.eso.target_rho)


def _training(cfg: HarnessConfig, args):
    t = cfg.training
    over = {k: getattr(args, k) for k in ("phi", "epochs", "seed") if getattr(args, k, None) is not None}
    return koopman.TrainingConfig(**{**asdict(t), **over}) if over else t


# ---------------------------------------------------------------- subcommands

def cmd_collect(args, cfg):
    spec = cfg.data
    if args.episodes is not None:
        spec = replace(spec, episodes=args.episodes)
    ds = collect_dataset(cfg.vehicle, spec, seed=args.seed)
    ds.save(args.out)
    cov = coverage(ds, spec)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sequences", "train", "val", "p", "min_bin_count"])
    w.writerow([len(ds), int((~ds.is_val).sum()), int(ds.is_val.sum()), ds.p, int(min(c.min() for c in cov))])
    sys.stdout.write(buf.getvalue())


def cmd_train(args, cfg):
    ds = _load_data(args.data)
    tcfg = _training(cfg, args)
    res = koopman.train(ds, tcfg)
    koopman.save_checkpoint(res.model, args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss"])
    for i, (a, b) in enumerate(zip(res.train_loss, res.val_loss)):
        w.writerow([i, repr(float(a)), repr(float(b))])
    _emit(buf.getvalue(), args.history)


def dimstudy_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["phi"]
    for ch in ("Vx", "Vy", "wr"):
        head += [f"{ch}_max", f"{ch}_avg", f"{ch}_rmse"]
    w.writerow(head)
    for r in rows:
        w.writerow([r.phi, *(repr(float(v)) for v in r.stats.ravel())])
    return buf.getvalue()


def cmd_dimstudy(args, cfg):
    ds = _load_data(args.data)
    try:
        dims = [int(v) for v in args.dims.split(",") if v.strip()]
    except ValueError as exc:
        raise CliError("usage", f"--dims expects comma-separated integers: {args.dims}") from exc
    rows = koopman.one_step_error_study(ds, dims, _training(cfg, args))
    _emit(dimstudy_csv(rows), args.out)
    if args.plot_dir:
        from .plotting import plot_dimstudy
        plot_dimstudy(rows, args.plot_dir)


def _scenario(cfg, name):
    if name not in cfg.scenarios:
        raise CliError("usage", f"unknown scenario {name!r}; known: {', '.join(sorted(cfg.scenarios))}")
    return cfg.scenarios[name]


def _controllers(text):
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    bad = [k for k in kinds if k not in CONTROLLERS]
    if bad or not kinds:
        raise CliError("usage", f"unknown controller {bad[0] if bad else text!r}; choose from {', '.join(CONTROLLERS)}")
    return kinds


def _run_compare(args, cfg, kinds):
    scenario = _scenario(cfg, args.scenario)
    needs_model = any(k != "lmpc" for k in kinds)
    model = _load_model(args.model) if needs_model else None
    gains = _gains(cfg, model) if "eso-dkmpc" in kinds else None
    bike = BicycleModel.from_params(cfg.vehicle, cfg.lmpc_mu)
    loop = replace(cfg.loop, seed=args.seed) if args.seed is not None else cfg.loop
    res = compare(scenario, kinds, cfg.mpc, model, gains, bike, cfg.vehicle, loop)
    if args.plot_dir:
        from .plotting import plot_traces
        plot_traces(res.traces, scenario, args.plot_dir)
    return res


def cmd_run(args, cfg):
    res = _run_compare(args, cfg, _controllers(args.controller))
    trace = res.traces[0]
    _emit(trace.to_csv(timing=not args.no_timing), args.out)
    if args.metrics:
        metrics_csv(res.metrics, args.metrics, timing=not args.no_timing)
    if trace.diverged:
        raise CliError("diverged", f"{trace.controller} on {trace.scenario}: {trace.message}")


def cmd_compare(args, cfg):
    res = _run_compare(args, cfg, _controllers(args.controllers))
    _emit(metrics_csv(res.metrics, timing=not args.no_timing), args.out)
    if args.trace_dir:
        os.makedirs(args.trace_dir, exist_ok=True)
        for tr in res.traces:
            tr.to_csv(os.path.join(args.trace_dir, f"{args.scenario}_{tr.controller}.csv"),
                      timing=not args.no_timing)
    if args.strict and any(m.diverged for m in res.metrics):
        names = ", ".join(m.controller for m in res.metrics if m.diverged)
        raise CliError("diverged", f"diverged on {args.scenario}: {names}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="esodk", description="Koopman MPC with a disturbance observer for vehicle path tracking.")
    p.add_argument("--config", help="INI config file overriding the defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("collect", help="simulate excitation runs and save a training set")
    c.add_argument("--out", required=True, help="output .npz")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--episodes", type=int)
    c.set_defaults(func=cmd_collect)

    t = sub.add_parser("train", help="fit a Koopman model")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint .json")
    t.add_argument("--history", help="loss history CSV (stdout if omitted)")
    t.add_argument("--phi", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("dimstudy", help="held-out one-step errors against encoder width")
    d.add_argument("--data", required=True)
    d.add_argument("--dims", default="2,3,5,10,15")
    d.add_argument("--out")
    d.add_argument("--epochs", type=int)
    d.add_argument("--seed", type=int)
    d.add_argument("--plot-dir", help="also save a bar chart here")
    d.set_defaults(func=cmd_dimstudy)

    for name, many in (("run", False), ("compare", True)):
        r = sub.add_parser(name, help="closed-loop comparison" if many else "one closed-loop run")
        r.add_argument("--scenario", required=True)
        if many:
            r.add_argument("--controllers", default=",".join(CONTROLLERS))
            r.add_argument("--trace-dir", help="write one trace CSV per controller here")
            r.add_argument("--strict", action="store_true", help="exit non-zero if any controller diverged")
        else:
            r.add_argument("--controller", required=True)
            r.add_argument("--metrics", help="also write the one-row metrics CSV here")
        r.add_argument("--model", help="Koopman checkpoint (needed by dkmpc and eso-dkmpc)")
        r.add_argument("--out")
        r.add_argument("--seed", type=int)
        r.add_argument("--no-timing", action="store_true",
                       help="write solve times as 0.0 so repeated runs are byte-identical")
        r.add_argument("--plot-dir", help="also save trace figures here")
        r.set_defaults(func=cmd_compare if many else cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except CliError as exc:
        _fail(exc.kind, str(exc))
    except ConfigError as exc:
        _fail("config", str(exc))
    except EsoInfeasible as exc:
        _fail("eso-infeasible", str(exc))
    except koopman.TrainingDivergence as exc:
        _fail("training-diverged", str(exc))
    except FileNotFoundError as exc:
        _fail("missing-file", str(exc))
    except (ValueError, RuntimeError) as exc:
        _fail("internal", f"{type(exc).__name__}: {exc}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
