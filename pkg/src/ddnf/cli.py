"""Command-line experiment runner.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .inference import TrainConfig, write_history_csv
from .io import (ModelFileError, ModelValidationError, load_model, save_model, write_json,
                 write_manifest, write_rows)
from .oracles import write_chain_csv
from .regularize import RegWeights

log = logging.getLogger("ddnf")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with option values; flags override it")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("runs/out"))
    p.add_argument("-v", "--verbose", action="store_true")


def _add_train(p: argparse.ArgumentParser) -> None:
    p.add_argument("--blocks", type=int, default=8, help="number of velocity blocks K")
    p.add_argument("--cells", type=int, default=8, help="Euler cells per block T")
    p.add_argument("--hidden", type=_int_list, default=[2, 2])
    p.add_argument("--logdet", default="exact",
                   choices=["first_order", "second_order_paper", "second_order_series", "exact"])
    p.add_argument("--probes", type=int, default=0, help="Hutchinson probes (0 = exact trace)")
    p.add_argument("--zero-init", action="store_true", help="start every block at v = 0")
    p.add_argument("--iterations", type=int, default=5000)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--gamma-geo", type=float, default=0.0)
    p.add_argument("--gamma-inv", type=float, default=0.0)
    p.add_argument("--eval-every", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddnf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ddnf {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, helptext in (("ode-accuracy", "Euler forward pass vs adaptive RK45"),
                           ("inversion", "forward-then-inverse reconstruction error")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--t-list", type=_int_list, default=list(ex.DEFAULT_T_LIST))
        p.add_argument("--trials", type=int, default=50)
        p.add_argument("--samples", type=int, default=1000)
        p.add_argument("--blocks", type=int, default=1)
        p.add_argument("--hidden", type=_int_list, default=[2, 2])
        p.add_argument("--init-scale", type=float, default=1.0)
        p.add_argument("--field", choices=["random", "zero", "constant"], default="random")

    p = sub.add_parser("fit", help="train a flow on a toy energy or the posterior")
    _add_common(p)
    p.add_argument("--kind", choices=["energy-u1", "energy-u2", "posterior"], default="energy-u1")
    p.add_argument("--flow", choices=["ddnf", "planar"], default="ddnf")
    p.add_argument("--data", type=Path, help="n,y CSV for the posterior kind")
    p.add_argument("--ring-norm", choices=["squared", "plain"], default="squared")
    p.add_argument("--samples", type=int, default=10_000)
    _add_train(p)

    p = sub.add_parser("mcmc", help="random-walk Metropolis reference chain")
    _add_common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--standard-normal", action="store_true", help="1-d N(0,1) smoke target")
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--burn-in", type=int, default=10_000)
    p.add_argument("--scale", type=float, default=None)
    p.add_argument("--adapt", type=int, default=5000)

    p = sub.add_parser("export-grid", help="deformation, displacement and density tables")
    _add_common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--range", type=float, nargs=2, default=[-4.0, 4.0])
    p.add_argument("--resolution", type=int, default=20)
    p.add_argument("--heatmap-resolution", type=int, default=200)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}")
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object")
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sp.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _config_dict(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("verbose",)}


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, iterations=args.iterations,
                       learning_rate=args.lr, optimizer=args.optimizer,
                       reg=RegWeights(args.gamma_geo, args.gamma_inv), seed=args.seed,
                       eval_every=args.eval_every)


def cmd_ode_accuracy(args) -> int:
    rows, summary = ex.run_ode_accuracy(args.t_list, args.trials, args.samples, args.blocks,
                                        args.seed, args.hidden, args.init_scale, args.field)
    write_rows(args.out / "ode_accuracy.csv", ["T", "dt", "mse", "rmse", "std"],
               [[r[k] for k in ("T", "dt", "mse", "rmse", "std")] for r in rows])
    write_json(args.out / "summary.json", summary)
    return EXIT_OK


def cmd_inversion(args) -> int:
    rows, _ = ex.run_inversion(args.t_list, args.trials, args.samples, args.blocks, args.seed,
                               args.hidden, args.init_scale, args.field)
    write_rows(args.out / "inversion.csv", ["T", "dt", "mse", "std"],
               [[r[k] for k in ("T", "dt", "mse", "std")] for r in rows])
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _train_config(args)
    result, outputs = ex.run_fit(args.kind, args.flow, args.blocks, args.cells, args.logdet, cfg,
                                 args.data, args.hidden, args.probes, args.zero_init,
                                 n_samples=args.samples, ring_norm=args.ring_norm)
    write_history_csv(result.history, args.out / "history.csv")
    write_json(args.out / "summary.json", outputs["summary"])
    if result.diverged:
        log.error("training diverged: %s", result.message)
        return EXIT_DIVERGED
    save_model(result.flow, args.out / "model.json", result.base)
    write_rows(args.out / "samples.csv", ["z0", "z1"], outputs["samples"].tolist())
    if "grid" in outputs:
        write_rows(args.out / "grid_logdensity.csv", ["z0", "z1", "log_density"],
                   outputs["grid"].tolist())
    if "posterior_samples" in outputs:
        write_rows(args.out / "posterior_samples.csv", ["m", "L"],
                   outputs["posterior_samples"].tolist())
    return EXIT_OK


def cmd_mcmc(args) -> int:
    if not args.standard_normal and args.data is None:
        raise ConfigError("mcmc needs --data or --standard-normal")
    chain, summary = ex.run_mcmc(args.data, args.steps, args.burn_in, args.scale, args.seed,
                                 args.adapt, args.standard_normal)
    write_chain_csv(chain, args.out / "chain.csv")
    write_json(args.out / "summary.json", summary)
    return EXIT_OK


def cmd_export_grid(args) -> int:
    flow, base = load_model(args.model)
    if not hasattr(flow, "spec"):
        raise ConfigError("export-grid needs a ddnf model")
    out = ex.export_grid(flow, base, tuple(args.range), args.resolution, args.heatmap_resolution)
    write_rows(args.out / "deformed_grid.csv", ["x", "y", "phi_x", "phi_y"], out["deformed"].tolist())
    write_rows(args.out / "displacement.csv", ["x", "y", "dx", "dy"], out["displacement"].tolist())
    write_rows(args.out / "heatmap.csv", ["x", "y", "log_density"], out["heatmap"].tolist())
    write_json(args.out / "summary.json", out["summary"])
    return EXIT_OK


COMMANDS = {"ode-accuracy": cmd_ode_accuracy, "inversion": cmd_inversion, "fit": cmd_fit,
            "mcmc": cmd_mcmc, "export-grid": cmd_export_grid}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"ddnf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        write_manifest(args.out, args.command, _config_dict(args))
        return COMMANDS[args.command](args)
    except (ConfigError, ModelValidationError, ValueError) as exc:
        print(f"ddnf: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModelFileError, OSError) as exc:
        print(f"ddnf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"ddnf: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
