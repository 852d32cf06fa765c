"""``revode`` command line: reproduce the benchmark studies as CSV and SVG files.

Every subcommand reads an optional JSON config whose keys override the
defaults printed by ``revode <subcommand> --help``.  Unknown keys are
rejected.  Exit codes: 0 success, 1 tolerance failure, 2 config error,
3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import experiments as ex
from .dynamics import DynamicsError
from .integrators import IntegrationError, get_method
from .svgplot import loglog_svg
from .training import TrainingDiverged

EXIT_OK, EXIT_TOLERANCE, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

METHODS4 = ["ALF", "ALF2", "Y4", "Y6"]

# desk-scale defaults per subcommand; PAPER_SCALE below holds the --paper-scale overrides
DEFAULTS = {
    "order-check": {
        "system": "example-ode",
        "methods": METHODS4,
        "h_max": 0.5,
        "levels": 10,
        "fit_levels": 7,
        "z0": ex.EXAMPLE_Z0,
        "reference_tol": 1e-13,
    },
    "gradcheck": {
        "systems": list(ex.GRADCHECK_SYSTEMS),
        "methods": METHODS4,
        "h": 0.05,
        "tolerance": 1e-6,
        "probes": 10,
        "fd_eps": 1e-6,
        "fd_tol": 1e-5,
        "oracle_tol": 1e-10,
        "corrupt_scaling": 1.0,
    },
    "kepler": {
        "system": "kepler",
        "methods": ["ALF", "Y4"],
        "inits": list(ex.KEPLER_INITS),
        "tolerance": 1e-9,
        "lr0": 0.1,
        "gamma": 0.99,
        "target_loss": 1e-8,
        "max_epochs": 500,
    },
    "landscape": {
        "system": "kepler",
        "methods": ["ALF", "Y4"],
        "h0": 0.1,
        "levels": 3,
        "grid": 300,
        "width": 1e-4,
        "trajectories": 1,
    },
    "oscillator": {
        "system": "duffing",
        "n": 2,
        "methods": ["ALF", "Y4"],
        "trajectories": 200,
        "t_end": 0.5,
        "diameter": 2.0,
        "init_radius": 1.5,
        "lr0": 0.05,
        "gamma": 0.995,
        "h": 0.1,
        "fixed_epochs": 500,
        "tolerance": 1e-8,
        "target_loss": 1e-5,
        "max_epochs": 500,
    },
    "wave": {
        "system": "wave",
        "m": 20,
        "hidden": 100,
        "methods": ["ALF", "Y4"],
        "train": 50,
        "test": 30,
        "t_end": 0.3,
        "tolerance": 1e-4,
        "lr0": 1e-2,
        "gamma": 0.995,
        "epochs": 300,
    },
}
COMMON = {"seed": 0, "threads": 1, "output": "out"}

PAPER_SCALE = {
    "order-check": {},
    "gradcheck": {},
    "kepler": {},
    "landscape": {"trajectories": 81},
    "oscillator": {"n": 10, "init_radius": 0.5, "lr0": 0.01, "target_loss": 1e-4, "max_epochs": 5000,
                   "fixed_epochs": 500},
    "wave": {"epochs": 2000},
}

SYSTEMS = {
    "order-check": ("example-ode",),
    "kepler": ("kepler",),
    "landscape": ("kepler",),
    "oscillator": ("duffing",),
    "wave": ("wave",),
}

HEADERS = {
    "order.csv": ("method", "h", "err_z", "err_v"),
    "order_slopes.csv": ("method", "slope_z", "slope_v"),
    "gradcheck.csv": ("system", "method", "mode", "P", "oracle_rel_err", "fd_rel_err", "passed"),
    "kepler.csv": ("init", "method", "epochs", "seconds", "fevals", "alpha_error", "converged", "final_loss"),
    "landscape.csv": ("method", "h", "alpha", "loss"),
    "landscape_minima.csv": ("method", "h", "argmin_offset", "fitted_offset"),
    "oscillator_fixed.csv": ("method", "epoch", "loss", "seconds", "fevals", "param_error"),
    "oscillator_adaptive.csv": ("method", "epochs", "seconds", "fevals", "final_loss", "param_error",
                                "converged"),
    "wave.csv": ("method", "epoch", "loss", "seconds", "fevals"),
    "wave_summary.csv": ("method", "epochs", "seconds", "fevals", "train_loss", "test_loss_untrained",
                         "test_loss_trained"),
}


class ConfigError(ValueError):
    pass


# configuration -------------------------------------------------------------------------


def _check_type(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")
    return value


def resolve_config(command, raw=None, paper_scale=False, overrides=None):
    """Merge defaults, the paper-scale preset, the JSON document and CLI flags."""
    defaults = dict(COMMON, **DEFAULTS[command])
    cfg = dict(defaults)
    if paper_scale:
        cfg.update(PAPER_SCALE[command])
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("the config file must hold a JSON object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
    for key, value in raw.items():
        cfg[key] = _check_type(key, value, defaults[key])
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg[key] = value
    _validate(command, cfg)
    return cfg


def _validate(command, cfg):
    if command in SYSTEMS and cfg["system"] not in SYSTEMS[command]:
        raise ConfigError(f"{command} supports system {SYSTEMS[command]}, not {cfg['system']!r}")
    for name in cfg.get("methods", []):
        if not isinstance(name, str):
            raise ConfigError(f"method names must be strings, got {name!r}")
        try:
            m = get_method(name)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        if not m.reversible:
            raise ConfigError(f"method {name} is not reversible")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be at least 1")
    for key in ("tolerance", "h", "h0", "h_max", "lr0", "width", "reference_tol"):
        if key in cfg and not cfg[key] > 0:
            raise ConfigError(f"{key} must be positive")
    if "gamma" in cfg and not 0 < cfg["gamma"] <= 1:
        raise ConfigError("gamma must lie in (0, 1]")
    if command == "gradcheck":
        bad = set(cfg["systems"]) - set(ex.GRADCHECK_SYSTEMS)
        if bad:
            raise ConfigError(f"unknown gradcheck systems {sorted(bad)}")
    if command == "landscape" and cfg["trajectories"] not in (1, 81):
        raise ConfigError("landscape trajectories must be 1 (x0 only) or 81 (grid around x0)")
    if command == "oscillator" and cfg["n"] < 2:
        raise ConfigError("need at least two oscillators")


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


# output helpers ----------------------------------------------------------------------------


def _fmt(x):
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(outdir, name, rows):
    path = os.path.join(outdir, name)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADERS[name])
        for row in rows:
            w.writerow([_fmt(x) for x in row])
    return path


# subcommands -----------------------------------------------------------------------------


def cmd_order_check(cfg, out):
    rows = ex.order_study(cfg["methods"], cfg["levels"], cfg["h_max"], cfg["z0"],
                          reference_tol=cfg["reference_tol"], threads=cfg["threads"])
    write_csv(out, "order.csv", rows)
    slopes = ex.order_slopes(rows, cfg["fit_levels"])
    write_csv(out, "order_slopes.csv", [(k, sz, sv) for k, (sz, sv) in slopes.items()])
    series = {}
    for name in cfg["methods"]:
        sel = [r for r in rows if r[0] == name]
        series[f"{name} z"] = ([r[1] for r in sel], [r[2] for r in sel])
        series[f"{name} v"] = ([r[1] for r in sel], [r[3] for r in sel])
    loglog_svg(os.path.join(out, "order.svg"), series, "Global error at t=1", "h", "error")
    for name, (sz, sv) in slopes.items():
        print(f"{name:5s} slope z {sz:6.3f}   slope v {sv:6.3f}")
    return EXIT_OK


def cmd_gradcheck(cfg, out):
    rows = ex.gradcheck(cfg["systems"], cfg["methods"], cfg["h"], cfg["tolerance"], cfg["probes"],
                        cfg["fd_eps"], cfg["fd_tol"], cfg["oracle_tol"], cfg["corrupt_scaling"],
                        cfg["seed"], cfg["threads"])
    write_csv(out, "gradcheck.csv", rows)
    worst = {}
    for system, method, _mode, p, orc, fd, ok in rows:
        w = worst.setdefault((system, method), [p, 0.0, 0.0, True])
        w[1], w[2], w[3] = max(w[1], orc), max(w[2], fd), w[3] and ok
    print(f"{'system':18s} {'method':6s} {'P':>5s} {'oracle':>10s} {'fd':>10s}")
    for (system, method), (p, orc, fd, ok) in worst.items():
        note = "  (empty gradient)" if p == 0 else ""
        print(f"{system:18s} {method:6s} {p:5d} {orc:10.2e} {fd:10.2e} {'pass' if ok else 'FAIL'}{note}")
    passed = all(r[-1] for r in rows)
    print("gradcheck:", "all checks within tolerance" if passed else "tolerance exceeded")
    return EXIT_OK if passed else EXIT_TOLERANCE


def cmd_kepler(cfg, out):
    rows = ex.kepler_study(cfg["inits"], cfg["methods"], cfg["tolerance"], cfg["lr0"], cfg["gamma"],
                           cfg["target_loss"], cfg["max_epochs"], cfg["threads"])
    write_csv(out, "kepler.csv", rows)
    for a0, name, epochs, secs, fe, err, conv, loss in rows:
        print(f"alpha0={a0:<5g} {name:4s} epochs={epochs:4d} fevals={fe:8d} "
              f"|alpha-pi/4|={err:.2e} loss={loss:.2e} {'ok' if conv else 'not converged'} ({secs:.2f}s)")
    return EXIT_OK


def cmd_landscape(cfg, out):
    starts = ex.kepler_grid_starts() if cfg["trajectories"] == 81 else None
    rows, summary = ex.landscape_study(cfg["h0"], cfg["levels"], cfg["grid"], cfg["width"], cfg["methods"],
                                       starts, cfg["threads"])
    write_csv(out, "landscape.csv", rows)
    write_csv(out, "landscape_minima.csv", [(m, h, a, b) for (m, h), (a, b) in summary.items()])
    series = {}
    for name in cfg["methods"]:
        hs = sorted(h for (m, h) in summary if m == name)
        series[name] = (hs, [abs(summary[(name, h)][1]) for h in hs])
    loglog_svg(os.path.join(out, "landscape_drift.svg"), series, "Loss minimiser drift", "h",
               "|alpha* - pi/4|")
    for (name, h), (grid, fit) in summary.items():
        print(f"{name:4s} h={h:<7g} grid argmin offset {grid:+.3e}  fitted minimiser offset {fit:+.3e}")
    for name, slope in ex.drift_slopes(summary).items():
        print(f"{name:4s} drift slope {slope:.3f}")
    return EXIT_OK


def cmd_oscillator(cfg, out):
    problem = ex.duffing_problem(cfg["n"], cfg["trajectories"], cfg["t_end"], cfg["diameter"], cfg["seed"])
    print(f"coupled oscillators: N={cfg['n']}, d={problem.field.d}, P={problem.field.P}")
    theta0 = ex.duffing_init(problem, cfg["init_radius"], cfg["seed"])
    fixed = ex.plateau_study(problem, theta0, cfg["h"], cfg["fixed_epochs"], cfg["lr0"], cfg["gamma"],
                             cfg["methods"], cfg["threads"])
    rows = [(name,) + tuple(r) for name, (_, rec) in fixed.items() for r in rec.rows]
    write_csv(out, "oscillator_fixed.csv", rows)
    loglog_svg(os.path.join(out, "oscillator_fixed.svg"),
               {n: ([r[0] + 1 for r in rec.rows], rec.losses) for n, (_, rec) in fixed.items()},
               f"Fixed step h={cfg['h']}", "epoch + 1", "training loss")
    for name, (_, rec) in fixed.items():
        print(f"fixed h={cfg['h']} {name:4s} final loss {rec.final_loss:.3e} after {len(rec.rows) - 1} epochs")
    race = ex.adaptive_race(problem, theta0, cfg["tolerance"], cfg["target_loss"], cfg["max_epochs"], cfg["lr0"],
                            cfg["gamma"], methods=cfg["methods"], threads=cfg["threads"])
    rows = []
    for name, (_, rec) in race.items():
        last = rec.rows[-1]
        rows.append((name, last[0], last[2], last[3], last[1], last[4], rec.converged))
        print(f"adaptive {name:4s} epochs={last[0]} fevals={last[3]} loss={last[1]:.3e} "
              f"param error={last[4]:.3e} {'reached target' if rec.converged else 'target not reached'}")
    write_csv(out, "oscillator_adaptive.csv", rows)
    return EXIT_OK


def cmd_wave(cfg, out):
    field, res = ex.wave_study(cfg["m"], cfg["hidden"], cfg["train"], cfg["test"], cfg["t_end"], cfg["tolerance"],
                               cfg["lr0"], cfg["gamma"], cfg["epochs"], cfg["methods"], cfg["seed"],
                               cfg["threads"])
    print(f"wave model: mesh {cfg['m']}, d={field.d}, P={field.P}")
    curves, summary = [], []
    for name, (_, rec, before, after) in res.items():
        curves.extend((name, r[0], r[1], r[2], r[3]) for r in rec.rows)
        summary.append((name, rec.rows[-1][0], rec.rows[-1][2], rec.fevals, rec.final_loss, before, after))
        print(f"{name:4s} train loss {rec.final_loss:.3e} fevals {rec.fevals}; test loss {before:.3e} -> "
              f"{after:.3e} ({before / after:.1f}x lower)")
    write_csv(out, "wave.csv", curves)
    write_csv(out, "wave_summary.csv", summary)
    loglog_svg(os.path.join(out, "wave.svg"),
               {n: ([r[0] + 1 for r in rec.rows], rec.losses) for n, (_, rec, _, _) in res.items()},
               "Wave model training", "epoch + 1", "training loss")
    return EXIT_OK


COMMANDS = {
    "order-check": (cmd_order_check, "global-error slopes of ALF, ALF2, Y4, Y6 on the example ODE"),
    "gradcheck": (cmd_gradcheck, "adjoint gradients against the full-storage and finite-difference oracles"),
    "kepler": (cmd_kepler, "adaptive identification of the Kepler constant from several starts"),
    "landscape": (cmd_landscape, "fixed-step loss landscape and minimiser drift for Kepler"),
    "oscillator": (cmd_oscillator, "coupled Duffing oscillators: fixed-step plateau and adaptive cost"),
    "wave": (cmd_wave, "learn the force of a discretised wave equation"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="revode",
        description="Reversible ALF/Yoshida integrators with exact adjoint gradients: benchmark studies.",
        epilog="Exit codes: 0 success, 1 tolerance failure, 2 config error, 3 numerical divergence.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name, (_, help_text) in COMMANDS.items():
        defaults = dict(COMMON, **DEFAULTS[name])
        lines = [f"  {k} = {json.dumps(v)}" for k, v in defaults.items()]
        if PAPER_SCALE[name]:
            lines.append("--paper-scale sets: " + json.dumps(PAPER_SCALE[name]))
        p = sub.add_parser(name, help=help_text, description=help_text,
                           formatter_class=argparse.RawDescriptionHelpFormatter,
                           epilog="config keys and defaults:\n" + "\n".join(lines))
        p.add_argument("--config", metavar="FILE", help="JSON object overriding the defaults below")
        p.add_argument("--out", metavar="DIR", help="output directory (config key 'output')")
        p.add_argument("--seed", type=int, help="random seed (config key 'seed')")
        p.add_argument("--threads", type=int, help="worker threads for independent runs")
        p.add_argument("--paper-scale", action="store_true", help="use the full-size experiment settings")
        p.add_argument("--dry-run", action="store_true", help="validate the config and print the plan only")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, load_config(args.config), args.paper_scale,
                             {"output": args.out, "seed": args.seed, "threads": args.threads})
    except ConfigError as exc:
        print(f"revode: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dry_run:
        print(json.dumps({"command": args.command, "paper_scale": args.paper_scale, "config": cfg}, indent=2))
        return EXIT_OK
    os.makedirs(cfg["output"], exist_ok=True)
    fn = COMMANDS[args.command][0]
    try:
        return fn(cfg, cfg["output"])
    except (IntegrationError, DynamicsError, TrainingDiverged, FloatingPointError) as exc:
        print(f"revode: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"revode: invalid setting: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
