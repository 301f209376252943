"""Command-line entry point.

Subcommands ``verify``, ``transport``, ``simulate``, ``couple`` and ``moments``
share a JSON configuration (see ``config_schema.json``). Defaults are merged
with the ``--config`` file, then with command-line flags, and the result is
validated before anything runs.

Exit codes: 0 success, 1 verification violation, 2 input or validation
error, 3 solver cap exceeded, 4 numerical abort.
"""

import argparse
import copy
import json
import math
import os
import sys
import time
import warnings
from importlib import resources

import jsonschema
import numba
import numpy as np

from . import rng as rngmod
from .experiments import lipschitz_scaling
from .initial import make_initial
from .io import CsvError, read_points, to_jsonable, write_csv, write_json
from .moments import empirical_moment, gaussian_moment
from .simulator import (DiagnosticsConfig, NumericalAbort, ParticleEnsemble, SchemeConfig,
                        diagnostics, step)
from .transport import (CostParams, DiscreteMeasure, SolverCapError, check_solver_cap,
                        optimal_cost)
from .verify import SUITES

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_INPUT = 2
EXIT_SOLVER_CAP = 3
EXIT_ABORT = 4

SCHEMA_VERSION = 1

# per-suite seed offsets from the global seed
SUITE_SEEDS = {"kernel": 0, "ito": 1, "conservation": 2, "transport": 3, "cost": 4, "ode": 5}
CENT_SEEDS = (42, 7)
TOLERANCE_KEYS = {"kernel": ("tol",), "ito": ("tol", "fd_tol"), "conservation": ("tol",),
                  "transport": ("tol",), "cost": ("tol",), "ode": ("tol",)}

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "threads": 1,
    "out_dir": ".",
    "verify": {
        "suites": list(SUITES),
        "tolerance": None,
        "report": "verify_report.json",
        "kernel": {"samples": 1_000_000},
        "ito": {"samples": 100_000, "fd_samples": 10_000, "p_list": [2.0, 2.5, 3.0, 4.0],
                "eps_list": [0.0, 0.05, 0.25, 1.0], "gamma_list": [0.5, 1.0]},
        "cent": {"p_list": [2.5, 3.0, 4.0], "gamma_list": [0.5, 1.0],
                 "eps_list": [0.05, 0.25, 1.0], "fit_samples": 100_000,
                 "validate_samples": 1_000_000},
        "conservation": {"samples": 1_000_000, "gamma_list": [0.25, 0.5, 1.0]},
        "transport": {"instances": 500, "max_n": 7, "p_list": [2.0, 2.5, 4.0],
                      "eps_list": [0.0, 0.5, 1.0]},
        "cost": {"samples": 1_000_000, "rti_samples": 100_000},
        "ode": {"draws": 100, "t_grid": [0.01, 0.1, 1.0, 10.0]},
    },
    "transport": {"p": 2.0, "eps": 1.0, "coupling": None, "assignment_cap": 5000,
                  "lp_cap": 1_000_000},
    "simulate": {
        "n": 500, "gamma": 1.0, "dt": 0.001, "steps": 100, "scheme": "pairwise-noise",
        "truncation_k": None, "conserve": False, "initial": {"kind": "gaussian"},
        "record_every": 1, "orders": [2.0, 4.0], "gaussian_a": 0.1,
        "timeseries": "timeseries.csv", "final": "final.csv", "manifest": "manifest.json",
    },
    "couple": {
        "n": 500, "gamma": 1.0, "dt": 0.005, "t_final": 1.0, "p": 3.0, "eps": 1.0,
        "temperature": 1.0, "cost_level": 0.1, "scales": [1.0, 0.5, 0.25], "record_every": 20,
        "assignment_cap": 1000, "report": "stability.csv", "final": "couple_final.csv",
        "manifest": "couple_manifest.json",
    },
    "moments": {"orders": [2.0, 4.0, 6.0], "gaussian_a": [0.1], "output": "moments.csv"},
}


class InputError(Exception):
    """Bad configuration or input data; maps to exit code 2."""


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

def load_schema(name):
    return json.loads(resources.files("landaulab").joinpath(name).read_text())


def _check(schema, obj, what):
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.absolute_path))
    if errors:
        lines = [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errors]
        raise InputError(f"invalid {what}: " + "; ".join(lines))


def validate_config(cfg):
    _check(load_schema("config_schema.json"), cfg, "configuration")


def validate_manifest(manifest):
    """Check a manifest and the configuration embedded in it."""
    _check(load_schema("manifest_schema.json"), manifest, "manifest")
    validate_config(manifest["config"])


def merge(base, override):
    """Recursive dict merge; lists and scalars in ``override`` replace."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as err:
        raise InputError(f"cannot read config {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise InputError(f"config {path} is not valid JSON: {err}") from None
    if not isinstance(data, dict):
        raise InputError(f"config {path} must hold a JSON object")
    return data


def effective_config(args):
    """Defaults, then the config file, then flags; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if "config" in args:
        cfg = merge(cfg, _read_config(args["config"]))
    for key in ("seed", "threads", "out_dir"):
        if key in args:
            cfg[key] = args[key]
    for dest, value in args.items():
        if "." in dest:
            section, key = dest.split(".", 1)
            cfg[section][key] = value
    validate_config(cfg)
    return cfg


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _flag(parser, name, dest, **kw):
    parser.add_argument(name, dest=dest, default=argparse.SUPPRESS, **kw)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    _flag(common, "--seed", "seed", type=int, help="run seed (default 0)")
    _flag(common, "--threads", "threads", type=int, help="threads for compiled loops")
    _flag(common, "--config", "config", help="JSON configuration file")
    _flag(common, "--out-dir", "out_dir", help="directory for output files")
    _flag(common, "--dump-config", "dump_config", action="store_true",
          help="print the effective configuration and exit")

    parser = argparse.ArgumentParser(prog="landaulab", parents=[common],
                                     description="Landau dynamics toolkit.")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("verify", parents=[common], help="run the sampled verification suites")
    _flag(p, "--suites", "verify.suites", nargs="+", choices=list(SUITES))
    _flag(p, "--tolerance", "verify.tolerance", type=float,
          help="override the tolerance of every suite that has one")
    _flag(p, "--report", "verify.report", help="JSON report path")

    p = sub.add_parser("transport", parents=[common], help="exact transport cost between CSVs")
    p.add_argument("file_a", nargs="?")
    p.add_argument("file_b", nargs="?")
    _flag(p, "--p", "transport.p", type=float)
    _flag(p, "--eps", "transport.eps", type=float)
    _flag(p, "--coupling", "transport.coupling", help="write the optimal plan to this CSV")

    p = sub.add_parser("simulate", parents=[common], help="run a particle simulation")
    _flag(p, "--n", "simulate.n", type=int)
    _flag(p, "--gamma", "simulate.gamma", type=float)
    _flag(p, "--dt", "simulate.dt", type=float)
    _flag(p, "--steps", "simulate.steps", type=int)
    _flag(p, "--scheme", "simulate.scheme", choices=["meanfield", "pairwise-noise"])
    _flag(p, "--truncation-k", "simulate.truncation_k", type=float)
    _flag(p, "--conserve", "simulate.conserve", action="store_true",
          help="pin momentum and energy after each step (variance reduction, not part of "
               "the dynamics)")
    _flag(p, "--initial", "simulate.initial", type=lambda s: {"kind": "file", "path": s},
          help="initial ensemble CSV")
    _flag(p, "--record-every", "simulate.record_every", type=int)

    p = sub.add_parser("couple", parents=[common], help="coupled stability experiment")
    _flag(p, "--n", "couple.n", type=int)
    _flag(p, "--gamma", "couple.gamma", type=float)
    _flag(p, "--dt", "couple.dt", type=float)
    _flag(p, "--t-final", "couple.t_final", type=float)
    _flag(p, "--p", "couple.p", type=float)
    _flag(p, "--eps", "couple.eps", type=float)
    _flag(p, "--cost-level", "couple.cost_level", type=float)
    _flag(p, "--scales", "couple.scales", type=float, nargs="+")
    _flag(p, "--record-every", "couple.record_every", type=int)
    _flag(p, "--assignment-cap", "couple.assignment_cap", type=int)

    p = sub.add_parser("moments", parents=[common], help="moments of an ensemble CSV")
    p.add_argument("input", nargs="?")
    _flag(p, "--orders", "moments.orders", type=float, nargs="+")
    _flag(p, "--gaussian-a", "moments.gaussian_a", type=float, nargs="+")
    _flag(p, "--output", "moments.output")
    return parser


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _out(cfg, name):
    return os.path.join(cfg["out_dir"], name)


def _measure(path):
    pts, w = read_points(path)
    try:
        return DiscreteMeasure.uniform(pts) if w is None else DiscreteMeasure(pts, w)
    except ValueError as err:
        raise InputError(f"{path}: {err}") from None


def _suite_kwargs(name, vcfg, seed):
    kw = dict(vcfg.get(name, {}))
    if name == "cent":
        kw["seed"], kw["validate_seed"] = seed + CENT_SEEDS[0], seed + CENT_SEEDS[1]
    else:
        kw["seed"] = seed + SUITE_SEEDS[name]
    if vcfg["tolerance"] is not None:
        for key in TOLERANCE_KEYS.get(name, ()):
            kw[key] = vcfg["tolerance"]
    return kw


def cmd_verify(cfg, args, out=sys.stdout, err=sys.stderr):
    vcfg = cfg["verify"]
    records = []
    for name in vcfg["suites"]:
        start = time.perf_counter()
        recs = SUITES[name](**_suite_kwargs(name, vcfg, cfg["seed"]))
        # timing goes to stdout only so the report stays byte-identical across runs
        print(f"suite {name} finished in {time.perf_counter() - start:.1f} s", file=out)
        for r in recs:
            print(f"{r['suite']:<13} {r['check']:<50} samples={r['samples']:<8} "
                  f"violations={r['violations']:<6} max={r['max_violation']:.3g}"
                  + (f" C={r['fitted_constant']:.6g}" if "fitted_constant" in r else ""),
                  file=out)
        records.extend(recs)
    failed = [r for r in records if r["violations"]]
    report = {"schema_version": SCHEMA_VERSION, "seed": cfg["seed"], "passed": not failed,
              "suites": vcfg["suites"], "records": records}
    path = _out(cfg, vcfg["report"])
    write_json(path, report)
    for r in failed:
        print(f"VIOLATION {r['suite']}/{r['check']}: {r['violations']} of {r['samples']}, "
              f"worst sample {json.dumps(r['worst_sample'])}", file=err)
    print(f"report: {path}", file=out)
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_transport(cfg, args, out=sys.stdout, err=sys.stderr):
    if not (args.get("file_a") and args.get("file_b")):
        raise InputError("transport needs two CSV files")
    tcfg = cfg["transport"]
    F, G = _measure(args["file_a"]), _measure(args["file_b"])
    check_solver_cap(F.n, G.n, F.weights, G.weights, tcfg["assignment_cap"], tcfg["lp_cap"])
    try:
        value, plan = optimal_cost(F, G, CostParams(tcfg["p"], tcfg["eps"]))
    except ValueError as e:
        raise InputError(str(e)) from None
    print(f"{value:.12g}", file=out)
    if tcfg["coupling"]:
        i, j = np.nonzero(plan > 0.0)
        write_csv(_out(cfg, tcfg["coupling"]), ["i", "j", "mass"],
                  [(a, b, plan[a, b]) for a, b in zip(i, j)])
    return EXIT_OK


def initial_velocities(desc, n, seed):
    """Initial ensemble from a config entry; library samplers draw from a keyed stream."""
    kind = desc["kind"]
    try:
        if kind == "file":
            V, _ = read_points(desc["path"])
        elif kind == "points":
            V = np.array(desc["points"], dtype=float)
        else:
            rng = rngmod.stream(seed, 0, 0, rngmod.TAG_INITIAL)
            V = make_initial(desc, n, rng)
    except (KeyError, TypeError, ValueError) as e:
        raise InputError(f"initial condition {desc!r}: {e}") from None
    return V


def _diag_columns(orders):
    orders = [2.0, 4.0] + [p for p in orders if p not in (2.0, 4.0)]
    return orders, ["t", "px", "py", "pz"] + [f"m{p:g}" for p in orders] + ["gauss",
                                                                           "gauss_clipped"]


def cmd_simulate(cfg, args, out=sys.stdout, err=sys.stderr):
    scfg = cfg["simulate"]
    V0 = initial_velocities(scfg["initial"], scfg["n"], cfg["seed"])
    try:
        E = ParticleEnsemble(V0, scfg["gamma"], seed=cfg["seed"])
        scheme = SchemeConfig(dt=scfg["dt"], steps=scfg["steps"], scheme=scfg["scheme"],
                              truncation_k=scfg["truncation_k"], conserve=scfg["conserve"])
    except ValueError as e:
        raise InputError(str(e)) from None
    orders, header = _diag_columns(scfg["orders"])
    dcfg = DiagnosticsConfig(orders=tuple(orders), gaussian_a=scfg["gaussian_a"])
    rows = [diagnostics(E, dcfg)]
    status, message = "ok", None
    try:
        for s in range(scheme.steps):
            E = step(E, scheme)
            if (s + 1) % scfg["record_every"] == 0 or s + 1 == scheme.steps:
                rows.append(diagnostics(E, dcfg))
    except NumericalAbort as e:
        E, status, message = e.last_state, "aborted", str(e)
    write_csv(_out(cfg, scfg["timeseries"]), header, [[r[h] for h in header] for r in rows])
    write_csv(_out(cfg, scfg["final"]), ["x", "y", "z"], E.velocities)
    manifest = {"schema_version": SCHEMA_VERSION, "command": "simulate", "status": status,
                "seed": cfg["seed"], "scheme": scheme.scheme, "dt": scheme.dt, "n": E.n,
                "gamma": E.gamma, "steps_completed": E.step_index, "time": E.time,
                "config": cfg,
                "outputs": {"timeseries": scfg["timeseries"], "final": scfg["final"]},
                "summary": rows[-1]}
    if message:
        manifest["message"] = message
    manifest = to_jsonable(manifest)
    validate_manifest(manifest)
    write_json(_out(cfg, scfg["manifest"]), manifest)
    if status == "aborted":
        print(f"numerical abort at step {E.step_index}: {message}", file=err)
        return EXIT_ABORT
    print(f"{E.step_index} steps, t = {E.time:.6g}, m2 = {rows[-1]['m2']:.12g}", file=out)
    return EXIT_OK


COUPLE_HEADER = ["t", "scale", "initial_cost", "aligned_cost", "optimal_cost", "mp_base",
                 "mp_perturbed", "mpg_base", "mpg_perturbed", "exponent"]


def fitted_stability_constant(series, initial):
    """Smallest C with cost(t) <= cost(0) exp(C * exponent(t)) on the recorded times."""
    out = []
    for k, c0 in enumerate(initial):
        later = [(r["aligned"][k], r["exponent"][k]) for r in series if r["t"] > 0]
        if c0 == 0.0:
            out.append(0.0 if all(c == 0.0 for c, _ in later) else math.inf)
        else:
            out.append(max(math.log(c / c0) / e if c > 0 else -math.inf for c, e in later))
    return out


def cmd_couple(cfg, args, out=sys.stdout, err=sys.stderr):
    c = cfg["couple"]
    if round(c["t_final"] / c["dt"]) < 1:
        raise InputError("couple needs t_final >= dt")
    status, message = "ok", None
    try:
        res = lipschitz_scaling(c["n"], c["cost_level"], tuple(c["scales"]), (c["t_final"],),
                                dt=c["dt"], seed=cfg["seed"], gamma=c["gamma"], p=c["p"],
                                eps=c["eps"], temperature=c["temperature"],
                                record_every=c["record_every"],
                                assignment_cap=c["assignment_cap"])
        stack = res["final"]
    except NumericalAbort as e:
        res, stack, status, message = None, e.last_state, "aborted", str(e)
    outputs = {"final": c["final"]}
    summary = {}
    if res is not None:
        rows = []
        for r in res["series"]:
            m = r["moments"]
            for k, s in enumerate(c["scales"]):
                rows.append([r["t"], s, res["initial_cost"][k], r["aligned"][k], r["optimal"][k],
                             m[0, 0], m[k + 1, 0], m[0, 1], m[k + 1, 1], r["exponent"][k]])
        write_csv(_out(cfg, c["report"]), COUPLE_HEADER, rows)
        outputs["report"] = c["report"]
        summary = {"amplitude": res["amplitude"], "initial_cost": res["initial_cost"],
                   "final_cost": res["costs"][-1], "ratios": res["ratios"][-1],
                   "fitted_constant": fitted_stability_constant(res["series"],
                                                                res["initial_cost"])}
    copies = [[k, *v] for k, V in enumerate(stack) for v in V]
    write_csv(_out(cfg, c["final"]), ["copy", "x", "y", "z"], copies)
    manifest = {"schema_version": SCHEMA_VERSION, "command": "couple", "status": status,
                "seed": cfg["seed"], "scheme": "pairwise-noise", "dt": c["dt"], "n": c["n"],
                "gamma": c["gamma"], "config": cfg, "outputs": outputs, "summary": summary}
    if message:
        manifest["message"] = message
    manifest = to_jsonable(manifest)
    validate_manifest(manifest)
    write_json(_out(cfg, c["manifest"]), manifest)
    if status == "aborted":
        print(f"numerical abort: {message}", file=err)
        return EXIT_ABORT
    for s, v in zip(c["scales"], summary["final_cost"]):
        print(f"scale {s:g}: cost {v:.12g} at t = {c['t_final']:g}", file=out)
    return EXIT_OK


def cmd_moments(cfg, args, out=sys.stdout, err=sys.stderr):
    if not args.get("input"):
        raise InputError("moments needs an input CSV")
    mcfg = cfg["moments"]
    F = _measure(args["input"])
    rows = [["moment", p, empirical_moment(F, p), 0] for p in mcfg["orders"]]
    for a in mcfg["gaussian_a"]:
        g = gaussian_moment(F, a)
        rows.append(["gaussian", a, g.value, int(g.clipped)])
    header = ["kind", "parameter", "value", "clipped"]
    write_csv(_out(cfg, mcfg["output"]), header, rows)
    for r in rows:
        print(f"{r[0]} {r[1]:g} {r[2]:.12g}" + (" (clipped)" if r[3] else ""), file=out)
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "transport": cmd_transport, "simulate": cmd_simulate,
            "couple": cmd_couple, "moments": cmd_moments}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    parser = build_parser()
    try:
        args = vars(parser.parse_args(argv))
    except SystemExit as e:
        return EXIT_INPUT if e.code else EXIT_OK
    command = args.pop("command", None)
    try:
        cfg = effective_config(args)
        if args.get("dump_config"):
            print(json.dumps(cfg, indent=2, sort_keys=True), file=out)
            return EXIT_OK
        if command is None:
            parser.print_help(err)
            return EXIT_INPUT
        with warnings.catch_warnings():
            # an outdated TBB only means numba falls back to another threading layer
            warnings.filterwarnings("ignore", message=".*TBB", category=numba.NumbaWarning)
            numba.set_num_threads(min(cfg["threads"], numba.config.NUMBA_NUM_THREADS))
        return COMMANDS[command](cfg, args, out, err)
    except (InputError, CsvError) as e:
        print(f"error: {e}", file=err)
        return EXIT_INPUT
    except OSError as e:
        print(f"error: cannot read {e.filename}: {e.strerror}", file=err)
        return EXIT_INPUT
    except SolverCapError as e:
        print(f"error: {e}", file=err)
        return EXIT_SOLVER_CAP


if __name__ == "__main__":
    sys.exit(main())
