"""Command-line interface: ``sketchcpd <command> [options]``.

Every option can also come from a ``--config`` file of ``key = value`` lines
(``#`` starts a comment; keys are the long option names with ``-`` or ``_``).
Explicit flags override the file, and the fully resolved configuration is
echoed as ``#`` lines at the top of the output.

Exit codes: 0 success (or alarm raised), 2 usage or domain error, 3 the input
stream ended without an alarm.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import experiments, theory
from .detector import FixedSketchDetector, MissingDataDetector
from .montecarlo import CalibrationError, EstimationError, SimPlan, calibrate_b_mc, default_threads, simulate
from .numerics import NotPositiveDefiniteError, RngStream
from .projections import ConstructionError, gaussian_projection, identity_projection, load_projection

EXIT_OK, EXIT_USAGE, EXIT_NO_ALARM = 0, 2, 3


class UsageError(Exception):
    pass


# option tables: name -> (type, default, help). Types: int, float, str, bool.
_COMMON = {
    "config": (str, "", "key = value configuration file"),
    "seed": (int, 0, "root seed for every random stream"),
    "threads": (int, 0, "worker threads (default: $SKETCHCPD_THREADS or CPU count)"),
}
_PLAN = {
    "kind": (str, "fixed", "detector: fixed, cusum, timevarying or grid"),
    "projection": (str, "gaussian", "projection for fixed/cusum: gaussian, expander or identity"),
    "N": (int, 100, "signal dimension"),
    "M": (int, 50, "number of sketches (observed entries / nodes per step)"),
    "w": (int, 200, "window length"),
    "degree": (int, 0, "expander column degree"),
    "replicates": (int, 2000, "Monte Carlo replicates"),
    "horizon_cap": (int, 0, "step cap per replicate (default 20x target ARL)"),
    "topology": (str, "", "edge-list file for the grid kind"),
}
COMMANDS = {
    "calibrate": {
        **_PLAN,
        "arl": (float, 5000.0, "target ARL"),
        "method": (str, "theory", "theory or montecarlo"),
    },
    "arl": {
        **_PLAN,
        "b": (float, math.nan, "threshold"),
        "method": (str, "theory", "theory or montecarlo"),
    },
    "detect": {
        "input": (str, "", "CSV stream file (one row per step)"),
        "stdin": (bool, False, "read the stream from standard input"),
        "mode": (str, "fixed", "fixed (rows are sketches) or missing (rows of N, empty = unobserved)"),
        "projection_file": (str, "", "projection CSV (fixed mode)"),
        "projection": (str, "identity", "projection to build when no file is given: identity or gaussian"),
        "N": (int, 0, "signal dimension for a built projection (default: row width)"),
        "b": (float, math.nan, "threshold"),
        "w": (int, 200, "window length"),
    },
    "simulate": {
        **_PLAN,
        "b": (float, math.nan, "threshold"),
        "what": (str, "arl", "arl or edd"),
        "mu_value": (float, 0.0, "post-change mean of affected entries"),
        "mu_fraction": (float, 1.0, "fraction of affected entries"),
        "target_arl": (float, 5000.0, "sets the default horizon cap"),
    },
    "experiment": {
        "name": (str, "", "table1, timevarying, curves, baseline or grid"),
        "scale": (str, "desk", "desk or paper"),
        "out": (str, "", "report CSV path (default <name>.csv)"),
        "replicates": (int, 0, "override the scale's replicate count"),
        "curve_kind": (str, "gaussian", "curves: gaussian, expander or timevarying"),
        "sweep": (str, "mu0", "curves/grid: mu0 or p"),
        "topology": (str, "", "grid: edge-list file (default synthetic)"),
        "M": (int, 0, "grid: nodes sensed per step"),
        "mu0": (float, math.nan, "grid: single shift value to evaluate"),
        "p": (float, 0.05, "grid: affected edge fraction"),
    },
    "normality": {
        "input": (str, "", "CSV file of residuals (all numeric fields are pooled)"),
        "stdin": (bool, False, "read from standard input"),
        "standardize": (bool, False, "center and scale before testing"),
    },
}
_POSITIONAL = {"experiment": "name"}


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {raw!r}")


def read_config(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` comments and blank lines are ignored."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchcpd", description="Change-point detection on linear sketches.")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, table in COMMANDS.items():
        p = sub.add_parser(cmd)
        if cmd in _POSITIONAL:
            p.add_argument(_POSITIONAL[cmd], nargs="?", default=None)
        for name, (typ, _default, help_) in {**_COMMON, **table}.items():
            if cmd in _POSITIONAL and name == _POSITIONAL[cmd]:
                continue
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=name, action="store_const", const=True, default=None, help=help_)
            else:
                p.add_argument(flag, dest=name, type=typ, default=None, help=help_)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    table = {**_COMMON, **COMMANDS[args.command]}
    cfg = {k: typ_default for k, (_, typ_default, _) in table.items()}
    if args.config:
        for key, raw in read_config(args.config).items():
            if key not in table or key == "config":
                raise UsageError(f"unknown config key {key!r} for command {args.command}")
            typ = table[key][0]
            try:
                cfg[key] = _parse_bool(raw) if typ is bool else typ(raw)
            except ValueError:
                raise UsageError(f"bad value for {key}: {raw!r}") from None
    for key in table:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if not cfg["threads"]:
        cfg["threads"] = default_threads()
    return cfg


def _header(command: str, cfg: dict) -> str:
    lines = [f"# command = {command}"]
    lines += [f"# {k} = {cfg[k]}" for k in sorted(cfg) if k not in ("config", "threads", "out")]
    return "\n".join(lines) + "\n"


def _plan(cfg: dict, **extra) -> SimPlan:
    return SimPlan(
        kind=cfg["kind"], projection=cfg["projection"], N=cfg["N"], M=cfg["M"], window=cfg["w"],
        degree=cfg["degree"], replicates=cfg["replicates"], horizon_cap=cfg["horizon_cap"],
        root_seed=cfg["seed"], threads=cfg["threads"], topology=cfg["topology"], **extra,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_calibrate(cfg: dict, out) -> int:
    target = cfg["arl"]
    if not target > 1:
        raise UsageError(f"target ARL must exceed 1, got {target}")
    if cfg["method"] == "theory":
        if cfg["kind"] == "timevarying":
            b = theory.calibrate_b_timevarying(cfg["N"], cfg["M"], cfg["w"], target)
        elif cfg["kind"] == "fixed":
            b = theory.calibrate_b(cfg["M"], cfg["w"], target)
        else:
            raise UsageError(f"no theory calibration for kind {cfg['kind']!r}")
        out.write(f"{b:.10g}\n")
    elif cfg["method"] == "montecarlo":
        cal = calibrate_b_mc(_plan(cfg, target_arl=target), target)
        out.write("b,arl,arl_stderr,capped\n")
        out.write(f"{cal.b:.10g},{cal.estimate.mean:.10g},{cal.estimate.stderr:.10g},{cal.estimate.capped_count}\n")
    else:
        raise UsageError(f"unknown method {cfg['method']!r}")
    return EXIT_OK


def cmd_arl(cfg: dict, out) -> int:
    b = cfg["b"]
    if math.isnan(b):
        raise UsageError("--b is required")
    if cfg["method"] == "theory":
        if cfg["kind"] == "timevarying":
            arl = theory.arl_timevarying(cfg["N"], cfg["M"], b, cfg["w"])
        elif cfg["kind"] == "fixed":
            arl = theory.arl_fixed(cfg["M"], b, cfg["w"])
        else:
            raise UsageError(f"no theory ARL for kind {cfg['kind']!r}")
        out.write(f"{arl:.10g}\n")
    elif cfg["method"] == "montecarlo":
        res = simulate(_plan(cfg, threshold=b))
        out.write("arl,stderr,std,replicates,capped\n")
        out.write(f"{res.mean:.10g},{res.stderr:.10g},{res.std:.10g},{res.replicates_used},{res.capped_count}\n")
    else:
        raise UsageError(f"unknown method {cfg['method']!r}")
    return EXIT_OK


def cmd_simulate(cfg: dict, out) -> int:
    if math.isnan(cfg["b"]):
        raise UsageError("--b is required")
    if cfg["what"] not in ("arl", "edd"):
        raise UsageError(f"--what must be arl or edd, got {cfg['what']!r}")
    change = "start" if cfg["what"] == "edd" else "never"
    plan = _plan(cfg, threshold=cfg["b"], mu_value=cfg["mu_value"], mu_fraction=cfg["mu_fraction"],
                 target_arl=cfg["target_arl"], change=change)
    res = simulate(plan)
    out.write("what,mean,stderr,std,replicates,capped\n")
    out.write(f"{cfg['what']},{res.mean:.10g},{res.stderr:.10g},{res.std:.10g},{res.replicates_used},{res.capped_count}\n")
    return EXIT_OK


def _open_stream(cfg: dict):
    if cfg["stdin"]:
        return sys.stdin
    if not cfg["input"]:
        raise UsageError("give --input FILE or --stdin")
    try:
        return open(cfg["input"])
    except OSError as exc:
        raise UsageError(f"cannot open {cfg['input']}: {exc}") from None


def _parse_row(line: str, lineno: int, allow_missing: bool) -> np.ndarray:
    fields = line.rstrip("\r\n").split(",")
    row = np.empty(len(fields))
    for i, f in enumerate(fields):
        f = f.strip()
        if not f:
            if not allow_missing:
                raise UsageError(f"line {lineno}: empty field {i + 1} (only allowed in missing mode)")
            row[i] = np.nan
            continue
        try:
            row[i] = float(f)
        except ValueError:
            raise UsageError(f"line {lineno}: field {i + 1} is not a number: {f!r}") from None
    return row


def _data_lines(stream):
    for lineno, line in enumerate(stream, start=1):
        if line.strip() and not line.lstrip().startswith("#"):
            yield lineno, line


def cmd_detect(cfg: dict, out) -> int:
    b, w = cfg["b"], cfg["w"]
    if math.isnan(b):
        raise UsageError("--b is required")
    if cfg["mode"] not in ("fixed", "missing"):
        raise UsageError(f"--mode must be fixed or missing, got {cfg['mode']!r}")
    stream = _open_stream(cfg)
    lines = _data_lines(stream)
    det = None
    width = None
    out.write("t,statistic,khat,fired\n")
    try:
        for lineno, line in lines:
            row = _parse_row(line, lineno, cfg["mode"] == "missing")
            if det is None:
                width = row.size
                det = _make_detector(cfg, width)
            if row.size != width:
                raise UsageError(f"line {lineno}: expected {width} fields, got {row.size}")
            if cfg["mode"] == "missing":
                _, alarm = det.step_row(row)
            else:
                _, alarm = det.step(row)
            out.write(alarm.csv_row() + "\n")
            if alarm.fired:
                sys.stderr.write(f"alarm,{alarm.csv_row()}\n")
                return EXIT_OK
    finally:
        if stream is not sys.stdin:
            stream.close()
    return EXIT_NO_ALARM


def _make_detector(cfg: dict, width: int):
    b, w = cfg["b"], cfg["w"]
    if cfg["mode"] == "missing":
        if cfg["N"] and cfg["N"] != width:
            raise UsageError(f"rows have {width} fields but N={cfg['N']}")
        return MissingDataDetector(width, w, b)
    if cfg["projection_file"]:
        A = load_projection(cfg["projection_file"])
    elif cfg["projection"] == "identity":
        A = identity_projection(width)
    elif cfg["projection"] == "gaussian":
        if not cfg["N"]:
            raise UsageError("--N is required to build a gaussian projection")
        A = gaussian_projection(width, cfg["N"], RngStream(cfg["seed"], 0))
    else:
        raise UsageError(f"unknown projection {cfg['projection']!r}")
    if A.M != width:
        raise UsageError(f"rows have {width} fields but the projection has M={A.M}")
    return FixedSketchDetector(A, w, b)


def cmd_experiment(cfg: dict, out) -> int:
    name = cfg["name"]
    if name not in experiments.EXPERIMENTS:
        raise UsageError(f"unknown experiment {name!r}; choose from {', '.join(experiments.EXPERIMENTS)}")
    common = dict(scale=cfg["scale"], threads=cfg["threads"], replicates=cfg["replicates"] or None)
    if name == "curves":
        report = experiments.run_edd_curves(kind=cfg["curve_kind"], sweep=cfg["sweep"], seed=cfg["seed"], **common)
    elif name == "grid":
        scenario = experiments.FailureScenario(topology=cfg["topology"], p=cfg["p"], seed=cfg["seed"],
                                               M=cfg["M"] or 20, mu0=1.0 if math.isnan(cfg["mu0"]) else cfg["mu0"])
        values = None if math.isnan(cfg["mu0"]) or cfg["sweep"] != "mu0" else (cfg["mu0"],)
        report = experiments.run_power_grid(scenario, sweep=cfg["sweep"], values=values, **common)
    else:
        report = experiments.EXPERIMENTS[name](seed=cfg["seed"], **common)
    path = Path(cfg["out"] or f"{name}.csv")
    path.write_text(_header("experiment", cfg) + report.to_csv())
    out.write(f"{path}\n")
    return EXIT_OK


def cmd_normality(cfg: dict, out) -> int:
    stream = _open_stream(cfg)
    values = []
    try:
        for lineno, line in _data_lines(stream):
            row = _parse_row(line, lineno, True)
            values.extend(row[~np.isnan(row)].tolist())
    finally:
        if stream is not sys.stdin:
            stream.close()
    res = experiments.ks_normality(values, standardize=cfg["standardize"])
    out.write("ks_statistic,pvalue,n\n")
    out.write(f"{res.statistic:.10g},{res.pvalue:.10g},{res.n}\n")
    return EXIT_OK


HANDLERS = {
    "calibrate": cmd_calibrate,
    "arl": cmd_arl,
    "detect": cmd_detect,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "normality": cmd_normality,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    out = sys.stdout
    try:
        cfg = resolve(args)
        if args.command != "experiment":
            out.write(_header(args.command, cfg))
        return HANDLERS[args.command](cfg, out)
    except (UsageError, ValueError, NotPositiveDefiniteError, ConstructionError, EstimationError,
            CalibrationError) as exc:
        sys.stderr.write(f"sketchcpd {args.command}: error: {exc}\n")
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
