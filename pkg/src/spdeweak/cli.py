"""Command-line entry point.

    spdeweak COMMAND [options]

Options come from three layers, later ones winning: built-in defaults, a flat
``key = value`` file (``--config PATH``, or ``./spdeweak.conf`` when present),
and command-line flags.  Exit codes: 0 success, 2 usage error, 3 numerical
failure, 4 unwritable output.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import math
import os
import sys
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import estimators, variations
from .coefficients import BUNDLES, RegularizationParams, get_bundle
from .errors import InvalidArgument, NumericalFailure
from .noise import sample_path
from .solver import SchemeParams, simulate
from .spectral import Field, build_grid

COMMANDS = ("simulate", "weak-order", "strong-order", "regularity", "malliavin-check", "duality-check")
DEFAULT_CONFIG_FILE = "spdeweak.conf"
DEFAULT_STEPS = 64
MALLIAVIN_TOLERANCE = 1e-5

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_OUTPUT = 0, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    command: str = "simulate"
    modes: int = 64
    dt: float = 0.25 / DEFAULT_STEPS
    steps: int = DEFAULT_STEPS
    horizon: float = 0.25
    samples: int = 10_000
    seed: int = 1
    bundle: str = "smooth-default"
    delta: float = 0.0
    tau: float = 0.0
    beta: float = 0.45
    levels: tuple | None = None
    reference: str = "finest"
    ref_factor: int = 8
    times: tuple = tuple(0.5 * 2.0**-j for j in range(5))
    psi: str = "first-mode"
    epsilon: float = 1e-4
    triples: int = 20
    out: str | None = None
    format: str = "csv"
    explicit: frozenset = frozenset()  # keys set by the config file or flags

    def scheme(self, dt=None, steps=None) -> SchemeParams:
        return SchemeParams(
            self.dt if dt is None else dt,
            self.steps if steps is None else steps,
            self.modes,
            get_bundle(self.bundle),
            RegularizationParams(self.delta, self.tau),
        )


# -- parsing -----------------------------------------------------------------

_FLAGS = {
    "modes": int,
    "dt": "number",
    "steps": int,
    "horizon": "number",
    "samples": int,
    "seed": int,
    "bundle": str,
    "delta": "number",
    "tau": "number",
    "beta": "number",
    "levels": "list",
    "reference": str,
    "ref_factor": int,
    "times": "list",
    "psi": str,
    "epsilon": "number",
    "triples": int,
    "out": str,
    "format": str,
    "command": str,
}


def parse_number(text: str) -> float:
    """A decimal or a fraction such as ``1/16``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"not a number: {text!r}") from None


def parse_list(text: str) -> tuple:
    items = [s for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError("empty list")
    return tuple(parse_number(s) for s in items)


def _convert(key, raw):
    kind = _FLAGS[key]
    if kind == "number":
        return parse_number(raw)
    if kind == "list":
        return parse_list(raw)
    if kind is int:
        try:
            return int(str(raw).strip())
        except ValueError:
            raise UsageError(f"{key} must be an integer, got {raw!r}") from None
    return str(raw).strip()


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FLAGS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spdeweak", description="Semi-implicit Euler SPDE experiments.")
    p.add_argument("command", nargs="?", choices=COMMANDS)
    p.add_argument("--config", help="key = value file (default: ./spdeweak.conf if present)")
    for key in _FLAGS:
        if key == "command":
            continue
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=None)
    return p


def parse_config(argv=None) -> RunConfig:
    """Merge defaults, the config file and flags into a validated RunConfig."""
    args = _parser().parse_args(list(sys.argv[1:] if argv is None else argv))
    values = {}
    if args.config is not None:
        try:
            values.update(read_config_file(args.config))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
    elif Path(DEFAULT_CONFIG_FILE).is_file():
        values.update(read_config_file(DEFAULT_CONFIG_FILE))
    explicit = set(values)
    for key in _FLAGS:
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = _convert(key, raw)
            explicit.add(key)
    if args.command is not None:
        values["command"] = args.command
    return _validate(values, explicit)


def _validate(values: dict, explicit: set) -> RunConfig:
    base = RunConfig()
    command = values.get("command", base.command)
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}; choose from {', '.join(COMMANDS)}")
    dt, steps, horizon = values.get("dt"), values.get("steps"), values.get("horizon")
    dt, steps, horizon = resolve_time_grid(dt, steps, horizon, base.horizon)
    values.update(dt=dt, steps=steps, horizon=horizon, command=command, explicit=frozenset(explicit))
    cfg = dataclasses.replace(base, **values)
    if cfg.modes < 1:
        raise UsageError("modes must be >= 1")
    if cfg.samples < 2:
        raise UsageError("samples must be >= 2")
    if cfg.seed < 0:
        raise UsageError("seed must be >= 0")
    if cfg.bundle not in BUNDLES:
        raise UsageError(f"unknown bundle {cfg.bundle!r}; choose from {', '.join(sorted(BUNDLES))}")
    if cfg.delta < 0 or cfg.tau < 0:
        raise UsageError("delta and tau must be >= 0")
    if cfg.format not in ("csv", "json"):
        raise UsageError("format must be csv or json")
    if cfg.reference not in ("finest", "closed_form"):
        raise UsageError("reference must be finest or closed_form")
    if cfg.ref_factor < 1 or cfg.ref_factor & (cfg.ref_factor - 1):
        raise UsageError("ref-factor must be a power of 2")
    if cfg.psi not in variations.PSI_CHOICES:
        raise UsageError(f"psi must be one of {', '.join(sorted(variations.PSI_CHOICES))}")
    if cfg.levels is not None:
        check_levels(cfg.levels)
    return cfg


def resolve_time_grid(dt, steps, horizon, default_horizon):
    """Fill in ``T = N dt`` from whichever of the three values are given."""
    if steps is not None and steps < 0:
        raise UsageError("steps must be >= 0")
    if dt is not None and not dt > 0:
        raise UsageError("dt must be positive")
    if horizon is not None and horizon < 0:
        raise UsageError("horizon must be >= 0")
    if dt is not None and steps is not None:
        T = dt * steps
        if horizon is not None and not math.isclose(horizon, T, rel_tol=1e-12, abs_tol=1e-15):
            raise UsageError(f"inconsistent time grid: dt * steps = {T} but horizon = {horizon}")
        return dt, steps, T
    if horizon is None:
        horizon = default_horizon
    if dt is not None:
        n = horizon / dt
        if abs(n - round(n)) > 1e-9 * max(n, 1.0):
            raise UsageError(f"dt = {dt} does not divide the horizon {horizon}")
        return dt, int(round(n)), horizon
    steps = DEFAULT_STEPS if steps is None else steps
    if steps == 0:
        raise UsageError("steps = 0 needs an explicit dt")
    return horizon / steps, steps, horizon


def check_levels(levels):
    """Levels must be strictly decreasing with power-of-2 ratios between neighbours."""
    for a, b in zip(levels, levels[1:]):
        ratio = Fraction(a).limit_denominator(1 << 40) / Fraction(b).limit_denominator(1 << 40)
        n = ratio.numerator
        if ratio.denominator != 1 or n < 2 or n & (n - 1):
            raise UsageError(f"levels must decrease by powers of 2: {a:g} -> {b:g}")


def default_levels(horizon):
    return tuple(horizon / 2**j for j in range(4, 9))


# -- output ------------------------------------------------------------------


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else None
    return v


def _summary_path(out: Path) -> Path:
    return out.with_name(out.stem + ".summary.json")


def _write(path: Path, text: str):
    path.write_text(text, encoding="utf-8", newline="")


def _default_out(cfg) -> Path:
    return Path(f"{cfg.command}.{cfg.format}")


def check_writable(path: Path):
    parent = path.parent if str(path.parent) else Path(".")
    if path.is_dir() or not parent.is_dir() or not os.access(parent, os.W_OK):
        raise OSError(f"cannot write to {path}")
    if path.exists() and not os.access(path, os.W_OK):
        raise OSError(f"cannot write to {path}")


def emit_table(cfg, out: Path, header, rows, summary: dict):
    """Table to ``out`` (CSV, or JSON with the summary); CSV also gets ``<stem>.summary.json``."""
    summary = _jsonable(summary)
    if cfg.format == "csv":
        _write(out, csv_text(header, rows))
        _write(_summary_path(out), json_text(summary))
    else:
        table = [dict(zip(header, _jsonable(list(r)))) for r in rows]
        _write(out, json_text({"rows": table, "summary": summary}))


def emit_record(cfg, out: Path, record: dict):
    record = _jsonable(record)
    if cfg.format == "json":
        _write(out, json_text(record))
    else:
        keys = sorted(record)
        _write(out, csv_text(keys, [[record[k] for k in keys]]))


# -- commands ----------------------------------------------------------------


def initial_state(cfg) -> Field:
    return Field.basis(build_grid(cfg.modes), 1)


def cmd_simulate(cfg, out):
    params = cfg.scheme()
    grid = params.grid
    path = sample_path(cfg.seed, 0, params.steps, params.modes, params.dt)
    traj = simulate(initial_state(cfg), path, params, retain_noise=False)
    nodal = grid.nodal_from_modal(traj.states)
    header = ["step", "t"] + [f"x_{k}" for k in range(1, params.modes + 1)]
    rows = [[n, n * params.dt, *nodal[n]] for n in range(params.steps + 1)]
    if cfg.format == "csv":
        _write(out, csv_text(header, rows))
    else:
        _write(out, json_text(_jsonable({"nodes": grid.nodes.tolist(), "dt": params.dt, "states": nodal.tolist()})))
    return f"simulate: {params.steps} steps, |X_N| = {traj.terminal.l2_norm():.6g}"


def _rate_summary(fit):
    return {"slope": fit.slope, "slope_stderr": fit.slope_stderr, "r_squared": fit.r_squared}


def _error_command(cfg, out, kind):
    levels = cfg.levels if cfg.levels is not None else default_levels(cfg.horizon)
    params = cfg.scheme()
    x0 = initial_state(cfg)
    if kind == "weak" and cfg.reference == "closed_form":
        curve = estimators.weak_error_curve(params, x0, levels, cfg.samples, "closed_form", min(levels), cfg.seed)
    else:
        ref = min(levels) / cfg.ref_factor
        fn = estimators.weak_error_curve if kind == "weak" else estimators.strong_error_curve
        if kind == "weak":
            curve = fn(params, x0, levels, cfg.samples, "finest", ref, cfg.seed)
        else:
            curve = fn(params, x0, levels, cfg.samples, ref, cfg.seed)
    rows = [[lv.dt, lv.error, lv.stderr, lv.samples] for lv in curve]
    try:
        fit = estimators.fit_rate(curve)
        summary = _rate_summary(fit)
    except InvalidArgument as exc:
        fit, summary = None, {"slope": None, "slope_stderr": None, "r_squared": None, "note": str(exc)}
    emit_table(cfg, out, ["dt", "error", "stderr", "samples"], rows, summary)
    if fit is None:
        return f"{kind}-order: {len(curve)} levels, no rate fit ({summary['note']})"
    return f"{kind}-order: slope {fit.slope:.4f} +- {fit.slope_stderr:.4f}, r^2 {fit.r_squared:.4f}"


def probe_direction(modes) -> Field:
    """Equal weight on every mode, unit L2 norm."""
    return Field(build_grid(modes), modal=np.full(modes, 1.0 / math.sqrt(modes)))


def cmd_regularity(cfg, out, explicit_dt=None):
    times = tuple(sorted(cfg.times, reverse=True))
    dt = explicit_dt if explicit_dt is not None else min(times) / 16
    params = cfg.scheme(dt=dt, steps=1)
    fit = estimators.regularity_probe(
        params, initial_state(cfg), probe_direction(cfg.modes), cfg.beta, times, cfg.samples, cfg.seed
    )
    rows = [[lv.dt, lv.error, lv.stderr, lv.samples] for lv in fit.levels]
    summary = {
        "beta": cfg.beta,
        "exponent": fit.exponent,
        "reliable": fit.reliable,
        "note": fit.note,
        **_rate_summary(fit),
    }
    emit_table(cfg, out, ["T", "abs_du", "stderr", "samples"], rows, summary)
    flag = "" if fit.reliable else " (unreliable)"
    return f"regularity: beta {cfg.beta:g}, fitted exponent {fit.exponent:.4f}{flag}"


def malliavin_errors(params: SchemeParams, seed: int, triples: int, eps: float):
    """Relative errors of the Malliavin derivative against central differences in ``dW_l``."""
    if params.steps < 1:
        raise InvalidArgument("malliavin-check needs at least one step")
    grid = params.grid
    x0 = Field.basis(grid, 1)
    path = sample_path(seed, 0, params.steps, params.modes, params.dt)
    traj = simulate(x0, path, params)
    rng = np.random.default_rng([seed, 0x6D616C6C])
    errs = []
    for _ in range(triples):
        n = int(rng.integers(1, params.steps + 1))
        ell = int(rng.integers(0, n))
        theta = Field(grid, modal=rng.standard_normal(params.modes))
        exact = variations.malliavin_derivative(traj, ell, theta, n).modal
        plus = simulate(x0, path.perturbed(ell, theta.modal, eps), params, retain_noise=False)
        minus = simulate(x0, path.perturbed(ell, theta.modal, -eps), params, retain_noise=False)
        fd = (plus.states[n] - minus.states[n]) / (2 * eps)
        errs.append(float(np.linalg.norm(fd - exact) / np.linalg.norm(exact)))
    return errs


def cmd_malliavin(cfg, out):
    errs = malliavin_errors(cfg.scheme(), cfg.seed, cfg.triples, cfg.epsilon)
    worst = max(errs)
    record = {"max_rel_err": worst, "epsilon": cfg.epsilon, "pass": worst <= MALLIAVIN_TOLERANCE}
    emit_record(cfg, out, record)
    return f"malliavin-check: max relative error {worst:.3e} ({'pass' if record['pass'] else 'FAIL'})"


def cmd_duality(cfg, out):
    params = cfg.scheme()
    lhs, rhs, se = variations.duality_check(params, initial_state(cfg), cfg.samples, cfg.psi, cfg.seed)
    ok = abs(lhs - rhs) <= 4 * se
    record = {"lhs": lhs, "rhs": rhs, "stderr": se, "psi": cfg.psi, "pass": ok}
    emit_record(cfg, out, record)
    return f"duality-check: lhs {lhs:.6g}, rhs {rhs:.6g}, stderr {se:.3g} ({'pass' if ok else 'FAIL'})"


def run(cfg: RunConfig, *, stdout=None) -> int:
    """Execute ``cfg``; returns the process exit code."""
    stdout = sys.stdout if stdout is None else stdout
    out = Path(cfg.out) if cfg.out else _default_out(cfg)
    try:
        check_writable(out)
        if cfg.format == "csv" and cfg.command in ("weak-order", "strong-order", "regularity"):
            check_writable(_summary_path(out))
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    try:
        if cfg.command == "simulate":
            line = cmd_simulate(cfg, out)
        elif cfg.command == "weak-order":
            line = _error_command(cfg, out, "weak")
        elif cfg.command == "strong-order":
            line = _error_command(cfg, out, "strong")
        elif cfg.command == "regularity":
            line = cmd_regularity(cfg, out, cfg.dt if "dt" in cfg.explicit else None)
        elif cfg.command == "malliavin-check":
            line = cmd_malliavin(cfg, out)
        else:
            line = cmd_duality(cfg, out)
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidArgument as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OUTPUT
    print(line, file=stdout)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgument as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
