"""Command line front end: run a configured maneuver, verify artifacts, print spectra.

Verbs::

    lieocp run <config.toml> [--out DIR]
    lieocp verify <dir>
    lieocp spectrum <controls.csv>

``LIEOCP_OUTPUT_DIR`` overrides the output directory of ``run``. Exit codes:
0 certificate passed, 2 certificate failed (or the artifacts are
inconsistent), 3 solver did not converge, 4 configuration error.
"""

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import lie
from .dynamics import AttitudePlant, InertiaData, rollout
from .errors import (
    ConfigError,
    DimensionMismatch,
    DynamicsMismatch,
    Infeasible,
    MaxIterations,
    ParseError,
    PlantFailure,
    ProjectionStall,
    SchemaError,
)
from .pmp import kkt_check, stage_derivatives
from .problem import ProblemSpec
from .solver import SolverOptions, constraint_violations, estimate_multipliers, solve
from .spectrum import ForbiddenBinSpec, band_bins, bin_frequencies, build_constraints, spectrum

__all__ = [
    "FrequencySpec",
    "RunConfig",
    "RunArtifacts",
    "load_config",
    "build_problem",
    "run",
    "verify",
    "main",
]

log = logging.getLogger(__name__)

OUTPUT_ENV = "LIEOCP_OUTPUT_DIR"
EXIT_PASS, EXIT_FAIL, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4
STATE_TOL = 1e-6
FMT = "%.17g"

CONFIG_NAME = "config.toml"
CONTROLS_NAME = "controls.csv"
STATES_NAME = "states.csv"
SPECTRUM_NAME = "spectrum.csv"
CERTIFICATE_NAME = "certificate.json"


@dataclass(frozen=True)
class FrequencySpec:
    """Forbidden content of one channel, as an open band (rad/sample) or as bins."""

    channel: int
    band: tuple = None
    bins: tuple = None

    def resolve(self, N):
        bins = band_bins(N, *self.band) if self.band is not None else self.bins
        return ForbiddenBinSpec(self.channel, bins)


@dataclass(frozen=True)
class RunConfig:
    inertia: tuple
    h: float
    N: int
    initial_axis: tuple
    initial_angle: float
    initial_momentum: tuple
    final_axis: tuple
    final_angle: float
    final_momentum: tuple
    u_bound: tuple
    Pi_bound: tuple
    frequency: tuple = ()
    convention: str = "trace"
    cost_weight: float = 1.0
    solver: dict = field(default_factory=dict)
    output_dir: str = "lieocp-run"
    sweep: dict = None
    source: str = ""

    @property
    def duration(self):
        return self.N * self.h

    @property
    def R0(self):
        return lie.exp_so3(self.initial_angle * np.asarray(self.initial_axis))

    @property
    def Rf(self):
        return lie.exp_so3(self.final_angle * np.asarray(self.final_axis))


@dataclass
class RunArtifacts:
    """Paths written by :func:`run` and the certificate document."""

    directory: Path
    files: dict
    certificate: dict
    exit_code: int


# -- configuration --------------------------------------------------------------

_SCHEMA = {
    "body": {"inertia": True, "h": True, "convention": False},
    "horizon": {"duration": False, "N": False},
    "initial": {"axis": False, "angle": False, "momentum": False},
    "final": {"axis": False, "angle": False, "momentum": False},
    "bounds": {"u": True, "Pi": True},
    "cost": {"weight": False},
    "output": {"dir": False},
    "sweep": {"angles": False, "durations": False},
}
_FREQ_KEYS = {"channel", "mode", "low_rad_per_sample", "high_rad_per_sample", "bins"}
_SOLVER_KEYS = {f.name for f in fields(SolverOptions)} - {"kkt_tolerances", "raise_on_failure"}


def _number(value, name):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(name, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        raise SchemaError(name, "must be finite")
    return float(value)


def _vector(value, name, size=3):
    if not isinstance(value, list) or len(value) != size:
        raise SchemaError(name, f"expected a list of {size} numbers")
    return tuple(_number(v, f"{name}[{i}]") for i, v in enumerate(value))


def _positive(vec, name):
    if any(v <= 0.0 for v in vec):
        raise ConfigError(f"{name}: entries must be positive, got {vec}")
    return vec


def _axis(value, name):
    vec = np.asarray(_vector(value, name), dtype=float)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ConfigError(f"{name}: axis must be nonzero")
    return tuple(float(v) for v in vec / norm)


def _check_keys(table, allowed, prefix):
    for key in table:
        if key not in allowed:
            raise SchemaError(f"{prefix}{key}", "unknown key")


def parse_config(text, source=""):
    """Validate configuration ``text`` (TOML) and resolve defaults."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"{source or 'config'}: {exc}") from exc
    _check_keys(doc, set(_SCHEMA) | {"frequency", "solver"}, "")
    tables = {}
    for name, keys in _SCHEMA.items():
        table = doc.get(name, {})
        if not isinstance(table, dict):
            raise SchemaError(name, "expected a table")
        _check_keys(table, keys, f"{name}.")
        for key, required in keys.items():
            if required and key not in table:
                field_name = "inertia" if (name, key) == ("body", "inertia") else f"{name}.{key}"
                raise SchemaError(field_name, "missing required field")
        tables[name] = table
    if "body" not in doc:
        raise SchemaError("inertia", "missing required field")

    body = tables["body"]
    inertia = _positive(_vector(body["inertia"], "body.inertia"), "body.inertia")
    h = _number(body["h"], "body.h")
    if h <= 0.0:
        raise ConfigError(f"body.h must be positive, got {h}")
    convention = body.get("convention", "trace")
    if convention not in ("trace", "momentum"):
        raise SchemaError("body.convention", "expected 'trace' or 'momentum'")

    horizon = tables["horizon"]
    if ("duration" in horizon) == ("N" in horizon):
        raise SchemaError("horizon", "give exactly one of duration or N")
    if "N" in horizon:
        N = horizon["N"]
        if isinstance(N, bool) or not isinstance(N, int):
            raise SchemaError("horizon.N", "expected an integer")
    else:
        N = int(round(_number(horizon["duration"], "horizon.duration") / h))
    if N < 1:
        raise ConfigError(f"horizon gives N = {N}; need at least one step")

    def endpoint(name):
        table = tables[name]
        axis = _axis(table.get("axis", [1.0, 0.0, 0.0]), f"{name}.axis")
        angle = _number(table.get("angle", 0.0), f"{name}.angle")
        momentum = _vector(table.get("momentum", [0.0, 0.0, 0.0]), f"{name}.momentum")
        return axis, angle, momentum

    bounds = tables["bounds"]
    u_bound = _positive(_vector(bounds["u"], "bounds.u"), "bounds.u")
    Pi_bound = _positive(_vector(bounds["Pi"], "bounds.Pi"), "bounds.Pi")

    freq = []
    raw_freq = doc.get("frequency", [])
    if not isinstance(raw_freq, list):
        raise SchemaError("frequency", "expected an array of tables ([[frequency]])")
    for i, entry in enumerate(raw_freq):
        prefix = f"frequency[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(prefix, "expected a table")
        _check_keys(entry, _FREQ_KEYS, f"{prefix}.")
        if "channel" not in entry:
            raise SchemaError(f"{prefix}.channel", "missing required field")
        channel = entry["channel"]
        if isinstance(channel, bool) or not isinstance(channel, int) or not 1 <= channel <= 3:
            raise SchemaError(f"{prefix}.channel", "expected an integer in 1..3")
        mode = entry.get("mode")
        if mode == "band":
            for key in ("low_rad_per_sample", "high_rad_per_sample"):
                if key not in entry:
                    raise SchemaError(f"{prefix}.{key}", "missing required field for mode 'band'")
            if "bins" in entry:
                raise SchemaError(f"{prefix}.bins", "not allowed with mode 'band'")
            low = _number(entry["low_rad_per_sample"], f"{prefix}.low_rad_per_sample")
            high = _number(entry["high_rad_per_sample"], f"{prefix}.high_rad_per_sample")
            if not low < high:
                raise ConfigError(f"{prefix}: band must satisfy low < high, got ({low}, {high})")
            freq.append(FrequencySpec(channel, band=(low, high)))
        elif mode == "bins":
            if "bins" not in entry:
                raise SchemaError(f"{prefix}.bins", "missing required field for mode 'bins'")
            for key in ("low_rad_per_sample", "high_rad_per_sample"):
                if key in entry:
                    raise SchemaError(f"{prefix}.{key}", "not allowed with mode 'bins'")
            bins = entry["bins"]
            if not isinstance(bins, list) or any(isinstance(b, bool) or not isinstance(b, int) for b in bins):
                raise SchemaError(f"{prefix}.bins", "expected a list of integers")
            if any(not 1 <= b <= N for b in bins):
                raise ConfigError(f"{prefix}.bins: bins must lie in 1..{N}")
            freq.append(FrequencySpec(channel, bins=tuple(bins)))
        else:
            raise SchemaError(f"{prefix}.mode", "expected 'band' or 'bins'")

    solver_opts = doc.get("solver", {})
    if not isinstance(solver_opts, dict):
        raise SchemaError("solver", "expected a table")
    _check_keys(solver_opts, _SOLVER_KEYS, "solver.")
    defaults = SolverOptions()
    for key, value in solver_opts.items():
        if type(getattr(defaults, key)) is str:
            if not isinstance(value, str):
                raise SchemaError(f"solver.{key}", "expected a string")
        elif isinstance(value, bool) or not isinstance(value, (int, float)):
            raise SchemaError(f"solver.{key}", "expected a number")

    sweep = None
    if "sweep" in doc:
        sw = tables["sweep"]
        sweep = {
            "angles": [_number(a, "sweep.angles") for a in sw.get("angles", [])],
            "durations": [_number(d, "sweep.durations") for d in sw.get("durations", [])],
        }

    cost_weight = _number(tables["cost"].get("weight", 1.0), "cost.weight")
    if cost_weight <= 0.0:
        raise ConfigError("cost.weight must be positive")
    out_dir = tables["output"].get("dir", "lieocp-run")
    if not isinstance(out_dir, str):
        raise SchemaError("output.dir", "expected a string")

    ia, ang0, mom0 = endpoint("initial")
    fa, angf, momf = endpoint("final")
    return RunConfig(
        inertia=inertia, h=h, N=N,
        initial_axis=ia, initial_angle=ang0, initial_momentum=mom0,
        final_axis=fa, final_angle=angf, final_momentum=momf,
        u_bound=u_bound, Pi_bound=Pi_bound, frequency=tuple(freq),
        convention=convention, cost_weight=cost_weight, solver=dict(solver_opts),
        output_dir=out_dir, sweep=sweep, source=text,
    )


def load_config(path):
    """Read and validate a TOML run configuration."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config(text, str(path))


def build_problem(config):
    """:class:`ProblemSpec` and solver options described by ``config``."""
    from .problem import QuadraticControlCost

    inertia = InertiaData(np.asarray(config.inertia), config.h, config.convention)
    plant = AttitudePlant(inertia)
    freq = None
    if config.frequency:
        specs = [f.resolve(config.N) for f in config.frequency]
        freq = build_constraints(config.N, 3, specs)
    u_bound = np.asarray(config.u_bound)
    problem = ProblemSpec(
        plant=plant,
        N=config.N,
        q0=config.R0,
        x0=np.asarray(config.initial_momentum),
        u_lower=-u_bound,
        u_upper=u_bound,
        x_bound=np.asarray(config.Pi_bound),
        target=(config.Rf, np.asarray(config.final_momentum)),
        freq=freq,
        cost=QuadraticControlCost(config.cost_weight),
    )
    opts = replace(SolverOptions(raise_on_failure=False), **config.solver)
    return problem, opts


# -- artifact files ---------------------------------------------------------------

def _atomic_write(path, text):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([r if isinstance(r, (int, np.integer)) else FMT % r for r in row])
    return buf.getvalue()


def controls_csv(u):
    u = np.asarray(u, dtype=float)
    header = ["t"] + [f"u{k + 1}" for k in range(u.shape[1])]
    return _csv_text(header, ([t, *u[t]] for t in range(u.shape[0])))


def states_csv(traj):
    header = ["t", "r1", "r2", "r3", "Pi1", "Pi2", "Pi3"]
    rows = ([t, *lie.log_so3(traj.q[t]), *traj.x[t]] for t in range(traj.q.shape[0]))
    return _csv_text(header, rows)


def spectrum_csv(u):
    u = np.asarray(u, dtype=float)
    mag = np.abs(spectrum(u))
    freqs = bin_frequencies(u.shape[0])
    header = ["bin", "frequency"] + [f"abs_u{k + 1}" for k in range(u.shape[1])]
    return _csv_text(header, ([j + 1, freqs[j], *mag[j]] for j in range(u.shape[0])))


def _read_table(path, n_cols, name):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DimensionMismatch(f"cannot read {name}: {exc}") from exc
    if not rows:
        raise DimensionMismatch(f"{name} is empty")
    body = rows[1:]
    if any(len(r) != n_cols for r in body) or len(rows[0]) != n_cols:
        raise DimensionMismatch(f"{name}: expected {n_cols} columns")
    try:
        return np.array([[float(v) for v in r] for r in body]).reshape(len(body), n_cols)
    except ValueError as exc:
        raise DimensionMismatch(f"{name}: non-numeric entry ({exc})") from exc


def read_controls(path, m=3):
    """Controls ``(N, m)`` stored in a controls CSV."""
    return _read_table(path, m + 1, Path(path).name)[:, 1:]


def read_states(path):
    """Rotation vectors ``(N+1, 3)`` and momenta ``(N+1, 3)`` from a states CSV."""
    table = _read_table(path, 7, Path(path).name)
    return table[:, 1:4], table[:, 4:7]


# -- certificate ----------------------------------------------------------------

def certificate(problem, traj, u, report, extra=None):
    """Certificate document: KKT report, independent violations and cost."""
    viol = constraint_violations(problem, u, traj)
    u_scale = float(np.max(np.abs(u))) if u.size else 0.0
    doc = {
        "pass": bool(report.ok),
        "kkt": report.to_dict(),
        "violations": viol,
        "cost": float(problem.total_cost(traj, u)),
        "N": problem.N,
        "max_abs_u": u_scale,
        "forbidden_bin_relative": viol["forbidden_bin"] / u_scale if u_scale > 0 else 0.0,
    }
    if extra:
        doc.update(extra)
    return doc


def _certify(problem, traj, u, opts):
    derivs = stage_derivatives(traj, u, problem)
    bundle = estimate_multipliers(problem, traj, u, derivs)
    return kkt_check(traj, u, bundle, problem, opts.kkt_tolerances, derivs)


def _write_artifacts(directory, config, problem, traj, u, doc):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        CONFIG_NAME: config.source,
        CONTROLS_NAME: controls_csv(u),
        STATES_NAME: states_csv(traj),
        SPECTRUM_NAME: spectrum_csv(u),
        CERTIFICATE_NAME: json.dumps(doc, indent=2, sort_keys=True) + "\n",
    }
    for name, text in files.items():
        _atomic_write(directory / name, text)
    return {name: directory / name for name in files}


def _output_dir(config, override=None):
    return Path(override or os.environ.get(OUTPUT_ENV) or config.output_dir)


def run(config, out_dir=None):
    """Solve the configured maneuver and write all artifacts.

    The certificate is computed from the written trajectory alone, the same
    way :func:`verify` does. A run that stops without converging still
    writes its best point, flagged ``"partial": true``; an infeasible
    problem or a plant failure writes nothing.
    """
    problem, opts = build_problem(config)
    directory = _output_dir(config, out_dir)
    try:
        result = solve(problem, opts)
    except (Infeasible, ProjectionStall, PlantFailure) as exc:
        log.error("solver failed: %s", exc)
        return RunArtifacts(directory, {}, {"pass": False, "partial": True, "error": str(exc)}, EXIT_SOLVER)
    except MaxIterations as exc:
        result = exc.result
    report = _certify(problem, result.traj, result.u, opts)
    extra = {
        "converged": bool(result.converged),
        "partial": not result.converged,
        "iterations": result.iterations,
    }
    doc = certificate(problem, result.traj, result.u, report, extra)
    files = _write_artifacts(directory, config, problem, result.traj, result.u, doc)
    if not result.converged:
        code = EXIT_SOLVER
    else:
        code = EXIT_PASS if doc["pass"] else EXIT_FAIL
    return RunArtifacts(directory, files, doc, code)


def sweep_configs(config):
    """Configurations of the angle/duration sweep (the base config if none)."""
    if not config.sweep:
        return [("", config)]
    angles = config.sweep.get("angles") or [config.final_angle]
    durations = config.sweep.get("durations") or [config.duration]
    out = []
    for angle in angles:
        for duration in durations:
            N = int(round(duration / config.h))
            if N < 1:
                raise ConfigError(f"sweep duration {duration} gives N = {N}")
            tag = f"angle{math.degrees(angle):g}deg_T{duration:g}s"
            out.append((tag, replace(config, final_angle=angle, N=N, sweep=None)))
    return out


def verify(directory, opts=None):
    """Re-certify the artifacts in ``directory`` from the files alone.

    Returns the certificate document. Raises :class:`DimensionMismatch`
    when the files do not fit the stored configuration and
    :class:`DynamicsMismatch` when the stored states are not the rollout of
    the stored controls.
    """
    directory = Path(directory)
    config = load_config(directory / CONFIG_NAME)
    problem, default_opts = build_problem(config)
    opts = opts or default_opts
    u = read_controls(directory / CONTROLS_NAME)
    if u.shape != (problem.N, problem.m):
        raise DimensionMismatch(f"controls have shape {u.shape}, config needs {(problem.N, problem.m)}")
    rotvec, Pi = read_states(directory / STATES_NAME)
    if rotvec.shape[0] != problem.N + 1:
        raise DimensionMismatch(f"states have {rotvec.shape[0]} rows, config needs {problem.N + 1}")
    traj = rollout(problem.q0, problem.x0, u, problem.plant)
    worst = 0.0
    for t in range(problem.N + 1):
        worst = max(worst, float(np.max(np.abs(lie.log_so3(traj.q[t]) - rotvec[t]))),
                    float(np.max(np.abs(traj.x[t] - Pi[t]))))
    if worst > STATE_TOL:
        raise DynamicsMismatch(f"stored states differ from the re-rolled states by {worst:.3g}")
    report = _certify(problem, traj, u, opts)
    return certificate(problem, traj, u, report, {"verified_from": str(directory)})


# -- entry point --------------------------------------------------------------------

def _summary(doc):
    lines = [f"certificate: {'PASS' if doc['pass'] else 'FAIL'}"]
    kkt = doc.get("kkt", {})
    for key in sorted(k for k in kkt if k.startswith("residual.")):
        name = key.split(".", 1)[1]
        lines.append(f"  {name:15s} {kkt[key]:.3e} (tol {kkt['tolerance.' + name]:.1e})")
    for key, value in sorted(doc.get("violations", {}).items()):
        lines.append(f"  violation {key:20s} {value:.3e}")
    if "cost" in doc:
        lines.append(f"  cost {doc['cost']:.10g}")
    return "\n".join(lines)


def _cmd_run(args):
    config = load_config(args.config)
    runs = sweep_configs(config)
    base = _output_dir(config, args.out)
    worst = EXIT_PASS
    for tag, cfg in runs:
        target = base / tag if tag else base
        art = run(cfg, target)
        label = f"[{tag}] " if tag else ""
        print(f"{label}artifacts in {art.directory}")
        print(_summary(art.certificate))
        worst = max(worst, art.exit_code)
    return worst


def _cmd_verify(args):
    try:
        doc = verify(args.directory)
    except (DimensionMismatch, DynamicsMismatch) as exc:
        print(f"certificate: FAIL ({type(exc).__name__}: {exc})")
        return EXIT_FAIL
    print(_summary(doc))
    return EXIT_PASS if doc["pass"] else EXIT_FAIL


def _cmd_spectrum(args):
    try:
        with open(args.controls, newline="") as fh:
            n_cols = len(next(csv.reader(fh)))
        u = read_controls(args.controls, n_cols - 1)
    except (OSError, StopIteration) as exc:
        raise ConfigError(f"cannot read {args.controls}: {exc}") from exc
    sys.stdout.write(spectrum_csv(u))
    return EXIT_PASS


def make_parser():
    parser = argparse.ArgumentParser(prog="lieocp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="solve a configured maneuver and write artifacts")
    p_run.add_argument("config")
    p_run.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    p_run.set_defaults(func=_cmd_run)
    p_ver = sub.add_parser("verify", help="re-certify the artifacts of a run")
    p_ver.add_argument("directory")
    p_ver.set_defaults(func=_cmd_verify)
    p_spec = sub.add_parser("spectrum", help="print the DFT magnitudes of a controls file")
    p_spec.add_argument("controls")
    p_spec.set_defaults(func=_cmd_spectrum)
    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
