"""Command-line runner: ``ou-evolve <subcommand> [options]``.

Every run is described by a :class:`RunConfig`, which is persisted next to
its outputs.  Tables go to CSV, verdicts and summaries to JSON; both embed a
hash of the configuration.  Exit status: 0 pass, 1 verdict failure,
2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import bank as testbank
from .cauchy import CauchyProblem, MildSolver, residual, schauder_ratio, solve
from .coeffs import WeightSpec, builtin, model_from_json, validate_hypotheses
from .errors import ConfigError, InconclusiveFit, OUError
from .estimates import (
    compactness_decay,
    envelope_check,
    exponential_counterexample,
    smoothing_rate,
)
from .evolution import EvolutionOperator
from .flow import flow_many
from .gaussmeasure import MonteCarlo, parse_scheme
from .weights import cp_norm

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("flow", "apply", "norm", "solve", "rates", "envelopes", "counterexample", "compactness", "validate")


@dataclass
class RunConfig:
    command: str
    model: object = "ou1"
    dimension: int = 1
    weight: str = "poly:1"
    quad: str = "gh:40"
    tol: float = 1e-10
    seed: int = 0
    out: str = "."
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @property
    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict):
            raise ConfigError("configuration must be a JSON object", field="config")
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown keys {sorted(unknown)}", field="config")
        if "command" not in obj:
            raise ConfigError("required", field="command")
        cfg = cls(**obj)
        cfg.validate()
        return cfg

    def validate(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}", field="command")
        WeightSpec.parse(self.weight)
        parse_scheme(self.quad)
        if not self.tol > 0:
            raise ConfigError("must be positive", field="tol")

    # resolved objects
    def build_model(self):
        if isinstance(self.model, str) and not self.model.lstrip().startswith("{") and not self.model.endswith(".json"):
            return builtin(self.model, dimension=self.dimension if self.model != "rotation" else None)
        return model_from_json(self.model)

    def build_weight(self):
        return WeightSpec.parse(self.weight)

    def build_scheme(self):
        scheme = parse_scheme(self.quad)
        if isinstance(scheme, MonteCarlo) and ":" not in self.quad[3:]:
            scheme = MonteCarlo(scheme.n, self.seed)
        return scheme

    def operator(self, model=None, weight=None):
        return EvolutionOperator(model or self.build_model(), weight or self.build_weight(), self.build_scheme(), self.tol)


# -- output ---------------------------------------------------------------


def atomic_write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(config, header, rows):
    buf = io.StringIO()
    buf.write(f"# config_hash: {config.digest}\n")
    buf.write(f"# generated: {datetime.now(timezone.utc).isoformat(timespec='seconds')}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and not np.isfinite(obj):
        return str(obj)
    return obj


class Outputs:
    def __init__(self, config):
        self.config = config
        self.dir = Path(config.out)
        self.files = []

    def table(self, name, header, rows):
        path = self.dir / f"{name}.csv"
        atomic_write(path, csv_text(self.config, header, rows))
        self.files.append(str(path))

    def summary(self, name, payload):
        payload = dict(payload)
        payload["config_hash"] = self.config.digest
        payload["config"] = self.config.to_dict()
        path = self.dir / f"{name}.json"
        atomic_write(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        self.files.append(str(path))


def verdict(name, status, **details):
    return {"experiment": name, "verdict": status, "details": details}


# -- subcommands ----------------------------------------------------------


def _floats(text, field_name):
    try:
        return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}", field=field_name) from None


def _points(text, n, field_name="x"):
    """'1,2;3,4' -> [[1,2],[3,4]] for N = 2; '0.1,0.5' -> two points for N = 1."""
    if isinstance(text, (list, tuple)):
        arr = np.asarray(text, dtype=float)
    elif n == 1:
        arr = np.asarray(_floats(text, field_name))
    else:
        arr = np.asarray([_floats(part, field_name) for part in str(text).split(";") if part.strip()])
    arr = arr.reshape(-1, n) if arr.size % n == 0 else None
    if arr is None:
        raise ConfigError(f"point coordinates do not match dimension {n}", field=field_name)
    return arr


def cmd_flow(cfg, out):
    model = cfg.build_model()
    p = cfg.params
    s = float(p.get("s", 0.0))
    ts = _floats(p.get("t", 1.0), "t")
    n = model.dimension
    header = ["s", "t"] + [f"U{i}{j}" for i in range(n) for j in range(n)] + [f"g{i}" for i in range(n)]
    header += [f"Q{i}{j}" for i in range(n) for j in range(n)]
    rows = []
    for st in flow_many(model, s, ts, cfg.tol):
        rows.append([st.s, st.t, *st.U.ravel(), *st.g.ravel(), *st.Qc.ravel()])
    out.table("flow", header, rows)
    v = verdict("flow", "pass", rows=len(rows))
    out.summary("flow", v)
    return [v]


def cmd_apply(cfg, out):
    model, weight = cfg.build_model(), cfg.build_weight()
    op = cfg.operator(model, weight)
    p = cfg.params
    f = testbank.get(p.get("f", "cos"), model.dimension, weight)
    s, t = float(p.get("s", 0.0)), float(p.get("t", 1.0))
    x = _points(p.get("x", "0"), model.dimension)
    order = int(p.get("deriv", 0))
    if order not in (0, 1, 2, 3):
        raise ConfigError("must be 0, 1, 2 or 3", field="deriv")
    vals = op.derivative(f, s, t, x, order, p.get("method", "auto"))
    n = model.dimension
    comps = np.asarray(vals).reshape(len(x), -1)
    header = [f"x{i}" for i in range(n)] + [f"d{k}" for k in range(comps.shape[1])]
    out.table("apply", header, [[*xi, *ci] for xi, ci in zip(x, comps)])
    v = verdict("apply", "pass", f=f.name, order=order, values=np.asarray(vals), diagnostics=op.diagnostics(s, t))
    out.summary("apply", v)
    return [v]


def cmd_norm(cfg, out):
    model, weight = cfg.build_model(), cfg.build_weight()
    p = cfg.params
    f = testbank.get(p.get("f", "cos"), model.dimension, weight)
    theta = float(p.get("theta", 0.0))
    radii = _floats(p.get("R", "5,10,20"), "R")
    rows = [(R, cp_norm(f, theta, R, int(p.get("n", 256))).value) for R in radii]
    out.table("norm", ["R", "estimate"], rows)
    v = verdict("norm", "pass", f=f.name, theta=theta, estimates=rows)
    out.summary("norm", v)
    return [v]


def _problem_from_json(cfg, spec, model, weight):
    n = model.dimension

    def field_fn(entry, where):
        if entry is None:
            return None
        if isinstance(entry, str):
            return testbank.get(entry, n, weight)
        if isinstance(entry, dict) and "random" in entry:
            return testbank.random_smooth(n, int(entry["random"]), weight, scale=float(entry.get("scale", 1.0)))
        if isinstance(entry, dict) and "name" in entry:
            return testbank.get(entry["name"], n, weight).scaled(float(entry.get("scale", 1.0)))
        raise ConfigError("expected a bank name, {name, scale} or {random: seed}", field=where)

    for key in ("phi", "a", "T"):
        if key not in spec:
            raise ConfigError("required", field=f"problem.{key}")
    phi = field_fn(spec["phi"], "problem.phi")
    fsrc_field = field_fn(spec.get("f"), "problem.f")
    fsrc = None if fsrc_field is None else (lambda r, g=fsrc_field: g)
    return CauchyProblem(model, weight, float(spec["a"]), float(spec["T"]), phi, fsrc, float(spec.get("theta", 0.5)))


def cmd_solve(cfg, out):
    p = cfg.params
    spec = p.get("problem")
    if spec is None:
        raise ConfigError("required (JSON file or object)", field="problem")
    if isinstance(spec, str):
        try:
            spec = json.loads(Path(spec).read_text())
        except OSError as exc:
            raise ConfigError(str(exc), field="problem") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}: {exc.msg}", field="problem") from exc
    if not isinstance(spec, dict):
        raise ConfigError("must be an object", field="problem")
    model = model_from_json(spec["model"]) if "model" in spec else cfg.build_model()
    weight = WeightSpec.parse(spec["weight"]) if "weight" in spec else cfg.build_weight()
    problem = _problem_from_json(cfg, spec, model, weight)
    grid = spec.get("grid", {})
    times = np.asarray(grid.get("times", np.linspace(problem.a, problem.T, 5).tolist()), dtype=float)
    points = _points(grid.get("points", [0.0]), model.dimension, "problem.grid.points")
    tols = spec.get("tolerances", {})
    h_s = float(tols.get("h_s", 1e-2))
    solver = MildSolver(problem, op=EvolutionOperator(model, weight, cfg.build_scheme(), cfg.tol))
    ms = solve(problem, times, points, 2, h_s, solver=solver)
    res = residual(ms)
    threshold = float(tols.get("residual", 10.0 * (h_s**2 + 1e-10)))
    ratio = schauder_ratio(problem, times, solver=solver).ratio if tols.get("schauder", True) else None
    n = model.dimension
    rows = []
    for i, s in enumerate(ms.times):
        for k, x in enumerate(ms.points):
            rows.append([s, *x, ms.values[i, k], ms.residual_field[i, k]])
    out.table("solve", ["s"] + [f"x{i}" for i in range(n)] + ["u", "abs_residual"], rows)
    status = "pass" if np.isfinite(res) and res <= threshold else ("inconclusive" if not np.isfinite(res) else "fail")
    v = verdict(
        "solve",
        status,
        schauder_ratio=ratio,
        max_residual=res,
        residual_threshold=threshold,
        meshes={"times": ms.times, "gl_order": solver.order, "grading_levels": solver.levels},
        diagnostics=ms.diagnostics,
    )
    out.summary("solve", v)
    return [v]


def cmd_rates(cfg, out):
    model, weight = cfg.build_model(), cfg.build_weight()
    p = cfg.params
    alpha, theta = float(p.get("alpha", 0.0)), float(p.get("theta", 1.0))
    name = p.get("f") or ("step" if alpha < 1 else "kink")
    f = testbank.get(name, model.dimension, weight)
    window = tuple(_floats(p.get("window", "1e-3,1"), "window"))
    tol = float(p.get("slope_tol", 0.05 if theta - alpha <= 1 else 0.1))
    try:
        fit = smoothing_rate(model, weight, f, alpha, theta, window, int(p.get("points", 7)), op=cfg.operator(model, weight))
        status = "pass" if fit.agrees(tol) else "fail"
    except InconclusiveFit as exc:
        fit, status = exc.fit, "inconclusive"
    out.table("rates", ["delta", "norm"], list(zip(fit.deltas, fit.norms)))
    v = verdict("rates", status, f=name, slope_tol=tol, **fit.to_dict())
    out.summary("rates", v)
    return [v]


def cmd_envelopes(cfg, out):
    model, weight = cfg.build_model(), cfg.build_weight()
    report = envelope_check(model, weight, op=cfg.operator(model, weight))
    out.table("envelopes", ["s", "t", "quantity", "lhs", "rhs", "ok"], [
        (r.s, r.t, r.quantity, r.lhs, r.rhs, int(r.ok)) for r in report.rows
    ])
    env = report.envelopes
    v = verdict(
        "envelopes",
        "pass" if report.passed else "fail",
        violations=len(report.violations),
        c_fitted=report.c_fitted,
        c_theory=report.c_theory,
        constants={"M": env.M, "omega": env.omega, "Q_inf": env.Q_inf, "h_inf": env.h_inf},
    )
    out.summary("envelopes", v)
    return [v]


def cmd_counterexample(cfg, out):
    p = cfg.params
    model = cfg.build_model()
    gamma = float(p.get("gamma", 0.5))
    s, t = float(p.get("s", 0.0)), float(p.get("t", 1.0))
    radii = _floats(p["radii"], "radii") if "radii" in p else None
    table = exponential_counterexample(model, gamma, s, t, radii, scheme=cfg.build_scheme())
    out.table("counterexample", ["r", "ratio_exponential", "ratio_polynomial"], table.rows)
    ok = table.increasing and table.growth > 1e3 and table.control_spread < 10.0
    v = verdict(
        "counterexample",
        "pass" if ok else "fail",
        gamma=gamma,
        norm_U=table.norm_U,
        increasing=table.increasing,
        growth=table.growth,
        control_spread=table.control_spread,
    )
    out.summary("counterexample", v)
    return [v]


def cmd_compactness(cfg, out):
    model, weight = cfg.build_model(), cfg.build_weight()
    p = cfg.params
    s, r, t = float(p.get("s", 0.0)), float(p.get("r", 0.5)), float(p.get("t", 1.0))
    tol = float(p.get("tail_tol", 1e-6))
    table = compactness_decay(model, weight, s, r, t, op=cfg.operator(model, weight))
    out.table("compactness", ["n", "max_difference", "worst_function"], table.rows)
    ok = table.monotone and table.final <= tol
    v = verdict(
        "compactness",
        "pass" if ok else "fail",
        monotone=table.monotone,
        final=table.final,
        n_final=table.n_final,
        modulus=table.modulus,
    )
    out.summary("compactness", v)
    return [v]


def cmd_validate(cfg, out):
    model, weight = cfg.build_model(), cfg.build_weight()
    report = validate_hypotheses(model, weight, flow_tol=cfg.tol)
    out.table("validate", ["check", "passed", "value"], [(c.name, int(c.passed), c.value) for c in report.checks])
    v = verdict("validate", "pass" if report.passed else "fail", checks=report.to_dict())
    out.summary("validate", v)
    return [v]


HANDLERS = {
    "flow": cmd_flow,
    "apply": cmd_apply,
    "norm": cmd_norm,
    "solve": cmd_solve,
    "rates": cmd_rates,
    "envelopes": cmd_envelopes,
    "counterexample": cmd_counterexample,
    "compactness": cmd_compactness,
    "validate": cmd_validate,
}


def run(config, stream=None):
    """Execute one configured run; returns the exit status."""
    stream = stream or sys.stdout
    try:
        config.validate()
        out = Outputs(config)
        verdicts = HANDLERS[config.command](config, out)
        atomic_write(Path(config.out) / f"{config.command}.config.json", config.to_json() + "\n")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OUError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    status = EXIT_PASS
    for v in verdicts:
        details = ", ".join(f"{k}={_short(val)}" for k, val in v["details"].items() if _is_scalar(val))
        print(f"{v['experiment']}: {v['verdict']} ({details})", file=stream)
        if v["verdict"] != "pass":
            status = EXIT_FAIL
    return status


def _is_scalar(v):
    return isinstance(v, (int, float, str, bool, np.floating, np.integer)) and not isinstance(v, np.ndarray)


def _short(v):
    return f"{float(v):.6g}" if isinstance(v, (float, np.floating)) else v


# -- argument parsing -----------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="ou-evolve", description=__doc__.splitlines()[0])
    parser.add_argument("--config", help="JSON RunConfig file; command-line options override it")
    parser.add_argument("--model", help="built-in name, JSON text or JSON file")
    parser.add_argument("--dimension", type=int)
    parser.add_argument("--weight", help="poly:m or exp:gamma")
    parser.add_argument("--quad", help="gh:ORDER or mc:N[:SEED]")
    parser.add_argument("--tol", type=float, help="flow tolerance")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="output directory")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("flow", help="propagator, shift and covariance table")
    p.add_argument("--s", type=float)
    p.add_argument("--t", help="end time(s), comma separated")

    p = sub.add_parser("apply", help="P_{s,t} f and its derivatives")
    p.add_argument("--s", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--x", help="points: '0.1,0.2' in 1D, '1,2;3,4' in 2D")
    p.add_argument("--f", help="test-function name")
    p.add_argument("--deriv", type=int, choices=(0, 1, 2, 3))
    p.add_argument("--method", choices=("auto", "kernel", "direct", "transfer"))

    p = sub.add_parser("norm", help="weighted C^theta_p norm estimates")
    p.add_argument("--f")
    p.add_argument("--theta", type=float)
    p.add_argument("--R", help="radii, comma separated")
    p.add_argument("--n", type=int)

    p = sub.add_parser("solve", help="mild solution of the backward Cauchy problem")
    p.add_argument("--problem", help="JSON problem file")

    p = sub.add_parser("rates", help="smoothing-rate fit")
    p.add_argument("--alpha", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--f")
    p.add_argument("--window")
    p.add_argument("--points", type=int)

    sub.add_parser("envelopes", help="growth envelope inequalities")

    p = sub.add_parser("counterexample", help="unbounded P p / p for exponential weights")
    p.add_argument("--gamma", type=float)
    p.add_argument("--s", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--radii")

    p = sub.add_parser("compactness", help="decay of ||S_n f - P f||")
    p.add_argument("--s", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--t", type=float)

    sub.add_parser("validate", help="check the standing hypotheses")
    return parser


GLOBALS = ("model", "dimension", "weight", "quad", "tol", "seed", "out")


def config_from_args(args):
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(str(exc), field="config") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}", field="config") from exc
        if not isinstance(base, dict):
            raise ConfigError("configuration must be a JSON object", field="config")
    if args.command:
        base["command"] = args.command
    for key in GLOBALS:
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    params = dict(base.get("params", {}))
    skip = set(GLOBALS) | {"config", "command"}
    for key, val in vars(args).items():
        if key not in skip and val is not None:
            params[key] = val
    base["params"] = params
    return RunConfig.from_dict(base)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command and not args.config:
        parser.print_help()
        return EXIT_CONFIG
    try:
        config = config_from_args(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TypeError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
