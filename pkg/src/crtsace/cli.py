"""Command-line front end: ``sace estimate | validate | simulate``.

Exit codes: 0 success, 2 input error, 3 fit/estimation error, 4 variance
error, 5 configuration error.
"""

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import fields

import numpy as np

from . import __version__
from .data import ColumnMap, read_csv, validate_dataset, require_valid
from .errors import ConfigError, SaceError
from .estimators import VarianceConfig, estimate
from .resampling import BootstrapConfig
from .simulation import SimScenario, StudyConfig, preset, run_study
from .survival import FitOptions, ModelSpec

SCHEMA_VERSION = "1.0"
CSV_COLUMNS = ("scenario_id", "estimator", "model", "mean_estimate", "bias", "emp_var",
               "avg_model_var", "coverage", "n_failed")


# ---------------------------------------------------------------------------
# JSON with 17 significant digits
# ---------------------------------------------------------------------------


def _num(x):
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return format(x, ".17g")


def dumps(obj, indent=2, _level=0):
    """Serialize to JSON writing every float with 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _num(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


class RunManifest:
    """Provenance of one run: command line, config hash, seed, version, timings."""

    def __init__(self, argv, config, seed=None):
        self.command_line = list(argv)
        blob = json.dumps(config, sort_keys=True, default=str).encode()
        self.config_hash = hashlib.sha256(blob).hexdigest()
        self.seed = seed
        self.version = __version__
        self.timing = {"fit": 0.0, "variance": 0.0, "total": 0.0}
        self._t0 = time.perf_counter()

    def finish(self):
        self.timing["total"] = time.perf_counter() - self._t0
        for k, v in self.timing.items():
            self.timing[k] = max(0.0, float(v))
        return self

    def to_dict(self):
        return {
            "command_line": self.command_line,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "software_version": self.version,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "wall_clock_seconds": dict(self.timing),
        }


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ConfigError.exit_code, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _add_schema_args(p):
    g = p.add_argument_group("CSV schema")
    g.add_argument("--cluster-col", default="cluster_id")
    g.add_argument("--treatment-col", default="treatment")
    g.add_argument("--survival-col", default="survival")
    g.add_argument("--outcome-col", default="outcome")
    g.add_argument("--covariates", default=None,
                   help="comma-separated individual covariate columns (default: all x<k>)")
    g.add_argument("--cluster-covariates", default=None,
                   help="comma-separated cluster covariate columns (default: all c<k>)")


def _schema(args):
    split = lambda s: None if s is None else tuple(c for c in s.split(",") if c)
    return ColumnMap(args.cluster_col, args.treatment_col, args.survival_col, args.outcome_col,
                     split(args.covariates), split(args.cluster_covariates))


def build_parser():
    parser = _Parser(prog="sace", description="Survivor average causal effect in cluster-randomized trials.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", help="fit, estimate and attach variances for a trial CSV")
    e.add_argument("--input", required=True)
    e.add_argument("--model", choices=("glmm", "glm"), default="glmm")
    e.add_argument("--estimator", choices=("ssw", "psw", "both"), default="both")
    e.add_argument("--variance", choices=("sandwich", "bootstrap", "none"), default="sandwich")
    e.add_argument("--df-correction", choices=("on", "off"), default="on")
    e.add_argument("--quad-order", type=int, default=25)
    e.add_argument("--max-iter", type=_positive_int, default=200)
    e.add_argument("--tol", type=float, default=1e-7)
    e.add_argument("--boot-reps", type=_positive_int, default=250)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--threads", type=_positive_int, default=None)
    e.add_argument("--output", default="-", help="report path (default: stdout)")
    _add_schema_args(e)

    v = sub.add_parser("validate", help="check a trial CSV against the data contract")
    v.add_argument("--input", required=True)
    v.add_argument("--output", default="-")
    _add_schema_args(v)

    s = sub.add_parser("simulate", help="run a Monte-Carlo performance study")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", help="named scenario grid (table2, deterministic, smoke)")
    src.add_argument("--config", help="JSON file with a list of scenarios and study options")
    s.add_argument("--reps", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-", help="CSV path (default: stdout)")
    s.add_argument("--estimator", choices=("ssw", "psw", "both"), default="both")
    s.add_argument("--models", default="glmm,glm", help="comma-separated subset of glmm,glm")
    s.add_argument("--quad-order", type=int, default=25)
    s.add_argument("--df-correction", choices=("on", "off"), default="on")
    s.add_argument("--paper-scale", action="store_true",
                   help="report bias, emp_var and avg_model_var multiplied by 100")
    s.add_argument("--threads", type=_positive_int, default=None)
    s.add_argument("--manifest", default=None, help="manifest path (default: <out>.manifest.json)")
    return parser


def _write(path, text):
    if path == "-":
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _threads(args):
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("SACE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SACE_THREADS must be an integer, got {env!r}") from None
    return 1


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_validate(args, argv):
    data = read_csv(args.input, _schema(args))
    report = validate_dataset(data)
    out = {"schema_version": SCHEMA_VERSION, "input": args.input,
           "n_clusters": data.n_clusters, "n_individuals": data.n_individuals, **report.to_dict()}
    _write(args.output, dumps(out) + "\n")
    return 0 if report.passed else 2


def cmd_estimate(args, argv):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "output")}
    manifest = RunManifest(argv, config, args.seed)
    opts = FitOptions(max_iter=args.max_iter, tol=args.tol, quad_order=args.quad_order)
    data = read_csv(args.input, _schema(args))
    require_valid(data)
    mspec = ModelSpec(args.model, opts=opts)
    t0 = time.perf_counter()
    model = mspec.fit(data)
    manifest.timing["fit"] = time.perf_counter() - t0
    threads = _threads(args)
    boot = BootstrapConfig(args.boot_reps, args.seed, parallel=threads > 1, threads=threads)
    vcfg = VarianceConfig(args.variance, args.df_correction == "on", boot)
    ests = estimate(data, model, args.estimator, vcfg, mspec, timing=manifest.timing)
    manifest.finish()
    report = {
        "schema_version": SCHEMA_VERSION,
        "input": args.input,
        "n_clusters": data.n_clusters,
        "n_individuals": data.n_individuals,
        "model": {
            "kind": model.kind,
            "beta": dict(zip(model.columns, map(float, model.beta))),
            "sigma2_b": model.sigma2_b,
            "loglik": model.loglik,
            "converged": model.converged,
            "boundary": model.boundary,
            "iterations": model.iterations,
            "quad_order": model.quad_order,
        },
        "estimates": [e.to_dict() for e in ests],
        "manifest": manifest.to_dict(),
    }
    _write(args.output, dumps(report) + "\n")
    return 0


_SCENARIO_FIELDS = {f.name for f in fields(SimScenario)}


def _scenarios_from_config(path, seed):
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path!r} is not valid JSON: {exc}") from None
    items = cfg.get("scenarios") if isinstance(cfg, dict) else cfg
    if not isinstance(items, list) or not items:
        raise ConfigError("config must hold a non-empty list of scenarios (or {'scenarios': [...]})")
    out = []
    for k, item in enumerate(items):
        if not isinstance(item, dict):
            raise ConfigError(f"scenario {k} is not an object")
        unknown = set(item) - _SCENARIO_FIELDS
        if unknown:
            raise ConfigError(f"scenario {k}: unknown field(s) {sorted(unknown)}")
        item = dict(item)
        item.setdefault("seed", seed)
        if "size_range" in item:
            item["size_range"] = tuple(item["size_range"])
        try:
            out.append(SimScenario(**item))
        except TypeError as exc:
            raise ConfigError(f"scenario {k}: {exc}") from None
    return tuple(out), (cfg if isinstance(cfg, dict) else {})


def cmd_simulate(args, argv):
    if args.reps < 2:
        raise ConfigError(f"--reps must be >= 2, got {args.reps}")
    models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    if not models or any(m not in ("glmm", "glm") for m in models):
        raise ConfigError(f"--models must be a comma-separated subset of glmm,glm, got {args.models!r}")
    if args.preset is not None:
        scenarios, extra = preset(args.preset, args.seed), {}
    else:
        scenarios, extra = _scenarios_from_config(args.config, args.seed)
    estimators = ("SSW", "PSW") if args.estimator == "both" else (args.estimator.upper(),)
    study = StudyConfig(estimators=estimators, models=models, df_correct=args.df_correction == "on",
                        quad_order=args.quad_order,
                        **{k: extra[k] for k in ("oracle_nc", "truth") if k in extra})
    config = {k: v for k, v in vars(args).items() if k not in ("func", "out", "manifest", "threads")}
    config["scenarios"] = [s.to_dict() for s in scenarios]
    manifest = RunManifest(argv, config, args.seed)
    threads = _threads(args)
    scale = 100.0 if args.paper_scale else 1.0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for sc in scenarios:
        t0 = time.perf_counter()
        tab = run_study(sc, args.reps, study, threads=threads)
        manifest.timing["fit"] += time.perf_counter() - t0
        for r in tab.rows:
            w.writerow([r.scenario_id, r.estimator, r.model, _num(r.mean_estimate), _num(r.bias * scale),
                        _num(r.emp_var * scale), _num(r.avg_model_var * scale), _num(r.coverage),
                        r.n_failed])
    _write(args.out, buf.getvalue())
    manifest.finish()
    mpath = args.manifest or (None if args.out == "-" else args.out + ".manifest.json")
    if mpath:
        _write(mpath, dumps(manifest.to_dict()) + "\n")
    else:
        sys.stderr.write(dumps(manifest.to_dict()) + "\n")
    return 0


COMMANDS = {"estimate": cmd_estimate, "validate": cmd_validate, "simulate": cmd_simulate}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args, ["sace", *argv])
    except SaceError as exc:
        sys.stderr.write(f"sace {args.command}: {type(exc).__name__}: {exc}\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
