"""Batch command-line pipeline: synthetic-data, train, profile, check,
synthesize, generate and export-prism.

Each subcommand reads a flat JSON config (``--config``) whose keys are
``RunConfig`` field names; explicit flags override the file. Errors are
printed to stderr as one JSON object and mapped to exit codes
0 ok, 2 bad input, 3 intractable, 4 unsatisfiable, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import calibrate, check, learn, synthetic, trace_io
from .chain import DEFAULT_PRISM_LIMIT, export_prism, lint_prism
from .edhmm import EdhmmParams, sample_trace, validate
from .errors import ImprovError, InputError, SynthesisFailure

log = logging.getLogger("edhmm_improv")

FORMAT_VERSION = 1


@dataclass
class RunConfig:
    # inputs
    traces: str | None = None
    csv: list = field(default_factory=list)
    caps: list = field(default_factory=list)
    model: str | None = None
    constraints: str | None = None
    plan: str | None = None
    bundle: str | None = None
    out: str = "out"
    # resampling
    period_seconds: int = 60
    gap_limit: int = 30
    align_hour: int = 1
    utc_offset_hours: int = 0
    # learning
    N: int = 8
    D: int = 12
    max_iters: int = 100
    rel_tol: float = 1e-6
    restarts: int = 1
    smoothing: float = 0.0
    share_hours: bool = False
    state_labels: list = field(default_factory=list)
    seed: int = 0
    # checking and calibration
    q: int = 1
    horizon: int | None = None
    rho_target: float | None = None
    max_states: int = check.DEFAULT_MAX_STATES
    epsilon: float | None = None
    max_rounds: int = 10
    prism_limit: int = DEFAULT_PRISM_LIMIT
    # generation
    n: int = 1
    steps: int | None = None
    days: int = 1
    force: bool = False
    training_traces: str | None = None
    # synthetic data
    appliances: int = 3
    n_traces: int = 60
    synthetic_period: int = 600

    def validate(self) -> None:
        positive = ["period_seconds", "gap_limit", "N", "D", "max_iters", "restarts", "q",
                    "max_states", "max_rounds", "prism_limit", "n", "days", "n_traces",
                    "synthetic_period"]
        for name in positive:
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        for name in ("horizon", "steps"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise InputError(f"{name} must be >= 1")
        if self.N < 2:
            raise InputError("N must be >= 2")
        if not self.rel_tol > 0 or self.smoothing < 0:
            raise InputError("rel_tol must be > 0 and smoothing >= 0")
        if not 1 <= self.align_hour <= 24:
            raise InputError("align_hour must be in 1..24")
        if self.epsilon is not None and not 0 <= self.epsilon <= 1:
            raise InputError("epsilon must be in [0, 1]")
        if self.rho_target is not None and not 0 <= self.rho_target <= 1:
            raise InputError("rho_target must be in [0, 1]")
        if not 1 <= self.appliances <= len(synthetic.DEFAULT_APPLIANCES):
            raise InputError(f"appliances must be in 1..{len(synthetic.DEFAULT_APPLIANCES)}")

    def learn_config(self) -> learn.LearnConfig:
        return learn.LearnConfig(self.N, self.D, self.max_iters, self.rel_tol, self.restarts,
                                 self.seed, self.smoothing, self.share_hours, tuple(self.state_labels))

    def check_config(self) -> calibrate.CheckConfig:
        return calibrate.CheckConfig(self.horizon, self.q, self.rho_target, self.max_states)


def build_config(args: argparse.Namespace) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    doc = {}
    if getattr(args, "config", None):
        doc = _read_json(args.config)
        doc.pop("format_version", None)
        extra = set(doc) - known
        if extra:
            raise InputError(f"unknown config keys: {sorted(extra)}")
    for name in known:
        if hasattr(args, name):
            doc[name] = getattr(args, name)
    try:
        cfg = RunConfig(**doc)
    except TypeError as exc:
        raise InputError(str(exc)) from None
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# file helpers


class MissingPath(InputError):
    def __init__(self, path):
        super().__init__(f"no such file or directory: {path}")
        self.path = str(path)


def _require(path, what: str) -> Path:
    if path is None:
        raise InputError(f"{what} path is required")
    p = Path(path)
    if not p.exists():
        raise MissingPath(p)
    return p


def _read_json(path):
    p = _require(path, "json")
    try:
        with open(p) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InputError(f"{p}: invalid JSON ({exc})") from None


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path) -> EdhmmParams:
    p = _require(path, "model")
    try:
        return EdhmmParams.load(p)
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{p}: invalid model ({exc})") from None


def _load_trace_path(path) -> list[trace_io.Trace]:
    p = _require(path, "traces")
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    out = []
    for f in files:
        try:
            out.extend(trace_io.load_traces(f))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{f}: invalid traces ({exc})") from None
    if not out:
        raise InputError(f"{p}: no traces found")
    return out


def _load_training(cfg: RunConfig) -> list[trace_io.Trace]:
    if cfg.csv:
        if len(cfg.caps) != len(cfg.csv):
            raise InputError("--caps needs one value per --csv file")
        series = []
        for f in cfg.csv:
            with open(_require(f, "csv"), "rb") as fh:
                series.extend(trace_io.ingest_csv(fh, [Path(f).stem]))
        return trace_io.resample_align(series, cfg.period_seconds, cfg.gap_limit, cfg.align_hour,
                                       [int(c) for c in cfg.caps], cfg.utc_offset_hours)
    return _load_trace_path(cfg.traces)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synthetic_data(cfg: RunConfig) -> int:
    if cfg.model:
        truth = _load_model(cfg.model)
    else:
        truth = synthetic.appliance_model(synthetic.DEFAULT_APPLIANCES[:cfg.appliances], cfg.D,
                                          cfg.synthetic_period)
    traces = synthetic.sample_days(truth, cfg.n_traces, cfg.days, cfg.seed)
    out = _out_dir(cfg)
    truth.save(out / "ground_truth.json")
    trace_io.save_traces(out / "traces.json", traces)
    log.info("wrote %d traces of %d steps", len(traces), traces[0].T)
    return 0


def cmd_train(cfg: RunConfig) -> int:
    traces = _load_training(cfg)
    lcfg = cfg.learn_config()
    params, history = learn.estimate(traces, lcfg)
    holes = params.zero_rows()
    params = learn.complete_transitions(params)
    bad = validate(params)
    if bad:
        raise ImprovError("learned model is invalid: " + "; ".join(map(str, bad[:5])))
    out = _out_dir(cfg)
    params.save(out / "model.json")
    _write_json(out / "train_report.json", learn.training_report(params, history, holes, lcfg))
    log.info("EM finished after %d iterations, loglik %.6f", len(history), history[-1])
    return 0


def cmd_profile(cfg: RunConfig) -> int:
    prof = trace_io.hourly_profile(_load_training(cfg))
    out = _out_dir(cfg)
    _write_json(out / "profile.json", prof.to_json())
    cons = [check.SoftConstraint(h + 1, b, cfg.epsilon) for h, b in enumerate(prof.budgets) if b is not None]
    _write_json(out / "constraints.json", {"format_version": FORMAT_VERSION, **check.dump_constraints(cons)})
    return 0


def _constraints(cfg: RunConfig) -> list[check.SoftConstraint]:
    try:
        cons = check.load_constraints(_read_json(cfg.constraints))
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"{cfg.constraints}: invalid constraints ({exc})") from None
    if cfg.epsilon is not None:
        cons = [check.SoftConstraint(c.hour, c.budget, cfg.epsilon if c.epsilon is None else c.epsilon)
                for c in cons]
    return cons


def cmd_check(cfg: RunConfig) -> int:
    params = _load_model(cfg.model)
    profile = trace_io.hourly_profile(_load_trace_path(cfg.traces)) if cfg.traces else None
    report = check.check_all(params, _constraints(cfg), cfg.horizon, cfg.q, cfg.rho_target,
                             cfg.max_states, profile)
    out = _out_dir(cfg)
    report.write(out / "check_report.json", out / "check_plot.csv")
    log.info("check: %s", report.summary())
    return 0


def cmd_synthesize(cfg: RunConfig) -> int:
    params = _load_model(cfg.model)
    cons = _constraints(cfg)
    try:
        plan_doc = _read_json(cfg.plan) if cfg.plan else {}
        plan_doc.setdefault("max_rounds", cfg.max_rounds)
        plan = calibrate.CalibrationPlan.from_json(plan_doc, params)
        plan.validate_for(params)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"invalid calibration plan ({exc})") from None
    out = _out_dir(cfg)
    try:
        imp = calibrate.synthesize_improviser(params, cons, plan, cfg.check_config())
    except SynthesisFailure as exc:
        _write_json(out / "failure_report.json", exc.report.to_json())
        raise
    imp.write(out)
    log.info("improviser found after %d actions", len(imp.provenance))
    return 0


def _profile_rows(prof: trace_io.HourlyProfile | None):
    if prof is None:
        return [(float("nan"), float("nan"))] * 24
    return list(zip(prof.mean, prof.std))


def write_profile_comparison(path, training, improvised) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "train_mean", "train_std", "improv_mean", "improv_std"])
        for h, ((tm, ts), (im, istd)) in enumerate(zip(_profile_rows(training), _profile_rows(improvised))):
            w.writerow([h + 1] + [f"{v:.6f}" for v in (tm, ts, im, istd)])


def cmd_generate(cfg: RunConfig) -> int:
    if cfg.bundle:
        bundle = _require(cfg.bundle, "bundle")
        params = _load_model(bundle / "model.json")
        report = bundle / "check_report.json"
        passed = report.exists() and _read_json(report).get("pass") is True
    else:
        params = _load_model(cfg.model)
        passed = False
    if not passed and not cfg.force:
        raise InputError("model does not come from a passing improviser bundle; use --force")
    T = cfg.steps or cfg.days * 24 * params.samples_per_hour
    traces = [sample_trace(params, T, cfg.seed + i, synthetic.BASE_TIMESTAMP)[0] for i in range(cfg.n)]
    out = _out_dir(cfg)
    trace_io.save_traces(out / "improvisations.json", traces)
    with open(out / "improvisations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trace", "step", "hour"] + [f"y{k}" for k in range(params.K)])
        for i, tr in enumerate(traces):
            for t in range(tr.T):
                w.writerow([i, t + 1, int(tr.hour_labels[t])] + tr.observations[t].tolist())
    training = None
    if cfg.training_traces:
        training = trace_io.hourly_profile(_load_trace_path(cfg.training_traces))
    try:
        improvised = trace_io.hourly_profile(traces)
    except ValueError:
        improvised = None  # shorter than one hour
    write_profile_comparison(out / "profile_comparison.csv", training, improvised)
    return 0


def cmd_export_prism(cfg: RunConfig) -> int:
    params = _load_model(cfg.model)
    cons = _constraints(cfg) if cfg.constraints else []
    model_text, props = export_prism(params, cons, cfg.horizon, cfg.q, cfg.prism_limit)
    problems = lint_prism(model_text)
    if problems:
        raise ImprovError("exported model failed lint: " + "; ".join(problems[:5]))
    out = _out_dir(cfg)
    (out / "model.prism").write_text(model_text)
    (out / "properties.props").write_text(props)
    return 0


COMMANDS = {
    "synthetic-data": (cmd_synthetic_data, "sample hour-aligned traces from a ground-truth model"),
    "train": (cmd_train, "fit an EDHMM to traces by EM"),
    "profile": (cmd_profile, "hourly profile and mean+std budgets of traces"),
    "check": (cmd_check, "exact soft-constraint probabilities, ergodicity and rho bound"),
    "synthesize": (cmd_synthesize, "check/calibrate loop producing an improviser bundle"),
    "generate": (cmd_generate, "sample improvisations from an improviser bundle"),
    "export-prism": (cmd_export_prism, "write the expanded chain as a PRISM DTMC"),
}


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of RunConfig fields")
    common.add_argument("--out", default=S, help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=S)
    common.add_argument("--q", type=int, default=S, help="cost bucket width")
    common.add_argument("--horizon", type=int, default=S, help="check horizon in steps (default one day)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="edhmm-improv", description="Learn an EDHMM from energy traces, check hourly budget constraints, calibrate and generate.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = {name: sub.add_parser(name, parents=[common], help=h, argument_default=S)
         for name, (_, h) in COMMANDS.items()}

    for name in ("train", "profile"):
        p[name].add_argument("--traces", help="traces JSON file or directory")
        p[name].add_argument("--csv", nargs="+", help="one timestamp/value file per channel")
        p[name].add_argument("--caps", nargs="+", type=int)
        p[name].add_argument("--period-seconds", dest="period_seconds", type=int)
        p[name].add_argument("--gap-limit", dest="gap_limit", type=int)
        p[name].add_argument("--align-hour", dest="align_hour", type=int)
    p["train"].add_argument("--N", type=int)
    p["train"].add_argument("--D", type=int)
    p["train"].add_argument("--max-iters", dest="max_iters", type=int)
    p["train"].add_argument("--restarts", type=int)
    p["profile"].add_argument("--epsilon", type=float)

    for name in ("check", "synthesize", "export-prism"):
        p[name].add_argument("--model")
        p[name].add_argument("--constraints")
    for name in ("check", "synthesize"):
        p[name].add_argument("--epsilon", type=float, help="default epsilon for constraints without one")
        p[name].add_argument("--rho-target", dest="rho_target", type=float)
    p["check"].add_argument("--traces", help="training traces for empirical satisfaction rates")
    p["synthesize"].add_argument("--plan", help="CalibrationPlan JSON")
    p["synthesize"].add_argument("--max-rounds", dest="max_rounds", type=int)

    g = p["generate"]
    g.add_argument("--bundle", help="improviser bundle directory")
    g.add_argument("--model", help="model JSON (requires --force)")
    g.add_argument("--n", type=int, help="number of traces")
    g.add_argument("--steps", type=int, help="trace length in steps")
    g.add_argument("--days", type=int, help="trace length in days when --steps is absent")
    g.add_argument("--force", action="store_true")
    g.add_argument("--training-traces", dest="training_traces")

    s = p["synthetic-data"]
    s.add_argument("--model", help="ground-truth model JSON (default: built-in appliance model)")
    s.add_argument("--appliances", type=int)
    s.add_argument("--n-traces", dest="n_traces", type=int)
    s.add_argument("--days", type=int)
    s.add_argument("--D", type=int)
    return parser


def _error_doc(exc: BaseException, code: int) -> dict:
    doc = {"format_version": FORMAT_VERSION, "error": type(exc).__name__, "message": str(exc),
           "exit_code": code}
    for attr in ("path", "size", "limit", "line", "iteration"):
        v = getattr(exc, attr, None)
        if v is not None:
            doc[attr] = v
    if isinstance(exc, FileNotFoundError) and exc.filename:
        doc["path"] = str(exc.filename)
    return doc


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        cfg = build_config(args)
        return fn(cfg)
    except ImprovError as exc:
        err, code = exc, exc.exit_code
    except (FileNotFoundError, ValueError, KeyError) as exc:
        err, code = exc, 2
    except Exception as exc:  # noqa: BLE001 - reported as JSON, exit 1
        err, code = exc, 1
    print(json.dumps(_error_doc(err, code)), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
