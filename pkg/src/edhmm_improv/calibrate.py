"""Model calibration heuristics and the check -> calibrate synthesis loop."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .chain import step_cost_distribution
from .check import CheckReport, SoftConstraint, check_all
from .edhmm import EdhmmParams
from .errors import CalibrationError, SynthesisFailure

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DurationAction:
    states: tuple
    hours: tuple
    threshold: int

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError("duration threshold must be >= 1")
        object.__setattr__(self, "states", tuple(int(s) for s in self.states))
        object.__setattr__(self, "hours", tuple(int(h) for h in self.hours))

    def apply(self, params):
        return truncate_durations(params, self.states, self.hours, self.threshold)

    def to_json(self):
        return {"kind": "duration", "states": list(self.states), "hours": list(self.hours),
                "threshold": self.threshold}


@dataclass(frozen=True)
class TransitionAction:
    target: int
    hour: int
    limits: tuple

    def __post_init__(self):
        lim = tuple(float(v) for v in self.limits)
        if any(not 0.0 <= v <= 1.0 for v in lim):
            raise ValueError("transition limits must lie in [0, 1]")
        object.__setattr__(self, "limits", lim)

    def apply(self, params):
        return shift_transitions(params, self.target, self.hour, self.limits)

    def to_json(self):
        return {"kind": "transition", "target": self.target, "hour": self.hour,
                "limits": list(self.limits)}


def action_from_json(doc):
    if doc["kind"] == "duration":
        return DurationAction(doc["states"], doc["hours"], doc["threshold"])
    if doc["kind"] == "transition":
        return TransitionAction(doc["target"], doc["hour"], doc["limits"])
    raise ValueError(f"unknown action kind {doc['kind']!r}")


@dataclass
class CalibrationPlan:
    duration_actions: list = field(default_factory=list)
    transition_actions: list = field(default_factory=list)
    max_rounds: int = 10
    auto_tighten: bool = True

    def __post_init__(self):
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")

    def validate_for(self, params: EdhmmParams):
        for a in self.transition_actions:
            if a.target == params.x_min:
                raise ValueError(f"transition action targets x_min ({params.x_min})")
            if len(a.limits) != params.N:
                raise ValueError("transition limits need one entry per source state")

    @classmethod
    def from_json(cls, doc: dict, params: EdhmmParams | None = None) -> "CalibrationPlan":
        """Parse a plan. Transition ``limits`` may be a scalar (same for all sources)."""
        durs = [DurationAction(a["states"], a["hours"], a["threshold"])
                for a in doc.get("duration_actions", [])]
        trans = []
        for a in doc.get("transition_actions", []):
            hours = a["hours"] if "hours" in a else [a["hour"]]
            targets = a["targets"] if "targets" in a else [a["target"]]
            for x_r in targets:
                for h in hours:
                    lim = a["limits"]
                    if np.isscalar(lim):
                        if params is None:
                            raise ValueError("scalar limits need the model to size them")
                        lim = [lim] * params.N
                    trans.append(TransitionAction(x_r, h, lim))
        return cls(durs, trans, doc.get("max_rounds", 10), doc.get("auto_tighten", True))

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "duration_actions": [a.to_json() for a in self.duration_actions],
            "transition_actions": [a.to_json() for a in self.transition_actions],
            "max_rounds": self.max_rounds,
            "auto_tighten": self.auto_tighten,
        }


# ---------------------------------------------------------------------------
# heuristics


def truncate_durations(params: EdhmmParams, states: Sequence[int], hours: Sequence[int],
                       threshold: int) -> EdhmmParams:
    """Zero durations longer than ``threshold`` in the selected (state, hour) rows.

    Affected rows are renormalized; every other parameter is left as is.
    """
    if not 1 <= threshold <= params.D:
        raise ValueError(f"threshold must be in 1..{params.D}")
    C = params.C.copy()
    changed = False
    for h in hours:
        for i in states:
            row = C[h - 1, i]
            tail = row[threshold:]
            if not tail.any():
                continue
            kept = row[:threshold].sum()
            if kept <= 0:
                raise CalibrationError(
                    f"all duration mass of state {i} in hour {h} lies above {threshold}")
            new = np.zeros_like(row)
            new[:threshold] = row[:threshold] / kept
            C[h - 1, i] = new
            changed = True
    return params.evolve(C=C, x_min=params.x_min) if changed else params


def shift_transitions(params: EdhmmParams, x_r: int, h_r: int, limits: Sequence[float]) -> EdhmmParams:
    """Cap transitions into ``x_r`` during hour ``h_r``; excess goes to ``x_min``.

    For each source ``i``: a[i, x_r] <- min(limit_i, a[i, x_r]) and the
    removed mass is added to a[i, x_min]. The row of ``x_min`` itself is
    skipped, since its mass cannot move onto the diagonal.
    """
    xm = params.x_min
    if x_r == xm:
        raise ValueError("x_r must differ from x_min")
    if len(limits) != params.N:
        raise ValueError("one limit per source state required")
    A = params.A.copy()
    row_block = A[h_r - 1]
    changed = False
    for i in range(params.N):
        if i == xm:
            continue
        a = row_block[i, x_r]
        capped = min(limits[i], a)
        if capped < a:
            row_block[i, x_r] = capped
            row_block[i, xm] = row_block[i, xm] + (a - capped)
            changed = True
    return params.evolve(A=A, x_min=xm) if changed else params


def new_support(before: EdhmmParams, after: EdhmmParams) -> list[tuple[int, int, int]]:
    """(hour, i, j) entries of A that went from exactly 0 to positive."""
    hs, i, j = np.nonzero((before.A == 0) & (after.A > 0))
    return [(int(h) + 1, int(a), int(b)) for h, a, b in zip(hs, i, j)]


def replay(params: EdhmmParams, provenance: Sequence) -> EdhmmParams:
    for action in provenance:
        params = action.apply(params)
    return params


# ---------------------------------------------------------------------------
# synthesis loop


@dataclass
class CheckConfig:
    T_horizon: int | None = None
    q: int = 1
    rho_target: float | None = None
    max_states: int = 20_000_000

    def run(self, params, constraints) -> CheckReport:
        return check_all(params, constraints, self.T_horizon, self.q, self.rho_target, self.max_states)


@dataclass
class Improviser:
    params: EdhmmParams
    report: CheckReport
    provenance: list = field(default_factory=list)
    new_support: list = field(default_factory=list)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.params.save(out / "model.json")
        with open(out / "provenance.json", "w") as fh:
            json.dump({"format_version": FORMAT_VERSION,
                       "actions": [a.to_json() for a in self.provenance],
                       "new_support": [list(e) for e in self.new_support]}, fh, indent=1)
        self.report.write(out / "check_report.json", out / "check_plot.csv")


def x_min_only_probability(params: EdhmmParams, c: SoftConstraint, T_horizon: int, q: int = 1) -> float:
    """Satisfaction probability of a behaviour that never leaves ``x_min``.

    This is the limit reached by repeated transition calibration; a
    constraint failing here cannot be fixed by the heuristics.
    """
    n_s = params.samples_per_hour
    windows = Counter((t - 1) // n_s for t in range(1, T_horizon + 1)
                      if (t - 1) // n_s % 24 == c.hour - 1)
    costs = step_cost_distribution(params, q).probs[params.x_min]
    width = c.budget // q + 1
    prob = 1.0
    for n in windows.values():
        dist = np.zeros(width)
        dist[0] = 1.0
        for _ in range(n):
            dist = np.convolve(dist, costs)[:width]
        prob *= dist.sum()
    return float(prob)


@dataclass
class FailureReport:
    reason: str
    report: CheckReport
    provenance: list
    unsatisfiable_hours: list
    rounds: int

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "reason": self.reason,
            "rounds": self.rounds,
            "unsatisfiable": bool(self.unsatisfiable_hours),
            "unsatisfiable_hours": self.unsatisfiable_hours,
            "shortfalls": [{"hour": c.hour, "probability": c.probability, "shortfall": c.shortfall}
                           for c in self.report.failing],
            "actions": [a.to_json() for a in self.provenance],
            "last_report": self.report.to_json(),
        }


def _auto_actions(params: EdhmmParams, failing_hours) -> list[TransitionAction]:
    """One tightening round: halve inflow into every costlier state, costliest first."""
    costs = params.expected_step_costs()
    order = [int(x) for x in np.argsort(-costs, kind="stable") if x != params.x_min]
    actions = []
    for h in failing_hours:
        for x_r in order:
            col = params.A[h - 1, :, x_r]
            if costs[x_r] <= costs[params.x_min] or not col.any():
                continue
            actions.append(TransitionAction(x_r, h, tuple(col / 2.0)))
    return actions


def synthesize_improviser(params: EdhmmParams, constraints: Sequence[SoftConstraint],
                          plan: CalibrationPlan, check: CheckConfig | None = None) -> Improviser:
    """Alternate checking and calibration until every condition holds.

    Planned duration actions are tried first, then planned transition
    actions, one per round; afterwards (if ``plan.auto_tighten``) each round
    halves the transitions into costlier states during the failing hours.
    Raises SynthesisFailure with a FailureReport when no improviser is found
    within ``plan.max_rounds`` rounds or a constraint fails even for a
    behaviour that stays in ``x_min``.
    """
    check = check or CheckConfig()
    plan.validate_for(params)
    initial = params
    T = check.T_horizon or 24 * params.samples_per_hour
    report = check.run(params, constraints)
    provenance: list = []
    queue = list(plan.duration_actions) + list(plan.transition_actions)
    rounds = 0

    def fail(reason, unsat=()):
        fr = FailureReport(reason, report, provenance, list(unsat), rounds)
        raise SynthesisFailure(reason, fr)

    unsat = [c.hour for c in constraints
             if c.epsilon is not None and x_min_only_probability(params, c, T, check.q) < 1 - c.epsilon]
    if unsat and not report.passed:
        fail(f"hours {unsat} cannot be met even by staying in x_min", unsat)

    while not report.passed:
        if rounds >= plan.max_rounds:
            fail(f"no improviser within {plan.max_rounds} rounds: {report.summary()}")
        if queue:
            actions = [queue.pop(0)]
        elif plan.auto_tighten and report.failing:
            actions = _auto_actions(params, [c.hour for c in report.failing])
        else:
            actions = []
        if not actions:
            fail(f"calibration plan exhausted: {report.summary()}")
        for a in actions:
            if isinstance(a, TransitionAction) and a.target == params.x_min:
                continue
            params = a.apply(params)
            provenance.append(a)
        rounds += 1
        report = check.run(params, constraints)
        log.info("round %d: %s", rounds, report.summary())
    return Improviser(params, report, provenance, new_support(initial, params))
