"""Verification of the improvisation conditions for an EDHMM.

* soft constraints: exact probability (forward DP over the expanded chain)
  that the hourly running cost never exceeds the budget during a given hour,
  plus a Monte Carlo estimate on exact, unbucketed costs;
* hard constraints: membership of a trace in the model's support;
* randomness: strong connectivity of the hidden-state graph and an upper
  bound on the probability of any single observation string.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.sparse.csgraph import breadth_first_order, connected_components

from .chain import step_cost_distribution
from .edhmm import EdhmmParams, observation_log_likelihood, sample_batch, step_hours
from .errors import TractabilityError
from .trace_io import Trace

FORMAT_VERSION = 1
DEFAULT_MAX_STATES = 20_000_000


@dataclass(frozen=True)
class SoftConstraint:
    """Budget on the running cost within hour ``hour``, required w.p. >= 1 - epsilon."""

    hour: int
    budget: int
    epsilon: float | None = None

    def __post_init__(self):
        if not 1 <= self.hour <= 24:
            raise ValueError(f"hour must be in 1..24, got {self.hour}")
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if self.epsilon is not None and not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")


def load_constraints(doc: dict) -> list[SoftConstraint]:
    """Parse ``{hour: {"budget": b, "epsilon": e}}`` (epsilon optional)."""
    doc = {k: v for k, v in doc.items() if k != "format_version"}
    out = [SoftConstraint(int(h), int(v["budget"]), v.get("epsilon")) for h, v in doc.items()]
    hours = [c.hour for c in out]
    if len(set(hours)) != len(hours):
        raise ValueError("constraints must cover distinct hours")
    return sorted(out, key=lambda c: c.hour)


def dump_constraints(constraints: Sequence[SoftConstraint]) -> dict:
    return {str(c.hour): {"budget": c.budget, "epsilon": c.epsilon} for c in constraints}


# ---------------------------------------------------------------------------
# soft constraints


def _default_horizon(params, T_horizon):
    return 24 * params.samples_per_hour if T_horizon is None else int(T_horizon)


def _suggest(N, D, budget, max_states):
    room = max_states // (N * D) - 2
    if room < 0:
        return f"reduce D to at most {max(max_states // (2 * N), 1)}"
    return f"use q >= {budget // room + 1 if room else budget + 1} or reduce D"


def satisfaction_dp(params: EdhmmParams, hour: int, budget: int, T_horizon: int,
                    q: int = 1, max_states: int = DEFAULT_MAX_STATES):
    """Forward DP for one hourly budget.

    Returns ``(probability, violated)`` where ``violated[t]`` is the mass
    absorbed in the violation sink after step ``t + 1``. Outside the target
    hour the cost accumulator is irrelevant and is collapsed away; inside it
    the distribution over (x, d, delta) is kept for delta up to the budget.
    """
    if T_horizon < 1:
        raise ValueError("horizon must be >= 1")
    N, D = params.N, params.D
    width = budget // q + 1
    if N * D * (width + 1) > max_states:
        raise TractabilityError(
            f"DP needs {N * D * (width + 1)} states (> {max_states}); {_suggest(N, D, budget, max_states)}",
            size=N * D * (width + 1), limit=max_states)
    costs = step_cost_distribution(params, q).probs
    hrs = step_hours(T_horizon, params.samples_per_hour)
    target = hour - 1
    A, C = params.A, params.C
    sink = 0.0
    violated = np.empty(T_horizon)

    def add_cost(hidden, keep_delta):
        # hidden: (N, D, w). Returns (N, D, width) mass and the overflow.
        nonlocal sink
        if not keep_delta:
            hidden = hidden.sum(axis=2, keepdims=True)
        w = hidden.shape[2]
        out = np.zeros((N, D, width))
        for b in np.flatnonzero(costs.any(axis=0)):
            if b >= width:
                break
            n = min(w, width - b)
            out[:, :, b:b + n] += hidden[:, :, :n] * costs[:, None, b, None]
        sink += max(hidden.sum() - out.sum(), 0.0)
        return out

    P = params.pi_x[:, None, None] * C[hrs[0]][:, :, None]
    P = add_cost(P, False) if hrs[0] == target else P
    violated[0] = sink
    for t in range(1, T_horizon):
        ending = P[:, 0, :]
        nxt = np.zeros_like(P)
        nxt[:, :-1] = P[:, 1:]
        into = np.einsum("iv,ij->jv", ending, A[hrs[t - 1]])
        nxt += into[:, None, :] * C[hrs[t]][:, :, None]
        if hrs[t] == target:
            P = add_cost(nxt, hrs[t - 1] == target)
        else:
            P = nxt.sum(axis=2, keepdims=True)
        violated[t] = sink
    return float(min(max(P.sum(), 0.0), 1.0)), violated


def satisfaction_probability(params: EdhmmParams, constraint: SoftConstraint,
                             T_horizon: int | None = None, q: int = 1,
                             max_states: int = DEFAULT_MAX_STATES) -> float:
    """P[ G (hour(t) = h  =>  delta <= budget) ] over a finite horizon."""
    T = _default_horizon(params, T_horizon)
    return satisfaction_dp(params, constraint.hour, constraint.budget, T, q, max_states)[0]


def hourly_window_totals(y_cost: np.ndarray, hour: int, samples_per_hour: int) -> list[np.ndarray]:
    """Per-window cost sums for every (possibly partial) window of ``hour``."""
    T = y_cost.shape[1]
    hrs = step_hours(T, samples_per_hour)
    out = []
    start = 0
    while start < T:
        stop = min(start + samples_per_hour, T)
        if hrs[start] == hour - 1:
            out.append(y_cost[:, start:stop].sum(axis=1))
        start = stop
    return out


def monte_carlo_satisfaction(params: EdhmmParams, constraint: SoftConstraint, n_samples: int,
                             T_horizon: int | None = None, seed: int = 0,
                             max_cells: int = 4_000_000) -> tuple[float, float]:
    """Fraction of sampled behaviours meeting the constraint, with its standard error."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    T = _default_horizon(params, T_horizon)
    rng = np.random.default_rng(seed)
    chunk = max(1, max_cells // (T * params.K))
    ok = 0
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        _, _, y = sample_batch(params, T, n, rng)
        cost = y.sum(axis=2)
        good = np.ones(n, dtype=bool)
        for tot in hourly_window_totals(cost, constraint.hour, params.samples_per_hour):
            good &= tot <= constraint.budget
        ok += int(good.sum())
        done += n
    p = ok / n_samples
    return p, math.sqrt(p * (1 - p) / n_samples)


# ---------------------------------------------------------------------------
# hard constraints and randomness


def hard_constraint_membership(params: EdhmmParams, y: Trace) -> bool:
    return observation_log_likelihood(params, y) > -math.inf


def transition_graph(params: EdhmmParams) -> np.ndarray:
    """Adjacency (i -> j) when a_ij^h > 0 in some hour."""
    return (params.A > 0).any(axis=0)


def ergodicity(params: EdhmmParams):
    """(ergodic, components).

    Ergodic means the hidden states reachable from the support of ``pi_x``
    form a single strongly connected component of the union-over-hours
    transition graph. ``components`` lists every SCC as a sorted list.
    """
    adj = transition_graph(params).astype(np.int8)
    n, labels = connected_components(adj, directed=True, connection="strong")
    comps = sorted(sorted(np.flatnonzero(labels == c).tolist()) for c in range(n))
    reach = set()
    for s in np.flatnonzero(params.pi_x > 0):
        reach.update(breadth_first_order(adj, int(s), directed=True, return_predecessors=False).tolist())
    ergodic = len({labels[i] for i in reach}) == 1
    return ergodic, comps


def log_rho_bound(params: EdhmmParams, T_horizon: int) -> float:
    """log of an upper bound on the probability of any length-T observation string.

    Runs the forward recursion with each emission factor replaced by the
    largest emission probability of the state; every string's forward mass
    is dominated term by term.
    """
    if T_horizon < 1:
        raise ValueError("horizon must be >= 1")
    m = np.ones(params.N)
    for b in params.B:
        m = m * b.max(axis=1)
    hrs = step_hours(T_horizon, params.samples_per_hour)
    A, C = params.A, params.C
    U = params.pi_x[:, None] * C[hrs[0]] * m[:, None]
    logz = 0.0
    for t in range(1, T_horizon):
        s = U.sum()
        if s <= 0:
            return -math.inf
        U = U / s
        logz += math.log(s)
        ending = U[:, 0]
        nxt = np.zeros_like(U)
        nxt[:, :-1] = U[:, 1:]
        nxt += (ending @ A[hrs[t - 1]])[:, None] * C[hrs[t]]
        U = nxt * m[:, None]
    s = U.sum()
    return logz + math.log(s) if s > 0 else -math.inf


def rho_bound(params: EdhmmParams, T_horizon: int | None = None) -> float:
    T = _default_horizon(params, T_horizon)
    return min(1.0, math.exp(log_rho_bound(params, T)))


# ---------------------------------------------------------------------------
# aggregate report


@dataclass
class ConstraintResult:
    hour: int
    budget: int
    epsilon: float | None
    probability: float
    empirical_probability: float | None = None

    @property
    def passed(self) -> bool | None:
        if self.epsilon is None:
            return None
        return self.probability >= 1.0 - self.epsilon

    @property
    def shortfall(self) -> float:
        if self.epsilon is None:
            return 0.0
        return max(0.0, (1.0 - self.epsilon) - self.probability)


@dataclass
class CheckReport:
    horizon: int
    q: int
    ergodic: bool
    components: list
    rho_bound: float
    rho_target: float | None
    constraints: list = field(default_factory=list)

    @property
    def rho_ok(self) -> bool:
        return self.rho_target is None or self.rho_bound <= self.rho_target

    @property
    def failing(self) -> list[ConstraintResult]:
        return [c for c in self.constraints if c.passed is False]

    @property
    def passed(self) -> bool:
        return self.ergodic and self.rho_ok and not self.failing

    def summary(self) -> str:
        if self.passed:
            return "pass"
        parts = []
        if not self.ergodic:
            parts.append(f"not ergodic (components {self.components})")
        if not self.rho_ok:
            parts.append(f"rho bound {self.rho_bound:.3g} > {self.rho_target:.3g}")
        for c in self.failing:
            parts.append(f"hour {c.hour}: p={c.probability:.6f} short by {c.shortfall:.6f}")
        return "; ".join(parts)

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "horizon": self.horizon,
            "q": self.q,
            "ergodic": self.ergodic,
            "components": self.components,
            "rho_bound": self.rho_bound,
            "rho_target": self.rho_target,
            "pass": self.passed,
            "constraints": [
                {"hour": c.hour, "budget": c.budget, "epsilon": c.epsilon,
                 "probability": c.probability, "pass": c.passed, "shortfall": c.shortfall,
                 "empirical_probability": c.empirical_probability}
                for c in self.constraints
            ],
        }

    def write(self, json_path, csv_path=None) -> None:
        with open(json_path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)
        if csv_path is not None:
            write_plot_csv(self, csv_path)


def write_plot_csv(report: CheckReport, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["hour", "probability", "empirical_probability"])
        for c in report.constraints:
            emp = "" if c.empirical_probability is None else f"{c.empirical_probability:.6f}"
            w.writerow([c.hour, f"{c.probability:.12f}", emp])


def check_all(params: EdhmmParams, constraints: Sequence[SoftConstraint], T_horizon: int | None = None,
              q: int = 1, rho_target: float | None = None, max_states: int = DEFAULT_MAX_STATES,
              profile=None) -> CheckReport:
    """Soft constraints, ergodicity and the randomness bound in one report.

    ``profile`` (an HourlyProfile of the training data) adds the empirical
    satisfaction rate of each budget.
    """
    hours = [c.hour for c in constraints]
    if len(set(hours)) != len(hours):
        raise ValueError("constraints must cover distinct hours")
    T = _default_horizon(params, T_horizon)
    ergodic, comps = ergodicity(params)
    results = []
    for c in sorted(constraints, key=lambda c: c.hour):
        p = satisfaction_probability(params, c, T, q, max_states)
        emp = None
        if profile is not None and profile.count[c.hour - 1]:
            emp = profile.empirical_satisfaction(c.hour, c.budget)
        results.append(ConstraintResult(c.hour, c.budget, c.epsilon, p, emp))
    return CheckReport(T, q, ergodic, comps, rho_bound(params, T), rho_target, results)
