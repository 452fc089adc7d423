"""Markov-chain semantics of an EDHMM with an hourly cost monitor.

States are 4-tuples ``(x, d, t, delta)``: hidden state, remaining duration,
time step and the cost accumulated so far in the current clock hour. Costs
are bucketed with width ``q``; ``delta`` counts buckets and saturates at
``floor(max_budget / q) + 1``.

Every step, including the first one out of the init state, adds the bucketed
cost of the state being entered, so with ``q == 1`` ``delta`` equals the
running hourly sum of the observations.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, NamedTuple

import numpy as np

from .edhmm import EdhmmParams
from .errors import TractabilityError
from .trace_io import hour_of_step

INIT = None


class ExpandedState(NamedTuple):
    x: int | None  # None while t == 0
    d: int
    t: int
    delta: int


INITIAL_STATE = ExpandedState(INIT, 1, 0, 0)


@dataclass(frozen=True)
class StepCostDist:
    """Distribution of the bucketed total step cost for each hidden state.

    ``probs[x, b]`` is the probability that state ``x`` emits a total cost
    in ``[b*q, (b+1)*q)``.
    """

    probs: np.ndarray
    q: int

    @property
    def n_buckets(self) -> int:
        return self.probs.shape[1]


def step_cost_distribution(params: EdhmmParams, q: int = 1) -> StepCostDist:
    if q < 1:
        raise ValueError("bucket width q must be >= 1")
    rows = []
    for x in range(params.N):
        dist = np.ones(1)
        for b in params.B:
            dist = np.convolve(dist, b[x])
        rows.append(dist)
    exact = np.array(rows)
    n_b = -(-exact.shape[1] // q)
    padded = np.zeros((params.N, n_b * q))
    padded[:, : exact.shape[1]] = exact
    return StepCostDist(padded.reshape(params.N, n_b, q).sum(axis=2), q)


def delta_cap(budgets: Mapping[int, int] | int, q: int) -> int:
    """Saturation value of delta: one bucket beyond the largest budget."""
    top = budgets if isinstance(budgets, int) else max(budgets.values(), default=0)
    return int(top) // q + 1


def next_state_distribution(params: EdhmmParams, s: ExpandedState, costs: StepCostDist,
                            budgets: Mapping[int, int] | int, T_horizon: int) -> dict:
    """Successor distribution of expanded state ``s`` as {state: probability}.

    States with ``t >= T_horizon`` have no successors.
    """
    if s.t >= T_horizon:
        return {}
    n_s = params.samples_per_hour
    cap = delta_cap(budgets, costs.q)
    t1 = s.t + 1
    h_next = hour_of_step(t1, n_s) - 1
    out: dict = {}

    def emit(x, d, base, p):
        for b in np.flatnonzero(costs.probs[x]):
            key = ExpandedState(int(x), int(d), t1, min(base + int(b), cap))
            out[key] = out.get(key, 0.0) + p * costs.probs[x, b]

    if s.t == 0:
        for x in range(params.N):
            for d in np.flatnonzero(params.C[h_next, x]):
                p = params.pi_x[x] * params.C[h_next, x, d]
                if p > 0:
                    emit(x, d + 1, 0, p)
        return out

    h_now = hour_of_step(s.t, n_s) - 1
    base = s.delta if h_now == h_next else 0
    if s.d > 1:
        emit(s.x, s.d - 1, base, 1.0)
        return out
    for j in np.flatnonzero(params.A[h_now, s.x]):
        for d in np.flatnonzero(params.C[h_next, j]):
            emit(j, d + 1, base, params.A[h_now, s.x, j] * params.C[h_next, j, d])
    return out


def reachable_states(params: EdhmmParams, costs: StepCostDist, budgets, T_horizon: int):
    """Breadth-first sweep of the expanded chain; returns the set of reachable states."""
    seen = {INITIAL_STATE}
    frontier = [INITIAL_STATE]
    while frontier:
        nxt = []
        for s in frontier:
            for s2 in next_state_distribution(params, s, costs, budgets, T_horizon):
                if s2 not in seen:
                    seen.add(s2)
                    nxt.append(s2)
        frontier = nxt
    return seen


# ---------------------------------------------------------------------------
# PRISM export

DEFAULT_PRISM_LIMIT = 10_000_000


def _p(v: float) -> str:
    return f"{v:.17g}"


def hour_expr(n_s: int, var: str = "t") -> str:
    return f"mod(floor(({var}-1)/{n_s}),24)+1"


def property_line(hour: int, budget: int, n_s: int, q: int = 1) -> str:
    return f"P=? [ G (({hour_expr(n_s)}={hour}) => (delta<={budget // q})) ]"


def export_prism(params: EdhmmParams, constraints, T_horizon: int | None = None, q: int = 1,
                 max_states: int = DEFAULT_PRISM_LIMIT) -> tuple[str, str]:
    """Render the expanded chain as a PRISM DTMC plus its property file.

    ``constraints`` is a sequence of objects with ``hour`` and ``budget``
    attributes. Returns ``(model_text, properties_text)``. Hidden states are
    numbered from 1 in the PRISM model; ``x = 0`` is the init state.
    """
    n_s = params.samples_per_hour
    T = 24 * n_s if T_horizon is None else int(T_horizon)
    budgets = {c.hour: c.budget for c in constraints}
    cap = delta_cap(budgets, q)
    N, D = params.N, params.D
    size = (N + 1) * D * (T + 1) * (cap + 1)
    if size > max_states:
        raise TractabilityError(
            f"PRISM state space bound {size} exceeds limit {max_states}; raise q or lower D/horizon",
            size=size, limit=max_states)
    costs = step_cost_distribution(params, q).probs

    lines = [
        "// EDHMM with hourly cost monitor",
        "// x=0 is the initialisation state; hidden state i is x=i+1",
        "dtmc",
        "",
        f"const int T = {T};",
        f"const int NS = {n_s};",
        f"const int CAP = {cap};",
        "",
        f"formula hour = {hour_expr(n_s)};",
        "formula boundary = mod(t,NS)=0;",
        "",
        "module edhmm",
        f"  x : [0..{N}] init 0;",
        f"  d : [1..{D}] init 1;",
        "  t : [0..T] init 0;",
        "  delta : [0..CAP] init 0;",
        "",
    ]

    def updates(terms):
        return " + ".join(f"{_p(p)}:{u}" for p, u in terms if p > 0)

    def acc(b, same):
        return f"(delta'=min(delta+{b},CAP))" if same else f"(delta'=min({b},CAP))"

    # t = 0: draw state, duration (hour 1 duration matrix) and first cost
    terms = []
    for x in range(N):
        for d in range(D):
            pxd = params.pi_x[x] * params.C[0, x, d]
            if pxd <= 0:
                continue
            for b in np.flatnonzero(costs[x]):
                terms.append((pxd * costs[x, b],
                              f"(x'={x + 1})&(d'={d + 1})&(t'=1)&(delta'=min({b},CAP))"))
    lines.append(f"  [] t=0 -> {updates(terms)};")

    for x in range(N):
        for same in (True, False):
            guard = f"t>0 & t<T & x={x + 1} & d>1 & {'!boundary' if same else 'boundary'}"
            terms = [(costs[x, b], f"(d'=d-1)&(t'=t+1)&{acc(b, same)}") for b in np.flatnonzero(costs[x])]
            lines.append(f"  [] {guard} -> {updates(terms)};")

    for x in range(N):
        for h in range(24):
            for same in (True, False):
                hn = h if same else (h + 1) % 24
                terms = []
                for j in np.flatnonzero(params.A[h, x]):
                    for d in np.flatnonzero(params.C[hn, j]):
                        pjd = params.A[h, x, j] * params.C[hn, j, d]
                        for b in np.flatnonzero(costs[j]):
                            terms.append((pjd * costs[j, b],
                                          f"(x'={j + 1})&(d'={d + 1})&(t'=t+1)&{acc(b, same)}"))
                if not terms:
                    continue
                guard = (f"t>0 & t<T & x={x + 1} & d=1 & hour={h + 1} & "
                         f"{'!boundary' if same else 'boundary'}")
                lines.append(f"  [] {guard} -> {updates(terms)};")

    lines += ["  [] t=T -> 1:(t'=T);", "endmodule", ""]
    props = [f"// hour {c.hour}, budget {c.budget}" + "\n" + property_line(c.hour, c.budget, n_s, q)
             for c in sorted(constraints, key=lambda c: c.hour)]
    return "\n".join(lines), "\n".join(props) + ("\n" if props else "")


# ---------------------------------------------------------------------------
# a small structural linter for the PRISM subset emitted above

_DECL = re.compile(r"^\s*(\w+)\s*:\s*\[\s*(-?\w+)\s*\.\.\s*(-?\w+)\s*\]\s*init\s+(-?\w+)\s*;\s*$")
_CMD = re.compile(r"^\s*\[(\w*)\]\s*(.+?)\s*->\s*(.+);\s*$")
_ASSIGN = re.compile(r"^\((\w+)'=(.+)\)$")
_IDENT = re.compile(r"[A-Za-z_]\w*")
_KEYWORDS = {"mod", "floor", "min", "max", "ceil", "true", "false"}


def _split_top(text, sep):
    parts, depth, cur, i = [], 0, [], 0
    while i < len(text):
        ch = text[i]
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if depth == 0 and text.startswith(sep, i):
            parts.append("".join(cur).strip())
            cur = []
            i += len(sep)
            continue
        cur.append(ch)
        i += 1
    parts.append("".join(cur).strip())
    return parts


def _balanced(text):
    depth = 0
    for ch in text:
        depth += {"(": 1, ")": -1}.get(ch, 0)
        if depth < 0:
            return False
    return depth == 0


def lint_prism(text: str, tol: float = 1e-9) -> list[str]:
    """Return a list of problems found in a PRISM DTMC model (empty if clean)."""
    errors = []
    body = [ln.split("//", 1)[0].rstrip() for ln in text.splitlines()]
    code = [(i + 1, ln) for i, ln in enumerate(body) if ln.strip()]
    if not code or code[0][1].strip() != "dtmc":
        errors.append("model must start with 'dtmc'")
    names = set(_KEYWORDS)
    variables = set()
    depth = 0
    for lineno, ln in code:
        s = ln.strip()
        if s == "dtmc":
            continue
        m = re.match(r"^const int (\w+) = (-?\d+);$", s)
        if m:
            names.add(m.group(1))
            continue
        m = re.match(r"^formula (\w+) = (.+);$", s)
        if m:
            if not _balanced(m.group(2)):
                errors.append(f"line {lineno}: unbalanced parentheses in formula")
            names.add(m.group(1))
            continue
        if s.startswith("module "):
            depth += 1
            if depth > 1:
                errors.append(f"line {lineno}: nested module")
            continue
        if s == "endmodule":
            depth -= 1
            if depth < 0:
                errors.append(f"line {lineno}: endmodule without module")
            continue
        m = _DECL.match(s)
        if m:
            if depth != 1:
                errors.append(f"line {lineno}: variable declared outside module")
            variables.add(m.group(1))
            continue
        m = _CMD.match(s)
        if m:
            if depth != 1:
                errors.append(f"line {lineno}: command outside module")
            guard, rhs = m.group(2), m.group(3)
            if not _balanced(guard):
                errors.append(f"line {lineno}: unbalanced guard")
            for ident in _IDENT.findall(guard):
                if ident not in names and ident not in variables:
                    errors.append(f"line {lineno}: guard uses undeclared '{ident}'")
            total = 0.0
            for upd in _split_top(rhs, "+"):
                if ":" not in upd:
                    errors.append(f"line {lineno}: update without probability: {upd[:40]}")
                    continue
                p_txt, assigns = upd.split(":", 1)
                try:
                    total += float(p_txt)
                except ValueError:
                    errors.append(f"line {lineno}: bad probability '{p_txt}'")
                for a in _split_top(assigns.strip(), "&"):
                    am = _ASSIGN.match(a)
                    if not am:
                        errors.append(f"line {lineno}: malformed assignment '{a[:40]}'")
                    elif am.group(1) not in variables:
                        errors.append(f"line {lineno}: assignment to undeclared '{am.group(1)}'")
                    elif not _balanced(am.group(2)):
                        errors.append(f"line {lineno}: unbalanced assignment expression")
            if abs(total - 1.0) > tol:
                errors.append(f"line {lineno}: probabilities sum to {total!r}")
            continue
        errors.append(f"line {lineno}: unrecognised line '{s[:40]}'")
    if depth != 0:
        errors.append("unbalanced module/endmodule")
    return errors
