"""Explicit-duration HMM with hour-of-day transition and duration matrices.

Conventions used throughout the package:

* steps are 1-based; step ``t`` lies in clock hour ``hour_of_step(t, N_s)``;
* ``d`` is the *remaining* duration, including the current step;
* when the state expires at step ``t`` (``d_t = 1``) the next state is drawn
  from ``A[h(t)]`` and its duration from ``C[h(t+1)]`` (hour of the step being
  entered). The first state comes from ``pi_x`` and its duration from
  ``C[h(1)]``;
* emissions factorize over channels: ``B[k][x, v] = p(y_k = v | x)``.

Hour ``h`` is stored at index ``h - 1``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .trace_io import SECONDS_PER_HOUR, Trace, make_trace

FORMAT_VERSION = 1
ROW_TOL = 1e-9
TINY = 1e-300
HOURS = 24


@dataclass(frozen=True, eq=False)
class EdhmmParams:
    pi_x: np.ndarray
    pi_d: np.ndarray
    A: np.ndarray  # (24, N, N)
    C: np.ndarray  # (24, N, D)
    B: tuple  # K arrays of shape (N, cap_k + 1)
    state_labels: tuple = ()
    x_min: int | None = None
    period_seconds: int = 60

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "pi_x", np.asarray(self.pi_x, dtype=float))
        set_(self, "pi_d", np.asarray(self.pi_d, dtype=float))
        set_(self, "A", np.asarray(self.A, dtype=float))
        set_(self, "C", np.asarray(self.C, dtype=float))
        set_(self, "B", tuple(np.asarray(b, dtype=float) for b in self.B))
        N = self.pi_x.shape[0]
        if self.A.shape != (HOURS, N, N):
            raise ValueError(f"A must have shape (24, {N}, {N}), got {self.A.shape}")
        if self.C.ndim != 3 or self.C.shape[:2] != (HOURS, N):
            raise ValueError(f"C must have shape (24, {N}, D), got {self.C.shape}")
        if self.pi_d.shape != (self.C.shape[2],):
            raise ValueError("pi_d length must equal D")
        if not self.B or any(b.ndim != 2 or b.shape[0] != N for b in self.B):
            raise ValueError("B must hold one (N, cap+1) matrix per channel")
        if SECONDS_PER_HOUR % int(self.period_seconds):
            raise ValueError("period_seconds must divide 3600")
        if not self.state_labels:
            set_(self, "state_labels", tuple(f"s{i}" for i in range(N)))
        else:
            set_(self, "state_labels", tuple(str(s) for s in self.state_labels))
        if len(self.state_labels) != N:
            raise ValueError("one label per state required")
        if self.x_min is None:
            set_(self, "x_min", self.least_cost_state())
        set_(self, "x_min", int(self.x_min))
        for arr in (self.pi_x, self.pi_d, self.A, self.C, *self.B):
            arr.flags.writeable = False

    @property
    def N(self) -> int:
        return self.pi_x.shape[0]

    @property
    def D(self) -> int:
        return self.C.shape[2]

    @property
    def K(self) -> int:
        return len(self.B)

    @property
    def channel_caps(self) -> tuple:
        return tuple(b.shape[1] - 1 for b in self.B)

    @property
    def samples_per_hour(self) -> int:
        return SECONDS_PER_HOUR // self.period_seconds

    def expected_step_costs(self) -> np.ndarray:
        return sum(b @ np.arange(b.shape[1]) for b in self.B)

    def least_cost_state(self) -> int:
        # argmin returns the lowest index on ties
        return int(np.argmin(self.expected_step_costs()))

    def zero_rows(self):
        """(matrix, hour, row) triples of rows of A or C that sum to zero."""
        out = []
        for name, M in (("A", self.A), ("C", self.C)):
            hs, rs = np.nonzero(M.sum(axis=2) == 0)
            out.extend((name, int(h) + 1, int(r)) for h, r in zip(hs, rs))
        return out

    def evolve(self, **changes) -> "EdhmmParams":
        return replace(self, **changes)

    # -- serialization -----------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "N": self.N,
            "D": self.D,
            "K": self.K,
            "period_seconds": self.period_seconds,
            "channel_caps": list(self.channel_caps),
            "pi_x": self.pi_x.tolist(),
            "pi_d": self.pi_d.tolist(),
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "B": [[self.B[k][x].tolist() for k in range(self.K)] for x in range(self.N)],
            "state_labels": list(self.state_labels),
            "x_min": self.x_min,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "EdhmmParams":
        N, K = doc["N"], doc["K"]
        B = [np.array([doc["B"][x][k] for x in range(N)], dtype=float) for k in range(K)]
        params = cls(
            pi_x=doc["pi_x"],
            pi_d=doc["pi_d"],
            A=doc["A"],
            C=doc["C"],
            B=B,
            state_labels=doc.get("state_labels", ()),
            x_min=doc.get("x_min"),
            period_seconds=doc.get("period_seconds", 60),
        )
        if params.D != doc["D"] or list(params.channel_caps) != list(doc["channel_caps"]):
            raise ValueError("model document dimensions disagree with its arrays")
        return params

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "EdhmmParams":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class Violation:
    kind: str
    matrix: str
    hour: int | None = None
    row: int | None = None
    magnitude: float = 0.0

    def __str__(self):
        where = self.matrix
        if self.hour is not None:
            where += f", h={self.hour}"
        if self.row is not None:
            where += f", row {self.row}"
        return f"{self.kind} ({where}): {self.magnitude:.3g}"


def validate(params: EdhmmParams, tol: float = ROW_TOL) -> list[Violation]:
    """Every structural invariant breach; an empty list means the model is valid."""
    out: list[Violation] = []

    def check_dist(vec, matrix, hour=None, row=None):
        lo = float(vec.min()) if vec.size else 0.0
        hi = float(vec.max()) if vec.size else 0.0
        if lo < 0 or hi > 1 or not np.all(np.isfinite(vec)):
            out.append(Violation("range", matrix, hour, row, max(-lo, hi - 1, 0.0)))
        gap = abs(float(vec.sum()) - 1.0)
        if gap > tol:
            out.append(Violation("row-sum", matrix, hour, row, gap))

    check_dist(params.pi_x, "pi_x")
    check_dist(params.pi_d, "pi_d")
    for h in range(HOURS):
        for i in range(params.N):
            check_dist(params.A[h, i], "A", h + 1, i)
            check_dist(params.C[h, i], "C", h + 1, i)
            if params.A[h, i, i] != 0:
                out.append(Violation("self-transition", "A", h + 1, i, float(params.A[h, i, i])))
    for k, b in enumerate(params.B):
        for x in range(params.N):
            check_dist(b[x], f"B[{k}]", None, x)
    if 0 <= params.x_min < params.N:
        costs = params.expected_step_costs()
        best = int(np.argmin(costs))
        if best != params.x_min:
            out.append(Violation("x_min", "B", None, params.x_min,
                                 float(costs[params.x_min] - costs[best])))
    else:
        out.append(Violation("x_min", "B", None, params.x_min, float("inf")))
    return out


@dataclass
class HiddenPath:
    x: np.ndarray
    d: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.d = np.asarray(self.d, dtype=np.int64)
        if self.x.shape != self.d.shape:
            raise ValueError("x and d must have equal length")

    def is_consistent(self) -> bool:
        """Duration bookkeeping: decrement while d > 1, switch state when d hits 1."""
        for t in range(1, len(self.x)):
            if self.d[t - 1] > 1:
                if self.x[t] != self.x[t - 1] or self.d[t] != self.d[t - 1] - 1:
                    return False
            elif self.x[t] == self.x[t - 1]:
                return False
        return bool(np.all(self.d >= 1))


# ---------------------------------------------------------------------------
# sampling


def step_hours(T: int, samples_per_hour: int, first_step: int = 1) -> np.ndarray:
    """0-based hour index of steps first_step .. first_step + T - 1."""
    t = np.arange(first_step, first_step + T)
    return ((t - 1) // samples_per_hour) % HOURS


class _Categorical:
    """Inverse-CDF sampler over the last axis of a stack of distributions."""

    def __init__(self, probs):
        probs = np.asarray(probs, dtype=float)
        self.cdf = np.cumsum(probs, axis=-1)
        size = probs.shape[-1]
        positive = probs > 0
        self.last = size - 1 - np.argmax(positive[..., ::-1], axis=-1)

    def draw(self, index, u):
        cdf = self.cdf[index]
        k = (cdf <= u[:, None]).sum(axis=1)
        return np.minimum(k, self.last[index])


def sample_batch(params: EdhmmParams, T: int, n: int, rng: np.random.Generator):
    """Draw ``n`` independent length-``T`` behaviours.

    Returns ``(x, d, y)`` with shapes (n, T), (n, T), (n, T, K). Each step
    consumes one block of ``2 + K`` uniforms per sequence whether or not the
    hidden state changes, so the stream layout is fixed by (n, T).
    """
    if T < 1 or n < 1:
        raise ValueError("T and n must be positive")
    if params.zero_rows():
        raise ValueError("cannot sample from a model with unlearned rows; complete it first")
    n_s = params.samples_per_hour
    hours = step_hours(T, n_s)
    A = _Categorical(params.A)
    C = _Categorical(params.C)
    Bs = [_Categorical(b) for b in params.B]
    pi = _Categorical(params.pi_x[None, :])
    K = params.K
    x = np.empty((n, T), dtype=np.int64)
    d = np.empty((n, T), dtype=np.int64)
    y = np.empty((n, T, K), dtype=np.int64)
    zeros = np.zeros(n, dtype=np.int64)

    for t in range(T):
        u = rng.random((n, 2 + K))
        h = hours[t]
        if t == 0:
            xt = pi.draw(zeros, u[:, 0])
            dt = C.draw((h, xt), u[:, 1]) + 1
        else:
            xp, dp = x[:, t - 1], d[:, t - 1]
            xt = xp.copy()
            dt = dp - 1
            sw = dp == 1
            if sw.any():
                hp = hours[t - 1]
                xs = A.draw((hp, xp[sw]), u[sw, 0])
                xt[sw] = xs
                dt[sw] = C.draw((h, xs), u[sw, 1]) + 1
        x[:, t] = xt
        d[:, t] = dt
        for k in range(K):
            y[:, t, k] = Bs[k].draw(xt, u[:, 2 + k])
    return x, d, y


def sample_trace(params: EdhmmParams, T: int, seed: int, start_timestamp: int = 0):
    """One behaviour as a (Trace, HiddenPath) pair; deterministic in ``seed``.

    ``start_timestamp`` must open clock hour 1 so that step 1 is hour 1.
    """
    rng = np.random.default_rng(seed)
    x, d, y = sample_batch(params, T, 1, rng)
    trace = make_trace(y[0], params.channel_caps, params.period_seconds, start_timestamp)
    if trace.hour_labels[0] != 1 or start_timestamp % SECONDS_PER_HOUR:
        raise ValueError("start_timestamp must be the start of clock hour 1")
    return trace, HiddenPath(x[0], d[0])


def traces_from_batch(params: EdhmmParams, y: np.ndarray, start_timestamp: int = 0) -> list[Trace]:
    return [make_trace(row, params.channel_caps, params.period_seconds, start_timestamp) for row in y]


# ---------------------------------------------------------------------------
# probabilities


def _log(p):
    return math.log(p) if p > TINY else -math.inf


def joint_log_prob(params: EdhmmParams, path: HiddenPath, y: Trace) -> float:
    """log P(x, d, y) for one fully specified behaviour."""
    T = len(path.x)
    if y.T != T:
        raise ValueError(f"path has {T} steps but trace has {y.T}")
    if y.K != params.K:
        raise ValueError("trace channel count differs from model")
    h = y.hour_labels - 1
    x, d, obs = path.x, path.d, y.observations
    if np.any(d < 1) or np.any(d > params.D):
        return -math.inf
    lp = _log(params.pi_x[x[0]]) + _log(params.C[h[0], x[0], d[0] - 1])
    for t in range(1, T):
        if d[t - 1] > 1:
            if x[t] != x[t - 1] or d[t] != d[t - 1] - 1:
                return -math.inf
        else:
            lp += _log(params.A[h[t - 1], x[t - 1], x[t]])
            lp += _log(params.C[h[t], x[t], d[t] - 1])
    for t in range(T):
        for k in range(params.K):
            lp += _log(params.B[k][x[t], obs[t, k]])
        if lp == -math.inf:
            return lp
    return lp


def emission_probs(params: EdhmmParams, obs: np.ndarray) -> np.ndarray:
    """p(y | x) for observations of shape (..., K); result shape (..., N)."""
    obs = np.asarray(obs)
    out = np.ones(obs.shape[:-1] + (params.N,))
    for k, b in enumerate(params.B):
        out *= np.moveaxis(b[:, obs[..., k]], 0, -1)
    return out


@dataclass
class ForwardPass:
    """Scaled forward messages for a batch of equal-length sequences.

    ``alpha[m, t]`` is p(x_t, d_t | y_1..t) and ``scale[m, t]`` is
    p(y_t | y_1..t-1); only populated when requested.
    """

    loglik: np.ndarray
    alpha: np.ndarray | None = None
    scale: np.ndarray | None = None
    emis: np.ndarray | None = None
    hours: np.ndarray | None = field(default=None, repr=False)


def forward(params: EdhmmParams, obs: np.ndarray, hours: np.ndarray, store: bool = False,
            emis: np.ndarray | None = None) -> ForwardPass:
    """Forward recursion over the (state, remaining-duration) lattice.

    ``obs`` has shape (M, T, K) and ``hours`` (M, T) holds 0-based hour
    indices. Cost is O(M T N (N + D)).
    """
    obs = np.asarray(obs)
    M, T = obs.shape[:2]
    N, D = params.N, params.D
    e = emission_probs(params, obs) if emis is None else emis
    A, C = params.A, params.C
    loglik = np.zeros(M)
    dead = np.zeros(M, dtype=bool)
    alpha_all = np.empty((M, T, N, D)) if store else None
    scale_all = np.empty((M, T)) if store else None

    a = params.pi_x[None, :, None] * C[hours[:, 0]] * e[:, 0, :, None]
    for t in range(T):
        if t > 0:
            ending = a[:, :, 0]
            into = np.einsum("mi,mij->mj", ending, A[hours[:, t - 1]])
            nxt = np.empty_like(a)
            nxt[:, :, :-1] = a[:, :, 1:]
            nxt[:, :, -1] = 0.0
            nxt += into[:, :, None] * C[hours[:, t]]
            nxt *= e[:, t, :, None]
            a = nxt
        c = a.sum(axis=(1, 2))
        bad = c < TINY
        if bad.any():
            dead |= bad
            a[bad] = 0.0
            c = np.where(bad, 1.0, c)
        a /= c[:, None, None]
        loglik += np.log(c)
        if store:
            alpha_all[:, t] = a
            scale_all[:, t] = np.where(bad, 0.0, c)
    loglik[dead] = -np.inf
    return ForwardPass(loglik, alpha_all, scale_all, e if store else None, hours)


def batch_log_likelihood(params: EdhmmParams, traces: Sequence[Trace],
                         max_cells: int = 5_000_000) -> np.ndarray:
    """Observation log-likelihood of each trace, grouped by length for speed."""
    out = np.empty(len(traces))
    by_len: dict[int, list[int]] = {}
    for i, tr in enumerate(traces):
        if tr.K != params.K:
            raise ValueError("trace channel count differs from model")
        if np.any(tr.observations > np.asarray(params.channel_caps)):
            out[i] = -np.inf
            continue
        by_len.setdefault(tr.T, []).append(i)
    for T, idx in by_len.items():
        chunk = max(1, max_cells // max(1, params.N * params.D))
        for s in range(0, len(idx), chunk):
            sel = idx[s:s + chunk]
            obs = np.stack([traces[i].observations for i in sel])
            hours = np.stack([traces[i].hour_labels - 1 for i in sel])
            out[sel] = forward(params, obs, hours).loglik
    return out


def observation_log_likelihood(params: EdhmmParams, y: Trace) -> float:
    """log p(y_1..y_T | params), summing over all hidden paths."""
    return float(batch_log_likelihood(params, [y])[0])
