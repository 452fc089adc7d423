"""Ground-truth appliance models for desk-scale experiments.

Each of ``n`` appliances is on or off; hidden states are the ``2**n`` on/off
combinations and a transition toggles exactly one appliance, so the learned
model should never switch two appliances at once. Hour-of-day activity
shapes how eagerly appliances turn on and how long states last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .edhmm import HOURS, EdhmmParams, sample_batch
from .trace_io import Trace, make_trace


@dataclass(frozen=True)
class Appliance:
    name: str
    cap: int
    level: int
    spread: int


DEFAULT_APPLIANCES = (
    Appliance("K", 20, 15, 2),
    Appliance("L", 10, 6, 1),
    Appliance("B", 8, 4, 1),
)

# activity in [0, 1] for hours 1..24: quiet night, morning and evening peaks
DEFAULT_ACTIVITY = np.array([
    0.10, 0.06, 0.05, 0.05, 0.08, 0.20, 0.55, 0.65, 0.50, 0.30, 0.25, 0.30,
    0.30, 0.25, 0.25, 0.30, 0.60, 0.75, 0.85, 0.80, 0.70, 0.50, 0.30, 0.15,
])

# epoch of a UTC midnight; synthetic days are laid out from here
BASE_TIMESTAMP = 1_375_142_400


def state_label(mask: int, appliances) -> str:
    on = "".join(a.name for k, a in enumerate(appliances) if mask >> k & 1)
    return on or "OFF"


def _duration_row(mean: float, D: int) -> np.ndarray:
    # geometric on 1..D with the given mean, truncated and renormalized
    p = min(1.0, 1.0 / max(mean, 1.0))
    d = np.arange(1, D + 1)
    row = p * (1 - p) ** (d - 1)
    return row / row.sum()


def _emission_row(app: Appliance, on: bool) -> np.ndarray:
    row = np.zeros(app.cap + 1)
    if not on:
        row[0] = 1.0
        return row
    lo = max(1, app.level - app.spread)
    hi = min(app.cap, app.level + app.spread)
    v = np.arange(lo, hi + 1)
    w = np.exp(-0.5 * ((v - app.level) / max(app.spread, 1) * 1.5) ** 2)
    row[lo:hi + 1] = w / w.sum()
    return row


def appliance_model(appliances=DEFAULT_APPLIANCES, D: int = 12, period_seconds: int = 600,
                    activity=DEFAULT_ACTIVITY) -> EdhmmParams:
    n = len(appliances)
    N = 2 ** n
    activity = np.asarray(activity, dtype=float)
    A = np.zeros((HOURS, N, N))
    C = np.zeros((HOURS, N, D))
    for h in range(HOURS):
        act = activity[h]
        for s in range(N):
            n_on = bin(s).count("1")
            for k in range(n):
                j = s ^ (1 << k)
                turning_on = not (s >> k & 1)
                w = (0.2 + act) * (1 - 0.3 * n_on) if turning_on else 1.2 - act + 0.2 * n_on
                A[h, s, j] = max(w, 1e-3)
            A[h, s] /= A[h, s].sum()
            mean = 1.5 + 10.0 * (1 - act) if s == 0 else 1.5 + 4.0 * act
            C[h, s] = _duration_row(mean, D)
    B = [np.array([_emission_row(a, bool(s >> k & 1)) for s in range(N)])
         for k, a in enumerate(appliances)]
    pi_x = np.zeros(N)
    pi_x[0] = 0.85
    pi_x[[1 << k for k in range(n)]] = 0.15 / n
    pi_d = np.full(D, 1.0 / D)
    labels = [state_label(s, appliances) for s in range(N)]
    return EdhmmParams(pi_x, pi_d, A, C, B, labels, period_seconds=period_seconds)


def desk_model(n_appliances: int = 2, D: int = 12, period_seconds: int = 600) -> EdhmmParams:
    return appliance_model(DEFAULT_APPLIANCES[:n_appliances], D, period_seconds)


def sample_days(params: EdhmmParams, n_traces: int, days: int, seed: int) -> list[Trace]:
    """``n_traces`` independent traces of ``days`` days, each starting at midnight."""
    T = days * 24 * params.samples_per_hour
    _, _, y = sample_batch(params, T, n_traces, np.random.default_rng(seed))
    return [make_trace(y[i], params.channel_caps, params.period_seconds,
                       BASE_TIMESTAMP + i * days * 86400)
            for i in range(n_traces)]
