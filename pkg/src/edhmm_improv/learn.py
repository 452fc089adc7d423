"""EM estimation of hour-dependent EDHMM parameters from labelled traces.

The E-step runs scaled forward-backward over the (state, remaining duration)
lattice, shared across hours. Only the M-step is hour-partitioned: expected
transitions are credited to the hour of the step being left and expected
durations to the hour of the step being entered, matching the sampler and
the likelihood in :mod:`edhmm_improv.edhmm`.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .edhmm import HOURS, EdhmmParams, emission_probs, forward
from .errors import NumericError
from .trace_io import Trace

log = logging.getLogger(__name__)

# alpha storage budget per E-step chunk, in float64 cells
MAX_CELLS = 20_000_000


@dataclass
class LearnConfig:
    N: int
    D: int
    max_iters: int = 100
    rel_tol: float = 1e-6
    restarts: int = 1
    seed: int = 0
    smoothing: float = 0.0
    share_hours: bool = False
    state_labels: tuple = ()

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("N must be >= 2 (self-transitions are forbidden)")
        if self.D < 1:
            raise ValueError("D must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")
        self.state_labels = tuple(self.state_labels)

    @classmethod
    def from_json(cls, doc: dict) -> "LearnConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ValueError(f"unknown LearnConfig fields: {sorted(extra)}")
        return cls(**doc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["state_labels"] = list(self.state_labels)
        return d


@dataclass
class Stats:
    """Expected sufficient statistics accumulated by the E-step."""

    pi_x: np.ndarray
    pi_d: np.ndarray
    A: np.ndarray
    C: np.ndarray
    B: list
    loglik: float = 0.0

    @classmethod
    def zeros(cls, N, D, caps):
        return cls(np.zeros(N), np.zeros(D), np.zeros((HOURS, N, N)), np.zeros((HOURS, N, D)),
                   [np.zeros((N, c + 1)) for c in caps])


def _batches(traces: Sequence[Trace], N: int, D: int):
    """Group traces by length into (obs, hours) stacks that fit MAX_CELLS."""
    by_len: dict[int, list[Trace]] = {}
    for tr in traces:
        by_len.setdefault(tr.T, []).append(tr)
    for T in sorted(by_len):
        group = by_len[T]
        step = max(1, MAX_CELLS // (T * N * D))
        for s in range(0, len(group), step):
            part = group[s:s + step]
            yield (np.stack([t.observations for t in part]),
                   np.stack([t.hour_labels - 1 for t in part]))


def e_step(params: EdhmmParams, traces: Sequence[Trace], keep_posteriors: bool = False):
    """Posterior expected counts under ``params``.

    Returns ``Stats`` (and, with ``keep_posteriors``, the list of per-batch
    posterior marginals over (x, d), each of shape (M, T, N, D)).
    Raises NumericError if some trace has zero likelihood.
    """
    N, D = params.N, params.D
    stats = Stats.zeros(N, D, params.channel_caps)
    posts = []
    A, C = params.A, params.C
    for obs, hours in _batches(traces, N, D):
        M, T = hours.shape
        e = emission_probs(params, obs)
        fp = forward(params, obs, hours, store=True, emis=e)
        if not np.all(np.isfinite(fp.loglik)):
            raise NumericError("a training trace has zero likelihood under the current model")
        stats.loglik += float(fp.loglik.sum())
        alpha, c = fp.alpha, fp.scale
        occ = np.empty((M, T, N))
        post = np.empty((M, T, N, D)) if keep_posteriors else None

        beta = np.ones((M, N, D))
        g_last = alpha[:, T - 1] * beta
        occ[:, T - 1] = g_last.sum(axis=2)
        if keep_posteriors:
            post[:, T - 1] = g_last
        for t in range(T - 1, 0, -1):
            Ch = C[hours[:, t]]
            Ah = A[hours[:, t - 1]]
            et = e[:, t]
            ct = c[:, t][:, None]
            g = et * (Ch * beta).sum(axis=2) / ct
            ending = alpha[:, t - 1, :, 0]
            xi = ending[:, :, None] * Ah * g[:, None, :]
            np.add.at(stats.A, hours[:, t - 1], xi)
            into = np.einsum("mi,mij->mj", ending, Ah)
            eta = (into * et / ct)[:, :, None] * Ch * beta
            np.add.at(stats.C, hours[:, t], eta)
            nb = np.empty_like(beta)
            nb[:, :, 1:] = (et / ct)[:, :, None] * beta[:, :, :-1]
            nb[:, :, 0] = np.einsum("mij,mj->mi", Ah, g)
            beta = nb
            gam = alpha[:, t - 1] * beta
            occ[:, t - 1] = gam.sum(axis=2)
            if keep_posteriors:
                post[:, t - 1] = gam
        gam0 = alpha[:, 0] * beta
        stats.pi_x += gam0.sum(axis=(0, 2))
        stats.pi_d += gam0.sum(axis=(0, 1))
        np.add.at(stats.C, hours[:, 0], gam0)

        w = occ.reshape(M * T, N)
        for k, counts in enumerate(stats.B):
            vals = obs[:, :, k].ravel()
            for x in range(N):
                counts[x] += np.bincount(vals, weights=w[:, x], minlength=counts.shape[1])
        if keep_posteriors:
            posts.append(post)
    return (stats, posts) if keep_posteriors else stats


def _rows(counts):
    s = counts.sum(axis=-1, keepdims=True)
    return np.divide(counts, s, out=np.zeros_like(counts), where=s > 0)


def m_step(stats: Stats, cfg: LearnConfig, template: EdhmmParams) -> EdhmmParams:
    """Renormalize expected counts. Rows with no expected mass stay all-zero."""
    N = template.N
    A = stats.A.copy()
    C = stats.C.copy()
    B = [b.copy() for b in stats.B]
    pi_x, pi_d = stats.pi_x.copy(), stats.pi_d.copy()
    if cfg.smoothing > 0:
        A += cfg.smoothing * (1 - np.eye(N))
        C += cfg.smoothing
        B = [b + cfg.smoothing for b in B]
        pi_x += cfg.smoothing
        pi_d += cfg.smoothing
    if cfg.share_hours:
        A = np.broadcast_to(A.sum(axis=0), A.shape).copy()
        C = np.broadcast_to(C.sum(axis=0), C.shape).copy()
    A[:, np.arange(N), np.arange(N)] = 0.0
    return EdhmmParams(
        pi_x=_rows(pi_x),
        pi_d=_rows(pi_d),
        A=_rows(A),
        C=_rows(C),
        B=[_rows(b) for b in B],
        state_labels=template.state_labels,
        period_seconds=template.period_seconds,
    )


def initial_params(traces: Sequence[Trace], cfg: LearnConfig, rng: np.random.Generator) -> EdhmmParams:
    """Random starting point for one EM restart.

    Transition and duration rows are Dirichlet(1) draws shared by all hours
    (diagonal of A zeroed and renormalized); each emission row is the pooled
    histogram of that channel reweighted by Gamma(1) noise, so values never
    observed keep probability zero.
    """
    N, D = cfg.N, cfg.D
    caps = traces[0].channel_caps
    A = rng.dirichlet(np.ones(N), size=N)
    A[np.arange(N), np.arange(N)] = 0.0
    A /= A.sum(axis=1, keepdims=True)
    C = rng.dirichlet(np.ones(D), size=N)
    B = []
    for k, cap in enumerate(caps):
        hist = np.zeros(cap + 1)
        for tr in traces:
            hist += np.bincount(tr.observations[:, k], minlength=cap + 1)
        hist /= hist.sum()
        rows = hist[None, :] * rng.gamma(1.0, size=(N, cap + 1))
        B.append(_rows(rows))
    return EdhmmParams(
        pi_x=np.full(N, 1.0 / N),
        pi_d=np.full(D, 1.0 / D),
        A=np.broadcast_to(A, (HOURS, N, N)).copy(),
        C=np.broadcast_to(C, (HOURS, N, D)).copy(),
        B=B,
        state_labels=cfg.state_labels or (),
        period_seconds=traces[0].period_seconds,
    )


def _check_traces(traces):
    if not traces:
        raise ValueError("estimate needs at least one trace")
    first = traces[0]
    for tr in traces:
        if tr.K != first.K or tr.channel_caps != first.channel_caps:
            raise ValueError("traces disagree on channels or caps")
        if tr.period_seconds != first.period_seconds:
            raise ValueError("traces disagree on sampling period")
        if tr.hour_labels[0] != first.hour_labels[0]:
            raise ValueError("traces must be aligned to the same initial hour")


def run_em(traces, cfg: LearnConfig, params: EdhmmParams, max_iters=None):
    """EM from a given starting point. Returns (params, history)."""
    max_iters = cfg.max_iters if max_iters is None else max_iters
    stats = e_step(params, traces)
    history: list[float] = []
    for it in range(max_iters):
        params = m_step(stats, cfg, params)
        try:
            stats = e_step(params, traces)
        except NumericError as exc:
            raise NumericError(str(exc), iteration=it) from None
        ll = stats.loglik
        if not np.isfinite(ll):
            raise NumericError(f"non-finite log-likelihood at iteration {it}", iteration=it)
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < cfg.rel_tol * abs(history[-2]):
            break
    return params, history


def estimate(traces: Sequence[Trace], cfg: LearnConfig):
    """Fit an EDHMM by EM; best of ``cfg.restarts`` seeded starts.

    Returns ``(params, history)`` where ``history[i]`` is the total
    log-likelihood after the i-th M-step. Rows of ``A``/``C`` that receive no
    expected counts are left all-zero; run :func:`complete_transitions`
    before sampling or checking.
    """
    traces = list(traces)
    _check_traces(traces)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.restarts)
    best = None
    for r, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        start = initial_params(traces, cfg, rng)
        params, history = run_em(traces, cfg, start)
        log.info("restart %d: %d iterations, loglik %.6f", r, len(history), history[-1])
        if best is None or history[-1] > best[1][-1]:
            best = (params, history)
    return best


def complete_transitions(params: EdhmmParams) -> EdhmmParams:
    """Fill unlearned (all-zero) rows.

    Zero rows of ``A[h]`` move all mass to ``x_min`` (or, for the row of
    ``x_min`` itself, to the lowest-index other state); zero rows of ``C[h]``
    become a point mass on duration 1. Learned rows are untouched, and a
    model without zero rows is returned as is.
    """
    if not params.zero_rows():
        return params
    A = params.A.copy()
    C = params.C.copy()
    xm = params.x_min
    for h in range(HOURS):
        for i in np.flatnonzero(A[h].sum(axis=1) == 0):
            if i == xm:
                j = 0 if xm != 0 else 1
                log.warning("A[h=%d] row of x_min=%d unlearned; sending it to state %d", h + 1, xm, j)
            else:
                j = xm
            A[h, i, j] = 1.0
        C[h, C[h].sum(axis=1) == 0, 0] = 1.0
    return params.evolve(A=A, C=C, x_min=xm)


def training_report(params: EdhmmParams, history, completed, cfg: LearnConfig) -> dict:
    return {
        "format_version": 1,
        "config": cfg.to_json(),
        "loglik_history": list(map(float, history)),
        "iterations": len(history),
        "final_loglik": float(history[-1]),
        "completed_rows": [{"matrix": m, "hour": h, "row": r} for m, h, r in completed],
        "x_min": params.x_min,
    }
