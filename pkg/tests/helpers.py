"""Fixture builders and brute-force oracles.

The oracles walk the generative process step by step in plain Python and
share no code with the package beyond reading parameter arrays.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from edhmm_improv.edhmm import EdhmmParams


def hour_index(t, n_s):
    # 0-based clock hour of 1-based step t
    return ((t - 1) // n_s) % 24


def random_params(rng, N=2, D=2, caps=(2,), period_seconds=1800, hourly=True, sparsity=0.0,
                  emission_sparsity=0.0):
    """Random valid EdhmmParams; ``sparsity`` zeroes entries (keeping one per row)."""

    def rows(shape, zero_diag=False):
        m = rng.random(shape) + 0.05
        if sparsity:
            m[rng.random(shape) < sparsity] = 0.0
        if zero_diag:
            idx = np.arange(shape[-1])
            m[..., idx, idx] = 0.0
        empty = m.sum(axis=-1) == 0
        for pos in zip(*np.nonzero(empty)):
            choices = [j for j in range(shape[-1]) if not (zero_diag and j == pos[-1])]
            m[pos + (choices[rng.integers(len(choices))],)] = 1.0
        return m / m.sum(axis=-1, keepdims=True)

    n_h = 24 if hourly else 1
    A = rows((n_h, N, N), zero_diag=True)
    C = rows((n_h, N, D))
    if not hourly:
        A = np.repeat(A, 24, axis=0)
        C = np.repeat(C, 24, axis=0)
    B = []
    for cap in caps:
        b = rng.random((N, cap + 1)) + 0.05
        if emission_sparsity:
            b[rng.random(b.shape) < emission_sparsity] = 0.0
        for i in np.flatnonzero(b.sum(axis=1) == 0):
            b[i, rng.integers(cap + 1)] = 1.0
        B.append(b / b.sum(axis=1, keepdims=True))
    pi_x = rng.random(N) + 0.1
    pi_d = rng.random(D) + 0.1
    return EdhmmParams(pi_x / pi_x.sum(), pi_d / pi_d.sum(), A, C, B, period_seconds=period_seconds)


def tiny_fixtures():
    """Small models (N <= 3, D <= 3, K = 1, cost values <= 3) used by the oracle tests."""
    specs = [
        # (seed, N, D, cap, period, sparsity)
        (0, 2, 2, 1, 1800, 0.0),
        (1, 2, 3, 2, 1800, 0.0),
        (2, 3, 2, 2, 3600, 0.2),
        (3, 3, 3, 1, 1200, 0.3),
        (4, 2, 2, 3, 3600, 0.0),
        (5, 3, 2, 3, 1800, 0.4),
    ]
    out = []
    for seed, N, D, cap, period, sp in specs:
        rng = np.random.default_rng(seed)
        out.append(random_params(rng, N, D, (cap,), period, hourly=True, sparsity=sp))
    return out


def hidden_paths(params, T):
    """Yield (xs, ds, prob) for every hidden path of positive probability."""
    n_s = params.samples_per_hour
    pi_x, A, C = params.pi_x, params.A, params.C

    def extend(xs, ds, p):
        t = len(xs)  # number of steps so far; next step is t + 1
        if t == T:
            yield tuple(xs), tuple(ds), p
            return
        if ds[-1] > 1:
            yield from extend(xs + [xs[-1]], ds + [ds[-1] - 1], p)
            return
        ha, hc = hour_index(t, n_s), hour_index(t + 1, n_s)
        for j in range(params.N):
            pa = A[ha, xs[-1], j]
            if pa == 0:
                continue
            for d in range(1, params.D + 1):
                pc = C[hc, j, d - 1]
                if pc > 0:
                    yield from extend(xs + [j], ds + [d], p * pa * pc)

    h1 = hour_index(1, n_s)
    for x in range(params.N):
        for d in range(1, params.D + 1):
            p = pi_x[x] * C[h1, x, d - 1]
            if p > 0:
                yield from extend([x], [d], p)


def emission_prob(params, x, yt):
    return math.prod(params.B[k][x, v] for k, v in enumerate(yt))


def brute_likelihood(params, obs):
    """P(y) by summing the joint over all hidden paths."""
    obs = np.asarray(obs)
    total = 0.0
    for xs, _, p in hidden_paths(params, len(obs)):
        for t, x in enumerate(xs):
            p *= emission_prob(params, x, obs[t])
            if p == 0:
                break
        total += p
    return total


def all_strings(params, T):
    alphabet = list(itertools.product(*[range(b.shape[1]) for b in params.B]))
    return itertools.product(alphabet, repeat=T)


def brute_worst_window(params, hour, T):
    """Distribution {m: prob} of the largest running cost inside any window of ``hour``.

    Enumerates hidden paths and, per path, every cost sequence (K = 1).
    Costs are non-negative, so a budget b holds exactly when m <= b.
    """
    n_s = params.samples_per_hour
    B = params.B[0]
    dist = {}
    for xs, _, p in hidden_paths(params, T):
        supports = [[(v, B[x, v]) for v in range(B.shape[1]) if B[x, v] > 0] for x in xs]
        for seq in itertools.product(*supports):
            q = p
            worst = 0
            running = 0
            for t, (v, pv) in enumerate(seq, start=1):
                q *= pv
                if t == 1 or hour_index(t, n_s) != hour_index(t - 1, n_s):
                    running = 0
                running += v
                if hour_index(t, n_s) == hour - 1:
                    worst = max(worst, running)
            dist[worst] = dist.get(worst, 0.0) + q
    return dist


def brute_satisfaction(params, hour, budget, T):
    """P[running cost inside every window of ``hour`` stays <= budget] over T steps."""
    return sum(pr for m, pr in brute_worst_window(params, hour, T).items() if m <= budget)


def brute_max_string_prob(params, T):
    return max(brute_likelihood(params, s) for s in all_strings(params, T))


def golden_fixtures():
    """{name: (params, constraints, horizon)} for the PRISM golden files."""
    from edhmm_improv.check import SoftConstraint

    A = np.tile([[0.0, 1.0], [1.0, 0.0]], (24, 1, 1))
    C = np.tile([[0.25, 0.75], [1.0, 0.0]], (24, 1, 1))
    B = [np.array([[0.9, 0.1, 0.0], [0.0, 0.5, 0.5]])]
    toggle = EdhmmParams([0.6, 0.4], [0.5, 0.5], A, C, B, period_seconds=1800)
    three = tiny_fixtures()[2]
    return {
        "toggle": (toggle, [SoftConstraint(1, 2), SoftConstraint(2, 3)], 8),
        "three_state": (three, [SoftConstraint(2, 3)], 4),
    }
