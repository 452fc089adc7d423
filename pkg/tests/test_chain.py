import functools
import re

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chi2_contingency

from edhmm_improv.chain import (
    INITIAL_STATE, ExpandedState, delta_cap, export_prism, lint_prism, next_state_distribution,
    property_line, reachable_states, step_cost_distribution,
)
from edhmm_improv.check import SoftConstraint
from edhmm_improv.edhmm import EdhmmParams, sample_batch, sample_trace
from edhmm_improv.errors import TractabilityError

from helpers import hour_index, random_params, tiny_fixtures


def test_cost_identity_single_channel():
    p = random_params(np.random.default_rng(0), N=3, D=2, caps=(4,))
    assert np.allclose(step_cost_distribution(p, 1).probs, p.B[0])


def test_cost_two_uniform_channels():
    p = random_params(np.random.default_rng(0), N=2, D=2, caps=(1, 1))
    p = p.evolve(B=[np.full((2, 2), 0.5), np.full((2, 2), 0.5)])
    assert np.allclose(step_cost_distribution(p, 1).probs, [[0.25, 0.5, 0.25]] * 2)


def test_cost_bucketing():
    p = random_params(np.random.default_rng(0), N=2, D=2, caps=(7,))
    b = np.zeros((2, 8))
    b[:, 0] = b[:, 7] = 0.5
    dist = step_cost_distribution(p.evolve(B=[b]), 5)
    assert dist.probs.tolist() == [[0.5, 0.5]] * 2


@given(seed=st.integers(0, 1000), q=st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_cost_rows_normalized(seed, q):
    p = random_params(np.random.default_rng(seed), N=2, D=2, caps=(3, 5, 2))
    dist = step_cost_distribution(p, q)
    assert np.allclose(dist.probs.sum(axis=1), 1.0, atol=1e-12)
    assert dist.n_buckets == -(-11 // q)


def test_init_step_support():
    p = tiny_fixtures()[1]
    costs = step_cost_distribution(p, 1)
    out = next_state_distribution(p, INITIAL_STATE, costs, 3, 6)
    expect = {}
    for x in range(p.N):
        for d in range(p.D):
            for b in range(costs.n_buckets):
                pr = p.pi_x[x] * p.C[0, x, d] * costs.probs[x, b]
                if pr > 0:
                    expect[(x, d + 1, 1, min(b, 4))] = expect.get((x, d + 1, 1, min(b, 4)), 0) + pr
    assert set(out) == set(expect)
    for s, pr in out.items():
        assert pr == pytest.approx(expect[s], abs=1e-15)


def test_decrement_unique_hidden_successor():
    p = tiny_fixtures()[1]
    costs = step_cost_distribution(p, 1)
    out = next_state_distribution(p, ExpandedState(0, 3, 1, 0), costs, 5, 6)
    assert {(s.x, s.d, s.t) for s in out} == {(0, 2, 2)}


def test_expiry_matches_product():
    p = tiny_fixtures()[2]  # N_s = 1, so every step opens a new hour
    costs = step_cost_distribution(p, 1)
    s = ExpandedState(1, 1, 3, 2)
    out = next_state_distribution(p, s, costs, 10, 6)
    expect = {}
    for j in range(p.N):
        for d in range(p.D):
            for b in range(costs.n_buckets):
                pr = p.A[2, 1, j] * p.C[3, j, d] * costs.probs[j, b]
                if pr > 0:
                    key = (j, d + 1, 4, b)  # hour changes: delta restarts from the new cost
                    expect[key] = expect.get(key, 0) + pr
    assert set(out) == set(expect)
    assert all(out[k] == pytest.approx(v, abs=1e-15) for k, v in expect.items())


def test_horizon_absorbing():
    p = tiny_fixtures()[0]
    assert next_state_distribution(p, ExpandedState(0, 1, 6, 0), step_cost_distribution(p), 2, 6) == {}


@pytest.mark.parametrize("idx", range(6))
def test_sweep_sums_to_one(idx):
    p = tiny_fixtures()[idx]
    costs = step_cost_distribution(p, 1)
    budgets = {1: 2, 2: 1}
    cap = delta_cap(budgets, 1)
    states = reachable_states(p, costs, budgets, 6)
    for s in states:
        assert s.delta <= cap
        if s.t == 0:
            assert s.x is None and s.delta == 0
        out = next_state_distribution(p, s, costs, budgets, 6)
        if s.t < 6:
            assert sum(out.values()) == pytest.approx(1.0, abs=1e-12)


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_delta_tracks_running_hourly_sum(seed):
    p = random_params(np.random.default_rng(seed % 50), N=3, D=3, caps=(3,), period_seconds=1200)
    y, path = sample_trace(p, 9, seed)
    costs = step_cost_distribution(p, 1)
    big = 10**6
    s = INITIAL_STATE
    running = 0
    for t in range(9):
        if t == 0 or hour_index(t + 1, 3) != hour_index(t, 3):
            running = 0
        running += int(y.observations[t, 0])
        nxt = ExpandedState(int(path.x[t]), int(path.d[t]), t + 1, running)
        assert next_state_distribution(p, s, costs, big, 9).get(nxt, 0) > 0
        s = nxt


def test_chain_occupancy_matches_sampler():
    p = tiny_fixtures()[3]
    costs = step_cost_distribution(p, 1)
    T, n = 4, 10_000

    @functools.lru_cache(maxsize=None)
    def succ(s):
        out = next_state_distribution(p, s, costs, 3, T)
        keys = list(out)
        return keys, np.array([out[k] for k in keys])

    rng = np.random.default_rng(0)
    chain_counts = np.zeros(p.N)
    for _ in range(n):
        s = INITIAL_STATE
        for _ in range(T):
            keys, probs = succ(s)
            s = keys[rng.choice(len(keys), p=probs)]
        chain_counts[s.x] += 1
    x, _, _ = sample_batch(p, T, n, np.random.default_rng(1))
    sampler_counts = np.bincount(x[:, -1], minlength=p.N)
    keep = (chain_counts + sampler_counts) > 0
    _, pval, _, _ = chi2_contingency(np.vstack([chain_counts[keep], sampler_counts[keep]]))
    assert pval > 0.01


# ---------------------------------------------------------------------------
# PRISM


def toy():
    A = np.tile([[0.0, 1.0], [1.0, 0.0]], (24, 1, 1))
    C = np.tile([[0.25, 0.75], [1.0, 0.0]], (24, 1, 1))
    B = [np.array([[0.9, 0.1, 0.0], [0.0, 0.5, 0.5]])]
    return EdhmmParams([0.6, 0.4], [0.5, 0.5], A, C, B, period_seconds=1800)


def test_prism_structure():
    text, props = export_prism(toy(), [SoftConstraint(2, 3)], T_horizon=8)
    assert text.splitlines()[2] == "dtmc"
    assert text.count("\nmodule ") == 1 and text.count("endmodule") == 1
    decls = re.findall(r"^\s+(\w+) : \[", text, flags=re.M)
    assert decls == ["x", "d", "t", "delta"]
    assert lint_prism(text) == []
    assert props.strip().endswith("P=? [ G ((mod(floor((t-1)/2),24)+1=2) => (delta<=3)) ]")


def test_property_line():
    assert property_line(2, 14, 60) == "P=? [ G ((mod(floor((t-1)/60),24)+1=2) => (delta<=14)) ]"
    assert property_line(2, 14, 60, q=5).endswith("(delta<=2)) ]")


def test_prism_probabilities_round_trip():
    p = random_params(np.random.default_rng(3), N=2, D=2, caps=(1,))
    text, _ = export_prism(p, [SoftConstraint(1, 2)], T_horizon=4)
    printed = {float(v) for v in re.findall(r"([0-9.e-]+):\(", text)}
    assert p.A[0, 0, 1] * p.C[0, 1, 0] * p.B[0][1, 0] in printed


def test_prism_deterministic():
    a = export_prism(toy(), [SoftConstraint(1, 2)], T_horizon=4)
    b = export_prism(toy(), [SoftConstraint(1, 2)], T_horizon=4)
    assert a == b


def test_prism_too_large():
    with pytest.raises(TractabilityError) as info:
        export_prism(toy(), [SoftConstraint(1, 1000)], T_horizon=10**5, max_states=10**6)
    assert info.value.size > info.value.limit


def test_lint_catches_problems():
    text, _ = export_prism(toy(), [SoftConstraint(1, 2)], T_horizon=4)
    assert lint_prism(text.replace("endmodule", "")) != []
    bad = re.sub(r"\[\] t=T -> 1:", "[] t=T -> 0.5:", text)
    assert any("sum to" in e for e in lint_prism(bad))
    assert any("undeclared" in e for e in lint_prism(text.replace("t>0 &", "u>0 &", 1)))
    assert lint_prism("mdp\n") != []
