import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairalloc.core import (
    Infeasible,
    ProblemDims,
    RequestProfile,
    profile_utility,
    nsw,
    efficiency,
)
from fairalloc.pfsolve import (
    ORACLE_MAX_COORDS,
    SolverConfig,
    kkt_residual,
    pf_oracle,
    solve_pf,
    solve_regularized_pf,
)
from fairalloc.core import DimensionTooLarge

from conftest import random_profile


def test_canonical_solution(canonical):
    """Hand-derived optimum: agent 1 takes all of resource 2 plus a quarter
    of resource 1; agent 2 takes the rest of resource 1."""
    kkt = solve_pf(canonical)
    assert kkt.converged
    np.testing.assert_allclose(
        kkt.a_star.a, [[0.25, 1.0], [0.75, 0.0]], atol=1e-6
    )
    u = profile_utility(kkt.a_star, canonical)
    np.testing.assert_allclose(u, [0.75, 0.75], atol=1e-6)
    assert nsw(u, canonical.weights) == pytest.approx(0.5625, abs=1e-6)
    assert efficiency(kkt.a_star.a, canonical.budgets) == pytest.approx(1.0, abs=1e-6)
    assert kkt.residual < 1e-8
    np.testing.assert_array_equal(kkt.z_used, np.zeros((2, 2)))


def test_canonical_certificate(canonical):
    """The returned duals must satisfy the optimality system, not just the
    primal: check via the residual function and basic sign constraints."""
    kkt = solve_pf(canonical)
    res = kkt_residual(
        canonical, kkt.a_star.a, kkt.mu, kkt.nu, kkt.lam, kkt.z_used
    )
    assert res < 1e-8
    assert np.all(kkt.mu >= -1e-12)
    assert np.all(kkt.nu >= -1e-12)
    assert np.all(kkt.lam >= -1e-12)
    # resource 1 is contested, resource 2 is not priced for agent 2
    assert kkt.lam[0] > 0.1


def test_perturbed_point_has_large_residual(canonical):
    kkt = solve_pf(canonical)
    bad = kkt.a_star.a.copy()
    bad[0, 0] += 0.1
    bad[1, 0] -= 0.1
    res = kkt_residual(canonical, bad, kkt.mu, kkt.nu, kkt.lam, kkt.z_used)
    assert res > 1e-3


def test_oracle_agreement_small():
    """Spot check against the independent projected-ascent reference."""
    rng = np.random.default_rng(42)
    for _ in range(10):
        p = random_profile(rng)
        kkt = solve_pf(p)
        ref = pf_oracle(p)
        np.testing.assert_allclose(kkt.a_star.a, ref.a, atol=2e-4)


def test_oracle_size_cap():
    rng = np.random.default_rng(0)
    big = random_profile(rng, n=5, m=3)
    assert big.dims.nm > ORACLE_MAX_COORDS
    with pytest.raises(DimensionTooLarge):
        pf_oracle(big)


def test_value_scale_invariance():
    """Scaling one agent's value row rescales its utility but must leave
    the optimal allocation unchanged (log objective)."""
    rng = np.random.default_rng(7)
    p = random_profile(rng)
    a1 = solve_pf(p).a_star.a
    scaled = p.replace_agent(0, values=5.0 * p.values[0])
    a2 = solve_pf(scaled).a_star.a
    np.testing.assert_allclose(a1, a2, atol=1e-6)


def test_single_agent_closed_form():
    """One agent takes min(demand, budget) wherever its value is positive."""
    p = RequestProfile(
        values=np.array([[0.5, 0.0, 0.9]]),
        demands=np.array([[0.7, 0.5, 2.0]]),
        budgets=np.array([1.0, 1.0, 1.0]),
        weights=np.ones(1),
    )
    a = solve_pf(p).a_star.a
    assert a[0, 0] == pytest.approx(0.7, abs=1e-8)
    assert a[0, 1] == pytest.approx(0.0, abs=1e-8)
    assert a[0, 2] == pytest.approx(1.0, abs=1e-8)


def test_weight_monotonicity(canonical):
    """Raising an agent's weight cannot lower its utility."""
    u_eq = profile_utility(solve_pf(canonical).a_star, canonical)
    heavier = RequestProfile(
        canonical.values, canonical.demands, canonical.budgets, np.array([2.0, 1.0])
    )
    u_hv = profile_utility(solve_pf(heavier).a_star, heavier)
    assert u_hv[0] > u_eq[0]
    assert u_hv[1] < u_eq[1]


def test_zero_weight_agent_gets_nothing(canonical):
    p = RequestProfile(
        canonical.values, canonical.demands, canonical.budgets, np.array([1.0, 0.0])
    )
    a = solve_pf(p).a_star.a
    np.testing.assert_allclose(a[1], 0.0, atol=1e-7)
    # the weighted agent takes everything it wants
    np.testing.assert_allclose(a[0], [1.0, 1.0], atol=1e-6)


def test_unreachable_agent_raises():
    p = RequestProfile(
        values=np.array([[1.0, 0.5], [0.0, 0.0]]),
        demands=np.ones((2, 2)),
        budgets=np.ones(2),
        weights=np.ones(2),
    )
    with pytest.raises(Infeasible):
        solve_pf(p)


def test_tilt_shifts_solution(canonical):
    """A positive linear cost on agent 1's allocation must push it away
    from resource 1 relative to the untilted solve."""
    z = np.array([[5.0, 0.0], [0.0, 0.0]])
    plain = solve_regularized_pf(canonical, z=np.zeros((2, 2)))
    tilted = solve_regularized_pf(canonical, z=z)
    assert tilted.a_star.a[0, 0] < plain.a_star.a[0, 0] - 1e-3
    np.testing.assert_array_equal(tilted.z_used, z)


def test_ridge_solution_is_damped(canonical):
    cfg = SolverConfig(ridge=0.5)
    kkt = solve_regularized_pf(canonical, cfg=cfg)
    assert kkt.ridge == 0.5
    assert kkt.converged
    # ridge shrinks the aggressive corner solution toward the interior
    assert kkt.a_star.a[0, 1] < 1.0 - 1e-4
    res = kkt_residual(
        canonical, kkt.a_star.a, kkt.mu, kkt.nu, kkt.lam, kkt.z_used, ridge=0.5
    )
    assert res < 1e-7


@st.composite
def profiles(draw):
    n = draw(st.integers(1, 3))
    m = draw(st.integers(1, 3))
    v = draw(
        st.lists(st.floats(0.1, 1.0), min_size=n * m, max_size=n * m)
    )
    x = draw(
        st.lists(st.floats(0.05, 1.0), min_size=n * m, max_size=n * m)
    )
    b = draw(st.lists(st.floats(0.2, 2.0), min_size=m, max_size=m))
    return RequestProfile(
        np.array(v).reshape(n, m),
        np.array(x).reshape(n, m),
        np.array(b),
        np.ones(n),
    )


@given(profiles())
@settings(max_examples=60, deadline=None)
def test_solution_feasible_and_saturating(p):
    """Solutions are feasible, and each resource is either exhausted or
    every agent on it is at its demand cap (no wasted useful capacity)."""
    kkt = solve_pf(p)
    kkt.a_star.check_feasible(p)
    a = kkt.a_star.a
    budget_slack = p.budgets - a.sum(axis=0)
    cap_slack = (p.demands - a).min(axis=0)
    waste = np.minimum(budget_slack, cap_slack)
    assert np.all(waste < 1e-5)


@given(profiles(), st.floats(0.1, 0.9))
@settings(max_examples=40, deadline=None)
def test_pf_maximizes_nsw_against_feasible_rivals(p, t):
    """Any feasible rival allocation has weakly smaller welfare product.

    Rivals are built by scaling the demand box and mixing with the
    solution, which stays inside the constraint set."""
    kkt = solve_pf(p)
    u_star = profile_utility(kkt.a_star, p)
    rival = t * kkt.a_star.a + (1 - t) * np.minimum(
        p.demands, p.budgets[None, :] / p.n_agents
    )
    u_riv = np.maximum(
        np.sum(p.values * np.minimum(rival, p.demands), axis=1), 1e-300
    )
    star = float(np.sum(np.log(u_star)))
    riv = float(np.sum(np.log(u_riv)))
    assert star >= riv - 1e-7
