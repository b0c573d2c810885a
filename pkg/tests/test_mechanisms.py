import numpy as np
import pytest

from fairalloc.core import (
    DegenerateWeights,
    ProblemDims,
    RequestProfile,
    profile_utility,
)
from fairalloc.mechanisms import (
    ExpfNet,
    ExsNet,
    Mixture,
    Pa,
    Pf,
    allocate,
    exs_backward,
    exs_forward,
    exs_sizes,
    expf_backward,
    expf_forward,
    expf_sizes,
    input_dim,
    load_mechanism,
    mixture_allocate,
    pa_allocate,
    save_mechanism,
)
from fairalloc.mlp import init_mlp
from fairalloc.pfsolve import solve_pf

from conftest import random_profile

D22 = ProblemDims(2, 2)


def _exs(seed=0, dims=D22):
    return ExsNet(init_mlp(exs_sizes(dims, (16, 16)), np.random.default_rng(seed)))


def _expf(seed=0, dims=D22, zeta=0.0):
    params = init_mlp(expf_sizes(dims, (16, 16)), np.random.default_rng(seed))
    return ExpfNet(params, zeta=zeta)


def test_input_dim():
    assert input_dim(D22) == 10
    assert exs_sizes(D22)[-1] == 6  # (N + 1) * M slots
    assert expf_sizes(D22)[-1] == 4


def test_pa_canonical_values(canonical):
    """Hand-derived: without agent 1, agent 2 alone nets 1.25; without
    agent 2, agent 1 nets 1.5.  Scale factors are 0.75/1.25 = 0.6 and
    0.75/1.5 = 0.5, so utilities land at 0.45 and 0.375."""
    alloc = pa_allocate(canonical)
    alloc.check_feasible(canonical)
    u = profile_utility(alloc, canonical)
    np.testing.assert_allclose(u, [0.45, 0.375], atol=1e-6)
    pf = solve_pf(canonical).a_star.a
    np.testing.assert_allclose(alloc.a, pf * np.array([[0.6], [0.5]]), atol=1e-6)


def test_pa_never_beats_pf_per_agent():
    rng = np.random.default_rng(3)
    for _ in range(10):
        p = random_profile(rng)
        u_pf = profile_utility(solve_pf(p).a_star, p)
        u_pa = profile_utility(pa_allocate(p), p)
        assert np.all(u_pa <= u_pf + 1e-9)
        # the scale-back keeps at least a 1/e fraction for equal weights
        assert np.all(u_pa >= u_pf / np.e - 1e-9)


def test_pa_single_agent_is_full_pf():
    rng = np.random.default_rng(8)
    p = random_profile(rng, n=1, m=3)
    np.testing.assert_allclose(
        pa_allocate(p).a, solve_pf(p).a_star.a, atol=1e-9
    )


def test_pa_requires_positive_weights(canonical):
    p = RequestProfile(
        canonical.values, canonical.demands, canonical.budgets, np.array([1.0, 0.0])
    )
    with pytest.raises(DegenerateWeights):
        pa_allocate(p)


def test_mixture_branches(canonical):
    pf = solve_pf(canonical).a_star.a
    pa = pa_allocate(canonical).a
    np.testing.assert_allclose(
        mixture_allocate(1.0, canonical, np.random.default_rng(0)).a, pf, atol=1e-9
    )
    np.testing.assert_allclose(
        mixture_allocate(0.0, canonical, np.random.default_rng(0)).a, pa, atol=1e-9
    )
    # rho = 0.5 picks each branch with the advertised frequency
    rng = np.random.default_rng(42)
    hits = sum(
        np.allclose(mixture_allocate(0.5, canonical, rng).a, pf, atol=1e-7)
        for _ in range(200)
    )
    assert 70 <= hits <= 130
    with pytest.raises(ValueError):
        Mixture(1.5)
    with pytest.raises(ValueError):
        allocate(Mixture(0.5), canonical)  # rng is required


def test_exs_forward_structure(canonical):
    mech = _exs()
    alloc, cache = exs_forward(mech.params, canonical)
    alloc.check_feasible(canonical)
    # shares over the N+1 slots of each resource sum to one
    np.testing.assert_allclose(cache.tilde.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(cache.tilde > 0)
    # proposal = share * budget, then the demand cap
    np.testing.assert_allclose(
        alloc.a, np.minimum(cache.prop[0], canonical.demands), atol=1e-15
    )
    # waste slot keeps the column sums strictly under budget
    assert np.all(alloc.a.sum(axis=0) < canonical.budgets)


def test_exs_zero_demand_row():
    """An agent demanding nothing gets nothing, and stays feasible."""
    p = RequestProfile(
        values=np.array([[0.8, 0.6], [0.7, 0.3]]),
        demands=np.array([[0.0, 0.0], [1.0, 1.0]]),
        budgets=np.ones(2),
        weights=np.ones(2),
    )
    alloc, _ = exs_forward(_exs().params, p)
    alloc.check_feasible(p)
    np.testing.assert_allclose(alloc.a[0], 0.0, atol=1e-15)


def test_exs_backward_matches_finite_differences(canonical):
    mech = _exs(5)
    g = np.random.default_rng(1).normal(size=(2, 2))
    _, cache = exs_forward(mech.params, canonical)
    grads, grad_v, grad_x = exs_backward(mech.params, cache, g)

    h = 1e-6

    def loss(profile):
        a, _ = exs_forward(mech.params, profile)
        return float(np.sum(g * a.a))

    for i in range(2):
        for m in range(2):
            vp = canonical.values.copy()
            vm = canonical.values.copy()
            vp[i, m] += h
            vm[i, m] -= h
            num = (
                loss(RequestProfile(vp, canonical.demands, canonical.budgets, canonical.weights))
                - loss(RequestProfile(vm, canonical.demands, canonical.budgets, canonical.weights))
            ) / (2 * h)
            assert grad_v[i, m] == pytest.approx(num, rel=1e-5, abs=1e-9)
            xp = canonical.demands.copy()
            xm = canonical.demands.copy()
            xp[i, m] += h
            xm[i, m] -= h
            num = (
                loss(RequestProfile(canonical.values, xp, canonical.budgets, canonical.weights))
                - loss(RequestProfile(canonical.values, xm, canonical.budgets, canonical.weights))
            ) / (2 * h)
            assert grad_x[i, m] == pytest.approx(num, rel=1e-5, abs=1e-9)
    assert any(np.abs(w).max() > 0 for w in grads.weights)


def test_expf_forward_is_tilted_solve(canonical):
    mech = _expf(3)
    alloc, kkt, z = expf_forward(mech.params, canonical, zeta=mech.zeta)
    alloc.check_feasible(canonical)
    assert z.shape == (2, 2)
    np.testing.assert_array_equal(kkt.z_used, z)
    assert kkt.converged
    # zero tilt (zero final layer) reproduces plain proportional fairness
    zero_w = tuple(
        np.zeros_like(w) if l == len(mech.params.weights) - 1 else w
        for l, w in enumerate(mech.params.weights)
    )
    zero_b = tuple(
        np.zeros_like(b) if l == len(mech.params.biases) - 1 else b
        for l, b in enumerate(mech.params.biases)
    )
    from fairalloc.mlp import MlpParams

    silent = MlpParams(zero_w, zero_b)
    a0, _, z0 = expf_forward(silent, canonical)
    np.testing.assert_allclose(z0, 0.0, atol=1e-15)
    np.testing.assert_allclose(a0.a, solve_pf(canonical).a_star.a, atol=1e-7)


def test_expf_backward_matches_finite_differences():
    rng = np.random.default_rng(12)
    p = random_profile(rng)
    mech = _expf(7, zeta=0.1)
    g = rng.normal(size=(2, 2))
    alloc, kkt, z = expf_forward(mech.params, p, zeta=mech.zeta)
    grads, grad_v, grad_x = expf_backward(mech.params, p, kkt, z, g)

    h = 1e-6
    idx_checks = [(0, 0), (1, 1)]

    def loss(profile):
        a, _, _ = expf_forward(mech.params, profile, zeta=mech.zeta)
        return float(np.sum(g * a.a))

    for i, m in idx_checks:
        vp, vm = p.values.copy(), p.values.copy()
        vp[i, m] += h
        vm[i, m] -= h
        num = (
            loss(RequestProfile(vp, p.demands, p.budgets, p.weights))
            - loss(RequestProfile(vm, p.demands, p.budgets, p.weights))
        ) / (2 * h)
        assert grad_v[i, m] == pytest.approx(num, rel=5e-4, abs=1e-7)
    # a couple of parameter entries through the z path
    wl = mech.params.weights[-1]
    for idx in [(0, 0), (wl.shape[0] - 1, wl.shape[1] - 1)]:
        wp = [w.copy() for w in mech.params.weights]
        wm = [w.copy() for w in mech.params.weights]
        wp[-1][idx] += h
        wm[-1][idx] -= h
        from fairalloc.mlp import MlpParams

        num = (
            float(np.sum(g * expf_forward(MlpParams(tuple(wp), mech.params.biases), p, zeta=mech.zeta)[0].a))
            - float(np.sum(g * expf_forward(MlpParams(tuple(wm), mech.params.biases), p, zeta=mech.zeta)[0].a))
        ) / (2 * h)
        assert grads.weights[-1][idx] == pytest.approx(num, rel=5e-4, abs=1e-7)


def test_allocate_dispatch(canonical):
    rng = np.random.default_rng(0)
    for mech in (Pf(), Pa(), Mixture(0.5), _exs(), _expf()):
        alloc = allocate(mech, canonical, rng)
        alloc.check_feasible(canonical)


def test_mechanism_checkpoint_round_trips(tmp_path, canonical):
    rng = np.random.default_rng(0)
    for mech in (Pf(), Pa(), Mixture(0.25), _exs(11), _expf(12, zeta=0.3)):
        path = tmp_path / f"{type(mech).__name__}.npz"
        save_mechanism(path, mech)
        back = load_mechanism(path)
        assert type(back) is type(mech)
        if isinstance(mech, Mixture):
            assert back.rho == mech.rho
        if isinstance(mech, ExpfNet):
            assert back.zeta == mech.zeta
        if isinstance(mech, (ExsNet, ExpfNet)):
            for w0, w1 in zip(mech.params.weights, back.params.weights):
                np.testing.assert_array_equal(w0, w1)
            a0 = allocate(mech, canonical, np.random.default_rng(1))
            a1 = allocate(back, canonical, np.random.default_rng(1))
            np.testing.assert_array_equal(a0.a, a1.a)
