"""Misreport search: how much can one agent gain by lying?

The attacked agent submits a fake (v_i', x_i') inside the reporting box
while everyone else stays truthful; its payoff is always measured with its
TRUE values and demands.  Weights are never attacker-controlled.

Two search modes:

* ``best_misreport``: projected gradient ascent on the reported row with a
  diminishing step, multiple restarts (the first one truthful), tracking
  the best payoff ever evaluated.  Needs a gradient path through the
  mechanism, so it supports Pf, ExsNet and ExpfNet; for mechanisms with
  singular optimality systems along the way, the least-squares subgradient
  is used silently and counted.
* ``grid_misreport``: derivative-free reference.  Exhaustive (value x
  demand) scan for single-resource problems, coordinate sweeps iterated to
  a fixed point otherwise.  Also covers Pa and Mixture (expected payoff),
  which have no gradient path.

A report that leaves the solver with no feasible interior (e.g. an all-zero
demand row) is scored as zero payoff: the mechanism would simply hand that
agent nothing.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .core import (
    Allocation,
    Bounds,
    DimensionTooLarge,
    Infeasible,
    RequestProfile,
    UnsupportedMechanism,
)
from .diffpf import backprop_pf
from .mechanisms import (
    ExpfNet,
    ExsNet,
    Mechanism,
    Mixture,
    Pa,
    Pf,
    _expf_pull,
    exs_backward_batch,
    exs_forward_batch,
    pa_allocate,
)
from .pfsolve import _golden_max, solve_pf

GRID_MAX_RESOURCES = 3


@dataclass(frozen=True)
class AttackConfig:
    """Misreport search budget.

    restarts: ascent restarts; the first always starts from the truthful
        report, the rest are drawn uniformly from the reporting box.
    steps: ascent steps per restart, with step size step_scale / sqrt(t).
    grid_resolution: points per coordinate for the grid reference.
    grid_sweeps: coordinate sweep passes for multi-resource grids.
    bounds: the reporting box.
    """

    restarts: int = 8
    steps: int = 300
    step_scale: float = 0.05
    polish_iters: int = 16  # golden-section sweep on the ascent winner; 0 = off
    grid_resolution: int = 25
    grid_sweeps: int = 4
    bounds: Bounds = field(default_factory=Bounds)

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = Bounds(**d["bounds"])
        return cls(**d)


@dataclass
class AttackResult:
    best_v: np.ndarray
    best_x: np.ndarray
    truthful_utility: float
    attacked_utility: float
    gain: float
    n_singular: int = 0  # least-squares fallbacks hit during ascent
    n_evals: int = 0


def _true_payoff(a: np.ndarray, profile: RequestProfile, i: int) -> float:
    return float(
        np.sum(profile.values[i] * np.minimum(a[i], profile.demands[i]))
    )


def _payoff_grad_a(profile: RequestProfile, i: int, a: np.ndarray) -> np.ndarray:
    # d payoff / d a: the true value where the true demand is not yet met
    g = np.zeros_like(a)
    g[i] = profile.values[i] * (a[i] <= profile.demands[i])
    return g


def _drop_blocked(g: np.ndarray, row: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Zero gradient components that push into an already-active box face,
    so they do not eat the normalized step budget."""
    out = np.array(g, copy=True)
    out[(row <= lo + 1e-12) & (out < 0.0)] = 0.0
    out[(row >= hi - 1e-12) & (out > 0.0)] = 0.0
    return out


def _eval_with_grad(mech, profile: RequestProfile, i: int, v_row, x_row):
    """Payoff and its gradient wrt the reported row.  Returns
    (payoff, g_v, g_x, singular)."""
    reported = profile.replace_agent(i, v_row, x_row)
    if isinstance(mech, Pf):
        try:
            kkt = solve_pf(reported, mech.cfg)
        except Infeasible:
            return 0.0, None, None, False
        a = kkt.allocation
        grads = backprop_pf(kkt, reported, _payoff_grad_a(profile, i, a))
        return (
            _true_payoff(a, profile, i),
            grads.d_v[i],
            grads.d_x[i],
            grads.used_least_squares,
        )
    if isinstance(mech, ExsNet):
        ab, cache = exs_forward_batch(
            mech.params,
            reported.values[None],
            reported.demands[None],
            reported.budgets[None],
        )
        _, gv, gx = exs_backward_batch(
            mech.params, cache, _payoff_grad_a(profile, i, ab[0])[None]
        )
        return _true_payoff(ab[0], profile, i), gv[0, i], gx[0, i], False
    if isinstance(mech, ExpfNet):
        from .mechanisms import expf_forward

        try:
            a_star, kkt, _ = expf_forward(mech.params, reported, mech.cfg, mech.zeta)
        except Infeasible:
            return 0.0, None, None, False
        a = a_star.a
        _, gv, gx, singular = _expf_pull(
            mech.params, reported, kkt, _payoff_grad_a(profile, i, a)
        )
        return _true_payoff(a, profile, i), gv[i], gx[i], singular
    raise UnsupportedMechanism(
        f"{type(mech).__name__} has no gradient path; use the grid mode"
    )


def _eval_only(mech, profile: RequestProfile, i: int, v_row, x_row) -> float:
    """Deterministic payoff of one report (no gradients); supports all arms."""
    reported = profile.replace_agent(i, v_row, x_row)
    try:
        if isinstance(mech, Pf):
            return _true_payoff(solve_pf(reported, mech.cfg).allocation, profile, i)
        if isinstance(mech, Pa):
            return _true_payoff(pa_allocate(reported, mech.cfg).a, profile, i)
        if isinstance(mech, Mixture):
            u_pf = _true_payoff(solve_pf(reported, mech.cfg).allocation, profile, i)
            u_pa = _true_payoff(pa_allocate(reported, mech.cfg).a, profile, i)
            return mech.rho * u_pf + (1.0 - mech.rho) * u_pa
        if isinstance(mech, ExsNet):
            ab, _ = exs_forward_batch(
                mech.params,
                reported.values[None],
                reported.demands[None],
                reported.budgets[None],
            )
            return _true_payoff(ab[0], profile, i)
        if isinstance(mech, ExpfNet):
            from .mechanisms import expf_forward

            a_star, _, _ = expf_forward(mech.params, reported, mech.cfg, mech.zeta)
            return _true_payoff(a_star.a, profile, i)
    except Infeasible:
        return 0.0
    raise UnsupportedMechanism(f"unknown mechanism {type(mech).__name__}")


def _coord_polish(mech, profile, i, v_row, x_row, payoff, bx, iters, passes=2):
    """Golden-section sweep over each reported coordinate.  Only accepts
    improvements, so it can never make the ascent result worse; it rescues
    runs that stall short of a box face in a flat payoff direction."""
    v_row, x_row = v_row.copy(), x_row.copy()
    n_evals = 0
    for _ in range(passes):
        improved = False
        for row, lo, hi in ((v_row, bx.v_lo, bx.v_hi), (x_row, bx.d_lo, bx.d_hi)):
            for k in range(row.size):

                def fk(t):
                    old = row[k]
                    row[k] = t
                    p = _eval_only(mech, profile, i, v_row, x_row)
                    row[k] = old
                    return p

                cand = _golden_max(fk, lo, hi, iters)
                p_cand = fk(cand)
                n_evals += 3 + iters
                if p_cand > payoff + 1e-12:
                    row[k] = cand
                    payoff = p_cand
                    improved = True
        if not improved:
            break
    return payoff, v_row, x_row, n_evals


def best_misreport(
    mech: Mechanism,
    profile: RequestProfile,
    agent_i: int,
    cfg: AttackConfig | None = None,
    rng: np.random.Generator | None = None,
) -> AttackResult:
    """Projected-ascent misreport search for one agent.

    Raises UnsupportedMechanism for arms without a gradient path (Pa,
    Mixture); those are handled by grid_misreport.
    """
    if isinstance(mech, (Pa, Mixture)):
        raise UnsupportedMechanism(
            f"{type(mech).__name__} has no gradient path; use grid_misreport"
        )
    cfg = cfg or AttackConfig()
    rng = rng or np.random.default_rng(0)
    i = agent_i
    bx = cfg.bounds
    m = profile.n_resources
    truth_v = bx.clip_values(profile.values[i])
    truth_x = bx.clip_demands(profile.demands[i])

    best = None  # (payoff, v, x)
    n_singular = 0
    n_evals = 0
    truthful_payoff = None
    for r in range(max(1, cfg.restarts)):
        if r == 0:
            v_row, x_row = truth_v.copy(), truth_x.copy()
        else:
            v_row = rng.uniform(bx.v_lo, bx.v_hi, m)
            x_row = rng.uniform(bx.d_lo, bx.d_hi, m)
        for t in range(cfg.steps + 1):
            payoff, gv, gx, singular = _eval_with_grad(mech, profile, i, v_row, x_row)
            n_evals += 1
            n_singular += bool(singular)
            if r == 0 and t == 0:
                truthful_payoff = payoff
            if best is None or payoff > best[0]:
                best = (payoff, v_row.copy(), x_row.copy())
            if t == cfg.steps:
                break
            if gv is None:  # infeasible report: restart from a feasible corner
                v_row, x_row = truth_v.copy(), truth_x.copy()
                continue
            # normalized feasible direction: step length is step_scale/sqrt(t)
            gv = _drop_blocked(gv, v_row, bx.v_lo, bx.v_hi)
            gx = _drop_blocked(gx, x_row, bx.d_lo, bx.d_hi)
            norm = np.sqrt(np.sum(gv * gv) + np.sum(gx * gx))
            if norm < 1e-14:
                continue
            eta = cfg.step_scale / np.sqrt(t + 1.0) / norm
            v_row = bx.clip_values(v_row + eta * gv)
            x_row = bx.clip_demands(x_row + eta * gx)

    payoff, v_b, x_b = best
    if cfg.polish_iters > 0:
        payoff, v_b, x_b, ev = _coord_polish(
            mech, profile, i, v_b, x_b, payoff, bx, cfg.polish_iters
        )
        n_evals += ev
    # the truthful report was evaluated first, so gain is never negative
    gain = max(0.0, payoff - truthful_payoff)
    return AttackResult(v_b, x_b, truthful_payoff, payoff, gain, n_singular, n_evals)


def grid_misreport(
    mech: Mechanism,
    profile: RequestProfile,
    agent_i: int,
    cfg: AttackConfig | None = None,
) -> AttackResult:
    """Derivative-free reference search over a reporting grid.

    Single-resource problems get the exhaustive (value, demand) scan;
    otherwise coordinate sweeps from the truthful report run until a fixed
    point (capped at cfg.grid_sweeps passes).  Deterministic.
    """
    cfg = cfg or AttackConfig()
    i = agent_i
    m = profile.n_resources
    if m > GRID_MAX_RESOURCES:
        raise DimensionTooLarge(
            f"grid reference limited to M <= {GRID_MAX_RESOURCES}, got {m}"
        )
    bx = cfg.bounds
    v_grid = np.linspace(bx.v_lo, bx.v_hi, cfg.grid_resolution)
    x_grid = np.linspace(bx.d_lo, bx.d_hi, cfg.grid_resolution)
    truth_v = bx.clip_values(profile.values[i])
    truth_x = bx.clip_demands(profile.demands[i])
    truthful_payoff = _eval_only(mech, profile, i, truth_v, truth_x)
    n_evals = 1

    if m == 1:
        best = (truthful_payoff, truth_v.copy(), truth_x.copy())
        for vv in v_grid:
            for xx in x_grid:
                p = _eval_only(mech, profile, i, np.array([vv]), np.array([xx]))
                n_evals += 1
                if p > best[0]:
                    best = (p, np.array([vv]), np.array([xx]))
        payoff, v_b, x_b = best
    else:
        v_row, x_row = truth_v.copy(), truth_x.copy()
        payoff = truthful_payoff
        for _ in range(cfg.grid_sweeps):
            changed = False
            for name, row, grid in (("v", v_row, v_grid), ("x", x_row, x_grid)):
                for k in range(m):
                    cur = row[k]
                    best_val, best_p = cur, payoff
                    for g in grid:
                        if g == cur:
                            continue
                        row[k] = g
                        p = _eval_only(mech, profile, i, v_row, x_row)
                        n_evals += 1
                        if p > best_p:
                            best_val, best_p = g, p
                    row[k] = best_val
                    if best_p > payoff:
                        payoff = best_p
                        changed = True
            if not changed:
                break
        v_b, x_b = v_row, x_row
    gain = max(0.0, payoff - truthful_payoff)
    return AttackResult(v_b, x_b, truthful_payoff, payoff, gain, 0, n_evals)


def exploitability_vector(
    mech: Mechanism,
    profile: RequestProfile,
    cfg: AttackConfig | None = None,
    rng: np.random.Generator | None = None,
    method: str = "auto",
) -> np.ndarray:
    """Per-agent misreport gains.  method: 'ascent', 'grid', or 'auto'
    (ascent when a gradient path exists, grid otherwise)."""
    cfg = cfg or AttackConfig()
    if method not in ("auto", "ascent", "grid"):
        raise ValueError(f"unknown method {method}")
    use_grid = method == "grid" or (
        method == "auto" and isinstance(mech, (Pa, Mixture))
    )
    gains = np.zeros(profile.n_agents)
    for i in range(profile.n_agents):
        if use_grid:
            gains[i] = grid_misreport(mech, profile, i, cfg).gain
        else:
            gains[i] = best_misreport(mech, profile, i, cfg, rng).gain
    return gains


def gain_upper_bound(profile: RequestProfile, i: int) -> float:
    """No misreport can beat receiving the full true demand row."""
    return float(np.sum(profile.values[i] * profile.demands[i]))


# ---------------------------------------------------------------------------
# Vectorized share-network attack (training inner loop)
# ---------------------------------------------------------------------------


def _batch_payoff(params, v, x, b, i, rep_v, rep_x, true_vi, true_xi):
    """True payoffs of agent i under batched reports (rep_v, rep_x)."""
    vv, xx = v.copy(), x.copy()
    vv[:, i, :] = rep_v
    xx[:, i, :] = rep_x
    a, _ = exs_forward_batch(params, vv, xx, b)
    return np.sum(true_vi * np.minimum(a[:, i, :], true_xi), axis=1)


def _batch_coord_polish(
    params, v, x, b, i, rep_v, rep_x, true_vi, true_xi, payoffs, bx, iters,
    passes: int = 2,
):
    """Vectorized golden-section sweep over each report coordinate.

    Mirrors the scalar polish in best_misreport: candidates are accepted
    per element only when they improve, so results never get worse.
    """
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    nelem, m = rep_v.shape

    def with_coord(arr, k, t, is_v):
        rv, rx = rep_v, rep_x
        if is_v:
            rv = rep_v.copy()
            rv[:, k] = t
        else:
            rx = rep_x.copy()
            rx[:, k] = t
        return _batch_payoff(params, v, x, b, i, rv, rx, true_vi, true_xi)

    for arr, lo, hi, is_v in ((rep_v, bx.v_lo, bx.v_hi, True),
                              (rep_x, bx.d_lo, bx.d_hi, False)) * passes:
        for k in range(m):
            a_ = np.full(nelem, lo)
            b_ = np.full(nelem, hi)
            c = b_ - invphi * (b_ - a_)
            d = a_ + invphi * (b_ - a_)
            fc = with_coord(arr, k, c, is_v)
            fd = with_coord(arr, k, d, is_v)
            for _ in range(iters):
                take = fc >= fd
                b_ = np.where(take, d, b_)
                a_ = np.where(take, a_, c)
                c = b_ - invphi * (b_ - a_)
                d = a_ + invphi * (b_ - a_)
                # on `take` the new d coincides with the old c (and vice
                # versa), so one fresh evaluation per element suffices
                t = np.where(take, c, d)
                ft = with_coord(arr, k, t, is_v)
                fc, fd = np.where(take, ft, fd), np.where(take, fc, ft)
            cand = 0.5 * (a_ + b_)
            pc = with_coord(arr, k, cand, is_v)
            better = pc > payoffs + 1e-12
            arr[better, k] = cand[better]
            payoffs = np.where(better, pc, payoffs)
    return payoffs


def exs_attack_batch(
    params,
    v: np.ndarray,
    x: np.ndarray,
    b: np.ndarray,
    agent_i: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
):
    """Misreport ascent for one agent over a batch of profiles in lockstep.

    v, x: (B, N, M) truthful profiles; b: (B, M).  Returns (best_v, best_x,
    gains) with shapes ((B, M), (B, M), (B,)).  Restart 0 is truthful, the
    rest start uniformly in the box; every evaluated point competes for the
    per-profile best, and the per-profile winner gets the same coordinate
    polish as the scalar search.
    """
    bsz, n, m = v.shape
    i = agent_i
    bx = cfg.bounds
    r = max(1, cfg.restarts)
    # tile truthful profiles across restarts: layout (R, B, ...)
    vv = np.broadcast_to(v, (r, bsz, n, m)).copy().reshape(r * bsz, n, m)
    xx = np.broadcast_to(x, (r, bsz, n, m)).copy().reshape(r * bsz, n, m)
    bb = np.broadcast_to(b, (r, bsz, m)).copy().reshape(r * bsz, m)
    vv[:, i, :] = bx.clip_values(vv[:, i, :])
    xx[:, i, :] = bx.clip_demands(xx[:, i, :])
    if r > 1:
        vv[bsz:, i, :] = rng.uniform(bx.v_lo, bx.v_hi, (bsz * (r - 1), m))
        xx[bsz:, i, :] = rng.uniform(bx.d_lo, bx.d_hi, (bsz * (r - 1), m))
    true_vi = np.broadcast_to(v[:, i, :], (r, bsz, m)).reshape(r * bsz, m)
    true_xi = np.broadcast_to(x[:, i, :], (r, bsz, m)).reshape(r * bsz, m)

    best_u = np.full(r * bsz, -np.inf)
    best_v = vv[:, i, :].copy()
    best_x = xx[:, i, :].copy()
    truthful_u = None
    for t in range(cfg.steps + 1):
        a, cache = exs_forward_batch(params, vv, xx, bb)
        u = np.sum(true_vi * np.minimum(a[:, i, :], true_xi), axis=1)
        if t == 0:
            truthful_u = u[:bsz].copy()
        better = u > best_u
        best_u[better] = u[better]
        best_v[better] = vv[better, i, :]
        best_x[better] = xx[better, i, :]
        if t == cfg.steps:
            break
        ga = np.zeros_like(a)
        ga[:, i, :] = true_vi * (a[:, i, :] <= true_xi)
        _, gv, gx = exs_backward_batch(params, cache, ga)
        giv = _drop_blocked(gv[:, i, :], vv[:, i, :], bx.v_lo, bx.v_hi)
        gix = _drop_blocked(gx[:, i, :], xx[:, i, :], bx.d_lo, bx.d_hi)
        norm = np.sqrt(np.sum(giv * giv, axis=1) + np.sum(gix * gix, axis=1))
        eta = cfg.step_scale / np.sqrt(t + 1.0) / np.maximum(norm, 1e-14)
        vv[:, i, :] = bx.clip_values(vv[:, i, :] + eta[:, None] * giv)
        xx[:, i, :] = bx.clip_demands(xx[:, i, :] + eta[:, None] * gix)

    # reduce over restarts, then polish each profile's winner
    per = best_u.reshape(r, bsz)
    pick = per.argmax(axis=0)
    sel = pick * bsz + np.arange(bsz)
    win_u, win_v, win_x = best_u[sel], best_v[sel], best_x[sel]
    if cfg.polish_iters > 0:
        win_u = _batch_coord_polish(
            params, v, x, b, i, win_v, win_x, v[:, i, :], x[:, i, :],
            win_u, bx, cfg.polish_iters,
        )
    gains = np.maximum(0.0, win_u - truthful_u)
    return win_v, win_x, gains
