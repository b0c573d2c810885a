"""Convex solver for weighted proportional fairness with KKT certificates.

Solves, per instance,

    minimize_a   - sum_i w_i log(v_i . a_i) + <z, a> + ridge * ||a||^2
    subject to   0 <= a <= x,    sum_i a[i, m] <= b_m,

with a primal-dual interior-point method on the log-barrier formulation,
followed by an active-set Newton refinement that pushes the KKT residual to
near machine precision and zeroes the duals of inactive constraints.  Dual
variables (mu for the lower bounds, nu for the demand caps, lam for the
budget rows) come out of the solve directly and are packaged as a
certificate for downstream implicit differentiation.

``pf_oracle`` is a deliberately independent reference path: multi-restart
projected gradient ascent followed by coordinate and pairwise-transfer
line-search polish.  It shares no machinery with the interior-point method
and is used to cross-check solutions at small scale.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .core import (
    FEAS_TOL,
    Allocation,
    DimensionMismatch,
    DimensionTooLarge,
    Infeasible,
    NoConvergence,
    RequestProfile,
)

# Brute-force reference refuses problems above this many coordinates.
ORACLE_MAX_COORDS = 12


@dataclass(frozen=True)
class SolverConfig:
    """Interior-point solver knobs.

    kkt_tol: max-norm KKT residual required for success.
    max_iters: interior-point iteration cap.
    ridge: coefficient of the ||a||^2 regularizer (0 disables it).
    feas_tol: slack accepted when validating primal feasibility.
    act_tol: slack/dual threshold used when classifying tight constraints.
    """

    kkt_tol: float = 1e-9
    max_iters: int = 200
    ridge: float = 0.0
    feas_tol: float = FEAS_TOL
    act_tol: float = 1e-6
    frac_to_boundary: float = 0.95
    polish: bool = True


@dataclass
class KktSolution:
    """Primal-dual solution of the fairness program.

    a_star: optimal allocation.
    mu, nu: (N, M) duals for the lower bounds -a <= 0 and caps a <= x.
    lam: (M,) duals for the budget rows.
    residual: max-norm KKT residual actually achieved.
    z_used: the linear tilt the program was solved with (zeros for plain PF).
    ridge: the quadratic coefficient the program was solved with.
    """

    a_star: Allocation
    mu: np.ndarray
    nu: np.ndarray
    lam: np.ndarray
    residual: float
    z_used: np.ndarray
    ridge: float = 0.0
    iters: int = 0
    converged: bool = True

    @property
    def allocation(self) -> np.ndarray:
        return self.a_star.a


def _check_reachable(profile: RequestProfile, feas_tol: float):
    """Every weighted agent must be able to reach positive utility."""
    v, x, b, w = profile.values, profile.demands, profile.budgets, profile.weights
    reach = (v > 0) & (x > 0) & (b[None, :] > 0)
    bad = (w > 0) & ~reach.any(axis=1)
    if np.any(bad):
        raise Infeasible(
            f"agents {np.flatnonzero(bad).tolist()} cannot reach positive utility"
        )


def kkt_residual(
    profile: RequestProfile,
    a: np.ndarray,
    mu: np.ndarray,
    nu: np.ndarray,
    lam: np.ndarray,
    z: np.ndarray,
    ridge: float = 0.0,
) -> float:
    """Max-norm KKT residual of a candidate primal-dual point.

    Covers stationarity, primal and dual feasibility, and the three
    complementarity products.
    """
    v, x, b, w = profile.values, profile.demands, profile.budgets, profile.weights
    u = np.sum(v * a, axis=1)
    coef = np.divide(w, u, out=np.zeros_like(w), where=w > 0)
    grad = -coef[:, None] * v + z + 2.0 * ridge * a
    stat = grad - mu + nu + lam[None, :]
    col = a.sum(axis=0)
    parts = [
        np.abs(stat).max(),
        np.abs(mu * a).max(),
        np.abs(nu * (x - a)).max(),
        np.abs(lam * (b - col)).max() if lam.size else 0.0,
        max(0.0, float((-a).max())),
        max(0.0, float((a - x).max())),
        max(0.0, float((col - b).max())),
        max(0.0, float((-mu).max())),
        max(0.0, float((-nu).max())),
        max(0.0, float((-lam).max())) if lam.size else 0.0,
    ]
    return float(max(parts))


def _solve_n1_closed_form(profile: RequestProfile, cfg: SolverConfig) -> KktSolution:
    # Single agent, no tilt, no ridge: saturate every positive-value resource.
    v = profile.values[0]
    x = profile.demands[0]
    b = profile.budgets
    w = float(profile.weights[0])
    a = np.where((v > 0) & (x > 0) & (b > 0), np.minimum(x, b), 0.0)
    u = float(v @ a)
    if w > 0 and u <= 0:
        raise Infeasible("single agent cannot reach positive utility")
    coef = w / u if w > 0 else 0.0
    mu = np.zeros_like(v)
    nu = np.zeros_like(v)
    lam = np.zeros_like(b)
    for m in range(v.size):
        g = coef * v[m]
        if a[m] <= 0.0:
            # zero-value or zero-capacity coordinate
            if x[m] > 0 and b[m] > 0:
                mu[m] = 0.0  # g == 0 here since v[m] == 0
            elif x[m] <= 0:
                mu[m] = g  # split against the coincident cap; nu stays 0
            else:  # b[m] == 0 binds
                lam[m] = g
        elif b[m] <= x[m]:
            lam[m] = g
        else:
            nu[m] = g
    am = a[None, :]
    res = kkt_residual(profile, am, mu[None, :], nu[None, :], lam, np.zeros_like(am))
    return KktSolution(
        a_star=Allocation(am),
        mu=mu[None, :],
        nu=nu[None, :],
        lam=lam,
        residual=res,
        z_used=np.zeros_like(am),
        ridge=0.0,
        iters=0,
        converged=True,
    )


class _Reduced:
    """Index bookkeeping for the strictly solvable part of an instance.

    Coordinates with zero demand or zero budget are pinned to a = 0 and
    excluded from the interior-point iteration; budget rows with no free
    coordinate are excluded as well (their duals are reconstructed after the
    solve).
    """

    def __init__(self, profile: RequestProfile, z: np.ndarray, ridge: float):
        self.profile = profile
        self.z = z
        self.ridge = ridge
        v, x, b = profile.values, profile.demands, profile.budgets
        n, m = v.shape
        free = (x > 0) & (b[None, :] > 0)
        self.free = free
        self.flat = np.flatnonzero(free.ravel())
        self.agent = self.flat // m
        self.res = self.flat % m
        self.vf = v.ravel()[self.flat]
        self.xf = x.ravel()[self.flat]
        self.zf = z.ravel()[self.flat]
        self.rows = np.flatnonzero((b > 0) & (free.any(axis=0)))
        # position of each free coordinate's budget row within the kept rows
        pos = -np.ones(m, dtype=int)
        pos[self.rows] = np.arange(self.rows.size)
        self.row_of = pos[self.res]
        self.bk = b[self.rows]
        self.n_free = self.flat.size
        self.cols = [np.flatnonzero(self.row_of == r) for r in range(self.rows.size)]

    def utilities(self, af: np.ndarray) -> np.ndarray:
        u = np.zeros(self.profile.n_agents)
        np.add.at(u, self.agent, self.vf * af)
        return u

    def col_sums(self, af: np.ndarray) -> np.ndarray:
        s = np.zeros(self.rows.size)
        np.add.at(s, self.row_of, af)
        return s

    def grad(self, af: np.ndarray, u: np.ndarray) -> np.ndarray:
        w = self.profile.weights
        coef = np.divide(w, u, out=np.zeros_like(w), where=w > 0)
        return -coef[self.agent] * self.vf + self.zf + 2.0 * self.ridge * af

    def hessian(self, u: np.ndarray) -> np.ndarray:
        w = self.profile.weights
        h = np.zeros((self.n_free, self.n_free))
        for i in range(self.profile.n_agents):
            if w[i] <= 0:
                continue
            idx = np.flatnonzero(self.agent == i)
            vi = self.vf[idx]
            h[np.ix_(idx, idx)] += (w[i] / u[i] ** 2) * np.outer(vi, vi)
        if self.ridge > 0:
            h[np.diag_indices_from(h)] += 2.0 * self.ridge
        return h


def _initial_point(red: _Reduced) -> np.ndarray:
    # strictly inside the box and strictly under every budget row
    af = 0.45 * red.xf
    for r, idx in enumerate(red.cols):
        cap = 0.9 * red.bk[r] / max(1, idx.size)
        af[idx] = np.minimum(af[idx], cap)
    return af


def _step_len(cur: np.ndarray, d: np.ndarray, frac: float) -> float:
    neg = d < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, frac * np.min(-cur[neg] / d[neg])))


def _reduced_residual(red: _Reduced, af, mu, nu, lam) -> float:
    """Max-norm KKT residual on the reduced coordinates (matches the full
    residual: pinned coordinates are reconstructed exactly)."""
    u = red.utilities(af)
    s2 = red.xf - af
    s3 = red.bk - red.col_sums(af)
    r_dual = red.grad(af, u) - mu + nu + (lam[red.row_of] if lam.size else 0.0)
    parts = [
        float(np.abs(r_dual).max()) if r_dual.size else 0.0,
        float(np.abs(mu * af).max()) if af.size else 0.0,
        float(np.abs(nu * s2).max()) if af.size else 0.0,
        float(np.abs(lam * s3).max()) if lam.size else 0.0,
        max(0.0, float((-af).max())) if af.size else 0.0,
        max(0.0, float((-s2).max())) if af.size else 0.0,
        max(0.0, float((-s3).max())) if lam.size else 0.0,
        max(0.0, float((-mu).max())) if af.size else 0.0,
        max(0.0, float((-nu).max())) if af.size else 0.0,
        max(0.0, float((-lam).max())) if lam.size else 0.0,
    ]
    return max(parts)


def _ipm(red: _Reduced, cfg: SolverConfig):
    """Primal-dual interior-point loop on the reduced coordinates.

    Iterates toward cfg.kkt_tol; once the residual is small enough, the
    active-set polish is attempted opportunistically (it usually lands at
    ~1e-14 in a couple of Newton steps).  Returns the best point seen.
    """
    prof = red.profile
    af = _initial_point(red)
    u = red.utilities(af)
    mu = np.ones(red.n_free)
    nu = np.ones(red.n_free)
    lam = np.ones(red.rows.size)
    w_pos = prof.weights > 0
    best = None
    polish_trigger = 1e-6 if cfg.polish else -1.0
    for it in range(1, cfg.max_iters + 1):
        s2 = red.xf - af
        s3 = red.bk - red.col_sums(af)
        grad = red.grad(af, u)
        r_dual = grad - mu + nu + (lam[red.row_of] if lam.size else 0.0)
        comps = np.concatenate([mu * af, nu * s2, lam * s3])
        resid = max(np.abs(r_dual).max(), np.abs(comps).max() if comps.size else 0.0)
        if best is None or resid < best[0]:
            best = (resid, af.copy(), mu.copy(), nu.copy(), lam.copy(), it)
        if resid <= cfg.kkt_tol:
            return best, it
        if 0.0 <= polish_trigger and resid <= polish_trigger:
            pol = _polish(red, af, mu, nu, lam)
            if pol is not None:
                pr = _reduced_residual(red, *pol)
                if pr <= min(best[0], cfg.kkt_tol):
                    return (pr, *(arr.copy() for arr in pol), it), it
            polish_trigger = resid / 20.0  # retry once meaningfully closer
        tau = 0.2 * comps.mean() if comps.size else 0.0

        k = red.hessian(u)
        k[np.diag_indices_from(k)] += mu / af + nu / s2
        for r, idx in enumerate(red.cols):
            if idx.size:
                k[np.ix_(idx, idx)] += lam[r] / s3[r]
        rhs = -r_dual + (tau / af - mu) - (tau / s2 - nu)
        if lam.size:
            rhs -= (tau / s3 - lam)[red.row_of]
        try:
            da = np.linalg.solve(k, rhs)
        except np.linalg.LinAlgError:
            da = np.linalg.lstsq(k, rhs, rcond=None)[0]
        dmu = (tau / af - mu) - (mu / af) * da
        dnu = (tau / s2 - nu) + (nu / s2) * da
        dcol = red.col_sums(da)
        dlam = (tau / s3 - lam) + (lam / s3) * dcol if lam.size else lam

        frac = cfg.frac_to_boundary
        alpha_p = min(_step_len(af, da, frac), _step_len(s2, -da, frac))
        if lam.size:
            alpha_p = min(alpha_p, _step_len(s3, -dcol, frac))
        # keep weighted utilities strictly positive
        du = np.zeros_like(u)
        np.add.at(du, red.agent, red.vf * da)
        shrink = w_pos & (du < 0)
        if np.any(shrink):
            alpha_p = min(alpha_p, frac * float(np.min(-u[shrink] / du[shrink])))
        alpha_d = min(_step_len(mu, dmu, frac), _step_len(nu, dnu, frac))
        if lam.size:
            alpha_d = min(alpha_d, _step_len(lam, dlam, frac))

        af = af + alpha_p * da
        u = red.utilities(af)
        mu = mu + alpha_d * dmu
        nu = nu + alpha_d * dnu
        lam = lam + alpha_d * dlam
    return best, cfg.max_iters


def _polish(red: _Reduced, af, mu, nu, lam, act_ratio=True):
    """Active-set Newton refinement.

    Classifies each constraint by comparing slack against dual (products are
    ~tau at the interior-point exit, so the split is sharp under strict
    complementarity), zeroes inactive duals, and runs a few least-squares
    Newton steps on the active KKT equalities.  Returns None if the refined
    point is worse or grows meaningfully negative duals.
    """
    prof = red.profile
    s2 = red.xf - af
    s3 = red.bk - red.col_sums(af)
    act_lo = af < mu
    act_hi = s2 < nu
    act_b = s3 < lam if lam.size else np.zeros(0, dtype=bool)
    both = act_lo & act_hi
    if np.any(both):  # tiny demand: keep whichever bound is closer
        act_lo[both] = af[both] <= s2[both]
        act_hi[both] = ~act_lo[both]

    idx_lo = np.flatnonzero(act_lo)
    idx_hi = np.flatnonzero(act_hi)
    idx_b = np.flatnonzero(act_b)
    n = red.n_free
    af = af.copy()
    p_mu = mu[idx_lo].copy()
    p_nu = nu[idx_hi].copy()
    p_lam = lam[idx_b].copy()

    def residual_vec():
        u = red.utilities(af)
        grad = red.grad(af, u)
        stat = grad.copy()
        stat[idx_lo] -= p_mu
        stat[idx_hi] += p_nu
        if idx_b.size:
            lam_full = np.zeros(red.rows.size)
            lam_full[idx_b] = p_lam
            stat += lam_full[red.row_of]
        prim = np.concatenate(
            [af[idx_lo], af[idx_hi] - red.xf[idx_hi], red.col_sums(af)[idx_b] - red.bk[idx_b]]
        )
        return np.concatenate([stat, prim]), u

    for _ in range(3):
        f, u = residual_vec()
        if np.abs(f).max() < 1e-14:
            break
        jac = np.zeros((f.size, n + idx_lo.size + idx_hi.size + idx_b.size))
        jac[:n, :n] = red.hessian(u)
        c = n
        for j, k in enumerate(idx_lo):
            jac[k, c + j] = -1.0
        c += idx_lo.size
        for j, k in enumerate(idx_hi):
            jac[k, c + j] = 1.0
        c += idx_hi.size
        for j, r in enumerate(idx_b):
            jac[red.cols[r], c + j] = 1.0  # d stat / d lam_r
        r = n
        for j, k in enumerate(idx_lo):
            jac[r + j, k] = 1.0
        r += idx_lo.size
        for j, k in enumerate(idx_hi):
            jac[r + j, k] = 1.0
        r += idx_hi.size
        for j, rr in enumerate(idx_b):
            jac[r + j, red.cols[rr]] = 1.0
        try:
            step = np.linalg.lstsq(jac, -f, rcond=None)[0]
        except np.linalg.LinAlgError:
            return None
        af += step[:n]
        c = n
        p_mu += step[c : c + idx_lo.size]
        c += idx_lo.size
        p_nu += step[c : c + idx_hi.size]
        c += idx_hi.size
        p_lam += step[c:]

    duals = np.concatenate([p_mu, p_nu, p_lam])
    if duals.size and duals.min() < -1e-8:
        return None
    # snap actives exactly and clamp dual noise
    af[idx_lo] = 0.0
    af[idx_hi] = red.xf[idx_hi]
    np.clip(af, 0.0, red.xf, out=af)
    out_mu = np.zeros(n)
    out_mu[idx_lo] = np.maximum(p_mu, 0.0)
    out_nu = np.zeros(n)
    out_nu[idx_hi] = np.maximum(p_nu, 0.0)
    out_lam = np.zeros(red.rows.size)
    out_lam[idx_b] = np.maximum(p_lam, 0.0)
    return af, out_mu, out_nu, out_lam


def _assemble_full(red: _Reduced, af, mu_f, nu_f, lam_k) -> tuple:
    """Scatter reduced quantities back to (N, M) arrays and reconstruct the
    duals of pinned coordinates and dropped budget rows."""
    prof = red.profile
    v, x, b, w = prof.values, prof.demands, prof.budgets, prof.weights
    n, m = v.shape
    a = np.zeros(n * m)
    a[red.flat] = af
    a = a.reshape(n, m)
    mu = np.zeros(n * m)
    mu[red.flat] = mu_f
    mu = mu.reshape(n, m)
    nu = np.zeros(n * m)
    nu[red.flat] = nu_f
    nu = nu.reshape(n, m)
    lam = np.zeros(m)
    lam[red.rows] = lam_k

    u = np.sum(v * a, axis=1)
    coef = np.divide(w, u, out=np.zeros_like(w), where=w > 0)
    # stationarity at a pinned coordinate requires mu - nu = lam - need with
    # need = w v / u - z - 2*ridge*a; split the gap across mu/nu
    need = coef[:, None] * v - red.z - 2.0 * red.ridge * a
    fixed = ~red.free
    for mm in range(m):
        colfix = fixed[:, mm]
        if not np.any(colfix):
            continue
        if b[mm] <= 0:
            # budget row pins the whole column; nu must vanish where x > 0,
            # so lam has to cover the largest stationarity gap
            lam[mm] = max(0.0, float(np.max(need[colfix, mm])))
        t = lam[mm] - need[:, mm]
        mu[colfix, mm] = np.maximum(t[colfix], 0.0)
        nu[colfix, mm] = np.maximum(-t[colfix], 0.0)
        # x == 0 caps coincide with the lower bound, so either side of the
        # split stays complementary there
    return a, mu, nu, lam


def solve_regularized_pf(
    profile: RequestProfile, z: np.ndarray | None = None, cfg: SolverConfig | None = None
) -> KktSolution:
    """Solve the tilted/regularized proportional-fairness program.

    z is an (N, M) linear tilt added to the objective (None means zeros);
    the quadratic coefficient comes from cfg.ridge.  Returns a KKT
    certificate with residual <= cfg.kkt_tol, else raises NoConvergence.
    """
    cfg = cfg or SolverConfig()
    if z is None:
        z = np.zeros_like(profile.values)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != profile.values.shape:
        raise DimensionMismatch(f"z shape {z.shape} vs {profile.values.shape}")
    _check_reachable(profile, cfg.feas_tol)

    if (
        profile.n_agents == 1
        and not np.any(z)
        and cfg.ridge == 0.0
    ):
        return _solve_n1_closed_form(profile, cfg)

    red = _Reduced(profile, z, cfg.ridge)
    if red.n_free == 0:
        a = np.zeros_like(profile.values)
        if np.any(profile.weights > 0):
            raise Infeasible("all coordinates are pinned to zero")
        _, mu, nu, lam = _assemble_full(red, np.zeros(0), np.zeros(0), np.zeros(0))
        res = kkt_residual(profile, a, mu, nu, lam, z, cfg.ridge)
        return KktSolution(Allocation(a), mu, nu, lam, res, z, cfg.ridge, 0, True)

    best, iters = _ipm(red, cfg)
    resid_ipm, af, mu_f, nu_f, lam_k, _ = best

    candidates = []
    a, mu, nu, lam = _assemble_full(red, af, mu_f, nu_f, lam_k)
    candidates.append((kkt_residual(profile, a, mu, nu, lam, z, cfg.ridge), a, mu, nu, lam))
    if cfg.polish and resid_ipm > 1e-13:
        pol = _polish(red, af, mu_f, nu_f, lam_k)
        if pol is not None:
            a2, mu2, nu2, lam2 = _assemble_full(red, *pol)
            candidates.append(
                (kkt_residual(profile, a2, mu2, nu2, lam2, z, cfg.ridge), a2, mu2, nu2, lam2)
            )
    res, a, mu, nu, lam = min(candidates, key=lambda t: t[0])
    if res > cfg.kkt_tol:
        raise NoConvergence(
            f"KKT residual {res:.3e} > tol {cfg.kkt_tol:.1e} after {iters} iterations"
        )
    sol = KktSolution(Allocation(a), mu, nu, lam, float(res), z, cfg.ridge, iters, True)
    sol.a_star.check_feasible(profile, cfg.feas_tol)
    return sol


def solve_pf(profile: RequestProfile, cfg: SolverConfig | None = None) -> KktSolution:
    """Solve the plain proportional-fairness program (no tilt, no ridge)."""
    cfg = cfg or SolverConfig()
    if cfg.ridge != 0.0:
        cfg = dataclasses.replace(cfg, ridge=0.0)
    return solve_regularized_pf(profile, None, cfg)


# ---------------------------------------------------------------------------
# Independent reference solver (small instances only)
# ---------------------------------------------------------------------------


def _project_box_caps(y: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean projection onto {0 <= a <= x, column sums <= b}.

    Columns are independent.  On a column whose clipped sum exceeds b the
    projection is clip(y - theta, 0, x) for the theta >= 0 that makes the
    sum hit b; s(theta) is piecewise linear, so theta is found exactly from
    its breakpoints.
    """
    a = np.clip(y, 0.0, x)
    over = a.sum(axis=0) - b
    for m in np.flatnonzero(over > 0):
        ym, xm = y[:, m], x[:, m]
        bps = np.unique(np.clip(np.concatenate([ym - xm, ym, [0.0]]), 0.0, None))
        s = np.clip(ym[:, None] - bps[None, :], 0.0, xm[:, None]).sum(axis=0)
        k = int(np.argmax(s <= b[m]))  # s is nonincreasing; k >= 1 here
        if s[k] == b[m] or s[k - 1] == s[k]:
            theta = bps[k]
        else:
            theta = bps[k - 1] + (s[k - 1] - b[m]) * (bps[k] - bps[k - 1]) / (
                s[k - 1] - s[k]
            )
        a[:, m] = np.clip(ym - theta, 0.0, xm)
    return a


def _golden_max(fun, lo: float, hi: float, iters: int = 60) -> float:
    """Golden-section maximizer of a 1-d concave function on [lo, hi]."""
    if hi - lo < 1e-15:
        return lo
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fun(c), fun(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fun(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fun(d)
    return 0.5 * (a + b)


def _oracle_objective(a, v, x, w, z, ridge):
    u = np.sum(v * a, axis=1)
    pos = w > 0
    if np.any(u[pos] <= 0):
        return -np.inf
    val = float(np.sum(w[pos] * np.log(u[pos])))
    val -= float(np.sum(z * a))
    if ridge:
        val -= ridge * float(np.sum(a * a))
    return val


def _oracle_polish(a, v, x, b, w, z, ridge, sweeps=8):
    """Exact 1-d line searches: per-coordinate moves, then pairwise transfers
    within each resource column (these fix budget-locked corners)."""
    n, m = a.shape
    a = a.copy()
    u = np.sum(v * a, axis=1)
    for _ in range(sweeps):
        moved = 0.0
        slack = b - a.sum(axis=0)
        for i in range(n):
            for mm in range(m):
                hi = min(x[i, mm], a[i, mm] + slack[mm])
                if hi <= 0:
                    continue
                vi, wi, zi = v[i, mm], w[i], z[i, mm]
                a0, u0 = a[i, mm], u[i]

                def g(t):
                    uu = u0 + vi * (t - a0)
                    if wi > 0 and uu <= 0:
                        return -np.inf
                    val = wi * np.log(uu) if wi > 0 else 0.0
                    return val - zi * t - ridge * t * t

                t_new = _golden_max(g, 0.0, hi)
                if g(t_new) > g(a0):
                    slack[mm] -= t_new - a0
                    u[i] = u0 + vi * (t_new - a0)
                    moved += abs(t_new - a0)
                    a[i, mm] = t_new
        # pairwise transfer along each column
        for mm in range(m):
            for i in range(n):
                for j in range(i + 1, n):
                    t_hi = min(x[i, mm] - a[i, mm], a[j, mm])
                    t_lo = -min(x[j, mm] - a[j, mm], a[i, mm])
                    if t_hi - t_lo <= 1e-15:
                        continue
                    vi, vj = v[i, mm], v[j, mm]
                    wi, wj = w[i], w[j]
                    ai0, aj0 = a[i, mm], a[j, mm]
                    ui0, uj0 = u[i], u[j]
                    dz = z[i, mm] - z[j, mm]

                    def h(t):
                        ui = ui0 + vi * t
                        uj = uj0 - vj * t
                        if (wi > 0 and ui <= 0) or (wj > 0 and uj <= 0):
                            return -np.inf
                        val = (wi * np.log(ui) if wi > 0 else 0.0) + (
                            wj * np.log(uj) if wj > 0 else 0.0
                        )
                        if ridge:
                            val -= ridge * ((ai0 + t) ** 2 + (aj0 - t) ** 2)
                        return val - dz * t

                    t_new = _golden_max(h, t_lo, t_hi)
                    if h(t_new) > h(0.0):
                        a[i, mm] = ai0 + t_new
                        a[j, mm] = aj0 - t_new
                        u[i] = ui0 + vi * t_new
                        u[j] = uj0 - vj * t_new
                        moved += abs(t_new)
        if moved < 1e-13:
            break
    return a


def _oracle_pgd(a, v, x, b, w, z, ridge, iters=400):
    step = 0.5
    f = _oracle_objective(a, v, x, w, z, ridge)
    best_f, stall = f, 0
    for _ in range(iters):
        u = np.sum(v * a, axis=1)
        coef = np.divide(w, u, out=np.zeros_like(w), where=w > 0)
        g = coef[:, None] * v - z - 2.0 * ridge * a
        improved = False
        for _ in range(25):
            cand = _project_box_caps(a + step * g, x, b)
            fc = _oracle_objective(cand, v, x, w, z, ridge)
            if fc >= f:
                a, f, improved = cand, fc, True
                step *= 1.2
                break
            step *= 0.4
        if not improved:
            break
        if f > best_f + 1e-13:
            best_f, stall = f, 0
        else:
            stall += 1
            if stall > 40:
                break
    return a


def pf_oracle(
    profile: RequestProfile,
    z: np.ndarray | None = None,
    cfg: SolverConfig | None = None,
    restarts: int = 3,
    iters: int = 300,
) -> Allocation:
    """Reference solver: multi-restart projected gradient ascent + polish.

    Only for cross-checking at small scale; raises DimensionTooLarge above
    ORACLE_MAX_COORDS coordinates.  Deterministic (fixed internal seed).
    """
    cfg = cfg or SolverConfig()
    if profile.dims.nm > ORACLE_MAX_COORDS:
        raise DimensionTooLarge(
            f"{profile.dims.nm} coordinates > oracle cap {ORACLE_MAX_COORDS}"
        )
    if z is None:
        z = np.zeros_like(profile.values)
    z = np.asarray(z, dtype=np.float64)
    _check_reachable(profile, cfg.feas_tol)
    v, x, b, w = profile.values, profile.demands, profile.budgets, profile.weights
    n, m = v.shape
    ridge = cfg.ridge

    interior = np.minimum(0.45 * x, 0.9 * b[None, :] / n)
    rng = np.random.default_rng(1234)
    best_a, best_f = None, -np.inf
    for r in range(max(1, restarts)):
        if r == 0:
            a0 = interior.copy()
        else:
            a0 = _project_box_caps(rng.uniform(0.0, 1.0, size=(n, m)) * x, x, b)
            if not np.isfinite(_oracle_objective(a0, v, x, w, z, ridge)):
                a0 = 0.5 * a0 + 0.5 * interior
        a1 = _oracle_pgd(a0, v, x, b, w, z, ridge, iters=iters)
        a1 = _oracle_polish(a1, v, x, b, w, z, ridge)
        # a second short descent pass guards against polish-reachable corners
        a1 = _oracle_pgd(a1, v, x, b, w, z, ridge, iters=max(60, iters // 4))
        a1 = _oracle_polish(a1, v, x, b, w, z, ridge)
        f1 = _oracle_objective(a1, v, x, w, z, ridge)
        if f1 > best_f:
            best_a, best_f = a1, f1
    return Allocation(best_a)
