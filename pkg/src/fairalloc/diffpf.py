"""Implicit differentiation through the fairness program's optimality system.

At a KKT point (a*, mu, nu, lam) of

    min_a  - sum_i w_i log(v_i . a_i) + <z, a> + ridge ||a||^2
    s.t.   0 <= a <= x,  sum_i a[i, m] <= b_m,

first-order perturbations of the inputs (v, x, w, z) move the solution
according to a square linear system  M [da; dmu; dnu; dlam] = h.  The
stationarity rows are used in product form (multiplied through by the
per-agent utility u_i = v_i . a_i), which keeps every block polynomial in
the problem data:

    row block 1 (stationarity):  [outer(psi_i, v_i) - 2*ridge*u_i*I | u_i*I |
                                  -u_i*I | -u_i*I_stacked]
    row block 2: diag(mu) da + diag(a) dmu          = 0
    row block 3: diag(nu) da + diag(a - x) dnu      = diag(nu) dx
    row block 4: diag(lam) D da + diag(Da - b) dlam = 0

with psi_i = mu_i - nu_i - lam - z_i - 2*ridge*a_i.  Backpropagation solves
the transposed system once per downstream gradient and reads off input
gradients in closed form.  Near-degenerate systems (weak complementarity,
too few tight constraints) are handled by a minimum-norm least-squares
solve, which selects a subgradient-style direction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatch, NumericalFailure, RequestProfile
from .pfsolve import KktSolution

# Least-squares fallback kicks in above this condition number.
COND_LIMIT = 1e12
ACT_TOL = 1e-6


@dataclass
class DiffSystem:
    """Assembled differential system plus the pieces needed for its RHS."""

    m_mat: np.ndarray  # (3NM + M, 3NM + M)
    psi: np.ndarray  # (N, M): mu - nu - lam - z - 2*ridge*a
    u: np.ndarray  # (N,) utilities at the KKT point
    n_agents: int
    n_resources: int


@dataclass
class PfGradients:
    """Input gradients of one scalar loss through the solved program."""

    d_v: np.ndarray
    d_x: np.ndarray
    d_w: np.ndarray
    d_z: np.ndarray
    used_least_squares: bool = False


def assemble_diff_system(kkt: KktSolution, profile: RequestProfile) -> DiffSystem:
    v, x, b = profile.values, profile.demands, profile.budgets
    n, m = v.shape
    a = kkt.allocation
    if a.shape != (n, m):
        raise DimensionMismatch(f"solution shape {a.shape} vs profile {(n, m)}")
    nm = n * m
    u = np.sum(v * a, axis=1)
    psi = kkt.mu - kkt.nu - kkt.lam[None, :] - kkt.z_used - 2.0 * kkt.ridge * a

    big = np.zeros((3 * nm + m, 3 * nm + m))
    for i in range(n):
        sl = slice(i * m, (i + 1) * m)
        blk = np.outer(psi[i], v[i])
        if kkt.ridge:
            blk = blk - 2.0 * kkt.ridge * u[i] * np.eye(m)
        big[sl, sl] = blk
        big[sl, nm + i * m : nm + (i + 1) * m] = u[i] * np.eye(m)
        big[sl, 2 * nm + i * m : 2 * nm + (i + 1) * m] = -u[i] * np.eye(m)
        big[sl, 3 * nm :] = -u[i] * np.eye(m)
    rng_nm = np.arange(nm)
    big[nm + rng_nm, rng_nm] = kkt.mu.ravel()
    big[nm + rng_nm, nm + rng_nm] = a.ravel()
    big[2 * nm + rng_nm, rng_nm] = kkt.nu.ravel()
    big[2 * nm + rng_nm, 2 * nm + rng_nm] = (a - x).ravel()
    col = a.sum(axis=0)
    for mm in range(m):
        big[3 * nm + mm, mm:nm:m] = kkt.lam[mm]  # lam_m * D row over agents
        big[3 * nm + mm, 3 * nm + mm] = col[mm] - b[mm]
    return DiffSystem(big, psi, u, n, m)


def is_differentiable(
    kkt: KktSolution, profile: RequestProfile, act_tol: float = ACT_TOL
) -> tuple[bool, int]:
    """Check the two regularity conditions for an invertible system.

    Returns (ok, n_tight): ok requires strict complementarity at every
    constraint (exactly one of slack/dual below act_tol) and at least
    N*M - N tight constraints among the 2*N*M + M inequalities.
    """
    a = kkt.allocation
    x, b = profile.demands, profile.budgets
    n, m = a.shape
    slacks = np.concatenate([a.ravel(), (x - a).ravel(), b - a.sum(axis=0)])
    duals = np.concatenate([kkt.mu.ravel(), kkt.nu.ravel(), kkt.lam])
    tight = slacks < act_tol
    small_dual = duals < act_tol
    strict = bool(np.all(tight ^ small_dual))
    count = int(tight.sum())
    return strict and count >= n * m - n, count


def _grads_from_dual(g: np.ndarray, sysm: DiffSystem, kkt: KktSolution, profile):
    n, m = sysm.n_agents, sysm.n_resources
    nm = n * m
    g_a = g[:nm].reshape(n, m)
    g_nu = g[2 * nm : 3 * nm].reshape(n, m)
    inner = np.sum(sysm.psi * g_a, axis=1)  # psi_i . g_a_i
    d_v = -(profile.weights[:, None] * g_a + kkt.allocation * inner[:, None])
    d_w = -np.sum(profile.values * g_a, axis=1)
    d_x = kkt.nu * g_nu
    d_z = sysm.u[:, None] * g_a
    return d_v, d_x, d_w, d_z


def backprop_pf(
    kkt: KktSolution,
    profile: RequestProfile,
    grad_a: np.ndarray,
    act_tol: float = ACT_TOL,
) -> PfGradients:
    """Pull a downstream gradient on a* back to the program inputs.

    Solves M^T g = [grad_a; 0; 0; 0] with a dense factorization when the
    system is regular, falling back to the minimum-norm least-squares
    solution when it is singular or ill-conditioned (> COND_LIMIT).
    """
    grad_a = np.asarray(grad_a, dtype=np.float64)
    if grad_a.shape != profile.values.shape:
        raise DimensionMismatch(
            f"grad_a shape {grad_a.shape} vs {profile.values.shape}"
        )
    sysm = assemble_diff_system(kkt, profile)
    nm = sysm.n_agents * sysm.n_resources
    rhs = np.zeros(sysm.m_mat.shape[0])
    rhs[:nm] = grad_a.ravel()

    ok, _ = is_differentiable(kkt, profile, act_tol)
    mt = sysm.m_mat.T
    g = None
    used_lstsq = False
    if ok:
        cond = np.linalg.cond(mt)
        if np.isfinite(cond) and cond <= COND_LIMIT:
            try:
                g = np.linalg.solve(mt, rhs)
            except np.linalg.LinAlgError:
                g = None
    if g is None or not np.all(np.isfinite(g)):
        used_lstsq = True
        g = np.linalg.lstsq(mt, rhs, rcond=None)[0]
    if not np.all(np.isfinite(g)):
        raise NumericalFailure("transposed optimality solve produced non-finite values")
    d_v, d_x, d_w, d_z = _grads_from_dual(g, sysm, kkt, profile)
    return PfGradients(d_v, d_x, d_w, d_z, used_lstsq)
