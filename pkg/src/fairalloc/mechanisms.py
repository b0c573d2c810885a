"""Allocation mechanisms: exact fairness solves, the incentive-compatible
partial-allocation rule, their mixture, and two learned mechanisms.

Learned mechanisms share an input layout: concat(values.ravel(),
demands.ravel(), budgets), so the network sees the full reported profile.

ExsNet ("softmax shares"): the network emits one score per (agent, resource)
plus a per-resource waste slot; a softmax across the N+1 slots of each
resource turns scores into budget shares, and the demand cap is applied
last.  Feasible by construction, no solve needed, so it is the cheapest arm
at inference time.

ExpfNet ("learned tilt"): the network emits a linear tilt z that is added to
the fairness objective before solving; gradients flow through the solver via
diffpf.  Exact solve at inference time, so it is the most expensive arm.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Union

import numpy as np

from . import mlp as mlp_mod
from .core import (
    Allocation,
    DegenerateWeights,
    DimensionMismatch,
    ProblemDims,
    RequestProfile,
    UnsupportedMechanism,
)
from .diffpf import backprop_pf
from .mlp import MlpCache, MlpGrads, MlpParams
from .pfsolve import KktSolution, SolverConfig, solve_pf, solve_regularized_pf


@dataclass(frozen=True)
class Pf:
    """Exact proportional fairness."""

    cfg: SolverConfig = SolverConfig()


@dataclass(frozen=True)
class Pa:
    """Partial allocation: PF scaled back per agent by its externality."""

    cfg: SolverConfig = SolverConfig()


@dataclass(frozen=True)
class Mixture:
    """Coin flip between Pf (probability rho) and Pa."""

    rho: float
    cfg: SolverConfig = SolverConfig()

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [0, 1], got {self.rho}")


@dataclass(frozen=True)
class ExsNet:
    params: MlpParams


@dataclass(frozen=True)
class ExpfNet:
    params: MlpParams
    cfg: SolverConfig = SolverConfig()
    zeta: float = 0.0


Mechanism = Union[Pf, Pa, Mixture, ExsNet, ExpfNet]


def input_dim(dims: ProblemDims) -> int:
    return 2 * dims.nm + dims.n_resources


def exs_output_dim(dims: ProblemDims) -> int:
    return (dims.n_agents + 1) * dims.n_resources


def exs_sizes(dims: ProblemDims, hidden=mlp_mod.DEFAULT_HIDDEN) -> tuple:
    return (input_dim(dims), *hidden, exs_output_dim(dims))


def expf_sizes(dims: ProblemDims, hidden=mlp_mod.DEFAULT_HIDDEN) -> tuple:
    return (input_dim(dims), *hidden, dims.nm)


def _stack_inputs(v: np.ndarray, x: np.ndarray, b: np.ndarray) -> np.ndarray:
    # batched: v, x are (B, N, M); b is (B, M)
    bsz = v.shape[0]
    return np.concatenate(
        [v.reshape(bsz, -1), x.reshape(bsz, -1), b.reshape(bsz, -1)], axis=1
    )


@dataclass
class ExsCache:
    mlp_cache: MlpCache
    tilde: np.ndarray  # (B, N+1, M) softmax shares
    prop: np.ndarray  # (B, N, M) proposed = share * budget
    demands: np.ndarray
    budgets: np.ndarray
    cap_branch: np.ndarray  # bool, True where the demand cap was the min


def exs_forward_batch(
    params: MlpParams, v: np.ndarray, x: np.ndarray, b: np.ndarray
) -> tuple[np.ndarray, ExsCache]:
    """Vectorized share-network forward over a batch of profiles."""
    bsz, n, m = v.shape
    out, cache = mlp_mod.forward(params, _stack_inputs(v, x, b))
    if out.shape[-1] != (n + 1) * m:
        raise DimensionMismatch(
            f"network output {out.shape[-1]} vs expected {(n + 1) * m}"
        )
    scores = out.reshape(bsz, n + 1, m)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    tilde = e / e.sum(axis=1, keepdims=True)
    prop = tilde[:, :n, :] * b[:, None, :]
    a = np.minimum(prop, x)
    cap_branch = prop > x  # ties route gradients through the share branch
    return a, ExsCache(cache, tilde, prop, x, b, cap_branch)


def exs_backward_batch(
    params: MlpParams, cache: ExsCache, grad_a: np.ndarray
) -> tuple[MlpGrads, np.ndarray, np.ndarray]:
    """Pull d loss / d allocation back to parameters and reported (v, x).

    grad_x combines the cap branch of the min with the network-input path.
    """
    bsz, n1, m = cache.tilde.shape
    n = n1 - 1
    g_prop = np.where(cache.cap_branch, 0.0, grad_a)
    g_x_cap = np.where(cache.cap_branch, grad_a, 0.0)
    g_tilde = np.zeros((bsz, n1, m))
    g_tilde[:, :n, :] = g_prop * cache.budgets[:, None, :]
    # softmax over the slot axis: ds = p * (g - sum_k p_k g_k)
    p = cache.tilde
    inner = np.sum(p * g_tilde, axis=1, keepdims=True)
    ds = p * (g_tilde - inner)
    grads, grad_in = mlp_mod.backward(params, cache.mlp_cache, ds.reshape(bsz, -1))
    nm = n * m
    grad_v = grad_in[:, :nm].reshape(bsz, n, m)
    grad_x = grad_in[:, nm : 2 * nm].reshape(bsz, n, m) + g_x_cap
    return grads, grad_v, grad_x


def exs_forward(params: MlpParams, profile: RequestProfile) -> tuple[Allocation, ExsCache]:
    a, cache = exs_forward_batch(
        params,
        profile.values[None],
        profile.demands[None],
        profile.budgets[None],
    )
    return Allocation(a[0]), cache


def exs_backward(
    params: MlpParams, cache: ExsCache, grad_a: np.ndarray
) -> tuple[MlpGrads, np.ndarray, np.ndarray]:
    grads, grad_v, grad_x = exs_backward_batch(params, cache, grad_a[None])
    return grads, grad_v[0], grad_x[0]


def expf_forward(
    params: MlpParams,
    profile: RequestProfile,
    cfg: SolverConfig | None = None,
    zeta: float = 0.0,
) -> tuple[Allocation, KktSolution, np.ndarray]:
    """Learned-tilt forward: network -> z, then a regularized exact solve."""
    cfg = cfg or SolverConfig()
    if zeta != cfg.ridge:
        cfg = dataclasses.replace(cfg, ridge=zeta)
    inp = _stack_inputs(
        profile.values[None], profile.demands[None], profile.budgets[None]
    )[0]
    z_flat, _ = mlp_mod.forward(params, inp)
    z = z_flat.reshape(profile.values.shape)
    kkt = solve_regularized_pf(profile, z, cfg)
    return kkt.a_star, kkt, z


def _expf_pull(
    params: MlpParams, profile: RequestProfile, kkt: KktSolution, grad_a: np.ndarray
):
    """Shared backward core; also reports whether the least-squares
    (subgradient) path was taken."""
    pf_grads = backprop_pf(kkt, profile, grad_a)
    inp = _stack_inputs(
        profile.values[None], profile.demands[None], profile.budgets[None]
    )[0]
    _, cache = mlp_mod.forward(params, inp)
    grads, grad_in = mlp_mod.backward(params, cache, pf_grads.d_z.ravel())
    nm = profile.dims.nm
    grad_v = pf_grads.d_v + grad_in[:nm].reshape(profile.values.shape)
    grad_x = pf_grads.d_x + grad_in[nm : 2 * nm].reshape(profile.values.shape)
    return grads, grad_v, grad_x, pf_grads.used_least_squares


def expf_backward(
    params: MlpParams,
    profile: RequestProfile,
    kkt: KktSolution,
    z: np.ndarray,
    grad_a: np.ndarray,
) -> tuple[MlpGrads, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss wrt network parameters and reported (v, x).

    Both the direct solver path (through z) and the network-input paths of
    v and x are included.
    """
    if not np.allclose(z, kkt.z_used):
        raise DimensionMismatch("z does not match the tilt stored in the solution")
    grads, grad_v, grad_x, _ = _expf_pull(params, profile, kkt, grad_a)
    return grads, grad_v, grad_x


def pa_allocate(profile: RequestProfile, cfg: SolverConfig | None = None) -> Allocation:
    """Partial allocation: each agent keeps the fraction of its fair share
    that matches the externality it imposes on the others.

    f_i = prod_{j != i} (u_j(full solve) / u_j(solve without i))^{w_j / w_i},
    clipped into [0, 1].  Requires strictly positive weights.
    """
    cfg = cfg or SolverConfig()
    w = profile.weights
    if np.any(w <= 0):
        raise DegenerateWeights(f"partial allocation needs w > 0, got {w}")
    full = solve_pf(profile, cfg)
    a_full = full.allocation
    u_full = np.sum(profile.values * a_full, axis=1)
    n = profile.n_agents
    if n == 1:
        return Allocation(a_full.copy())
    fracs = np.ones(n)
    for i in range(n):
        others = [j for j in range(n) if j != i]
        sub = profile.drop_agent(i)
        a_sub = solve_pf(sub, cfg).allocation
        u_sub = np.sum(sub.values * a_sub, axis=1)
        log_f = float(
            np.sum(w[others] * (np.log(u_full[others]) - np.log(u_sub))) / w[i]
        )
        fracs[i] = min(1.0, np.exp(min(log_f, 0.0)))
    return Allocation(fracs[:, None] * a_full)


def mixture_allocate(
    rho: float,
    profile: RequestProfile,
    rng: np.random.Generator,
    cfg: SolverConfig | None = None,
) -> Allocation:
    """Bernoulli(rho) coin: heads plays exact PF, tails plays PA."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must be in [0, 1], got {rho}")
    if rng.random() < rho:
        return solve_pf(profile, cfg or SolverConfig()).a_star
    return pa_allocate(profile, cfg)


def allocate(
    mech: Mechanism, profile: RequestProfile, rng: np.random.Generator | None = None
) -> Allocation:
    """Run one mechanism on one profile.  rng is only consumed by Mixture."""
    if isinstance(mech, Pf):
        return solve_pf(profile, mech.cfg).a_star
    if isinstance(mech, Pa):
        return pa_allocate(profile, mech.cfg)
    if isinstance(mech, Mixture):
        if rng is None:
            raise ValueError("Mixture needs an rng")
        return mixture_allocate(mech.rho, profile, rng, mech.cfg)
    if isinstance(mech, ExsNet):
        return exs_forward(mech.params, profile)[0]
    if isinstance(mech, ExpfNet):
        return expf_forward(mech.params, profile, mech.cfg, mech.zeta)[0]
    raise UnsupportedMechanism(f"unknown mechanism {type(mech).__name__}")


def save_mechanism(path, mech: Mechanism):
    """Checkpoint any mechanism arm; network weights round-trip bit-exact."""
    meta = {"kind": type(mech).__name__}
    if isinstance(mech, (Pf, Pa, Mixture, ExpfNet)):
        meta["cfg"] = dataclasses.asdict(mech.cfg)
    if isinstance(mech, Mixture):
        meta["rho"] = mech.rho
    if isinstance(mech, ExpfNet):
        meta["zeta"] = mech.zeta
    params = mech.params if isinstance(mech, (ExsNet, ExpfNet)) else None
    if params is None:
        params = MlpParams((np.zeros((1, 1)),), (np.zeros(1),))  # placeholder
        meta["no_params"] = True
    mlp_mod.save_params(path, params, meta)


def load_mechanism(path) -> Mechanism:
    params, meta = mlp_mod.load_params(path)
    kind = meta["kind"]
    cfg = SolverConfig(**meta["cfg"]) if "cfg" in meta else SolverConfig()
    if kind == "Pf":
        return Pf(cfg)
    if kind == "Pa":
        return Pa(cfg)
    if kind == "Mixture":
        return Mixture(meta["rho"], cfg)
    if kind == "ExsNet":
        return ExsNet(params)
    if kind == "ExpfNet":
        return ExpfNet(params, cfg, meta.get("zeta", 0.0))
    raise UnsupportedMechanism(f"unknown checkpoint kind {kind}")
