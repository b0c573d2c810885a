"""Shared domain types, welfare metrics, and serialization helpers.

An allocation problem has N agents and M divisible resources.  Agent i
reports a value row v_i >= 0 and a demand row x_i >= 0; resource m has a
budget b_m >= 0.  An allocation is an N x M matrix a with

    0 <= a <= x   (elementwise)     and     sum_i a[i, m] <= b_m.

Utility is additive and capped at the demand:

    u_i(a) = sum_m v[i, m] * min(a[i, m], x[i, m]),

so over-allocating past the demand never helps an agent.  Arrays are
float64 throughout; agent-major (C-order) raveling is the flattening
convention everywhere in this package.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# Feasibility slack accepted when validating allocations.
FEAS_TOL = 1e-7
# Utilities are clamped at this floor inside training losses only; metric
# functions raise on nonpositive utilities instead of clamping.
UTILITY_FLOOR = 1e-12


class FairAllocError(Exception):
    """Base class for errors raised by this package."""


class DimensionMismatch(FairAllocError):
    """Array shapes disagree with the declared problem dimensions."""


class NonpositiveUtility(FairAllocError):
    """A weighted agent ended up with utility <= 0 where positivity is required."""


class ZeroBudget(FairAllocError):
    """Total budget is zero, so efficiency is undefined."""


class Infeasible(FairAllocError):
    """The allocation program admits no interior point (e.g. an agent cannot
    reach positive utility)."""


class NoConvergence(FairAllocError):
    """Iterative solver failed to meet its tolerance within the iteration cap."""


class DimensionTooLarge(FairAllocError):
    """Problem exceeds the size cap of a brute-force reference routine."""


class NumericalFailure(FairAllocError):
    """Linear algebra broke down (non-finite values, failed factorization)."""


class UnsupportedMechanism(FairAllocError):
    """Operation is not defined for this mechanism arm."""


class DegenerateWeights(FairAllocError):
    """An operation requires strictly positive agent weights."""


class ResampleLimitExceeded(FairAllocError):
    """Rejection sampling failed to produce a valid profile within the retry cap."""


class StaleCache(FairAllocError):
    """A backward pass was fed a cache built from different parameters."""


@dataclass(frozen=True)
class ProblemDims:
    """Number of agents and resources."""

    n_agents: int
    n_resources: int

    def __post_init__(self):
        if self.n_agents < 1 or self.n_resources < 1:
            raise DimensionMismatch(
                f"need at least one agent and one resource, got {self}"
            )

    @property
    def nm(self) -> int:
        return self.n_agents * self.n_resources


@dataclass(frozen=True)
class Bounds:
    """Box bounds for reported values and demands.

    Values live in [v_lo, v_hi] and demands in [d_lo, d_hi].  Used both by
    the data generator and as the projection box for misreport searches.
    """

    v_lo: float = 0.1
    v_hi: float = 1.0
    d_lo: float = 0.0
    d_hi: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.v_lo <= self.v_hi):
            raise ValueError(f"bad value bounds [{self.v_lo}, {self.v_hi}]")
        if not (0.0 <= self.d_lo <= self.d_hi):
            raise ValueError(f"bad demand bounds [{self.d_lo}, {self.d_hi}]")

    def clip_values(self, v: np.ndarray) -> np.ndarray:
        return np.clip(v, self.v_lo, self.v_hi)

    def clip_demands(self, x: np.ndarray) -> np.ndarray:
        return np.clip(x, self.d_lo, self.d_hi)


def _as_array(name, arr, shape) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.shape != shape:
        raise DimensionMismatch(f"{name}: expected shape {shape}, got {out.shape}")
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name}: non-finite entries")
    return out


@dataclass(frozen=True)
class RequestProfile:
    """One allocation instance: reported values, demands, budgets, weights.

    values, demands: (N, M) arrays, nonnegative.
    budgets: (M,) array, nonnegative.
    weights: (N,) array, nonnegative (all-ones by default at construction
    sites; some routines additionally require strict positivity).

    Instances are frozen and their arrays are marked read-only, so a profile
    can be shared across threads.  Use ``replace_agent`` to build a misreport
    variant.
    """

    values: np.ndarray
    demands: np.ndarray
    budgets: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n, m = np.asarray(self.values).shape
        dims = ProblemDims(n, m)
        object.__setattr__(self, "values", _as_array("values", self.values, (n, m)))
        object.__setattr__(self, "demands", _as_array("demands", self.demands, (n, m)))
        object.__setattr__(self, "budgets", _as_array("budgets", self.budgets, (m,)))
        object.__setattr__(self, "weights", _as_array("weights", self.weights, (n,)))
        for name in ("values", "demands", "budgets", "weights"):
            arr = getattr(self, name)
            if np.any(arr < 0):
                raise ValueError(f"{name}: negative entries")
            arr.setflags(write=False)
        object.__setattr__(self, "_dims", dims)

    @property
    def dims(self) -> ProblemDims:
        return self._dims

    @property
    def n_agents(self) -> int:
        return self._dims.n_agents

    @property
    def n_resources(self) -> int:
        return self._dims.n_resources

    def replace_agent(self, i: int, values=None, demands=None) -> "RequestProfile":
        """Copy of the profile with agent i's reported row(s) swapped out."""
        v = self.values.copy()
        x = self.demands.copy()
        if values is not None:
            v[i] = np.asarray(values, dtype=np.float64)
        if demands is not None:
            x[i] = np.asarray(demands, dtype=np.float64)
        return RequestProfile(v, x, self.budgets.copy(), self.weights.copy())

    def drop_agent(self, i: int) -> "RequestProfile":
        """Profile with agent i removed (budgets unchanged)."""
        keep = [j for j in range(self.n_agents) if j != i]
        if not keep:
            raise DimensionMismatch("cannot drop the only agent")
        return RequestProfile(
            self.values[keep], self.demands[keep], self.budgets.copy(), self.weights[keep]
        )

    def to_json_dict(self) -> dict:
        return {
            "values": self.values.tolist(),
            "demands": self.demands.tolist(),
            "budgets": self.budgets.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RequestProfile":
        return cls(
            np.asarray(d["values"], dtype=np.float64),
            np.asarray(d["demands"], dtype=np.float64),
            np.asarray(d["budgets"], dtype=np.float64),
            np.asarray(d["weights"], dtype=np.float64),
        )


@dataclass(frozen=True)
class Allocation:
    """An (N, M) allocation matrix."""

    a: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.a, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionMismatch(f"allocation must be 2-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("allocation has non-finite entries")
        object.__setattr__(self, "a", arr)
        arr.setflags(write=False)

    def check_feasible(self, profile: RequestProfile, feas_tol: float = FEAS_TOL):
        """Raise if the allocation violates box or budget constraints beyond feas_tol."""
        a = self.a
        if a.shape != profile.values.shape:
            raise DimensionMismatch(
                f"allocation shape {a.shape} vs profile {profile.values.shape}"
            )
        if np.any(a < -feas_tol):
            raise ValueError(f"negative allocation entry: min {a.min()}")
        if np.any(a - profile.demands > feas_tol):
            raise ValueError("allocation exceeds a demand cap")
        over = a.sum(axis=0) - profile.budgets
        if np.any(over > feas_tol):
            raise ValueError(f"budget exceeded by {over.max()}")


def utility(a: np.ndarray, values: np.ndarray, demands: np.ndarray) -> np.ndarray:
    """Per-agent utilities u_i = sum_m v[i,m] * min(a[i,m], x[i,m]).

    `a` may be any nonnegative matrix of the right shape; amounts past the
    demand cap contribute nothing.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != values.shape or a.shape != demands.shape:
        raise DimensionMismatch(
            f"shapes disagree: a {a.shape}, v {values.shape}, x {demands.shape}"
        )
    return np.sum(values * np.minimum(a, demands), axis=1)


def profile_utility(alloc: Allocation, profile: RequestProfile) -> np.ndarray:
    return utility(alloc.a, profile.values, profile.demands)


def log_nsw(utils: np.ndarray, weights: np.ndarray) -> float:
    """Weighted log Nash social welfare sum_i w_i * log(u_i).

    Agents with weight exactly 0 are skipped; a weighted agent with u_i <= 0
    raises NonpositiveUtility (callers in training clamp at UTILITY_FLOOR
    before taking logs instead).
    """
    utils = np.asarray(utils, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if utils.shape != weights.shape:
        raise DimensionMismatch(f"utils {utils.shape} vs weights {weights.shape}")
    active = weights > 0
    if np.any(utils[active] <= 0):
        raise NonpositiveUtility(
            f"weighted agent has nonpositive utility: min {utils[active].min()}"
        )
    return float(np.sum(weights[active] * np.log(utils[active])))


def nsw(utils: np.ndarray, weights: np.ndarray) -> float:
    """Weighted Nash social welfare prod_i u_i ** w_i."""
    return float(np.exp(log_nsw(utils, weights)))


def efficiency(a: np.ndarray, budgets: np.ndarray) -> float:
    """Fraction of the total budget handed out: sum(a) / sum(b)."""
    total = float(np.sum(budgets))
    if total <= 0:
        raise ZeroBudget("total budget is zero")
    return float(np.sum(a) / total)


def save_profile(path, profile: RequestProfile):
    Path(path).write_text(json.dumps(profile.to_json_dict(), indent=2))


def load_profile(path) -> RequestProfile:
    return RequestProfile.from_json_dict(json.loads(Path(path).read_text()))


def save_profiles(path, profiles, meta: dict | None = None):
    """Write a batch of profiles plus optional metadata as one JSON document."""
    doc = {"meta": meta or {}, "profiles": [p.to_json_dict() for p in profiles]}
    Path(path).write_text(json.dumps(doc, indent=2))


def load_profiles(path):
    doc = json.loads(Path(path).read_text())
    profiles = [RequestProfile.from_json_dict(d) for d in doc["profiles"]]
    return profiles, doc.get("meta", {})
