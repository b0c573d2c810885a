"""Synthetic request-profile sampling.

Training draws: values Unif(0.1, 1) i.i.d.; demands are a Unif(0.1, 1)
magnitude times a Bernoulli(1/2) keep-mask, so about half of all demand
entries are exactly zero; budgets default to N/2 per resource, which keeps
supply genuinely scarce; weights are all ones.

Distribution-shift test sets swap the Unif(0.1, 1) base for the scaled beta
family 0.9*Beta(alpha, beta) + 0.1 on the same support; alpha = beta = 1
recovers the uniform base in distribution.

A draw is rejected and fully redrawn whenever some weighted agent cannot
obtain positive utility from it (an all-zero effective demand row), because
the proportional-fairness objective needs every weighted agent's utility
strictly positive.  Redrawing whole profiles leaves the marginal distribution
of the accepted agents' positive coordinates untouched.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .core import ProblemDims, RequestProfile, ResampleLimitExceeded

log = logging.getLogger(__name__)

RESAMPLE_LIMIT = 100


@dataclass(frozen=True)
class UniformDist:
    """Unif(lo, hi)."""

    lo: float = 0.1
    hi: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lo < self.hi:
            raise ValueError(f"bad uniform range [{self.lo}, {self.hi}]")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, shape)


@dataclass(frozen=True)
class ScaledBetaDist:
    """0.9 * Beta(alpha, beta) + 0.1, supported on [0.1, 1]."""

    alpha: float
    beta: float

    def __post_init__(self):
        if self.alpha <= 0.0 or self.beta <= 0.0:
            raise ValueError(f"beta shape parameters must be positive, "
                             f"got ({self.alpha}, {self.beta})")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        return 0.9 * rng.beta(self.alpha, self.beta, shape) + 0.1


BaseDist = UniformDist | ScaledBetaDist


@dataclass(frozen=True)
class MaskedDist:
    """A base magnitude times an independent Bernoulli(p) keep-mask."""

    base: BaseDist = field(default_factory=UniformDist)
    p: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"mask probability {self.p} outside [0, 1]")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        mag = self.base.sample(rng, shape)  # magnitude first, then the mask
        return mag * (rng.random(shape) < self.p)


@dataclass(frozen=True)
class DataSpec:
    """What to sample: dimensions, distributions, budgets, weights, seed.

    budgets: None for the N/2-per-resource default, a scalar for a constant
    vector, or an explicit per-resource tuple.  weights: None for all ones.
    The seed is only consulted when no generator is passed to the sampling
    functions, and is embedded in saved batches for provenance.
    """

    dims: ProblemDims
    value_dist: BaseDist = field(default_factory=UniformDist)
    demand_dist: MaskedDist = field(default_factory=MaskedDist)
    budgets: float | tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None
    seed: int = 0

    def budget_vector(self) -> np.ndarray:
        m = self.dims.n_resources
        if self.budgets is None:
            return np.full(m, self.dims.n_agents / 2.0)
        if np.isscalar(self.budgets):
            return np.full(m, float(self.budgets))
        out = np.asarray(self.budgets, dtype=np.float64)
        if out.shape != (m,):
            raise ValueError(f"budgets: expected {m} entries, got {out.shape}")
        return out

    def weight_vector(self) -> np.ndarray:
        n = self.dims.n_agents
        if self.weights is None:
            return np.ones(n)
        out = np.asarray(self.weights, dtype=np.float64)
        if out.shape != (n,):
            raise ValueError(f"weights: expected {n} entries, got {out.shape}")
        return out

    def to_json_dict(self) -> dict:
        return {
            "n_agents": self.dims.n_agents,
            "n_resources": self.dims.n_resources,
            "value_dist": _dist_to_json(self.value_dist),
            "demand_dist": _dist_to_json(self.demand_dist),
            "budgets": self.budgets if self.budgets is None or np.isscalar(self.budgets)
            else list(self.budgets),
            "weights": None if self.weights is None else list(self.weights),
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DataSpec":
        budgets = d.get("budgets")
        weights = d.get("weights")
        return cls(
            dims=ProblemDims(d["n_agents"], d["n_resources"]),
            value_dist=_dist_from_json(d["value_dist"]),
            demand_dist=_dist_from_json(d["demand_dist"]),
            budgets=tuple(budgets) if isinstance(budgets, list) else budgets,
            weights=tuple(weights) if isinstance(weights, list) else weights,
            seed=int(d.get("seed", 0)),
        )


def beta_shifted(spec: DataSpec, alpha: float, beta: float | None = None) -> DataSpec:
    """Copy of spec with both bases swapped to 0.9*Beta(alpha, beta) + 0.1
    (beta defaults to alpha); the demand keep-probability is preserved."""
    bb = alpha if beta is None else beta
    dist = ScaledBetaDist(alpha, bb)
    return DataSpec(
        dims=spec.dims,
        value_dist=dist,
        demand_dist=MaskedDist(dist, spec.demand_dist.p),
        budgets=spec.budgets,
        weights=spec.weights,
        seed=spec.seed,
    )


def _dist_to_json(d) -> dict:
    if isinstance(d, UniformDist):
        return {"kind": "uniform", "lo": d.lo, "hi": d.hi}
    if isinstance(d, ScaledBetaDist):
        return {"kind": "scaled_beta", "alpha": d.alpha, "beta": d.beta}
    if isinstance(d, MaskedDist):
        return {"kind": "masked", "base": _dist_to_json(d.base), "p": d.p}
    raise TypeError(f"unknown distribution {type(d).__name__}")


def _dist_from_json(d: dict):
    kind = d["kind"]
    if kind == "uniform":
        return UniformDist(d["lo"], d["hi"])
    if kind == "scaled_beta":
        return ScaledBetaDist(d["alpha"], d["beta"])
    if kind == "masked":
        return MaskedDist(_dist_from_json(d["base"]), d["p"])
    raise ValueError(f"unknown distribution kind {kind!r}")


def _all_weighted_agents_viable(v, x, b, w) -> bool:
    # an agent is viable iff some resource has v>0, x>0 and b>0 all at once
    viable = np.any((v > 0.0) & (x > 0.0) & (b > 0.0)[None, :], axis=1)
    return bool(np.all(viable[w > 0.0]))


def sample_profile(spec: DataSpec, rng: np.random.Generator | None = None) -> RequestProfile:
    """One draw from the spec, redrawn until every weighted agent is viable.

    Raises ResampleLimitExceeded after RESAMPLE_LIMIT rejections.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    n, m = spec.dims.n_agents, spec.dims.n_resources
    b = spec.budget_vector()
    w = spec.weight_vector()
    for attempt in range(RESAMPLE_LIMIT + 1):
        v = spec.value_dist.sample(rng, (n, m))
        x = spec.demand_dist.sample(rng, (n, m))
        if _all_weighted_agents_viable(v, x, b, w):
            if attempt:
                log.debug("profile accepted after %d resample(s)", attempt)
            return RequestProfile(v, x, b, w)
    raise ResampleLimitExceeded(
        f"no viable profile in {RESAMPLE_LIMIT} redraws; "
        f"spec {spec.dims.n_agents}x{spec.dims.n_resources}, p={spec.demand_dist.p}"
    )


def sample_batch(
    spec: DataSpec, length: int, rng: np.random.Generator | None = None
) -> list[RequestProfile]:
    """length independent draws.  Each profile uses its own child stream, so
    a batch is reproducible regardless of how it is chunked or parallelized."""
    if length < 0:
        raise ValueError(f"negative batch length {length}")
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    if length == 0:
        return []
    return [sample_profile(spec, child) for child in rng.spawn(length)]


def save_batch(path, spec: DataSpec, profiles: list[RequestProfile]) -> None:
    payload = {
        "spec": spec.to_json_dict(),
        "profiles": [p.to_json_dict() for p in profiles],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)


def load_batch(path) -> tuple[DataSpec, list[RequestProfile]]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    spec = DataSpec.from_json_dict(payload["spec"])
    profiles = [RequestProfile.from_json_dict(d) for d in payload["profiles"]]
    return spec, profiles
