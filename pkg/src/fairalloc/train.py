"""Constrained training of the learned mechanisms.

Maximizes mean logNSW subject to per-agent mean exploitability at most
epsilon, via primal-dual gradient descent-ascent: the primal step ascends

    mean logNSW - sum_i multiplier_i * (mean exploitability_i - epsilon)

and the dual step projects ``multiplier_i + lr_dual * slack_i`` back to the
nonnegative orthant.  The alternative alpha mode drops the constraints and
ascends ``mean logNSW - alpha * sum_i mean exploitability_i`` directly
(a fixed-multiplier special case, useful for sweeping out a trade-off
frontier).

The exploitability term is differentiated envelope-style: the inner
misreport search runs with a small attack budget, and its winner is then
treated as a constant while the payoff difference is back-propagated through
the mechanism (Danskin's rule).  Gains clipped at zero contribute no
gradient.

Share-network training is fully batched; the learned-tilt mechanism solves
one program per sample and per attack step, so it trains at a much smaller
scale.  A sample whose solve fails is dropped and counted; more than 5%
failures in one pass aborts the run.

Reproducibility: one master seed drives data, initialization, and attack
restarts through separate child streams, and all reductions are plain numpy
sums in fixed order, so identical configs give bit-identical histories on a
fixed floating-point platform.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import mlp as mlp_mod
from .core import (
    Infeasible,
    NoConvergence,
    NumericalFailure,
    ProblemDims,
    RequestProfile,
    UTILITY_FLOOR,
    utility,
)
from .datagen import DataSpec, sample_batch
from .exploit import AttackConfig, best_misreport, exploitability_vector, exs_attack_batch
from .mechanisms import (
    ExpfNet,
    ExsNet,
    Mechanism,
    Pa,
    Pf,
    allocate,
    exs_backward_batch,
    exs_forward_batch,
    exs_sizes,
    expf_backward,
    expf_forward,
    expf_sizes,
)
from .mlp import AdamState, MlpGrads, MlpParams, add_grads, scale_grads, zeros_like_grads
from .pfsolve import SolverConfig

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.05


def _training_attack() -> AttackConfig:
    # deliberately cheaper than the evaluation budget
    return AttackConfig(restarts=2, steps=50, polish_iters=8)


@dataclass(frozen=True)
class TrainConfig:
    """Objective mode, sample budget, step sizes and attack budget.

    Exactly one of epsilon (constrained mode) and alpha (penalty mode) must
    be set.  n_samples is the size of the fixed training pool; resample
    draws a fresh pool every outer iteration instead.
    """

    epsilon: float | None = None
    alpha: float | None = None
    n_samples: int = 32
    outer_iters: int = 200
    lr_primal: float = 1e-3
    lr_decay: float = 1.0  # geometric end-of-run multiplier for lr_primal
    lr_dual: float = 0.5
    attack: AttackConfig = field(default_factory=_training_attack)
    eval_every: int = 0  # checkpoint cadence when a run directory is given
    seed: int = 0
    hidden: tuple[int, ...] = mlp_mod.DEFAULT_HIDDEN
    zeta: float = 0.0  # strong-convexity ridge for the learned-tilt arm
    resample: bool = False

    def __post_init__(self):
        if (self.epsilon is None) == (self.alpha is None):
            raise ValueError("set exactly one of epsilon / alpha")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")

    def to_json_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "attack" in d:
            d["attack"] = AttackConfig.from_json_dict(d["attack"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


@dataclass
class TrainState:
    """Mutable training snapshot; gda_step returns an advanced copy."""

    mech_kind: str  # "exs" | "expf"
    params: MlpParams
    multipliers: np.ndarray  # (N,) Lagrange duals, always >= 0
    adam: AdamState
    iteration: int = 0
    history: list[dict] = field(default_factory=list)
    n_failures: int = 0


def build_mechanism(params, mech_kind: str, zeta: float = 0.0) -> Mechanism:
    """Mechanism object for a parameter set ('pf'/'pa' ignore params)."""
    if mech_kind == "exs":
        return ExsNet(params)
    if mech_kind == "expf":
        return ExpfNet(params, SolverConfig(), zeta)
    if mech_kind == "pf":
        return Pf()
    if mech_kind == "pa":
        return Pa()
    raise ValueError(f"unknown mechanism kind {mech_kind!r}")


def init_state(
    mech_kind: str,
    dims: ProblemDims,
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> TrainState:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if mech_kind == "exs":
        sizes = exs_sizes(dims, cfg.hidden)
    elif mech_kind == "expf":
        sizes = expf_sizes(dims, cfg.hidden)
    else:
        raise ValueError(f"cannot train mechanism kind {mech_kind!r}")
    params = mlp_mod.init_mlp(sizes, rng)
    return TrainState(
        mech_kind=mech_kind,
        params=params,
        multipliers=np.zeros(dims.n_agents),
        adam=mlp_mod.adam_init(params),
    )


def _stack_profiles(samples: list[RequestProfile]):
    dims = samples[0].dims
    for p in samples:
        if p.dims != dims:
            raise ValueError("all samples in a batch must share dimensions")
    v = np.stack([p.values for p in samples])
    x = np.stack([p.demands for p in samples])
    b = np.stack([p.budgets for p in samples])
    w = np.stack([p.weights for p in samples])
    return v, x, b, w


def _floored_lognsw(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    # training-loss variant: utilities floored instead of raising
    return np.sum(w * np.log(np.maximum(u, UTILITY_FLOOR)), axis=-1)


def empirical_objective(
    params,
    mech_kind: str,
    samples: list[RequestProfile],
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """Mean floored logNSW and per-agent mean exploitability over samples.

    Exploitability uses the attack budget in cfg.  Samples whose solve fails
    are dropped and counted; more than MAX_FAILURE_FRACTION failing aborts.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    mech = build_mechanism(params, mech_kind, cfg.zeta)
    n = samples[0].n_agents
    lognsw_sum, expl_sum = 0.0, np.zeros(n)
    n_ok = 0
    for p in samples:
        try:
            a = allocate(mech, p, rng)
            gains = exploitability_vector(mech, p, cfg.attack, rng)
        except (NoConvergence, NumericalFailure, Infeasible) as err:
            log.warning("sample dropped during evaluation: %s", err)
            continue
        u = utility(a.a, p.values, p.demands)
        lognsw_sum += float(_floored_lognsw(u, p.weights))
        expl_sum += gains
        n_ok += 1
    n_fail = len(samples) - n_ok
    if n_fail > MAX_FAILURE_FRACTION * len(samples):
        raise NumericalFailure(
            f"{n_fail}/{len(samples)} samples failed during evaluation"
        )
    return lognsw_sum / n_ok, expl_sum / n_ok


def _effective_multipliers(state: TrainState, cfg: TrainConfig) -> np.ndarray:
    if cfg.alpha is not None:
        return np.full_like(state.multipliers, cfg.alpha)
    return state.multipliers


def _exs_ascent_grads(params, v, x, b, w, mults, cfg, rng):
    """Batched Lagrangian ascent gradient for the share network.

    Returns (grads, mean lognsw, per-agent mean exploitability).
    """
    bsz, n, _ = v.shape
    a, cache = exs_forward_batch(params, v, x, b)
    u = np.sum(v * np.minimum(a, x), axis=2)
    lognsw = float(np.mean(_floored_lognsw(u, w)))
    live = u > UTILITY_FLOOR
    # d mean logNSW / d a; the min's demand branch passes no gradient to a
    seed = (w / np.maximum(u, UTILITY_FLOOR) * live)[:, :, None] * v * (a <= x)
    seed /= bsz

    total = zeros_like_grads(params)
    expl = np.zeros(n)
    for i in range(n):
        best_v, best_x, gains = exs_attack_batch(params, v, x, b, i, cfg.attack, rng)
        expl[i] = float(np.mean(gains))
        hot = gains > 0.0
        if mults[i] == 0.0 or not np.any(hot):
            continue
        # envelope gradient of mean gain_i: misreport held fixed.
        # truthful side enters with +mult (it is subtracted inside the gain)
        seed[hot, i, :] += (mults[i] / bsz) * v[hot, i, :] * (a[hot, i, :] <= x[hot, i, :])
        vr, xr = v.copy(), x.copy()
        vr[:, i, :] = best_v
        xr[:, i, :] = best_x
        ar, cr = exs_forward_batch(params, vr, xr, b)
        seed_r = np.zeros_like(ar)
        seed_r[hot, i, :] = (
            -(mults[i] / bsz) * v[hot, i, :] * (ar[hot, i, :] <= x[hot, i, :])
        )
        g_r, _, _ = exs_backward_batch(params, cr, seed_r)
        total = add_grads(total, g_r)
    g_t, _, _ = exs_backward_batch(params, cache, seed)
    total = add_grads(total, g_t)
    return total, lognsw, expl


def _expf_ascent_grads(params, samples, mults, cfg, rng):
    """Per-sample Lagrangian ascent gradient for the learned-tilt arm."""
    n = samples[0].n_agents
    mech = build_mechanism(params, "expf", cfg.zeta)
    total = zeros_like_grads(params)
    lognsw_sum, expl_sum = 0.0, np.zeros(n)
    n_ok = 0
    for p in samples:
        try:
            alloc, kkt, z = expf_forward(params, p, None, cfg.zeta)
            a = alloc.a
            attacks = [
                best_misreport(mech, p, i, cfg.attack, rng) for i in range(n)
            ]
        except (NoConvergence, NumericalFailure, Infeasible) as err:
            log.warning("sample dropped during training: %s", err)
            continue
        u = utility(a, p.values, p.demands)
        lognsw_sum += float(_floored_lognsw(u, p.weights))
        live = u > UTILITY_FLOOR
        seed = (p.weights / np.maximum(u, UTILITY_FLOOR) * live)[:, None] * (
            p.values * (a <= p.demands)
        )
        grads_sample = None
        for i, att in enumerate(attacks):
            expl_sum[i] += att.gain
            if att.gain <= 0.0 or mults[i] == 0.0:
                continue
            seed[i] += mults[i] * p.values[i] * (a[i] <= p.demands[i])
            reported = p.replace_agent(i, att.best_v, att.best_x)
            ar, kr, zr = expf_forward(params, reported, None, cfg.zeta)
            seed_r = np.zeros_like(a)
            seed_r[i] = -mults[i] * p.values[i] * (ar.a[i] <= p.demands[i])
            g_r, _, _ = expf_backward(params, reported, kr, zr, seed_r)
            grads_sample = g_r if grads_sample is None else add_grads(grads_sample, g_r)
        g_t, _, _ = expf_backward(params, p, kkt, z, seed)
        grads_sample = g_t if grads_sample is None else add_grads(grads_sample, g_t)
        total = add_grads(total, grads_sample)
        n_ok += 1
    n_fail = len(samples) - n_ok
    if n_fail > MAX_FAILURE_FRACTION * len(samples):
        raise NumericalFailure(f"{n_fail}/{len(samples)} samples failed in one pass")
    return (
        scale_grads(total, 1.0 / n_ok),
        lognsw_sum / n_ok,
        expl_sum / n_ok,
        n_fail,
    )


def gda_step(
    state: TrainState,
    samples: list[RequestProfile],
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> TrainState:
    """One primal ascent + dual projection step; returns the next state.

    With both step sizes zero the parameters, optimizer moments and
    multipliers come back unchanged (only the counter and history move).
    """
    rng = np.random.default_rng(cfg.seed + state.iteration) if rng is None else rng
    mults = _effective_multipliers(state, cfg)
    n_fail = 0
    if state.mech_kind == "exs":
        v, x, b, w = _stack_profiles(samples)
        grads, lognsw, expl = _exs_ascent_grads(
            state.params, v, x, b, w, mults, cfg, rng
        )
    else:
        grads, lognsw, expl, n_fail = _expf_ascent_grads(
            state.params, samples, mults, cfg, rng
        )

    params, adam = state.params, state.adam
    if cfg.lr_primal > 0.0:
        # geometric decay from lr_primal down to lr_primal * lr_decay
        frac = state.iteration / max(1, cfg.outer_iters - 1)
        lr = cfg.lr_primal * cfg.lr_decay ** min(1.0, frac)
        # adam minimizes, so feed the negated ascent gradient
        adam = mlp_mod.adam_step(adam, scale_grads(grads, -1.0), lr)
        params = adam.params

    multipliers = state.multipliers
    if cfg.epsilon is not None and cfg.lr_dual > 0.0:
        with np.errstate(invalid="ignore"):  # epsilon = inf gives -inf slack
            multipliers = np.maximum(
                0.0, multipliers + cfg.lr_dual * (expl - cfg.epsilon)
            )

    row = {
        "iteration": state.iteration + 1,
        "lognsw": lognsw,
        "expl": expl.tolist(),
        "multipliers": multipliers.tolist(),
    }
    return TrainState(
        mech_kind=state.mech_kind,
        params=params,
        multipliers=multipliers,
        adam=adam,
        iteration=state.iteration + 1,
        history=state.history + [row],
        n_failures=state.n_failures + n_fail,
    )


def _write_history_csv(path, history: list[dict], n_agents: int) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(
            ["iteration", "lognsw"]
            + [f"expl_{i}" for i in range(n_agents)]
            + [f"mult_{i}" for i in range(n_agents)]
        )
        for row in history:
            wr.writerow(
                [row["iteration"], row["lognsw"]] + row["expl"] + row["multipliers"]
            )


def train(
    mech_kind: str,
    dims: ProblemDims,
    cfg: TrainConfig,
    run_dir: str | None = None,
    data_spec: DataSpec | None = None,
) -> tuple[Mechanism, list[dict]]:
    """Full training loop; returns (trained mechanism, metric history).

    When run_dir is given it receives a config snapshot, the metric history
    as CSV, and checkpoints every eval_every iterations plus a final one.
    """
    rng = np.random.default_rng(cfg.seed)
    data_rng, init_rng, attack_rng = rng.spawn(3)
    spec = data_spec if data_spec is not None else DataSpec(dims, seed=cfg.seed)
    pool = sample_batch(spec, cfg.n_samples, data_rng)
    state = init_state(mech_kind, dims, cfg, init_rng)

    if run_dir:
        os.makedirs(run_dir, exist_ok=True)
        snapshot = {
            "mech_kind": mech_kind,
            "n_agents": dims.n_agents,
            "n_resources": dims.n_resources,
            "config": cfg.to_json_dict(),
            "data_spec": spec.to_json_dict(),
        }
        with open(os.path.join(run_dir, "config.json"), "w", encoding="utf-8") as fh:
            json.dump(snapshot, fh, indent=1)

    for k in range(cfg.outer_iters):
        if cfg.resample and k > 0:
            pool = sample_batch(spec, cfg.n_samples, data_rng)
        state = gda_step(state, pool, cfg, attack_rng)
        last = state.history[-1]
        if not np.isfinite(last["lognsw"]):
            raise NumericalFailure(
                f"non-finite training objective at iteration {state.iteration}: "
                f"lognsw={last['lognsw']}, expl={last['expl']}"
            )
        if run_dir and cfg.eval_every and state.iteration % cfg.eval_every == 0:
            mlp_mod.save_params(
                os.path.join(run_dir, f"ckpt_{state.iteration:06d}.npz"),
                state.params,
                {"iteration": state.iteration, "mech_kind": mech_kind},
            )
            _write_history_csv(
                os.path.join(run_dir, "history.csv"), state.history, dims.n_agents
            )

    if run_dir:
        mlp_mod.save_params(
            os.path.join(run_dir, "ckpt_final.npz"),
            state.params,
            {"iteration": state.iteration, "mech_kind": mech_kind},
        )
        _write_history_csv(
            os.path.join(run_dir, "history.csv"), state.history, dims.n_agents
        )
    return build_mechanism(state.params, mech_kind, cfg.zeta), state.history
