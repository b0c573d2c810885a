"""Batch experiment harness.

Each ``run_*`` function evaluates one study end to end and returns plot-ready
tables (lists of flat rows); ``run_experiment`` dispatches on the experiment
kind, writes one CSV per table plus a JSON manifest (spec, seed, code
version, wall times), and returns the tables.  Everything is driven by a
single seed, so a run is reproducible bit-for-bit from (spec, seed).

Experiments:

* gaming-curve: how much agent 1 gains on a fixed two-agent instance by
  scaling its reported preference ratio, under exact proportional fairness
  (and optionally a learned-tilt checkpoint).
* compare: NSW / exploitability / efficiency of all mechanism arms on an
  evaluation batch.
* frontier: NSW-vs-exploitability trade-off of penalty-mode training across
  a grid of penalty weights, against the PF-PA mixture interpolation line.
* budget-sweep: metrics as the per-resource budget scales.
* mismatch: a net trained on the uniform family evaluated under scaled-beta
  test distributions.
* heatmap: agent-1 allocation surface over its reported value pair, for the
  exact program and optionally a learned-tilt checkpoint.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
import subprocess
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import ProblemDims, RequestProfile, efficiency, nsw, utility
from .datagen import DataSpec, beta_shifted, sample_batch
from .exploit import GRID_MAX_RESOURCES, AttackConfig, exploitability_vector
from .mechanisms import (
    ExpfNet,
    ExsNet,
    Mechanism,
    Mixture,
    Pa,
    Pf,
    allocate,
    expf_forward,
    pa_allocate,
)
from .mlp import load_params
from .pfsolve import solve_pf
from .train import TrainConfig, train

KINDS = (
    "gaming-curve",
    "compare",
    "frontier",
    "budget-sweep",
    "mismatch",
    "heatmap",
)

MANIFEST_SCHEMA_VERSION = 1


def reference_profile() -> RequestProfile:
    """Two-agent, two-resource instance with a known profitable misreport
    for agent 1 (under-reporting its second value)."""
    return RequestProfile(
        values=np.array([[1.0, 0.5], [1.0, 0.25]]),
        demands=np.ones((2, 2)),
        budgets=np.array([1.0, 1.0]),
        weights=np.ones(2),
    )


def _default_eval_attack() -> AttackConfig:
    # strong enough for honest estimates, cheap enough for batch sweeps
    return AttackConfig(restarts=4, steps=120, polish_iters=16)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything a run needs: kind, dimensions, data, budgets, knobs.

    Per-kind grids (ratios, alphas, budgets, betas) fall back to the
    defaults used in the corresponding study when left as None.
    """

    kind: str
    dims: ProblemDims = field(default_factory=lambda: ProblemDims(2, 2))
    mechanisms: tuple[str, ...] = ("pf", "pa", "mixture", "exs")
    data: DataSpec | None = None
    training: TrainConfig | None = None
    attack: AttackConfig | None = None
    eval_samples: int = 50
    out_dir: str | None = None
    seed: int = 0
    threads: int = 1
    checkpoint: str | None = None
    ratios: tuple[float, ...] | None = None  # gaming-curve grid
    alphas: tuple[float, ...] | None = None  # frontier penalty weights
    budgets: tuple[float, ...] | None = None  # budget-sweep levels
    betas: tuple[float, ...] | None = None  # mismatch shape grid
    rho: float = 0.5  # mixture weight in compare
    grid_resolution: int = 25  # heatmap
    fixed_values: tuple[float, ...] = (1.0, 0.25)  # heatmap agent-2 report
    fixed_demands: tuple[float, ...] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if self.eval_samples < 1:
            raise ValueError("eval_samples must be >= 1")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def data_spec(self) -> DataSpec:
        return self.data if self.data is not None else DataSpec(self.dims, seed=self.seed)

    def train_config(self) -> TrainConfig:
        if self.training is not None:
            return self.training
        return TrainConfig(epsilon=1e-3, n_samples=64, outer_iters=500, seed=self.seed)

    def eval_attack(self) -> AttackConfig:
        return self.attack if self.attack is not None else _default_eval_attack()

    def to_json_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "n_agents": self.dims.n_agents,
            "n_resources": self.dims.n_resources,
            "mechanisms": list(self.mechanisms),
            "data": None if self.data is None else self.data.to_json_dict(),
            "training": None if self.training is None else self.training.to_json_dict(),
            "attack": None if self.attack is None else self.attack.to_json_dict(),
            "eval_samples": self.eval_samples,
            "out_dir": self.out_dir,
            "seed": self.seed,
            "threads": self.threads,
            "checkpoint": self.checkpoint,
            "ratios": None if self.ratios is None else list(self.ratios),
            "alphas": None if self.alphas is None else list(self.alphas),
            "budgets": None if self.budgets is None else list(self.budgets),
            "betas": None if self.betas is None else list(self.betas),
            "rho": self.rho,
            "grid_resolution": self.grid_resolution,
            "fixed_values": list(self.fixed_values),
            "fixed_demands": list(self.fixed_demands),
        }
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentSpec":
        def tup(key):
            return None if d.get(key) is None else tuple(d[key])

        return cls(
            kind=d["kind"],
            dims=ProblemDims(d.get("n_agents", 2), d.get("n_resources", 2)),
            mechanisms=tuple(d.get("mechanisms", ("pf", "pa", "mixture", "exs"))),
            data=None if d.get("data") is None else DataSpec.from_json_dict(d["data"]),
            training=None
            if d.get("training") is None
            else TrainConfig.from_json_dict(d["training"]),
            attack=None
            if d.get("attack") is None
            else AttackConfig.from_json_dict(d["attack"]),
            eval_samples=d.get("eval_samples", 50),
            out_dir=d.get("out_dir"),
            seed=d.get("seed", 0),
            threads=d.get("threads", 1),
            checkpoint=d.get("checkpoint"),
            ratios=tup("ratios"),
            alphas=tup("alphas"),
            budgets=tup("budgets"),
            betas=tup("betas"),
            rho=d.get("rho", 0.5),
            grid_resolution=d.get("grid_resolution", 25),
            fixed_values=tuple(d.get("fixed_values", (1.0, 0.25))),
            fixed_demands=tuple(d.get("fixed_demands", (1.0, 1.0))),
        )


@dataclass
class Table:
    name: str
    columns: list[str]
    rows: list[dict]


# ---------------------------------------------------------------------------
# Shared evaluation machinery
# ---------------------------------------------------------------------------


def _true_agent_payoff(a: np.ndarray, profile: RequestProfile, i: int) -> float:
    return float(np.sum(profile.values[i] * np.minimum(a[i], profile.demands[i])))


def _metrics_one(mech: Mechanism, profile: RequestProfile, attack, rng, method="auto"):
    """(nsw, efficiency, per-agent exploit gains) on one profile.

    The random-mixture arm is evaluated as its deterministic expectation
    over the coin, not a single flip.
    """
    if isinstance(mech, Mixture):
        a_pf = solve_pf(profile, mech.cfg).a_star
        a_pa = pa_allocate(profile, mech.cfg)
        for a in (a_pf, a_pa):
            a.check_feasible(profile)
        u_pf = utility(a_pf.a, profile.values, profile.demands)
        u_pa = utility(a_pa.a, profile.values, profile.demands)
        r = mech.rho
        val_nsw = r * nsw(u_pf, profile.weights) + (1 - r) * nsw(u_pa, profile.weights)
        val_eff = r * efficiency(a_pf.a, profile.budgets) + (1 - r) * efficiency(
            a_pa.a, profile.budgets
        )
    else:
        a = allocate(mech, profile, rng)
        a.check_feasible(profile)
        u = utility(a.a, profile.values, profile.demands)
        val_nsw = nsw(u, profile.weights)
        val_eff = efficiency(a.a, profile.budgets)
    gains = exploitability_vector(mech, profile, attack, rng, method)
    return val_nsw, val_eff, gains


def _eval_mechanism(
    mech: Mechanism,
    profiles: list[RequestProfile],
    attack: AttackConfig,
    rng: np.random.Generator,
    threads: int = 1,
    method: str = "auto",
):
    """Batch means: (mean nsw, mean efficiency, per-agent mean gains)."""
    streams = rng.spawn(len(profiles))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(
                pool.map(lambda pr: _metrics_one(mech, pr[0], attack, pr[1], method),
                         zip(profiles, streams))
            )
    else:
        results = [
            _metrics_one(mech, p, attack, s, method)
            for p, s in zip(profiles, streams)
        ]
    nsws = np.array([r[0] for r in results])
    effs = np.array([r[1] for r in results])
    gains = np.stack([r[2] for r in results])
    return float(nsws.mean()), float(effs.mean()), gains.mean(axis=0)


def _trained_exs(spec: ExperimentSpec, cfg: TrainConfig | None = None) -> ExsNet:
    """Train the share network for this spec, or load its checkpoint."""
    if spec.checkpoint:
        params, _ = load_params(spec.checkpoint)
        return ExsNet(params)
    cfg = cfg or spec.train_config()
    mech, _ = train("exs", spec.dims, cfg, data_spec=spec.data_spec())
    return mech


def _expl_columns(n: int) -> list[str]:
    return [f"expl_agent{i + 1}" for i in range(n)]


def _mech_row(label: str, mean_nsw, mean_eff, gains) -> dict:
    row = {
        "mechanism": label,
        "mean_nsw": mean_nsw,
        "mean_efficiency": mean_eff,
        "mean_expl": float(np.mean(gains)),
    }
    for i, g in enumerate(gains):
        row[f"expl_agent{i + 1}"] = float(g)
    return row


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def run_gaming_curve(spec: ExperimentSpec) -> list[Table]:
    """Agent 1's true utility as its reported value ratio sweeps a grid,
    on the fixed reference instance.  Values are reported as (1, ratio);
    demands stay truthful."""
    profile = reference_profile()
    if spec.ratios is not None:
        ratios = np.asarray(spec.ratios)
    else:
        # coarse sweep plus a fine sub-grid where the allocation switches
        # regimes (the peak is a narrow spike next to a tie in ratios)
        coarse = np.arange(0.10, 3.0 + 1e-9, 0.05)
        fine = np.arange(0.20, 0.50, 0.005)
        ratios = np.unique(np.round(np.concatenate([coarse, fine]), 10))
    truthful = solve_pf(profile)
    u1_truthful = _true_agent_payoff(truthful.a_star.a, profile, 0)

    expf_params = None
    if "expf" in spec.mechanisms:
        if not spec.checkpoint:
            raise FileNotFoundError(
                "the learned-tilt arm needs --checkpoint for the gaming curve"
            )
        expf_params, _ = load_params(spec.checkpoint)

    rows = []
    for r in ratios:
        reported = profile.replace_agent(0, values=np.array([1.0, float(r)]))
        kkt = solve_pf(reported)
        row = {
            "ratio": float(r),
            "u1_pf": _true_agent_payoff(kkt.a_star.a, profile, 0),
            "u1_truthful": u1_truthful,
        }
        if expf_params is not None:
            alloc, _, _ = expf_forward(expf_params, reported)
            row["u1_expfnet"] = _true_agent_payoff(alloc.a, profile, 0)
        rows.append(row)

    best = max(rows, key=lambda rr: rr["u1_pf"])
    summary = Table(
        "gaming_summary",
        ["u1_truthful", "u1_max", "best_ratio", "max_relative_gain"],
        [
            {
                "u1_truthful": u1_truthful,
                "u1_max": best["u1_pf"],
                "best_ratio": best["ratio"],
                "max_relative_gain": (best["u1_pf"] - u1_truthful) / u1_truthful,
            }
        ],
    )
    cols = ["ratio", "u1_pf", "u1_truthful"] + (
        ["u1_expfnet"] if expf_params is not None else []
    )
    return [Table("gaming_curve", cols, rows), summary]


def _build_arms(spec: ExperimentSpec) -> dict[str, Mechanism]:
    arms: dict[str, Mechanism] = {}
    for name in spec.mechanisms:
        if name == "pf":
            arms["pf"] = Pf()
        elif name == "pa":
            arms["pa"] = Pa()
        elif name == "mixture":
            arms[f"mixture({spec.rho})"] = Mixture(spec.rho)
        elif name == "exs":
            arms["exs-net"] = _trained_exs(spec)
        elif name == "expf":
            if not spec.checkpoint:
                raise FileNotFoundError(
                    "the learned-tilt arm needs --checkpoint in compare"
                )
            params, meta = load_params(spec.checkpoint)
            arms["expf-net"] = ExpfNet(params, zeta=float(meta.get("zeta", 0.0)))
        else:
            raise ValueError(f"unknown mechanism arm {name!r}")
    return arms


def run_compare(spec: ExperimentSpec) -> list[Table]:
    """Mean NSW / exploitability / efficiency per mechanism arm."""
    rng = np.random.default_rng(spec.seed)
    data_rng, eval_rng = rng.spawn(2)
    profiles = sample_batch(spec.data_spec(), spec.eval_samples, data_rng)
    attack = spec.eval_attack()
    arms = _build_arms(spec)
    rows = []
    for label, mech in arms.items():
        mean_nsw, mean_eff, gains = _eval_mechanism(
            mech, profiles, attack, eval_rng, spec.threads
        )
        rows.append(_mech_row(label, mean_nsw, mean_eff, gains))
    cols = ["mechanism", "mean_nsw", "mean_efficiency", "mean_expl"] + _expl_columns(
        spec.dims.n_agents
    )
    return [Table("compare", cols, rows)]


def run_frontier(spec: ExperimentSpec) -> list[Table]:
    """NSW-exploitability frontier of penalty-mode training vs the PF-PA
    mixture interpolation line."""
    alphas = (
        np.asarray(spec.alphas)
        if spec.alphas is not None
        else np.logspace(0.0, 5.0, 8)
    )
    rng = np.random.default_rng(spec.seed)
    data_rng, eval_rng = rng.spawn(2)
    profiles = sample_batch(spec.data_spec(), spec.eval_samples, data_rng)
    attack = spec.eval_attack()

    # the endpoints anchor the mixture line, so attack them with the
    # exhaustive grid where it applies -- the local ascent under-credits
    # the exact solver, whose best misreports sit in narrow spikes
    end_method = "grid" if spec.dims.n_resources <= GRID_MAX_RESOURCES else "auto"
    nsw_pf, _, gains_pf = _eval_mechanism(
        Pf(), profiles, attack, eval_rng, spec.threads, end_method
    )
    nsw_pa, _, gains_pa = _eval_mechanism(
        Pa(), profiles, attack, eval_rng, spec.threads, end_method
    )
    expl_pf, expl_pa = float(np.mean(gains_pf)), float(np.mean(gains_pa))

    rows = [
        {"family": "pf", "alpha": "", "rho": "", "mean_nsw": nsw_pf, "mean_expl": expl_pf},
        {"family": "pa", "alpha": "", "rho": "", "mean_nsw": nsw_pa, "mean_expl": expl_pa},
    ]
    base_cfg = spec.train_config()
    for a in alphas:
        cfg = dataclasses.replace(base_cfg, alpha=float(a), epsilon=None)
        mech, _ = train("exs", spec.dims, cfg, data_spec=spec.data_spec())
        mean_nsw, _, gains = _eval_mechanism(mech, profiles, attack, eval_rng, spec.threads)
        rows.append(
            {
                "family": "exs",
                "alpha": float(a),
                "rho": "",
                "mean_nsw": mean_nsw,
                "mean_expl": float(np.mean(gains)),
            }
        )
    # straight interpolation between the measured PA and PF endpoints
    for rho in np.round(np.linspace(0.0, 1.0, 11), 10):
        rows.append(
            {
                "family": "mixture-line",
                "alpha": "",
                "rho": float(rho),
                "mean_nsw": rho * nsw_pf + (1 - rho) * nsw_pa,
                "mean_expl": rho * expl_pf + (1 - rho) * expl_pa,
            }
        )
    cols = ["family", "alpha", "rho", "mean_nsw", "mean_expl"]
    return [Table("frontier", cols, rows)]


def run_budget_sweep(spec: ExperimentSpec) -> list[Table]:
    """PF / PA / trained share-net metrics as the per-resource budget
    scales through a grid."""
    budgets = (
        np.asarray(spec.budgets)
        if spec.budgets is not None
        else np.round(np.arange(0.25, 1.5 + 1e-9, 0.25), 10)
    )
    attack = spec.eval_attack()
    rows = []
    base_data = spec.data_spec()
    for b in budgets:
        dspec = dataclasses.replace(base_data, budgets=float(b))
        rng = np.random.default_rng(spec.seed)
        data_rng, eval_rng = rng.spawn(2)
        profiles = sample_batch(dspec, spec.eval_samples, data_rng)
        arms: dict[str, Mechanism] = {}
        if "pf" in spec.mechanisms:
            arms["pf"] = Pf()
        if "pa" in spec.mechanisms:
            arms["pa"] = Pa()
        if "exs" in spec.mechanisms:
            cfg = spec.train_config()
            mech, _ = train("exs", spec.dims, cfg, data_spec=dspec)
            arms["exs-net"] = mech
        for label, mech in arms.items():
            mean_nsw, mean_eff, gains = _eval_mechanism(
                mech, profiles, attack, eval_rng, spec.threads
            )
            row = {"budget": float(b)}
            row.update(_mech_row(label, mean_nsw, mean_eff, gains))
            rows.append(row)
    cols = ["budget", "mechanism", "mean_nsw", "mean_efficiency", "mean_expl"]
    cols += _expl_columns(spec.dims.n_agents)
    return [Table("budget_sweep", cols, rows)]


def run_mismatch(spec: ExperimentSpec) -> list[Table]:
    """Train on the uniform family, evaluate under scaled-beta shifts."""
    betas = (
        np.asarray(spec.betas)
        if spec.betas is not None
        else np.round(np.arange(0.5, 5.0 + 1e-9, 0.5), 10)
    )
    mech = _trained_exs(spec)
    attack = spec.eval_attack()
    rng = np.random.default_rng(spec.seed)
    eval_rng = rng.spawn(1)[0]
    base_data = spec.data_spec()

    rows = []
    # in-distribution reference row
    uniform_profiles = sample_batch(
        dataclasses.replace(base_data, seed=spec.seed + 1), spec.eval_samples
    )
    mean_nsw, _, gains = _eval_mechanism(
        mech, uniform_profiles, attack, eval_rng, spec.threads
    )
    rows.append(
        {
            "family": "uniform",
            "alpha": "",
            "mean_nsw": mean_nsw,
            "mean_expl": float(np.mean(gains)),
        }
    )
    for ab in betas:
        shifted = beta_shifted(
            dataclasses.replace(base_data, seed=spec.seed + 1), float(ab)
        )
        profiles = sample_batch(shifted, spec.eval_samples)
        mean_nsw, _, gains = _eval_mechanism(
            mech, profiles, attack, eval_rng, spec.threads
        )
        rows.append(
            {
                "family": "beta",
                "alpha": float(ab),
                "mean_nsw": mean_nsw,
                "mean_expl": float(np.mean(gains)),
            }
        )
    cols = ["family", "alpha", "mean_nsw", "mean_expl"]
    return [Table("mismatch", cols, rows)]


def run_heatmap(spec: ExperimentSpec) -> list[Table]:
    """Agent-1 allocation surface over its reported values, with agent 2
    fixed; exact program always, learned tilt when a checkpoint is given."""
    res = spec.grid_resolution
    grid = np.linspace(0.1, 1.0, res)
    v2 = np.asarray(spec.fixed_values, dtype=np.float64)
    x2 = np.asarray(spec.fixed_demands, dtype=np.float64)
    expf_params = None
    if "expf" in spec.mechanisms:
        if not spec.checkpoint:
            raise FileNotFoundError(
                "the learned-tilt arm needs --checkpoint for the heatmap"
            )
        expf_params, _ = load_params(spec.checkpoint)

    rows = []
    for v11 in grid:
        for v12 in grid:
            profile = RequestProfile(
                values=np.array([[v11, v12], v2]),
                demands=np.array([[1.0, 1.0], x2]),
                budgets=np.ones(2),
                weights=np.ones(2),
            )
            kkt = solve_pf(profile)
            row = {
                "v11": float(v11),
                "v12": float(v12),
                "a11_pf": float(kkt.a_star.a[0, 0]),
                "a12_pf": float(kkt.a_star.a[0, 1]),
            }
            if expf_params is not None:
                alloc, _, _ = expf_forward(expf_params, profile)
                row["a11_expfnet"] = float(alloc.a[0, 0])
                row["a12_expfnet"] = float(alloc.a[0, 1])
            rows.append(row)
    cols = ["v11", "v12", "a11_pf", "a12_pf"] + (
        ["a11_expfnet", "a12_expfnet"] if expf_params is not None else []
    )
    return [Table("heatmap", cols, rows)]


# ---------------------------------------------------------------------------
# Dispatch, CSV and manifest output
# ---------------------------------------------------------------------------

_RUNNERS = {
    "gaming-curve": run_gaming_curve,
    "compare": run_compare,
    "frontier": run_frontier,
    "budget-sweep": run_budget_sweep,
    "mismatch": run_mismatch,
    "heatmap": run_heatmap,
}


def _git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True,
            text=True,
            timeout=10,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_table(out_dir: str, table: Table) -> str:
    path = os.path.join(out_dir, f"{table.name}.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.DictWriter(fh, fieldnames=table.columns)
        wr.writeheader()
        for row in table.rows:
            wr.writerow({k: row.get(k, "") for k in table.columns})
    return path


def run_experiment(spec: ExperimentSpec) -> list[Table]:
    """Run one experiment; when out_dir is set, persist CSVs + manifest."""
    t0 = time.time()
    tables = _RUNNERS[spec.kind](spec)
    wall = time.time() - t0
    if spec.out_dir:
        os.makedirs(spec.out_dir, exist_ok=True)
        outputs = {t.name: os.path.basename(write_table(spec.out_dir, t)) for t in tables}
        manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "kind": spec.kind,
            "spec": spec.to_json_dict(),
            "seed": spec.seed,
            "code_version": _git_describe(),
            "wall_time_s": wall,
            "outputs": outputs,
        }
        with open(
            os.path.join(spec.out_dir, "manifest.json"), "w", encoding="utf-8"
        ) as fh:
            json.dump(manifest, fh, indent=1)
    return tables
