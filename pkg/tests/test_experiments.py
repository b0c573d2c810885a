import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from fairalloc.exploit import AttackConfig
from fairalloc.experiments import (
    KINDS,
    MANIFEST_SCHEMA_VERSION,
    ExperimentSpec,
    Table,
    reference_profile,
    run_experiment,
    run_gaming_curve,
    run_heatmap,
    write_table,
)
from fairalloc.mechanisms import expf_sizes
from fairalloc.mlp import init_mlp, save_params
from fairalloc.train import TrainConfig

TINY_TRAIN = TrainConfig(
    epsilon=1e-2,
    n_samples=6,
    outer_iters=10,
    lr_primal=1e-3,
    attack=AttackConfig(restarts=1, steps=8, polish_iters=0),
    seed=3,
    hidden=(8, 8),
)
LIGHT_ATTACK = AttackConfig(
    restarts=2, steps=40, polish_iters=4, grid_resolution=13, grid_sweeps=2
)


def test_reference_profile_is_the_known_instance(canonical):
    ref = reference_profile()
    np.testing.assert_array_equal(ref.values, canonical.values)
    np.testing.assert_array_equal(ref.demands, canonical.demands)
    np.testing.assert_array_equal(ref.budgets, canonical.budgets)


def test_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec(kind="bogus")
    with pytest.raises(ValueError):
        ExperimentSpec(kind="compare", eval_samples=0)
    with pytest.raises(ValueError):
        ExperimentSpec(kind="compare", threads=0)
    assert set(KINDS) == {
        "gaming-curve",
        "compare",
        "frontier",
        "budget-sweep",
        "mismatch",
        "heatmap",
    }


def test_spec_json_round_trip():
    spec = ExperimentSpec(
        kind="frontier",
        training=TINY_TRAIN,
        attack=LIGHT_ATTACK,
        alphas=(1.0, 10.0),
        eval_samples=7,
        seed=5,
        rho=0.3,
    )
    back = ExperimentSpec.from_json_dict(json.loads(json.dumps(spec.to_json_dict())))
    assert back == spec


def test_gaming_curve_band():
    """The headline number: best-response gain for agent 1 sits in the
    published 14-20% window."""
    curve, summary = run_gaming_curve(ExperimentSpec(kind="gaming-curve"))
    row = summary.rows[0]
    assert 0.14 <= row["max_relative_gain"] <= 0.20
    assert row["u1_truthful"] == pytest.approx(0.75, abs=1e-6)
    # all sweep rows share the truthful baseline; utilities are positive
    assert all(r["u1_truthful"] == row["u1_truthful"] for r in curve.rows)
    assert all(r["u1_pf"] > 0 for r in curve.rows)
    # the best ratio shades resource 2 below the truthful 0.5
    assert row["best_ratio"] < 0.5


def test_gaming_curve_custom_ratios():
    spec = ExperimentSpec(kind="gaming-curve", ratios=(0.5, 1.0))
    curve, summary = run_gaming_curve(spec)
    assert [r["ratio"] for r in curve.rows] == [0.5, 1.0]
    # truthful report is on the grid, so the max gain is nonnegative
    assert summary.rows[0]["max_relative_gain"] >= -1e-12


def test_gaming_curve_expf_needs_checkpoint():
    spec = ExperimentSpec(kind="gaming-curve", mechanisms=("pf", "expf"))
    with pytest.raises(FileNotFoundError):
        run_gaming_curve(spec)


def test_heatmap_structure_and_transition():
    spec = ExperimentSpec(kind="heatmap", grid_resolution=9)
    (table,) = run_experiment(spec)
    assert len(table.rows) == 81
    a11 = np.array([r["a11_pf"] for r in table.rows]).reshape(9, 9)
    assert np.all(a11 >= -1e-9) and np.all(a11 <= 1.0 + 1e-9)
    # the surface contains a sharp allocation switch, not a flat plane
    jumps = max(
        np.abs(np.diff(a11, axis=0)).max(), np.abs(np.diff(a11, axis=1)).max()
    )
    assert jumps > 0.2


def test_heatmap_with_learned_tilt_checkpoint(tmp_path, dims22):
    params = init_mlp(expf_sizes(dims22, (8, 8)), np.random.default_rng(0))
    ckpt = tmp_path / "expf.npz"
    save_params(ckpt, params, {"zeta": 0.0})
    spec = ExperimentSpec(
        kind="heatmap",
        grid_resolution=4,
        mechanisms=("pf", "expf"),
        checkpoint=str(ckpt),
    )
    (table,) = run_experiment(spec)
    assert "a11_expfnet" in table.columns
    assert all(np.isfinite(r["a11_expfnet"]) for r in table.rows)


def test_manifest_and_csv_outputs(tmp_path):
    out = tmp_path / "run"
    spec = ExperimentSpec(kind="heatmap", grid_resolution=5, out_dir=str(out), seed=9)
    tables = run_experiment(spec)
    man = json.loads((out / "manifest.json").read_text())
    assert man["schema_version"] == MANIFEST_SCHEMA_VERSION
    assert man["kind"] == "heatmap"
    assert man["seed"] == 9
    assert man["wall_time_s"] >= 0
    assert man["outputs"] == {"heatmap": "heatmap.csv"}
    assert ExperimentSpec.from_json_dict(man["spec"]) == spec
    with open(out / "heatmap.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(tables[0].rows)
    assert float(rows[0]["a11_pf"]) == pytest.approx(tables[0].rows[0]["a11_pf"])


def test_write_table_pads_missing_cells(tmp_path):
    t = Table("t", ["a", "b"], [{"a": 1, "b": 2}, {"a": 3}])
    path = write_table(str(tmp_path), t)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[1] == {"a": "3", "b": ""}


def test_compare_small():
    spec = ExperimentSpec(
        kind="compare",
        mechanisms=("pf", "exs"),
        training=TINY_TRAIN,
        attack=LIGHT_ATTACK,
        eval_samples=4,
        seed=2,
    )
    (table,) = run_experiment(spec)
    byname = {r["mechanism"]: r for r in table.rows}
    assert set(byname) == {"pf", "exs-net"}
    for r in byname.values():
        assert r["mean_nsw"] > 0
        assert 0 <= r["mean_efficiency"] <= 1 + 1e-9
        assert r["mean_expl"] >= 0
        assert r["mean_expl"] == pytest.approx(
            (r["expl_agent1"] + r["expl_agent2"]) / 2
        )


def test_frontier_small():
    spec = ExperimentSpec(
        kind="frontier",
        training=TINY_TRAIN,
        attack=LIGHT_ATTACK,
        alphas=(1.0, 100.0),
        eval_samples=4,
        seed=2,
    )
    (table,) = run_experiment(spec)
    fams = {r["family"] for r in table.rows}
    assert fams == {"pf", "pa", "exs", "mixture-line"}
    line = [r for r in table.rows if r["family"] == "mixture-line"]
    assert len(line) == 11
    ends = {r["family"]: r for r in table.rows if r["family"] in ("pf", "pa")}
    # interpolation endpoints coincide with the measured pf / pa rows
    lo, hi = line[0], line[-1]
    assert lo["mean_nsw"] == pytest.approx(ends["pa"]["mean_nsw"])
    assert hi["mean_nsw"] == pytest.approx(ends["pf"]["mean_nsw"])
    assert ends["pa"]["mean_expl"] <= ends["pf"]["mean_expl"] + 1e-9


def test_budget_sweep_small():
    spec = ExperimentSpec(
        kind="budget-sweep",
        mechanisms=("pf",),
        budgets=(0.5, 1.5),
        attack=LIGHT_ATTACK,
        eval_samples=4,
        seed=2,
    )
    (table,) = run_experiment(spec)
    assert [r["budget"] for r in table.rows] == [0.5, 1.5]
    # more budget means weakly more welfare for the exact solver
    assert table.rows[1]["mean_nsw"] >= table.rows[0]["mean_nsw"] - 1e-9


def test_mismatch_small():
    spec = ExperimentSpec(
        kind="mismatch",
        training=TINY_TRAIN,
        attack=LIGHT_ATTACK,
        betas=(2.0,),
        eval_samples=4,
        seed=2,
    )
    (table,) = run_experiment(spec)
    fams = [r["family"] for r in table.rows]
    assert fams == ["uniform", "beta"]
    assert all(np.isfinite(r["mean_nsw"]) for r in table.rows)


def test_cli_runs_spec_file(tmp_path):
    spec_path = tmp_path / "spec.json"
    out_dir = tmp_path / "out"
    spec_path.write_text(json.dumps({"kind": "heatmap", "grid_resolution": 4}))
    proc = subprocess.run(
        [
            sys.executable,
            "-m",
            "fairalloc.cli",
            "heatmap",
            "--spec",
            str(spec_path),
            "--out",
            str(out_dir),
            "--seed",
            "7",
        ],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    assert "heatmap: 16 rows" in proc.stderr
    man = json.loads((out_dir / "manifest.json").read_text())
    assert man["seed"] == 7  # the flag overrides the file
    assert (out_dir / "heatmap.csv").exists()


def test_cli_stdout_json(tmp_path):
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(
        json.dumps({"kind": "gaming-curve", "ratios": [0.3, 0.5, 1.0]})
    )
    proc = subprocess.run(
        [sys.executable, "-m", "fairalloc.cli", "gaming-curve", "--spec", str(spec_path)],
        capture_output=True,
        text=True,
        timeout=300,
    )
    assert proc.returncode == 0, proc.stderr
    doc = json.loads(proc.stdout)
    assert set(doc) == {"gaming_curve", "gaming_summary"}
    assert len(doc["gaming_curve"]) == 3
