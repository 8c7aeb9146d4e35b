"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines. Tolerances are pinned here and nowhere else.
"""

import hashlib
import math
import time
from pathlib import Path

import numpy as np

from wxscale.cli import main
from wxscale.decomp import (
    DecompLayout,
    DecomposedSwinForecaster,
    distributed_roll,
    gather,
    partition,
    scatter,
)
from wxscale.forecaster import SwinConfig, SwinForecaster, cyclic_shift, linear_surrogate
from wxscale.grid import (
    POOLED_CHANNEL,
    ChannelDef,
    ChannelSchema,
    FieldState,
    GridSpec,
    canonical_schema,
    latitude_weights,
)
from wxscale.metrics import area_weighted_rmse, error_growth, pooled_rmse
from wxscale.rollout import RolloutConfig, run_rollout
from wxscale.scaling import FAIL_STAGE1_CONVEXITY, fit_allocation, sweep
from wxscale.synth import (
    ChannelTerms,
    SurfaceSpec,
    analytic_n_star,
    make_isoflop_family,
    synth_truth,
)

from conftest import random_state
from test_metrics import brute_force_pooled_rmse, brute_force_weighted_rmse
from test_rollout import ImpulseTruth


def ok(n: int, text: str) -> None:
    print(f"[criterion {n}] PASS: {text}")


def test_criterion_1_exponent_recovery():
    t0 = time.monotonic()
    spec = SurfaceSpec(e_floor=0.0, amp_n=100.0, exp_n=0.5, amp_d=200.0, exp_d=0.5,
                       kappa=6.0, noise_sigma=0.0)
    budgets = list(np.geomspace(1e9, 1e12, 5))  # 3 decades
    schema = canonical_schema().subset(["t2m"])
    fam = make_isoflop_family(spec, budgets, 7, schema, leads=[6], seed=0, flatten=0.0)
    res = sweep(fam.runs, fam.records, leads=[6], channels=[POOLED_CHANNEL])
    optima = res.optima[(6, POOLED_CHANNEL)]

    # brute-force (N, D) grid-search oracle per budget
    for opt, c in zip(optima, budgets):
        n_grid = np.geomspace(opt.n_star / 100, opt.n_star * 100, 40001)
        eps = spec.amp_n / n_grid**spec.exp_n + spec.amp_d / (c / (6.0 * n_grid)) ** spec.exp_d
        n_oracle = n_grid[int(np.argmin(eps))]
        assert abs(opt.n_star - n_oracle) / n_oracle < 1e-3

    alloc = fit_allocation(list(optima))
    assert abs(alloc.alpha - 0.5) <= 0.02
    assert abs(alloc.beta - 0.5) <= 0.02
    assert abs(alloc.alpha_plus_beta - 1.0) <= 0.03
    elapsed = time.monotonic() - t0
    assert elapsed < 10.0
    ok(1, f"alpha={alloc.alpha:.4f} beta={alloc.beta:.4f} "
          f"sum={alloc.alpha_plus_beta:.4f} in {elapsed:.2f}s")


def test_criterion_2_two_stage_exactness():
    spec = SurfaceSpec(e_floor=0.0, amp_n=100.0, exp_n=0.5, amp_d=200.0, exp_d=0.5,
                       kappa=6.0)
    budgets = list(np.geomspace(1e9, 1e12, 5))
    schema = canonical_schema().subset(["t2m"])
    fam = make_isoflop_family(spec, budgets, 7, schema, leads=[6], seed=0, flatten=0.0)
    res = sweep(fam.runs, fam.records, leads=[6])

    for opt, c in zip(res.optima[(6, POOLED_CHANNEL)], budgets):
        expected = analytic_n_star(spec, c)
        assert abs(opt.n_star - expected) / expected < 1e-6

    expectations = {"params": -0.5, "data": -0.5, "compute": -0.25}
    for cov, slope_expected in expectations.items():
        fit = res.cell(cov, 6, POOLED_CHANNEL).fit
        assert fit.r2 is not None and abs(fit.r2 - 1.0) < 1e-8
        assert abs(fit.slope - slope_expected) < 1e-6
    ok(2, "stage-1 vertices at 1e-6 of analytic optimum; stage-2 r2=1 at 1e-8, "
          "slopes exact at 1e-6")


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(123)
    schema = ChannelSchema(
        (ChannelDef("a", "K", "surface"), ChannelDef("b", "K", "surface"),
         ChannelDef("c", "K", "surface"))
    )
    for trial in range(50):
        lats = np.sort(rng.uniform(-89.0, 89.0, size=4))[::-1]
        grid = GridSpec.from_latitudes(lats, 5)
        w = latitude_weights(grid)
        pred = FieldState(schema, grid, rng.standard_normal((3, 4, 5)))
        truth = FieldState(schema, grid, rng.standard_normal((3, 4, 5)))
        expected_w = brute_force_weighted_rmse(pred, truth, w)
        got_w = area_weighted_rmse(pred, truth)
        assert np.all(np.abs(got_w - expected_w) <= 1e-12 * expected_w)
        expected_p = brute_force_pooled_rmse(pred, truth)
        assert abs(pooled_rmse(pred, truth) - expected_p) <= 1e-12 * expected_p

    one = ChannelSchema((ChannelDef("t2m", "K", "surface"),))
    grid2 = GridSpec.from_latitudes([30.0, 60.0], 2)
    pred2 = FieldState(one, grid2, np.array([[[1.0, 1.0], [2.0, 2.0]]]))
    truth2 = FieldState(one, grid2, np.zeros((1, 2, 2)))
    got = area_weighted_rmse(pred2, truth2)[0]
    assert abs(got - 1.44846) / 1.44846 < 1e-5
    ok(3, f"50 random instances at 1e-12; 2-row example = {got:.6f} "
          f"(1.44846 within 1e-5 relative)")


def test_criterion_4_rollout_closed_forms(mini_schema, small_grid):
    # decay: impulse IC of ones, truth zero afterwards, rho = 0.5
    truth = ImpulseTruth(mini_schema, small_grid, window=(0, 240))
    result = run_rollout(linear_surrogate(0.5, 0.0, mini_schema), truth, RolloutConfig())
    leads = sorted({r.lead_hours for r in result.records})
    assert leads == list(range(6, 241, 6)) and len(leads) == 40
    for r in result.records:
        expected = 0.5 ** (r.lead_hours // 6)
        assert abs(r.rmse - expected) <= 1e-9 * expected

    # drift: zero IC and truth, drift d per step
    class ZeroTruth(ImpulseTruth):
        def state_at(self, timestamp):
            s = super().state_at(timestamp)
            return s.with_values(np.zeros_like(s.values))

    d = 0.3
    result2 = run_rollout(
        linear_surrogate(1.0, d, mini_schema), ZeroTruth(mini_schema, small_grid), RolloutConfig()
    )
    for r in result2.records:
        expected = (r.lead_hours // 6) * d
        assert abs(r.rmse - expected) <= 1e-9 * expected

    # record count: n_ICs x 40 x (C+1) exactly
    truth3 = synth_truth(small_grid, mini_schema, "constant", seed=1, window=(0, 360))
    result3 = run_rollout(linear_surrogate(1.0, 0.0, mini_schema), truth3, RolloutConfig())
    n_ics = 11  # ICs at 0..120 every 12 h fit the 240 h lead inside 360 h
    assert len(result3.records) == n_ics * 40 * (mini_schema.total + 1)
    ok(4, "0.5^k decay and k*|d| drift at 1e-9 over all 40 leads; "
          f"record count {len(result3.records)} = {n_ics}*40*{mini_schema.total + 1}")


def test_criterion_5_decomposition_equivalence():
    t0 = time.monotonic()
    grid = GridSpec.equiangular(16, 32)  # 8 x 16 patches at patch size 2
    schema = canonical_schema().subset(["t2m", "u10m", "v10m"])
    cfg = SwinConfig(patch_size=(2, 2), embed_dim=8, depth=2, heads=2, window=(2, 2),
                     seed=42)
    model = SwinForecaster(cfg, grid, schema)
    state = random_state(schema, grid, seed=0)
    ref = model.step(state)
    worst = 0.0
    for strategy in ("roll", "halo"):
        for sp1 in (1, 2):
            for sp2 in (1, 2, 4):
                for tp in (1, 2):
                    dec = DecomposedSwinForecaster(
                        model, DecompLayout(sp1=sp1, sp2=sp2, tp=tp), strategy
                    )
                    out = dec.step(state)
                    dev = float(
                        np.max(np.abs(out.values - ref.values)) / np.max(np.abs(ref.values))
                    )
                    worst = max(worst, dev)
                    assert dev < 1e-10, (strategy, sp1, sp2, tp)

    # distributed roll vs sequential roll: bit-exact
    rng = np.random.default_rng(3)
    patch_grid = model.patch_grid
    for layout in (DecompLayout(sp1=2, sp2=4), DecompLayout(sp1=2, sp2=2),
                   DecompLayout(sp1=1, sp2=4)):
        rects = partition(patch_grid, layout, cfg.window)
        t = rng.standard_normal((*patch_grid, 5))
        for _ in range(5):
            shift = (int(rng.integers(-7, 8)), int(rng.integers(-15, 16)))
            rolled, _ = distributed_roll(scatter(t, rects), shift, layout, patch_grid)
            assert np.array_equal(gather(rolled, rects, patch_grid), cyclic_shift(t, shift))

    elapsed = time.monotonic() - t0
    assert elapsed < 30.0
    ok(5, f"24 layout/strategy combos within 1e-10 (worst {worst:.2e}); "
          f"roll bit-exact; {elapsed:.2f}s")


def test_criterion_6_derivative_correctness():
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = rng.standard_normal(2)
        leads = sorted(int(h) for h in rng.choice(np.arange(6, 240, 6), 6, replace=False))
        curve = error_growth(leads, [a + b * h for h in leads])
        assert all(abs(v - b) <= 1e-12 * max(1.0, abs(b)) for v in curve.d_rmse_dt)

    for _ in range(10):
        leads = list(range(6, 246, 6))
        y = np.cos(np.asarray(leads) / 40.0) + 0.05 * rng.standard_normal(len(leads))
        got = error_growth(leads, y).d_rmse_dt
        t = np.asarray(leads, dtype=float)
        oracle = []
        for i in range(len(leads)):
            if i == 0:
                oracle.append((y[1] - y[0]) / (t[1] - t[0]))
            elif i == len(leads) - 1:
                oracle.append((y[-1] - y[-2]) / (t[-1] - t[-2]))
            else:
                oracle.append((y[i + 1] - y[i - 1]) / (t[i + 1] - t[i - 1]))
        assert np.allclose(got, oracle, rtol=0, atol=1e-10)
    ok(6, "affine series exact at 1e-12; random smooth series match the "
          "central-difference oracle at 1e-10")


def test_criterion_7_heatmap_pipeline():
    schema = ChannelSchema(
        (ChannelDef("steep", "K", "surface"), ChannelDef("base", "K", "surface"),
         ChannelDef("bad", "K", "surface"))
    )
    spec = SurfaceSpec(
        e_floor=0.0, amp_n=100.0, exp_n=0.5, amp_d=200.0, exp_d=0.5, kappa=6.0,
        per_channel={"steep": ChannelTerms(100.0, 0.3, 200.0, 0.3)},
    )
    budgets = list(np.geomspace(1e9, 1e12, 5))
    fam = make_isoflop_family(spec, budgets, 5, schema, leads=[6, 12], seed=0,
                              flatten=0.0)
    # doctor one channel into a concave log-log frontier (violates stage 1)
    records = []
    for r in fam.records:
        if r.channel == "bad":
            idx = int(r.run_id.split("-n")[1])
            value = math.exp(-0.4 * (idx - 2.0) ** 2)
            records.append(type(r)(r.run_id, r.ic_timestamp, r.lead_hours, r.channel, value))
        else:
            records.append(r)
    res = sweep(fam.runs, records)

    slope_steep = res.cell("params", 6, "steep").fit.slope
    slope_base = res.cell("params", 6, "base").fit.slope
    assert abs(slope_steep - (-0.3)) <= 0.02
    assert abs(slope_base - (-0.5)) <= 0.02
    assert abs(slope_steep - slope_base) >= 0.2 - 0.02  # separated by generator gap

    for cov in ("params", "data", "compute"):
        cell = res.cell(cov, 6, "bad")
        assert cell.fit is None and cell.failure == FAIL_STAGE1_CONVEXITY
    matrix = res.matrix("params", "slope")
    assert np.isnan(matrix[res.channels.index("bad")]).all()
    report = res.to_report_dict()
    assert report["covariates"]["params"]["6"]["bad"]["failure"] == FAIL_STAGE1_CONVEXITY
    ok(7, f"override slopes {slope_steep:.4f} / {slope_base:.4f} recovered within "
          "0.02; concave cells carry explicit failure codes")


def test_criterion_8_determinism(tmp_path):
    config = """
config_version = 1

[synth]
seed = 11
budgets = [1e9, 1e10, 1e11, 1e12]
n_per_budget = 3
amp_n = 100.0
exp_n = 0.5
amp_d = 200.0
exp_d = 0.5
noise_sigma = 0.05
leads = [6, 12, 18]
channels = ["t2m", "u10m"]

[truth]
kind = "decaying"
seed = 5
n_lat = 8
n_lon = 16
window = [0, 96]
channels = ["t2m", "u10m"]

[model]
kind = "swin"
patch_size = [2, 2]
embed_dim = 8
depth = 2
heads = 2
window = [2, 2]
seed = 42

[rollout]
ic_stride_hours = 12
max_lead_hours = 24
"""
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(config)

    def digests(root: Path) -> dict:
        return {
            str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()
        }

    checked = []
    for command, extra in (
        ("synth", []),
        ("report", []),
    ):
        a, b = tmp_path / f"{command}_a", tmp_path / f"{command}_b"
        for out in (a, b):
            assert main([command, "--config", str(cfg), "--out", str(out)] + extra) == 0
        assert digests(a) == digests(b), command
        checked.append(command)

    data = tmp_path / "report_a" / "data"
    roll_args = ["rollout", "--config", str(cfg), "--truth", str(data / "truth")]
    for name in ("ra", "rb"):
        assert main(roll_args + ["--out", str(tmp_path / name)]) == 0
    assert digests(tmp_path / "ra") == digests(tmp_path / "rb")
    checked.append("rollout")

    metrics = tmp_path / "ra" / "metrics.csv"
    for name in ("da", "db"):
        assert main(["derive", "--metrics", str(metrics), "--out", str(tmp_path / name)]) == 0
    assert digests(tmp_path / "da") == digests(tmp_path / "db")
    checked.append("derive")

    fit_args = ["fit", "--runs", str(data / "runs.csv"), "--metrics",
                str(data / "metrics.csv")]
    for name in ("fa", "fb"):
        assert main(fit_args + ["--out", str(tmp_path / name)]) == 0
    assert digests(tmp_path / "fa") == digests(tmp_path / "fb")
    checked.append("fit")
    ok(8, f"byte-identical reruns for: {', '.join(checked)}")
