import math

import numpy as np
import pytest

from wxscale.errors import FitError, JoinError, NoInteriorMinimumError, WxscaleError
from wxscale.grid import POOLED_CHANNEL, canonical_schema
from wxscale.metrics import MetricRecord
from wxscale.scaling import (
    FAIL_STAGE1_CONVEXITY,
    RunPoint,
    fit_allocation,
    fit_isoflop_optimum,
    fit_power_law,
    group_budgets,
    read_runs_csv,
    sweep,
    write_runs_csv,
)
from wxscale.synth import SurfaceSpec, make_isoflop_family, surface_loss


class TestFitIsoflopOptimum:
    def test_symmetric_triple(self):
        # (logN, logeps) = (1,2), (2,1), (3,2): vertex at logN=2, logeps=1
        n = [math.e, math.e**2, math.e**3]
        eps = [math.e**2, math.e, math.e**2]
        opt = fit_isoflop_optimum(n, eps, budget_id="B0", c_flops=1e9)
        assert abs(math.log(opt.n_star) - 2.0) < 1e-10
        assert abs(math.log(opt.eps_star) - 1.0) < 1e-10
        assert opt.curvature > 0
        assert not opt.extrapolated

    def test_exact_parabola_off_vertex_sampling(self):
        # y = (x-2)^2 + 1 sampled away from the vertex still recovers (2, 1)
        xs = [0.0, 1.0, 3.0, 4.0]
        n = [math.exp(x) for x in xs]
        eps = [math.exp((x - 2.0) ** 2 + 1.0) for x in xs]
        opt = fit_isoflop_optimum(n, eps, budget_id="B0", c_flops=6e8)
        assert abs(math.log(opt.n_star) - 2.0) < 1e-10
        assert abs(math.log(opt.eps_star) - 1.0) < 1e-10

    def test_collinear_no_interior_minimum(self):
        n = [1.0, 10.0, 100.0]
        eps = [1.0, 2.0, 4.0]  # exactly log-linear
        with pytest.raises(NoInteriorMinimumError):
            fit_isoflop_optimum(n, eps, budget_id="B0", c_flops=1e9)

    def test_collinear_many_points_rejected_regardless_of_noise_sign(self):
        # polyfit returns q = +-1e-17 noise on exact lines; the convexity
        # check must not let a spuriously positive q through
        xs = np.linspace(0.0, 10.0, 9)
        n = np.exp(xs)
        eps = np.exp(0.3 * xs + 1.0)
        with pytest.raises(NoInteriorMinimumError):
            fit_isoflop_optimum(n, eps, budget_id="B0", c_flops=1e9)

    def test_concave_rejected(self):
        xs = [0.0, 1.0, 2.0, 3.0]
        eps = [math.exp(-((x - 1.5) ** 2)) for x in xs]
        with pytest.raises(NoInteriorMinimumError):
            fit_isoflop_optimum([math.exp(x) for x in xs], eps, budget_id="B", c_flops=1.0)

    def test_too_few_distinct_n(self):
        with pytest.raises(FitError):
            fit_isoflop_optimum([1.0, 1.0, 2.0], [1.0, 1.1, 2.0], budget_id="B", c_flops=1.0)

    def test_vertex_invariant_under_reordering(self):
        rng = np.random.default_rng(3)
        xs = np.linspace(-1, 3, 7)
        eps = [math.exp(0.7 * (x - 1.2) ** 2 + 0.3) for x in xs]
        n = [math.exp(x) for x in xs]
        ref = fit_isoflop_optimum(n, eps, budget_id="B", c_flops=1e6)
        for _ in range(5):
            perm = rng.permutation(len(n))
            got = fit_isoflop_optimum(
                [n[i] for i in perm], [eps[i] for i in perm], budget_id="B", c_flops=1e6
            )
            assert abs(got.n_star - ref.n_star) < 1e-10 * ref.n_star

    def test_extrapolated_flag(self):
        # shallow convex arc whose vertex sits far right of the sampled N
        xs = [0.0, 1.0, 2.0]
        eps = [math.exp(0.05 * (x - 10.0) ** 2) for x in xs]
        opt = fit_isoflop_optimum([math.exp(x) for x in xs], eps, budget_id="B", c_flops=1.0)
        assert opt.extrapolated

    def test_d_star_follows_cost_model(self):
        n = [math.e, math.e**2, math.e**3]
        eps = [math.e**2, math.e, math.e**2]
        opt = fit_isoflop_optimum(n, eps, budget_id="B", c_flops=1.2e10, kappa=6.0)
        assert abs(opt.d_star - 1.2e10 / (6.0 * opt.n_star)) < 1e-6


class TestFitPowerLaw:
    def test_exact_law(self):
        s = [10.0, 100.0, 1000.0]
        eps = [math.exp(3.0) * v**-0.5 for v in s]
        fit = fit_power_law(s, eps)
        assert abs(fit.intercept - 3.0) < 1e-10
        assert abs(fit.slope - (-0.5)) < 1e-10
        assert abs(fit.r2 - 1.0) < 1e-10

    def test_flat_data_degenerate_r2(self):
        fit = fit_power_law([1.0, math.e, math.e**2], [math.e, math.e, math.e])
        assert fit.slope == 0.0
        assert fit.r2 is None
        assert "degenerate-r2" in fit.flags

    def test_hand_dataset_against_normal_equations_oracle(self):
        # frozen from an independent normal-equations computation:
        # s = (1, 10, 100), eps = (1, 2, 8)
        fit = fit_power_law([1.0, 10.0, 100.0], [1.0, 2.0, 8.0])
        assert abs(fit.slope - 0.4515449934959718) < 1e-12
        assert abs(fit.intercept - (-0.11552453009332442)) < 1e-12
        assert abs(fit.r2 - 0.9642857142857143) < 1e-12

    def test_zero_variance_s_rejected(self):
        with pytest.raises(FitError):
            fit_power_law([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])

    def test_too_few_points(self):
        with pytest.raises(FitError):
            fit_power_law([1.0, 2.0], [1.0, 2.0])

    def test_scale_invariance(self):
        rng = np.random.default_rng(5)
        s = np.geomspace(1, 1e4, 8)
        eps = 2.5 * s**-0.4 * np.exp(0.01 * rng.standard_normal(8))
        base = fit_power_law(s, eps)
        scaled_eps = fit_power_law(s, 7.3 * eps)
        assert abs(scaled_eps.slope - base.slope) < 1e-10
        assert abs(scaled_eps.r2 - base.r2) < 1e-10
        assert abs(scaled_eps.intercept - (base.intercept + math.log(7.3))) < 1e-10
        scaled_s = fit_power_law(11.0 * s, eps)
        assert abs(scaled_s.slope - base.slope) < 1e-10
        assert abs(scaled_s.r2 - base.r2) < 1e-10


class TestFitAllocation:
    def test_exact_power_law_alpha(self):
        from wxscale.scaling import IsoflopOptimum

        optima = [
            IsoflopOptimum(f"B{i}", c, 3.0 * c**0.7, 2.0 * c**0.3, 1.0, 0.1, False)
            for i, c in enumerate(np.geomspace(1e9, 1e12, 5))
        ]
        alloc = fit_allocation(optima)
        assert abs(alloc.alpha - 0.7) < 1e-10
        assert abs(alloc.beta - 0.3) < 1e-10
        assert alloc.consistent

    def test_two_budgets_rejected(self):
        from wxscale.scaling import IsoflopOptimum

        optima = [
            IsoflopOptimum("B0", 1e9, 1e4, 1e5, 1.0, 0.1, False),
            IsoflopOptimum("B1", 1e10, 3e4, 3e5, 0.8, 0.1, False),
        ]
        with pytest.raises(FitError):
            fit_allocation(optima)

    def test_chinchilla_surface_recovery_with_grid_oracle(self):
        # acceptance-style check: a = b = 0.5, kappa = 6 surface; verify the
        # analytic optimum against a brute-force (N, D) grid search per budget
        spec = SurfaceSpec(e_floor=0.5, amp_n=100.0, exp_n=0.5, amp_d=200.0,
                           exp_d=0.5, kappa=6.0)
        budgets = list(np.geomspace(1e9, 1e12, 5))
        schema = canonical_schema().subset(["t2m"])
        fam = make_isoflop_family(spec, budgets, 7, schema, leads=[6], seed=0,
                                  flatten=0.0)
        res = sweep(fam.runs, fam.records, leads=[6], channels=[POOLED_CHANNEL])
        optima = res.optima[(6, POOLED_CHANNEL)]
        for opt, c in zip(optima, budgets):
            n_grid = np.geomspace(opt.n_star / 100, opt.n_star * 100, 60001)
            eps = np.array(
                [surface_loss(spec, n, c / (6.0 * n)) for n in n_grid]
            )
            n_oracle = n_grid[np.argmin(eps)]
            assert abs(opt.n_star - n_oracle) / n_oracle < 1e-3  # 3 significant figures
        alloc = fit_allocation(list(optima))
        assert abs(alloc.alpha - 0.5) < 0.02
        assert abs(alloc.beta - 0.5) < 0.02
        assert abs(alloc.alpha_plus_beta - 1.0) < 0.03


class TestSweep:
    def make_family(self, **kwargs):
        defaults = dict(
            spec=SurfaceSpec(e_floor=0.0, amp_n=100.0, exp_n=0.5, amp_d=200.0,
                             exp_d=0.5, kappa=6.0),
            budgets=list(np.geomspace(1e9, 1e11, 4)),
            n_per_budget=5,
            schema=canonical_schema().subset(["t2m", "u10m"]),
            leads=[6, 12],
            seed=0,
            flatten=0.0,
        )
        defaults.update(kwargs)
        return make_isoflop_family(**defaults)

    def test_single_cell_reduces_to_composition(self):
        fam = self.make_family()
        res = sweep(fam.runs, fam.records, leads=[6], channels=["t2m"])
        cell = res.cell("params", 6, "t2m")
        # recompute by explicit two-stage composition
        by_budget = {}
        for rp in fam.runs:
            by_budget.setdefault(rp.budget_id, []).append(rp)
        eps_by_run = {
            r.run_id: r.rmse
            for r in fam.records
            if r.lead_hours == 6 and r.channel == "t2m"
        }
        optima = []
        for budget_id in sorted(by_budget, key=lambda b: by_budget[b][0].c_flops):
            members = by_budget[budget_id]
            optima.append(
                fit_isoflop_optimum(
                    [m.n_params for m in members],
                    [eps_by_run[m.run_id] for m in members],
                    budget_id=budget_id,
                    c_flops=members[0].c_flops,
                )
            )
        manual = fit_power_law([o.n_star for o in optima], [o.eps_star for o in optima])
        assert abs(cell.fit.slope - manual.slope) < 1e-12
        assert abs(cell.fit.r2 - manual.r2) < 1e-12

    def test_channel_independent_surface_gives_identical_rows(self):
        fam = self.make_family()
        res = sweep(fam.runs, fam.records)
        m = res.matrix("compute", "slope")
        # all channels (incl. pooled) share the base surface: identical rows
        for i in range(1, m.shape[0]):
            assert np.allclose(m[i], m[0], rtol=0, atol=1e-10)

    def test_per_channel_overrides_separate_slopes(self):
        from wxscale.synth import ChannelTerms

        spec = SurfaceSpec(
            e_floor=0.0, amp_n=100.0, exp_n=0.5, amp_d=200.0, exp_d=0.5, kappa=6.0,
            per_channel={"t2m": ChannelTerms(100.0, 0.3, 200.0, 0.3)},
        )
        fam = self.make_family(spec=spec)
        res = sweep(fam.runs, fam.records, leads=[6])
        slope_t2m = res.cell("params", 6, "t2m").fit.slope
        slope_u10m = res.cell("params", 6, "u10m").fit.slope
        assert abs(slope_t2m - (-0.3)) < 0.02
        assert abs(slope_u10m - (-0.5)) < 0.02

    def test_override_changes_only_its_own_row(self):
        from wxscale.synth import ChannelTerms

        spec = SurfaceSpec(
            e_floor=0.0, amp_n=100.0, exp_n=0.5, amp_d=200.0, exp_d=0.5, kappa=6.0,
            per_channel={"t2m": ChannelTerms(100.0, 0.3, 200.0, 0.3)},
        )
        fam = self.make_family(spec=spec)
        res = sweep(fam.runs, fam.records)
        m = res.matrix("params", "slope")
        i_t2m = res.channels.index("t2m")
        i_u10m = res.channels.index("u10m")
        i_pooled = res.channels.index(POOLED_CHANNEL)
        # non-overridden channels track the base (pooled) surface exactly
        assert np.allclose(m[i_u10m], m[i_pooled], rtol=0, atol=1e-10)
        # the overridden row differs at every lead
        assert np.all(np.abs(m[i_t2m] - m[i_pooled]) > 0.05)

    def test_concave_cell_gets_failure_code(self):
        fam = self.make_family(leads=[6])
        records = list(fam.records)
        # overwrite one channel's values with a concave log-log frontier
        doctored = []
        for r in records:
            if r.channel == "u10m":
                run_idx = int(r.run_id.split("-n")[1])
                x = float(run_idx)
                value = math.exp(-0.25 * (x - 2.0) ** 2)
                doctored.append(
                    MetricRecord(r.run_id, r.ic_timestamp, r.lead_hours, r.channel, value)
                )
            else:
                doctored.append(r)
        res = sweep(fam.runs, doctored, leads=[6])
        cell = res.cell("params", 6, "u10m")
        assert cell.fit is None
        assert cell.failure == FAIL_STAGE1_CONVEXITY
        assert res.cell("params", 6, "t2m").fit is not None
        report = res.to_report_dict()
        assert report["covariates"]["params"]["6"]["u10m"] == {
            "failure": FAIL_STAGE1_CONVEXITY
        }

    def test_compute_slope_non_positive_on_decreasing_surface(self):
        fam = self.make_family()
        res = sweep(fam.runs, fam.records)
        for lead in res.leads:
            cell = res.cell("compute", lead, POOLED_CHANNEL)
            assert cell.fit.slope <= 0.0

    def test_join_failure_lists_rows(self):
        fam = self.make_family(leads=[6])
        records = list(fam.records)
        bad = MetricRecord("ghost-run", 0, 6, "t2m", 1.0)
        records.insert(3, bad)
        with pytest.raises(JoinError, match="rows 5"):
            sweep(fam.runs, records)

    def test_budget_compute_spread_validated(self):
        runs = [
            RunPoint("a", 1e4, 1e6, 1.00e10, "B0"),
            RunPoint("b", 2e4, 5e5, 1.02e10, "B0"),  # 2% spread
        ]
        with pytest.raises(WxscaleError, match="B0"):
            group_budgets(runs)


class TestRunsCsv:
    def test_round_trip(self, tmp_path):
        runs = [
            RunPoint("r0", 1e4, 1e6, 6e10, "B0"),
            RunPoint("r1", 2e4, 5e5, 6e10, "B0"),
        ]
        path = tmp_path / "runs.csv"
        write_runs_csv(runs, path)
        assert read_runs_csv(path) == runs
        assert path.read_text().splitlines()[0] == "run_id,n_params,d_samples,c_flops,budget_id"

    def test_header_required(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("x,y\n1,2\n")
        with pytest.raises(WxscaleError):
            read_runs_csv(path)
