import json

import numpy as np
import pytest

from wxscale.decomp import (
    CommTrace,
    DecompLayout,
    DecomposedSwinForecaster,
    KIND_HALO,
    comm_volume,
    distributed_roll,
    gather,
    halo_exchange,
    partition,
    scatter,
    sharded_attention,
    sharded_mlp,
)
from wxscale.errors import PartitionError, WxscaleError
from wxscale.forecaster import (
    BlockWeights,
    SwinConfig,
    SwinForecaster,
    cyclic_shift,
    mlp_forward,
    window_attention,
)
from wxscale.grid import GridSpec, canonical_schema

from conftest import random_state

PATCH_GRID = (8, 16)
WIN = (2, 2)


def make_weights(seed=0, embed=8, heads=2):
    cfg = SwinConfig(patch_size=(2, 2), embed_dim=embed, depth=1, heads=heads, window=WIN,
                     seed=seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    return BlockWeights(rng, cfg), cfg


class TestPartition:
    def test_single_rank_is_whole_grid(self):
        rects = partition(PATCH_GRID, DecompLayout(), WIN)
        assert len(rects) == 1
        r = rects[0]
        assert (r.r0, r.r1, r.c0, r.c1) == (0, 8, 0, 16)

    def test_2x4_tiles(self):
        rects = partition(PATCH_GRID, DecompLayout(sp1=2, sp2=4), WIN)
        assert len(rects) == 8
        assert all(r.height == 4 and r.width == 4 for r in rects)
        # row-major with SP1 outer
        assert (rects[0].r0, rects[0].c0) == (0, 0)
        assert (rects[1].r0, rects[1].c0) == (0, 4)
        assert (rects[4].r0, rects[4].c0) == (4, 0)

    def test_indivisible_names_dimension(self):
        with pytest.raises(PartitionError, match="sp2=5"):
            partition(PATCH_GRID, DecompLayout(sp2=5), WIN)
        with pytest.raises(PartitionError, match="win_h=3"):
            partition(PATCH_GRID, DecompLayout(sp1=2), (3, 2))  # 4-row tile, 3-row window
        with pytest.raises(PartitionError, match="whole number of windows"):
            partition(PATCH_GRID, DecompLayout(sp1=8), (2, 2))


class TestHaloExchange:
    def test_single_rank_self_wrap_only(self):
        rng = np.random.default_rng(0)
        t = rng.standard_normal((*PATCH_GRID, 3))
        layout = DecompLayout(halo_h=1, halo_w=1)
        padded, trace = halo_exchange([t.copy()], layout, PATCH_GRID)
        assert len(trace) == 0  # self-wrap is a local copy, not an event
        p = padded[0]
        assert np.array_equal(p[1:-1, 0], t[:, -1])  # west halo wraps east edge
        assert np.array_equal(p[1:-1, -1], t[:, 0])
        assert np.isnan(p[0, 1:-1]).all()  # latitude edges invalid
        assert np.isnan(p[-1, 1:-1]).all()

    def test_halos_match_global_slices(self):
        rng = np.random.default_rng(1)
        t = rng.standard_normal((*PATCH_GRID, 2))
        layout = DecompLayout(sp1=2, sp2=2, halo_h=1, halo_w=1)
        rects = partition(PATCH_GRID, layout, WIN)
        padded, _ = halo_exchange(scatter(t, rects), layout, PATCH_GRID)
        for rect, p in zip(rects, padded):
            # gather-and-compare oracle against the global tensor
            rows = [(rect.r0 - 1) if rect.r0 > 0 else None] + list(range(rect.r0, rect.r1))
            if rect.r1 < PATCH_GRID[0]:
                rows.append(rect.r1)
            else:
                rows.append(None)
            cols = [(rect.c0 - 1) % PATCH_GRID[1]] + list(range(rect.c0, rect.c1)) + [
                rect.c1 % PATCH_GRID[1]
            ]
            for pi, row in enumerate(rows):
                for pj, col in enumerate(cols):
                    if row is None:
                        assert np.isnan(p[pi, pj]).all()
                    else:
                        assert np.array_equal(p[pi, pj], t[row, col])

    def test_northernmost_halo_invalid(self):
        rng = np.random.default_rng(2)
        t = rng.standard_normal((*PATCH_GRID, 1))
        layout = DecompLayout(sp1=2, sp2=1, halo_h=2, halo_w=0)
        rects = partition(PATCH_GRID, layout, WIN)
        padded, _ = halo_exchange(scatter(t, rects), layout, PATCH_GRID)
        assert np.isnan(padded[0][:2]).all()  # top rank north halo
        assert np.isnan(padded[-1][-2:]).all()  # bottom rank south halo
        assert np.array_equal(padded[0][-2:, :], t[4:6, :])  # south halo is real data

    def test_halo_wider_than_interior_rejected(self):
        layout = DecompLayout(sp1=2, sp2=2, halo_h=5, halo_w=1)
        rects = partition(PATCH_GRID, layout, WIN)
        rng = np.random.default_rng(3)
        t = rng.standard_normal((*PATCH_GRID, 1))
        with pytest.raises(WxscaleError, match="wider than neighbor interior"):
            halo_exchange(scatter(t, rects), layout, PATCH_GRID)

    def test_lon_halo_event_count_scales_with_sp2(self):
        rng = np.random.default_rng(4)
        t = rng.standard_normal((*PATCH_GRID, 1))

        def lon_events(sp2):
            layout = DecompLayout(sp1=1, sp2=sp2, halo_h=0, halo_w=1)
            rects = partition(PATCH_GRID, layout, WIN)
            _, trace = halo_exchange(scatter(t, rects), layout, PATCH_GRID)
            return sum(1 for e in trace if e.kind == KIND_HALO)

        assert lon_events(4) == 2 * lon_events(2)

    def test_trace_determinism(self):
        rng = np.random.default_rng(5)
        t = rng.standard_normal((*PATCH_GRID, 2))
        layout = DecompLayout(sp1=2, sp2=4, halo_h=1, halo_w=1)
        rects = partition(PATCH_GRID, layout, WIN)
        _, tr1 = halo_exchange(scatter(t, rects), layout, PATCH_GRID)
        _, tr2 = halo_exchange(scatter(t, rects), layout, PATCH_GRID)
        assert tr1.events == tr2.events


class TestDistributedRoll:
    def test_zero_shift_identity_empty_trace(self):
        rng = np.random.default_rng(6)
        t = rng.standard_normal((*PATCH_GRID, 2))
        layout = DecompLayout(sp1=2, sp2=2)
        rects = partition(PATCH_GRID, layout, WIN)
        rolled, trace = distributed_roll(scatter(t, rects), (0, 0), layout, PATCH_GRID)
        assert len(trace) == 0
        assert np.array_equal(gather(rolled, rects, PATCH_GRID), t)

    def test_full_subdomain_swap(self):
        rng = np.random.default_rng(7)
        t = rng.standard_normal((*PATCH_GRID, 1))
        layout = DecompLayout(sp1=1, sp2=2)
        rects = partition(PATCH_GRID, layout, WIN)
        locs = scatter(t, rects)
        rolled, trace = distributed_roll(locs, (0, 8), layout, PATCH_GRID)
        assert np.array_equal(rolled[0], locs[1])
        assert np.array_equal(rolled[1], locs[0])
        kinds = {(e.src_rank, e.dst_rank) for e in trace}
        assert kinds == {(0, 1), (1, 0)}
        assert all(e.element_count == locs[0].size for e in trace)

    def test_matches_sequential_roll_bit_exactly(self):
        rng = np.random.default_rng(8)
        for seed in range(5):
            t = rng.standard_normal((*PATCH_GRID, 3))
            for layout in (DecompLayout(sp1=2, sp2=4), DecompLayout(sp1=2, sp2=2),
                           DecompLayout(sp1=1, sp2=4)):
                rects = partition(PATCH_GRID, layout, WIN)
                shift = (int(rng.integers(-7, 8)), int(rng.integers(-15, 16)))
                rolled, _ = distributed_roll(scatter(t, rects), shift, layout, PATCH_GRID)
                assert np.array_equal(
                    gather(rolled, rects, PATCH_GRID), cyclic_shift(t, shift)
                )

    def test_out_of_range_shift_rejected(self):
        layout = DecompLayout(sp1=2, sp2=2)
        rects = partition(PATCH_GRID, layout, WIN)
        t = np.zeros((*PATCH_GRID, 1))
        with pytest.raises(WxscaleError):
            distributed_roll(scatter(t, rects), (8, 0), layout, PATCH_GRID)


class TestShardedOps:
    def test_tp1_no_events(self):
        bw, cfg = make_weights(seed=1)
        rng = np.random.default_rng(9)
        xw = rng.standard_normal((4, 4, cfg.embed_dim))
        out, trace = sharded_attention(xw, bw, cfg.heads, WIN, tp=1)
        assert len(trace) == 0
        assert np.array_equal(out, window_attention(xw, bw, cfg.heads, WIN))

    def test_tp2_matches_sequential(self):
        bw, cfg = make_weights(seed=2, embed=16, heads=4)
        rng = np.random.default_rng(10)
        xw = rng.standard_normal((6, 4, cfg.embed_dim))
        ref = window_attention(xw, bw, cfg.heads, WIN)
        out, trace = sharded_attention(xw, bw, cfg.heads, WIN, tp=2)
        dev = np.max(np.abs(out - ref)) / np.max(np.abs(ref))
        assert dev < 1e-10
        assert len(trace) == 2  # reduce + broadcast for the non-root shard
        assert all(e.kind == "allreduce-partial" for e in trace)

    def test_indivisible_heads_rejected(self):
        bw, cfg = make_weights(seed=3, embed=16, heads=4)
        xw = np.zeros((2, 4, cfg.embed_dim))
        with pytest.raises(WxscaleError):
            sharded_attention(xw, bw, cfg.heads, WIN, tp=3)

    def test_sharded_mlp_matches_sequential(self):
        bw, cfg = make_weights(seed=4, embed=8)
        rng = np.random.default_rng(11)
        x = rng.standard_normal((5, 3, cfg.embed_dim))
        ref = mlp_forward(x, bw)
        out, trace = sharded_mlp(x, bw, tp=2)
        assert np.max(np.abs(out - ref)) < 1e-12 * np.max(np.abs(ref))
        assert len(trace) == 2


class TestCommVolume:
    def test_empty_trace_all_zero(self):
        totals = comm_volume(CommTrace())
        assert totals == {"halo": 0, "roll": 0, "allreduce-partial": 0,
                          "allreduce-grad": 0}

    def test_single_event(self):
        trace = CommTrace()
        trace.add("halo", 0, 1, 128)
        assert comm_volume(trace)["halo"] == 128

    def test_2x2_halo_totals_perimeter_arithmetic(self):
        # hand count: lat phase 2*(sp1-1)*sp2 events of hh*w_loc*E elements;
        # lon phase 2*sp1*sp2 events of (h_loc+2hh)*hw*E elements
        rng = np.random.default_rng(12)
        e_dim = 3
        t = rng.standard_normal((*PATCH_GRID, e_dim))
        layout = DecompLayout(sp1=2, sp2=2, halo_h=1, halo_w=1)
        rects = partition(PATCH_GRID, layout, WIN)
        _, trace = halo_exchange(scatter(t, rects), layout, PATCH_GRID)
        lat_events = 2 * (2 - 1) * 2
        lon_events = 2 * 2 * 2
        expected = lat_events * (1 * 8 * e_dim) + lon_events * ((4 + 2) * 1 * e_dim)
        assert comm_volume(trace)["halo"] == expected

    def test_jsonl_round_trip(self, tmp_path):
        trace = CommTrace()
        trace.add("roll", 0, 3, 64)
        trace.add("halo", 1, 2, 32)
        path = tmp_path / "trace.jsonl"
        trace.write_jsonl(path)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 2
        first = json.loads(lines[0])
        assert first == {"kind": "roll", "src_rank": 0, "dst_rank": 3,
                         "element_count": 64}


class TestDecomposedForward:
    @pytest.fixture
    def setup(self):
        grid = GridSpec.equiangular(16, 32)
        schema = canonical_schema().subset(["t2m", "u10m", "v10m"])
        cfg = SwinConfig(patch_size=(2, 2), embed_dim=8, depth=2, heads=2,
                         window=WIN, seed=42)
        model = SwinForecaster(cfg, grid, schema)
        state = random_state(schema, grid, seed=0)
        return model, state, model.step(state)

    @pytest.mark.parametrize("strategy", ["roll", "halo"])
    @pytest.mark.parametrize("sp1", [1, 2])
    @pytest.mark.parametrize("sp2", [1, 2, 4])
    @pytest.mark.parametrize("tp", [1, 2])
    def test_equivalence_all_layouts(self, setup, strategy, sp1, sp2, tp):
        model, state, ref = setup
        layout = DecompLayout(sp1=sp1, sp2=sp2, tp=tp)
        dec = DecomposedSwinForecaster(model, layout, strategy)
        out = dec.step(state)
        dev = np.max(np.abs(out.values - ref.values)) / np.max(np.abs(ref.values))
        assert dev < 1e-10
        assert out.timestamp == ref.timestamp

    def test_trace_determinism(self, setup):
        model, state, _ = setup
        dec = DecomposedSwinForecaster(model, DecompLayout(sp1=2, sp2=2, tp=2), "roll")
        _, tr1 = dec.step_with_trace(state)
        _, tr2 = dec.step_with_trace(state)
        assert tr1.events == tr2.events
        assert len(tr1) > 0

    def test_dp_gradient_accounting(self, setup):
        model, state, _ = setup
        dec = DecomposedSwinForecaster(model, DecompLayout(dp=4, sp1=2, sp2=2), "roll")
        _, trace = dec.step_with_trace(state)
        grad = [e for e in trace if e.kind == "allreduce-grad"]
        assert len(grad) == 2 * (4 - 1)
        assert all(e.element_count == model.param_count for e in grad)

    def test_unknown_strategy_rejected(self, setup):
        model, _, _ = setup
        with pytest.raises(WxscaleError):
            DecomposedSwinForecaster(model, DecompLayout(), "teleport")

    @pytest.mark.parametrize("strategy", ["roll", "halo"])
    @pytest.mark.parametrize(
        "window,grid_shape,layouts",
        [
            ((4, 2), (16, 32), [(2, 2), (2, 4)]),  # rectangular window
            ((3, 3), (18, 36), [(3, 2), (1, 6)]),  # odd window, asymmetric halo
            ((2, 2), (16, 32), [(4, 8)]),          # exactly one window per rank
        ],
    )
    def test_equivalence_hard_geometries(self, strategy, window, grid_shape, layouts):
        grid = GridSpec.equiangular(*grid_shape)
        schema = canonical_schema().subset(["t2m", "u10m"])
        cfg = SwinConfig(patch_size=(2, 2), embed_dim=8, depth=3, heads=2,
                         window=window, seed=11)
        model = SwinForecaster(cfg, grid, schema)
        state = random_state(schema, grid, seed=1)
        ref = model.step(state)
        for sp1, sp2 in layouts:
            dec = DecomposedSwinForecaster(
                model, DecompLayout(sp1=sp1, sp2=sp2), strategy
            )
            out = dec.step(state)
            dev = np.max(np.abs(out.values - ref.values)) / np.max(np.abs(ref.values))
            assert dev < 1e-10, (sp1, sp2)
