"""Single-process simulation of the hybrid DP-SP-TP layout.

Ranks are in-process workers exchanging array copies through a FIFO message
channel; every exchange is logged as a :class:`CommEvent`, which is this
artifact's stand-in for wire behavior. Execution is deliberately sequential
and deterministic: plans are built in rank order, all sends are enqueued
before any receive, and self-transfers are local copies that never appear in
the trace.

Spatial rank order is row-major with SP1 (latitude) outer: spatial rank
r = i1 * sp2 + i2. With tensor sharding, absolute rank = spatial * tp + t;
data-parallel replicas exist only in communication accounting and use
replica root ranks d * sp1 * sp2 * tp.

Two interchangeable realizations of shifted-window attention are provided:

* ``roll``: a distributed cyclic roll re-aligns the shifted partition with
  the subdomains, windows are then purely local;
* ``halo``: subdomains exchange boundary strips (half a window wide for the
  standard half-window shift) and each rank computes the shifted windows
  overlapping its interior, keeping its own rows. Latitude-edge halos are
  invalid by contract (the seam is not periodic); they are zero-filled
  before attention, which is safe because the seam mask already removes all
  cross-seam logits.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import PartitionError, WxscaleError
from .forecaster import (
    BlockWeights,
    SwinForecaster,
    gelu,
    mlp_forward,
    patchify,
    rmsnorm,
    seam_mask_from_labels,
    shifted_lat_labels,
    unpatchify,
    window_attention,
    window_merge,
    window_partition,
)
from .grid import FieldState
from .util import atomic_write_text

KIND_HALO = "halo"
KIND_ROLL = "roll"
KIND_AR_PARTIAL = "allreduce-partial"
KIND_AR_GRAD = "allreduce-grad"
EVENT_KINDS = (KIND_HALO, KIND_ROLL, KIND_AR_PARTIAL, KIND_AR_GRAD)


@dataclass(frozen=True)
class DecompLayout:
    """dp x sp1 x sp2 (x tp) partition of the patch grid plus halo widths."""

    dp: int = 1
    sp1: int = 1
    sp2: int = 1
    tp: int = 1
    halo_h: int = 0
    halo_w: int = 0

    def __post_init__(self) -> None:
        if min(self.dp, self.sp1, self.sp2, self.tp) < 1:
            raise WxscaleError("layout counts must be positive")
        if self.halo_h < 0 or self.halo_w < 0:
            raise WxscaleError("halo widths must be non-negative")

    @property
    def spatial_ranks(self) -> int:
        return self.sp1 * self.sp2


@dataclass(frozen=True)
class CommEvent:
    kind: str
    src_rank: int
    dst_rank: int
    element_count: int

    def __post_init__(self) -> None:
        if self.kind not in EVENT_KINDS:
            raise WxscaleError(f"unknown event kind {self.kind!r}")
        if self.element_count < 0:
            raise WxscaleError("element count must be >= 0")


class CommTrace:
    """Ordered inter-rank events; deterministic given layout and inputs."""

    def __init__(self) -> None:
        self.events: list[CommEvent] = []

    def add(self, kind: str, src: int, dst: int, count: int) -> None:
        self.events.append(CommEvent(kind, src, dst, count))

    def extend(self, other: "CommTrace") -> None:
        self.events.extend(other.events)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def to_jsonl(self) -> str:
        lines = [
            json.dumps(
                {
                    "kind": e.kind,
                    "src_rank": e.src_rank,
                    "dst_rank": e.dst_rank,
                    "element_count": e.element_count,
                },
                sort_keys=True,
            )
            for e in self.events
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    def write_jsonl(self, path) -> None:
        atomic_write_text(path, self.to_jsonl())


def comm_volume(trace: CommTrace) -> dict[str, int]:
    """Total element count per event kind; all kinds present, zero if unused."""
    totals = {kind: 0 for kind in EVENT_KINDS}
    for e in trace:
        totals[e.kind] += e.element_count
    return totals


class MessageChannel:
    """Per-(src, dst) FIFO queues; payloads are copied at send time."""

    def __init__(self) -> None:
        self._queues: dict[tuple[int, int], deque] = {}

    def send(self, src: int, dst: int, payload: np.ndarray) -> None:
        self._queues.setdefault((src, dst), deque()).append(np.array(payload, copy=True))

    def recv(self, dst: int, src: int) -> np.ndarray:
        q = self._queues.get((src, dst))
        if not q:
            raise WxscaleError(f"no pending message from rank {src} to rank {dst}")
        return q.popleft()


# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class Rect:
    """Half-open patch-index rectangle [r0, r1) x [c0, c1)."""

    r0: int
    r1: int
    c0: int
    c1: int

    @property
    def height(self) -> int:
        return self.r1 - self.r0

    @property
    def width(self) -> int:
        return self.c1 - self.c0


def partition(
    patch_grid: tuple[int, int],
    layout: DecompLayout,
    window: tuple[int, int],
) -> list[Rect]:
    """sp1 x sp2 window-aligned tiles of the patch grid, spatial-rank order."""
    h_p, w_p = patch_grid
    win_h, win_w = window
    if h_p % layout.sp1 != 0:
        raise PartitionError(f"patch rows {h_p} not divisible by sp1={layout.sp1}")
    if w_p % layout.sp2 != 0:
        raise PartitionError(f"patch cols {w_p} not divisible by sp2={layout.sp2}")
    loc_h, loc_w = h_p // layout.sp1, w_p // layout.sp2
    if loc_h % win_h != 0:
        raise PartitionError(
            f"subdomain height {loc_h} is not a whole number of windows (win_h={win_h})"
        )
    if loc_w % win_w != 0:
        raise PartitionError(
            f"subdomain width {loc_w} is not a whole number of windows (win_w={win_w})"
        )
    rects = []
    for i1 in range(layout.sp1):
        for i2 in range(layout.sp2):
            rects.append(
                Rect(i1 * loc_h, (i1 + 1) * loc_h, i2 * loc_w, (i2 + 1) * loc_w)
            )
    return rects


def scatter(global_tensor: np.ndarray, rects: list[Rect]) -> list[np.ndarray]:
    return [np.array(global_tensor[r.r0 : r.r1, r.c0 : r.c1], copy=True) for r in rects]


def gather(local_tensors: list[np.ndarray], rects: list[Rect], patch_grid) -> np.ndarray:
    h_p, w_p = patch_grid
    trailing = local_tensors[0].shape[2:]
    out = np.empty((h_p, w_p, *trailing), dtype=local_tensors[0].dtype)
    for loc, r in zip(local_tensors, rects):
        out[r.r0 : r.r1, r.c0 : r.c1] = loc
    return out


# ---------------------------------------------------------------------------
# halo exchange


def halo_exchange(
    local_tensors: list[np.ndarray],
    layout: DecompLayout,
    patch_grid: tuple[int, int],
    trace: CommTrace | None = None,
) -> tuple[list[np.ndarray], CommTrace]:
    """Fill halo rings of width (layout.halo_h, layout.halo_w) around each tile.

    Longitude neighbors wrap periodically (a single lon rank self-wraps via a
    local copy, which is not traced). Latitude edge halos are never wrapped:
    the northernmost north halo and southernmost south halo stay NaN, the
    explicit invalid marker. Corners arrive with the longitude phase, which
    forwards the already-filled latitude halo rows.
    """
    sp1, sp2 = layout.sp1, layout.sp2
    hh, hw = layout.halo_h, layout.halo_w
    if len(local_tensors) != sp1 * sp2:
        raise WxscaleError("one local tensor per spatial rank required")
    h_p, w_p = patch_grid
    loc_h, loc_w = h_p // sp1, w_p // sp2
    if hh > loc_h or hw > loc_w:
        raise WxscaleError(
            f"halo ({hh}, {hw}) wider than neighbor interior ({loc_h}, {loc_w})"
        )
    trace = trace if trace is not None else CommTrace()
    trailing = local_tensors[0].shape[2:]
    padded = []
    for loc in local_tensors:
        if loc.shape[:2] != (loc_h, loc_w):
            raise WxscaleError("local tensor shapes must match the uniform tiling")
        p = np.full((loc_h + 2 * hh, loc_w + 2 * hw, *trailing), np.nan, dtype=np.float64)
        p[hh : hh + loc_h, hw : hw + loc_w] = loc
        padded.append(p)

    def rank(i1: int, i2: int) -> int:
        return i1 * sp2 + i2

    channel = MessageChannel()
    # Phase 1: latitude (non-periodic). Send interior boundary rows.
    if hh > 0 and sp1 > 1:
        for i1 in range(sp1):
            for i2 in range(sp2):
                src = rank(i1, i2)
                core = padded[src][hh : hh + loc_h, hw : hw + loc_w]
                if i1 > 0:
                    channel.send(src, rank(i1 - 1, i2), core[:hh])
                    trace.add(KIND_HALO, src, rank(i1 - 1, i2), int(core[:hh].size))
                if i1 < sp1 - 1:
                    channel.send(src, rank(i1 + 1, i2), core[-hh:])
                    trace.add(KIND_HALO, src, rank(i1 + 1, i2), int(core[-hh:].size))
        for i1 in range(sp1):
            for i2 in range(sp2):
                dst = rank(i1, i2)
                if i1 > 0:
                    padded[dst][:hh, hw : hw + loc_w] = channel.recv(dst, rank(i1 - 1, i2))
                if i1 < sp1 - 1:
                    padded[dst][hh + loc_h :, hw : hw + loc_w] = channel.recv(
                        dst, rank(i1 + 1, i2)
                    )
    # Phase 2: longitude (periodic); strips include latitude halo rows so
    # diagonal corners are forwarded in one extra hop.
    if hw > 0:
        if sp2 == 1:
            for p in padded:
                p[:, :hw] = p[:, loc_w : loc_w + hw]
                p[:, hw + loc_w :] = p[:, hw : 2 * hw]
        else:
            for i1 in range(sp1):
                for i2 in range(sp2):
                    src = rank(i1, i2)
                    strip = padded[src]
                    west, east = rank(i1, (i2 - 1) % sp2), rank(i1, (i2 + 1) % sp2)
                    channel.send(src, west, strip[:, hw : 2 * hw])
                    trace.add(KIND_HALO, src, west, int(strip[:, hw : 2 * hw].size))
                    channel.send(src, east, strip[:, loc_w : loc_w + hw])
                    trace.add(KIND_HALO, src, east, int(strip[:, loc_w : loc_w + hw].size))
            for i1 in range(sp1):
                for i2 in range(sp2):
                    dst = rank(i1, i2)
                    west, east = rank(i1, (i2 - 1) % sp2), rank(i1, (i2 + 1) % sp2)
                    padded[dst][:, hw + loc_w :] = channel.recv(dst, east)
                    padded[dst][:, :hw] = channel.recv(dst, west)
    return padded, trace


# ---------------------------------------------------------------------------
# distributed cyclic roll


def _roll_segments(dst_lo: int, dst_hi: int, shift: int, total: int, block: int):
    """Contiguous (dst_start, dst_stop, src_start, owner) runs for one axis.

    Destination index i receives source index (i - shift) mod total; runs
    break at wrap points and at source-owner boundaries.
    """
    i = dst_lo
    while i < dst_hi:
        s = (i - shift) % total
        run = min(dst_hi - i, total - s, block - (s % block))
        yield (i, i + run, s, s // block)
        i += run


def distributed_roll(
    local_tensors: list[np.ndarray],
    shift: tuple[int, int],
    layout: DecompLayout,
    patch_grid: tuple[int, int],
    trace: CommTrace | None = None,
    tp_stride: int = 1,
) -> tuple[list[np.ndarray], CommTrace]:
    """Cyclic roll of the logically assembled grid across spatial tiles.

    Gathering the results equals ``cyclic_shift(gathered_inputs, shift)``
    bit-exactly. ``tp_stride`` spaces spatial ranks in trace numbering when
    tensor shards share each tile.
    """
    sp1, sp2 = layout.sp1, layout.sp2
    h_p, w_p = patch_grid
    s_h, s_w = shift
    if abs(s_h) >= h_p or abs(s_w) >= w_p:
        raise WxscaleError(f"shift {shift} out of range for patch grid {patch_grid}")
    if len(local_tensors) != sp1 * sp2:
        raise WxscaleError("one local tensor per spatial rank required")
    loc_h, loc_w = h_p // sp1, w_p // sp2
    trace = trace if trace is not None else CommTrace()
    channel = MessageChannel()
    outputs = [np.empty_like(loc) for loc in local_tensors]

    plan = []  # (src, dst, src_slice, dst_slice) in destination-rank order
    for i1 in range(sp1):
        for i2 in range(sp2):
            dst = i1 * sp2 + i2
            row_runs = list(_roll_segments(i1 * loc_h, (i1 + 1) * loc_h, s_h, h_p, loc_h))
            col_runs = list(_roll_segments(i2 * loc_w, (i2 + 1) * loc_w, s_w, w_p, loc_w))
            for dr0, dr1, sr0, owner_r in row_runs:
                for dc0, dc1, sc0, owner_c in col_runs:
                    src = owner_r * sp2 + owner_c
                    src_slice = (
                        slice(sr0 - owner_r * loc_h, sr0 - owner_r * loc_h + (dr1 - dr0)),
                        slice(sc0 - owner_c * loc_w, sc0 - owner_c * loc_w + (dc1 - dc0)),
                    )
                    dst_slice = (
                        slice(dr0 - i1 * loc_h, dr1 - i1 * loc_h),
                        slice(dc0 - i2 * loc_w, dc1 - i2 * loc_w),
                    )
                    plan.append((src, dst, src_slice, dst_slice))

    for src, dst, src_slice, dst_slice in plan:
        if src == dst:
            continue
        chunk = local_tensors[src][src_slice]
        channel.send(src, dst, chunk)
        trace.add(KIND_ROLL, src * tp_stride, dst * tp_stride, int(chunk.size))
    for src, dst, src_slice, dst_slice in plan:
        if src == dst:
            outputs[dst][dst_slice] = local_tensors[src][src_slice]
        else:
            outputs[dst][dst_slice] = channel.recv(dst, src)
    return outputs, trace


# ---------------------------------------------------------------------------
# tensor sharding


def _allreduce_sum(
    partials: list[np.ndarray],
    trace: CommTrace,
    kind: str,
    rank_of: list[int],
) -> np.ndarray:
    """Reduce-to-root-plus-broadcast AllReduce over the given absolute ranks."""
    total = partials[0]
    for p in partials[1:]:
        total = total + p
    root = rank_of[0]
    for r in rank_of[1:]:
        trace.add(kind, r, root, int(partials[0].size))
    for r in rank_of[1:]:
        trace.add(kind, root, r, int(total.size))
    return total


def sharded_attention(
    xw: np.ndarray,
    bw: BlockWeights,
    heads: int,
    window: tuple[int, int],
    tp: int,
    mask: np.ndarray | None = None,
    trace: CommTrace | None = None,
    rank_base: int = 0,
) -> tuple[np.ndarray, CommTrace]:
    """Head-sharded window attention; shards' partial outputs are AllReduced.

    Equals the unsharded :func:`window_attention` to float-accumulation
    order. tp=1 produces no reduction events.
    """
    trace = trace if trace is not None else CommTrace()
    if heads % tp != 0:
        raise WxscaleError(f"heads {heads} not divisible by tp={tp}")
    if tp == 1:
        return window_attention(xw, bw, heads, window, mask), trace
    per = heads // tp
    partials = [
        window_attention(xw, bw, heads, window, mask, head_slice=slice(t * per, (t + 1) * per))
        for t in range(tp)
    ]
    ranks = [rank_base + t for t in range(tp)]
    out = _allreduce_sum(partials, trace, KIND_AR_PARTIAL, ranks) + bw.wo_b
    return out, trace


def sharded_mlp(
    x: np.ndarray,
    bw: BlockWeights,
    tp: int,
    trace: CommTrace | None = None,
    rank_base: int = 0,
) -> tuple[np.ndarray, CommTrace]:
    """Hidden-dimension-sharded MLP with one partial-sum reduction."""
    trace = trace if trace is not None else CommTrace()
    if tp == 1:
        return mlp_forward(x, bw), trace
    hidden = bw.mlp_w1.shape[1]
    if hidden % tp != 0:
        raise WxscaleError(f"hidden dim {hidden} not divisible by tp={tp}")
    per = hidden // tp
    partials = []
    for t in range(tp):
        lo, hi = t * per, (t + 1) * per
        h = gelu(x @ bw.mlp_w1[:, lo:hi] + bw.mlp_b1[lo:hi])
        partials.append(h @ bw.mlp_w2[lo:hi, :])
    ranks = [rank_base + t for t in range(tp)]
    out = _allreduce_sum(partials, trace, KIND_AR_PARTIAL, ranks) + bw.mlp_b2
    return out, trace


# ---------------------------------------------------------------------------
# decomposed forward


def _ext_index(
    global_idx: int, lo: int, hi: int, origin: int, span: int, total: int
) -> int:
    """Index into an extended (haloed) axis for a global index, or -1.

    Interior indices map to the interior band: when a tile spans the whole
    axis its halo slots alias interior positions modulo ``total``, and the
    latitude halo alias may be the invalid NaN marker.
    """
    if lo <= global_idx < hi:
        return global_idx - origin
    d = (global_idx - origin) % total
    return d if d < span else -1


class DecomposedSwinForecaster:
    """Runs a :class:`SwinForecaster` step under a DP-SP-TP layout.

    The result matches the sequential model to float-reassociation level
    (<= ~1e-12 relative here; the verified bound is 1e-10). ``shift_strategy``
    picks how shifted blocks see across subdomain boundaries: ``"roll"``
    (distributed cyclic roll, then purely local windows) or ``"halo"``
    (boundary-strip exchange, straddling windows computed redundantly).
    """

    step_hours = SwinForecaster.step_hours

    def __init__(
        self,
        model: SwinForecaster,
        layout: DecompLayout,
        shift_strategy: str = "roll",
    ):
        if shift_strategy not in ("roll", "halo"):
            raise WxscaleError(f"unknown shift strategy {shift_strategy!r}")
        self.model = model
        self.layout = layout
        self.strategy = shift_strategy
        cfg = model.cfg
        if cfg.heads % layout.tp != 0:
            raise WxscaleError(f"heads {cfg.heads} not divisible by tp={layout.tp}")
        if cfg.hidden_dim % layout.tp != 0:
            raise WxscaleError(
                f"mlp hidden dim {cfg.hidden_dim} not divisible by tp={layout.tp}"
            )
        self.rects = partition(model.patch_grid, layout, cfg.window)

    @property
    def param_count(self) -> int:
        return self.model.param_count

    def step(self, state: FieldState) -> FieldState:
        out, _ = self.step_with_trace(state)
        return out

    def step_with_trace(self, state: FieldState) -> tuple[FieldState, CommTrace]:
        model = self.model
        model._check_state(state)
        cfg = model.cfg
        layout = self.layout
        trace = CommTrace()
        h_p, w_p = model.patch_grid
        win = cfg.window
        tp = layout.tp

        x = state.values
        if model.static_fields is not None:
            x = np.concatenate([x, model.static_fields], axis=0)
        patches = patchify(x, cfg.patch_size)
        locals_ = scatter(patches, self.rects)
        locals_ = [loc @ model.weights.embed_w + model.weights.embed_b for loc in locals_]

        for i, bw in enumerate(model.weights.blocks):
            shifted = i % 2 == 1
            locals_ = self._attention_stage(locals_, bw, shifted, trace)
            new = []
            for r_idx, loc in enumerate(locals_):
                y = rmsnorm(loc, bw.norm2)
                m, _ = sharded_mlp(y, bw, tp, trace, rank_base=r_idx * tp)
                new.append(loc + m)
            locals_ = new

        out_locals = [
            loc @ model.weights.unembed_w + model.weights.unembed_b for loc in locals_
        ]
        out_patches = gather(out_locals, self.rects, (h_p, w_p))
        values = unpatchify(out_patches, cfg.patch_size, model.schema.total)

        if layout.dp > 1:
            # DP exists only in accounting: one gradient AllReduce of all
            # parameters per step, between replica root ranks.
            roots = [d * layout.spatial_ranks * tp for d in range(layout.dp)]
            for r in roots[1:]:
                trace.add(KIND_AR_GRAD, r, roots[0], model.param_count)
            for r in roots[1:]:
                trace.add(KIND_AR_GRAD, roots[0], r, model.param_count)

        out_state = FieldState(
            model.schema, model.grid, values, state.timestamp + self.step_hours
        )
        return out_state, trace

    # -- attention stages ---------------------------------------------------

    def _attention_stage(
        self,
        locals_: list[np.ndarray],
        bw: BlockWeights,
        shifted: bool,
        trace: CommTrace,
    ) -> list[np.ndarray]:
        cfg = self.model.cfg
        win = cfg.window
        s_h = win[0] // 2 if shifted else 0
        s_w = win[1] // 2 if shifted else 0
        normed = [rmsnorm(loc, bw.norm1) for loc in locals_]
        if not shifted or (s_h == 0 and s_w == 0):
            att = self._local_windows(normed, bw, mask_rows=None, trace=trace)
        elif self.strategy == "roll":
            att = self._shifted_via_roll(normed, bw, (s_h, s_w), trace)
        else:
            att = self._shifted_via_halo(normed, bw, (s_h, s_w), trace)
        return [loc + a for loc, a in zip(locals_, att)]

    def _local_windows(
        self,
        normed: list[np.ndarray],
        bw: BlockWeights,
        mask_rows: np.ndarray | None,
        trace: CommTrace,
    ) -> list[np.ndarray]:
        """Aligned-window attention; optional per-global-row labels for masks."""
        cfg = self.model.cfg
        win = cfg.window
        out = []
        for r_idx, (rect, loc) in enumerate(zip(self.rects, normed)):
            xw = window_partition(loc, win)
            mask = None
            if mask_rows is not None:
                rows = mask_rows[rect.r0 : rect.r1]
                grid_labels = np.repeat(rows[:, None], rect.width, axis=1)[..., None]
                labels = window_partition(grid_labels, win)[..., 0]
                mask = seam_mask_from_labels(labels)
            aw, _ = sharded_attention(
                xw, bw, cfg.heads, win, self.layout.tp, mask, trace,
                rank_base=r_idx * self.layout.tp,
            )
            out.append(window_merge(aw, win, (rect.height, rect.width)))
        return out

    def _shifted_via_roll(
        self,
        normed: list[np.ndarray],
        bw: BlockWeights,
        shift: tuple[int, int],
        trace: CommTrace,
    ) -> list[np.ndarray]:
        s_h, s_w = shift
        patch_grid = self.model.patch_grid
        rolled, _ = distributed_roll(
            normed, (-s_h, -s_w), self.layout, patch_grid, trace, tp_stride=self.layout.tp
        )
        labels = shifted_lat_labels(patch_grid[0], s_h)
        att = self._local_windows(rolled, bw, mask_rows=labels, trace=trace)
        back, _ = distributed_roll(
            att, (s_h, s_w), self.layout, patch_grid, trace, tp_stride=self.layout.tp
        )
        return back

    def _shifted_via_halo(
        self,
        normed: list[np.ndarray],
        bw: BlockWeights,
        shift: tuple[int, int],
        trace: CommTrace,
    ) -> list[np.ndarray]:
        cfg = self.model.cfg
        win_h, win_w = cfg.window
        s_h, s_w = shift
        h_p, w_p = self.model.patch_grid
        hh = 0 if s_h == 0 else max(s_h, win_h - s_h)
        hw = 0 if s_w == 0 else max(s_w, win_w - s_w)
        halo_layout = DecompLayout(
            dp=1, sp1=self.layout.sp1, sp2=self.layout.sp2, tp=1, halo_h=hh, halo_w=hw
        )
        padded, _ = halo_exchange(normed, halo_layout, (h_p, w_p), trace)
        e = normed[0].shape[-1]
        t_len = win_h * win_w
        out = []
        for r_idx, (rect, pad) in enumerate(zip(self.rects, padded)):
            pad = np.nan_to_num(pad, nan=0.0)
            span_h = rect.height + 2 * hh
            span_w = rect.width + 2 * hw
            origin_r, origin_c = rect.r0 - hh, rect.c0 - hw
            # Shifted windows start at rows/cols congruent to the shift; keep
            # those overlapping this tile's interior.
            row_starts = []
            for k in range(rect.r0 // win_h - 1, rect.r1 // win_h):
                g = (k * win_h + s_h) % h_p
                if g not in row_starts:
                    row_starts.append(g)
            col_starts = []
            for k in range(rect.c0 // win_w - 1, rect.c1 // win_w):
                g = (k * win_w + s_w) % w_p
                if g not in col_starts:
                    col_starts.append(g)

            xs, masks, places = [], [], []
            for g_r in row_starts:
                rows = [(g_r + i) % h_p for i in range(win_h)]
                own_r = [i for i, row in enumerate(rows) if rect.r0 <= row < rect.r1]
                if not own_r:
                    continue
                for g_c in col_starts:
                    cols = [(g_c + j) % w_p for j in range(win_w)]
                    own_c = [j for j, col in enumerate(cols) if rect.c0 <= col < rect.c1]
                    if not own_c:
                        continue
                    ext_r = [
                        _ext_index(row, rect.r0, rect.r1, origin_r, span_h, h_p)
                        for row in rows
                    ]
                    ext_c = [
                        _ext_index(col, rect.c0, rect.c1, origin_c, span_w, w_p)
                        for col in cols
                    ]
                    if min(ext_r) < 0 or min(ext_c) < 0:
                        raise WxscaleError("halo too narrow for the shifted window")
                    xw = pad[np.ix_(ext_r, ext_c)].reshape(t_len, e)
                    labels = np.repeat(
                        (np.asarray(rows) < s_h).astype(np.int64)[:, None], win_w, axis=1
                    ).reshape(t_len)
                    masks.append(seam_mask_from_labels(labels))
                    xs.append(xw)
                    places.append((rows, cols, own_r, own_c))

            att_loc = np.zeros((rect.height, rect.width, e), dtype=np.float64)
            if xs:
                xw_all = np.stack(xs)
                any_mask = any(m is not None for m in masks)
                mask_all = None
                if any_mask:
                    mask_all = np.zeros((len(xs), t_len, t_len), dtype=np.float64)
                    for i, m in enumerate(masks):
                        if m is not None:
                            mask_all[i] = m
                aw, _ = sharded_attention(
                    xw_all, bw, cfg.heads, cfg.window, self.layout.tp, mask_all, trace,
                    rank_base=r_idx * self.layout.tp,
                )
                aw = aw.reshape(len(xs), win_h, win_w, e)
                for i, (rows, cols, own_r, own_c) in enumerate(places):
                    for wi in own_r:
                        for wj in own_c:
                            att_loc[rows[wi] - rect.r0, cols[wj] - rect.c0] = aw[i, wi, wj]
            out.append(att_loc)
        return out
