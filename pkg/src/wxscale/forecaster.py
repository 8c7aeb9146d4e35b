"""One-step forecasters: a shifted-window attention model and analytic surrogates.

The attention model is forward-only. Weights are generated deterministically
from a seed (NumPy PCG64, fixed draw order), so any configuration is
reproducible bit-exactly; nothing here trains. Layout conventions:

* patch tokens are (H_p, W_p, E) with H_p = n_lat / p_h rows ordered
  north to south in grid order and W_p = n_lon / p_w periodic columns;
* even-indexed blocks use the aligned window partition, odd-indexed blocks
  shift it by half a window in both axes;
* window shifts are realized as cyclic index rolls. Longitude wrap is
  physical; the latitude wrap is not, so attention logits between rows that
  crossed the north/south seam get an additive -inf mask;
* queries and keys are L2-normalized per head and scaled by one generated
  temperature per head before the dot product.
"""

from __future__ import annotations

import abc
from dataclasses import dataclass

import numpy as np

from .errors import SchemaError, WxscaleError
from .grid import STEP_HOURS, ChannelSchema, FieldState, GridSpec

_NORM_EPS = 1e-6
_QK_EPS = 1e-12


@dataclass(frozen=True)
class SwinConfig:
    """Shape of the windowed-attention forecaster; seed pins its weights."""

    patch_size: tuple[int, int]
    embed_dim: int
    depth: int
    heads: int
    window: tuple[int, int]
    mlp_ratio: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.patch_size) < 1 or min(self.window) < 1:
            raise WxscaleError("patch and window sizes must be positive")
        if self.embed_dim < 1 or self.depth < 0 or self.heads < 1:
            raise WxscaleError("embed_dim/depth/heads out of range")
        if self.embed_dim % self.heads != 0:
            raise WxscaleError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.mlp_ratio <= 0:
            raise WxscaleError("mlp_ratio must be positive")

    @property
    def hidden_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))

    def patch_grid(self, grid: GridSpec) -> tuple[int, int]:
        p_h, p_w = self.patch_size
        if grid.n_lat % p_h != 0:
            raise WxscaleError(f"n_lat {grid.n_lat} not divisible by patch height {p_h}")
        if grid.n_lon % p_w != 0:
            raise WxscaleError(f"n_lon {grid.n_lon} not divisible by patch width {p_w}")
        h_p, w_p = grid.n_lat // p_h, grid.n_lon // p_w
        win_h, win_w = self.window
        if h_p % win_h != 0 or w_p % win_w != 0:
            raise WxscaleError(
                f"window {self.window} does not divide patch grid {(h_p, w_p)}"
            )
        return h_p, w_p

    def to_dict(self) -> dict:
        return {
            "patch_size": list(self.patch_size),
            "embed_dim": self.embed_dim,
            "depth": self.depth,
            "heads": self.heads,
            "window": list(self.window),
            "mlp_ratio": self.mlp_ratio,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d) -> "SwinConfig":
        return cls(
            patch_size=tuple(d["patch_size"]),
            embed_dim=int(d["embed_dim"]),
            depth=int(d["depth"]),
            heads=int(d["heads"]),
            window=tuple(d["window"]),
            mlp_ratio=float(d.get("mlp_ratio", 2.0)),
            seed=int(d.get("seed", 0)),
        )


class OneStepModel(abc.ABC):
    """Advances one snapshot by 6 h; output schema/grid equal the input's."""

    step_hours: int = STEP_HOURS

    @abc.abstractmethod
    def step(self, state: FieldState) -> FieldState:
        raise NotImplementedError

    @property
    @abc.abstractmethod
    def param_count(self) -> int:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# deterministic weights


class BlockWeights:
    """Per-block tensors, generated in a fixed order from the shared PRNG."""

    __slots__ = (
        "norm1", "wq", "wk", "wv", "head_temp", "rel_bias",
        "wo", "wo_b", "norm2", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    )

    def __init__(self, rng: np.random.Generator, cfg: SwinConfig):
        e = cfg.embed_dim
        hid = cfg.hidden_dim
        win_h, win_w = cfg.window
        n_rel = (2 * win_h - 1) * (2 * win_w - 1)
        self.norm1 = 1.0 + 0.05 * rng.standard_normal(e)
        self.wq = rng.standard_normal((e, e)) / np.sqrt(e)
        self.wk = rng.standard_normal((e, e)) / np.sqrt(e)
        self.wv = rng.standard_normal((e, e)) / np.sqrt(e)
        # logit scale per head; q/k are unit vectors so this sets softmax sharpness
        self.head_temp = 8.0 * np.exp(0.1 * rng.standard_normal(cfg.heads))
        self.rel_bias = 0.02 * rng.standard_normal((n_rel, cfg.heads))
        self.wo = rng.standard_normal((e, e)) / np.sqrt(e)
        self.wo_b = 0.01 * rng.standard_normal(e)
        self.norm2 = 1.0 + 0.05 * rng.standard_normal(e)
        self.mlp_w1 = rng.standard_normal((e, hid)) / np.sqrt(e)
        self.mlp_b1 = 0.01 * rng.standard_normal(hid)
        self.mlp_w2 = rng.standard_normal((hid, e)) / np.sqrt(hid)
        self.mlp_b2 = 0.01 * rng.standard_normal(e)

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self.__slots__]


class SwinWeights:
    """All model tensors. Draw order is part of the reproducibility contract:
    embed, then blocks in order (see BlockWeights slots), then unembed."""

    def __init__(self, cfg: SwinConfig, in_channels: int, out_channels: int):
        p_h, p_w = cfg.patch_size
        in_dim = in_channels * p_h * p_w
        out_dim = out_channels * p_h * p_w
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        self.embed_w = rng.standard_normal((in_dim, cfg.embed_dim)) / np.sqrt(in_dim)
        self.embed_b = 0.01 * rng.standard_normal(cfg.embed_dim)
        self.blocks = [BlockWeights(rng, cfg) for _ in range(cfg.depth)]
        self.unembed_w = rng.standard_normal((cfg.embed_dim, out_dim)) / np.sqrt(cfg.embed_dim)
        self.unembed_b = 0.01 * rng.standard_normal(out_dim)
        for arr in self.arrays():
            arr.flags.writeable = False

    def arrays(self) -> list[np.ndarray]:
        out = [self.embed_w, self.embed_b]
        for b in self.blocks:
            out.extend(b.arrays())
        out.extend([self.unembed_w, self.unembed_b])
        return out

    @property
    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays()))


# ---------------------------------------------------------------------------
# forward primitives (shared with the decomposition simulator)


def cyclic_shift(tensor: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    """Circular roll of the leading two (row, column) axes by ``shift``.

    The latitude roll is circular in index only; callers masking attention
    must keep wrapped rows from mixing across the north/south seam.
    """
    s_h, s_w = shift
    h, w = tensor.shape[0], tensor.shape[1]
    if abs(s_h) >= h or abs(s_w) >= w:
        raise WxscaleError(f"shift {shift} out of range for dims {(h, w)}")
    if s_h == 0 and s_w == 0:
        return tensor.copy()
    return np.roll(tensor, (s_h, s_w), axis=(0, 1))


def rmsnorm(x: np.ndarray, gamma: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + _NORM_EPS)
    return x / scale * gamma


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation; exact erf is not worth a scipy dependency here
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def mlp_forward(x: np.ndarray, bw: BlockWeights) -> np.ndarray:
    return gelu(x @ bw.mlp_w1 + bw.mlp_b1) @ bw.mlp_w2 + bw.mlp_b2


def patchify(values: np.ndarray, patch: tuple[int, int]) -> np.ndarray:
    """(C, H, W) -> (H_p, W_p, C * p_h * p_w) patch tokens."""
    c, h, w = values.shape
    p_h, p_w = patch
    t = values.reshape(c, h // p_h, p_h, w // p_w, p_w)
    return t.transpose(1, 3, 0, 2, 4).reshape(h // p_h, w // p_w, c * p_h * p_w)


def unpatchify(tokens: np.ndarray, patch: tuple[int, int], channels: int) -> np.ndarray:
    """Inverse of :func:`patchify` for ``channels`` output channels."""
    h_p, w_p, _ = tokens.shape
    p_h, p_w = patch
    t = tokens.reshape(h_p, w_p, channels, p_h, p_w)
    return t.transpose(2, 0, 3, 1, 4).reshape(channels, h_p * p_h, w_p * p_w)


def window_partition(tokens: np.ndarray, window: tuple[int, int]) -> np.ndarray:
    """(H_p, W_p, E) -> (n_windows, win_h * win_w, E), windows row-major."""
    h_p, w_p, e = tokens.shape
    win_h, win_w = window
    t = tokens.reshape(h_p // win_h, win_h, w_p // win_w, win_w, e)
    return t.transpose(0, 2, 1, 3, 4).reshape(-1, win_h * win_w, e)


def window_merge(
    windows: np.ndarray, window: tuple[int, int], grid: tuple[int, int]
) -> np.ndarray:
    """Inverse of :func:`window_partition`."""
    h_p, w_p = grid
    win_h, win_w = window
    e = windows.shape[-1]
    t = windows.reshape(h_p // win_h, w_p // win_w, win_h, win_w, e)
    return t.transpose(0, 2, 1, 3, 4).reshape(h_p, w_p, e)


def relative_bias_matrix(bw: BlockWeights, window: tuple[int, int]) -> np.ndarray:
    """(heads, T, T) additive bias from the per-block relative-position table."""
    win_h, win_w = window
    coords = np.stack(
        np.meshgrid(np.arange(win_h), np.arange(win_w), indexing="ij"), axis=-1
    ).reshape(-1, 2)
    rel = coords[:, None, :] - coords[None, :, :]
    idx = (rel[..., 0] + win_h - 1) * (2 * win_w - 1) + (rel[..., 1] + win_w - 1)
    return bw.rel_bias[idx].transpose(2, 0, 1)


def seam_mask_from_labels(labels: np.ndarray) -> np.ndarray | None:
    """Additive (..., T, T) mask: -inf where two positions' labels differ."""
    diff = labels[..., :, None] != labels[..., None, :]
    if not np.any(diff):
        return None
    mask = np.zeros(diff.shape, dtype=np.float64)
    mask[diff] = -np.inf
    return mask


def shifted_lat_labels(h_p: int, shift_h: int) -> np.ndarray:
    """Row labels in the rolled frame: 1 marks rows wrapped across the seam."""
    labels = np.zeros(h_p, dtype=np.int64)
    if shift_h > 0:
        labels[h_p - shift_h :] = 1
    return labels


def lat_seam_mask(
    patch_grid: tuple[int, int], window: tuple[int, int], shift_h: int
) -> np.ndarray | None:
    """(n_windows, T, T) mask for a rolled tensor, or None when nothing wraps."""
    if shift_h <= 0:
        return None
    h_p, w_p = patch_grid
    rows = shifted_lat_labels(h_p, shift_h)
    grid_labels = np.repeat(rows[:, None], w_p, axis=1)[..., None]
    win_labels = window_partition(grid_labels, window)[..., 0]
    return seam_mask_from_labels(win_labels)


def window_attention(
    xw: np.ndarray,
    bw: BlockWeights,
    heads: int,
    window: tuple[int, int],
    mask: np.ndarray | None = None,
    head_slice: slice | None = None,
) -> np.ndarray:
    """Multi-head attention within each window.

    ``xw`` is (n_windows, T, E). Queries/keys are L2-normalized per head and
    scaled by the per-head temperature; the relative-position bias and the
    optional additive ``mask`` (broadcastable to (n_windows, heads, T, T))
    are added to the logits. ``head_slice`` restricts the computation to a
    contiguous head range and returns that range's partial output projection
    (used by tensor sharding); the full model output is the sum of the
    shards' partials plus the output bias, added here only for the full run.
    """
    nw, t, e = xw.shape
    dh = e // heads
    hs = head_slice if head_slice is not None else slice(0, heads)
    h_lo, h_hi = hs.start, hs.stop
    n_h = h_hi - h_lo

    def split(w: np.ndarray) -> np.ndarray:
        proj = xw @ w[:, h_lo * dh : h_hi * dh]
        return proj.reshape(nw, t, n_h, dh).transpose(0, 2, 1, 3)

    q = split(bw.wq)
    k = split(bw.wk)
    v = split(bw.wv)
    q = q / np.sqrt(np.sum(q * q, axis=-1, keepdims=True) + _QK_EPS)
    k = k / np.sqrt(np.sum(k * k, axis=-1, keepdims=True) + _QK_EPS)
    logits = np.einsum("whtd,whsd->whts", q, k) * bw.head_temp[None, h_lo:h_hi, None, None]
    logits = logits + relative_bias_matrix(bw, window)[None, h_lo:h_hi]
    if mask is not None:
        m = mask[:, None] if mask.ndim == 3 else mask
        logits = logits + m
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights = weights / weights.sum(axis=-1, keepdims=True)
    ctx = np.einsum("whts,whsd->whtd", weights, v)
    ctx = ctx.transpose(0, 2, 1, 3).reshape(nw, t, n_h * dh)
    partial = ctx @ bw.wo[h_lo * dh : h_hi * dh, :]
    if head_slice is None:
        partial = partial + bw.wo_b
    return partial


def block_forward(
    tokens: np.ndarray,
    bw: BlockWeights,
    cfg: SwinConfig,
    shifted: bool,
) -> np.ndarray:
    """One pre-RMSNorm attention + MLP block on the full (H_p, W_p, E) grid."""
    h_p, w_p, _ = tokens.shape
    win = cfg.window
    s_h = win[0] // 2 if shifted else 0
    s_w = win[1] // 2 if shifted else 0
    x = rmsnorm(tokens, bw.norm1)
    if shifted:
        x = cyclic_shift(x, (-s_h, -s_w))
    xw = window_partition(x, win)
    mask = lat_seam_mask((h_p, w_p), win, s_h) if shifted else None
    aw = window_attention(xw, bw, cfg.heads, win, mask)
    a = window_merge(aw, win, (h_p, w_p))
    if shifted:
        a = cyclic_shift(a, (s_h, s_w))
    tokens = tokens + a
    y = rmsnorm(tokens, bw.norm2)
    return tokens + mlp_forward(y, bw)


# ---------------------------------------------------------------------------
# models


class SwinForecaster(OneStepModel):
    """Forward-only shifted-window attention forecaster with generated weights.

    ``static_fields`` (S, n_lat, n_lon), e.g. a cos-latitude map, are appended
    to the input channels before patch embedding and are never predicted.
    Weights are immutable after construction; step() is reentrant.
    """

    def __init__(
        self,
        cfg: SwinConfig,
        grid: GridSpec,
        schema: ChannelSchema,
        static_fields: np.ndarray | None = None,
    ):
        self.cfg = cfg
        self.grid = grid
        self.schema = schema
        self.patch_grid = cfg.patch_grid(grid)
        if static_fields is not None:
            static_fields = np.ascontiguousarray(static_fields, dtype=np.float64)
            if static_fields.ndim != 3 or static_fields.shape[1:] != (grid.n_lat, grid.n_lon):
                raise SchemaError("static fields must be (S, n_lat, n_lon)")
            static_fields.flags.writeable = False
        self.static_fields = static_fields
        n_static = 0 if static_fields is None else static_fields.shape[0]
        self.weights = SwinWeights(cfg, schema.total + n_static, schema.total)

    @property
    def param_count(self) -> int:
        return self.weights.param_count

    def _check_state(self, state: FieldState) -> None:
        if state.schema != self.schema:
            raise SchemaError("state schema does not match the model's")
        if state.grid != self.grid:
            raise SchemaError("state grid does not match the model's")

    def embed(self, values: np.ndarray) -> np.ndarray:
        x = values
        if self.static_fields is not None:
            x = np.concatenate([x, self.static_fields], axis=0)
        tokens = patchify(x, self.cfg.patch_size)
        return tokens @ self.weights.embed_w + self.weights.embed_b

    def unembed(self, tokens: np.ndarray) -> np.ndarray:
        out = tokens @ self.weights.unembed_w + self.weights.unembed_b
        return unpatchify(out, self.cfg.patch_size, self.schema.total)

    def forward_values(self, values: np.ndarray) -> np.ndarray:
        tokens = self.embed(values)
        for i, bw in enumerate(self.weights.blocks):
            tokens = block_forward(tokens, bw, self.cfg, shifted=(i % 2 == 1))
        return self.unembed(tokens)

    def step(self, state: FieldState) -> FieldState:
        self._check_state(state)
        out = self.forward_values(state.values)
        return FieldState(self.schema, self.grid, out, state.timestamp + self.step_hours)


class LinearSurrogate(OneStepModel):
    """step(x) = rho * x + drift; analytic oracle for rollout tests."""

    def __init__(self, rho: float, drift: np.ndarray, schema: ChannelSchema):
        if not (0.0 < rho <= 1.0):
            raise WxscaleError(f"contraction factor must be in (0, 1], got {rho}")
        drift = np.ascontiguousarray(drift, dtype=np.float64)
        if drift.shape != (schema.total,):
            raise SchemaError("drift must provide one value per channel")
        drift.flags.writeable = False
        self.rho = float(rho)
        self.drift = drift
        self.schema = schema

    @property
    def param_count(self) -> int:
        return self.schema.total + 1

    def step(self, state: FieldState) -> FieldState:
        if state.schema != self.schema:
            raise SchemaError("state schema does not match the surrogate's")
        out = self.rho * state.values + self.drift[:, None, None]
        return state.with_values(out, state.timestamp + self.step_hours)


def linear_surrogate(
    rho: float, drift: float | np.ndarray, schema: ChannelSchema
) -> LinearSurrogate:
    """Build a :class:`LinearSurrogate`; scalar drift broadcasts to all channels."""
    d = np.asarray(drift, dtype=np.float64)
    if d.ndim == 0:
        d = np.full(schema.total, float(d))
    return LinearSurrogate(rho, d, schema)


def activation_footprint(
    cfg: SwinConfig,
    batch_size: int,
    patch_grid: tuple[int, int],
    layout=None,
    kappa_act: float = 2.0,
) -> float:
    """Estimated activation elements held per worker.

    B * ceil(H_p/sp1) * ceil(W_p/sp2) * E * depth * kappa_act, with sp1/sp2
    taken from ``layout`` (default: a single worker). The constant
    ``kappa_act`` counts retained per-token tensors per block; the default 2
    stands for the two residual-branch activations.
    """
    h_p, w_p = patch_grid
    sp1 = 1 if layout is None else layout.sp1
    sp2 = 1 if layout is None else layout.sp2
    if sp1 < 1 or sp2 < 1:
        raise WxscaleError("spatial partition counts must be positive")
    local_h = -(-h_p // sp1)
    local_w = -(-w_p // sp2)
    return float(batch_size * local_h * local_w * cfg.embed_dim * cfg.depth * kappa_act)
