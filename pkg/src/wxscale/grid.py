"""Grid geometry, channel schema, field storage and normalization statistics.

Conventions fixed here and relied on everywhere else:

* latitude weights are proportional to cos(lat), clamped at zero for pole
  rows and normalized to mean 1 over rows;
* channel order is the surface block first, then pressure-level variables
  variable-major / level-minor;
* field values are stored channel x lat x lon as float64 and are immutable
  after construction;
* timestamps are integer hours since the dataset epoch (first test sample).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidGridError, NonFiniteValuesError, SchemaError

#: Reserved channel name for the all-channel pooled metric; never a schema entry.
POOLED_CHANNEL = "__pooled__"

#: Pressure levels (hPa) a level-resolved channel may use.
PRESSURE_LEVELS = (50, 100, 150, 200, 250, 300, 400, 500, 600, 700, 850, 925, 1000)

SURFACE_KIND = "surface"
PRESSURE_KIND = "pressure-level"

#: Forecast step of every one-step model in this package, hours.
STEP_HOURS = 6


@dataclass(frozen=True)
class ChannelDef:
    """One scalar output field: a surface variable or a variable at one level."""

    name: str
    unit: str
    kind: str
    level_hpa: int | None = None
    static: bool = False

    def __post_init__(self) -> None:
        if self.kind not in (SURFACE_KIND, PRESSURE_KIND):
            raise SchemaError(f"unknown channel kind {self.kind!r} for {self.name!r}")
        if self.kind == PRESSURE_KIND:
            if self.level_hpa not in PRESSURE_LEVELS:
                raise SchemaError(
                    f"channel {self.name!r}: level {self.level_hpa} hPa is not one of "
                    f"the supported levels {PRESSURE_LEVELS}"
                )
        elif self.level_hpa is not None:
            raise SchemaError(f"surface channel {self.name!r} must not carry a level")
        if self.name == POOLED_CHANNEL:
            raise SchemaError(f"{POOLED_CHANNEL!r} is reserved for pooled metrics")


@dataclass(frozen=True)
class ChannelSchema:
    """Ordered, immutable list of channels; order is part of the contract."""

    entries: tuple[ChannelDef, ...]

    def __post_init__(self) -> None:
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate channel names: {dupes}")
        if not self.entries:
            raise SchemaError("schema must contain at least one channel")

    @property
    def total(self) -> int:
        return len(self.entries)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)

    def index(self, name: str) -> int:
        for i, e in enumerate(self.entries):
            if e.name == name:
                return i
        raise SchemaError(f"unknown channel {name!r}")

    def forecast_indices(self) -> tuple[int, ...]:
        """Indices of channels the model predicts (everything non-static)."""
        return tuple(i for i, e in enumerate(self.entries) if not e.static)

    def unit_groups(self) -> dict[str, tuple[str, ...]]:
        """Channels grouped by unit, preserving schema order within groups."""
        groups: dict[str, list[str]] = {}
        for e in self.entries:
            groups.setdefault(e.unit, []).append(e.name)
        return {u: tuple(ns) for u, ns in groups.items()}

    def subset(self, names: Sequence[str]) -> "ChannelSchema":
        """New schema restricted to ``names``, keeping this schema's order."""
        wanted = set(names)
        unknown = wanted - set(self.names)
        if unknown:
            raise SchemaError(f"unknown channels requested: {sorted(unknown)}")
        return ChannelSchema(tuple(e for e in self.entries if e.name in wanted))

    def to_dict(self) -> dict:
        return {
            "entries": [
                {
                    "name": e.name,
                    "unit": e.unit,
                    "kind": e.kind,
                    "level_hpa": e.level_hpa,
                    "static": e.static,
                }
                for e in self.entries
            ]
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChannelSchema":
        return cls(
            tuple(
                ChannelDef(
                    name=e["name"],
                    unit=e["unit"],
                    kind=e["kind"],
                    level_hpa=e.get("level_hpa"),
                    static=bool(e.get("static", False)),
                )
                for e in d["entries"]
            )
        )


@lru_cache(maxsize=1)
def canonical_schema() -> ChannelSchema:
    """The 71-channel schema: 6 surface fields, then u,v,z,t,q at 13 levels."""
    surface = [
        ChannelDef("TCWV", "kg/m^2", SURFACE_KIND),
        ChannelDef("u10m", "m/s", SURFACE_KIND),
        ChannelDef("v10m", "m/s", SURFACE_KIND),
        ChannelDef("t2m", "K", SURFACE_KIND),
        ChannelDef("sp", "Pa", SURFACE_KIND),
        ChannelDef("msl", "Pa", SURFACE_KIND),
    ]
    level_vars = [("u", "m/s"), ("v", "m/s"), ("z", "m^2/s^2"), ("t", "K"), ("q", "kg/kg")]
    levels = [
        ChannelDef(f"{var}{lev}", unit, PRESSURE_KIND, level_hpa=lev)
        for var, unit in level_vars
        for lev in PRESSURE_LEVELS
    ]
    return ChannelSchema(tuple(surface + levels))


@dataclass(frozen=True)
class GridSpec:
    """Regular latitude-longitude grid; longitude is always periodic."""

    n_lat: int
    n_lon: int
    lat_values: tuple[float, ...]
    lon_values: tuple[float, ...]
    periodic_lon: bool = True

    def __post_init__(self) -> None:
        if self.n_lat < 2 or self.n_lon < 2:
            raise InvalidGridError("grid needs at least 2 rows and 2 columns")
        if len(self.lat_values) != self.n_lat or len(self.lon_values) != self.n_lon:
            raise InvalidGridError("lat/lon value count does not match grid dims")
        lat = np.asarray(self.lat_values, dtype=np.float64)
        if np.any(np.abs(lat) > 90.0):
            raise InvalidGridError("latitudes must lie in [-90, 90] degrees")
        d = np.diff(lat)
        # Strictly monotone, except the degenerate all-equal grid used by
        # single-ring tests (e.g. every row on the equator).
        if not (np.all(d > 0) or np.all(d < 0) or np.all(lat == lat[0])):
            raise InvalidGridError("latitudes must be strictly monotone")
        lon = np.asarray(self.lon_values, dtype=np.float64)
        if np.any(lon < 0.0) or np.any(lon >= 360.0):
            raise InvalidGridError("longitudes must lie in [0, 360)")
        dl = np.diff(lon)
        if not np.allclose(dl, dl[0], rtol=0.0, atol=1e-9):
            raise InvalidGridError("longitudes must be equally spaced")
        if not self.periodic_lon:
            raise InvalidGridError("longitude must be periodic")

    @classmethod
    def equiangular(cls, n_lat: int, n_lon: int) -> "GridSpec":
        """Pole-to-pole grid, latitudes descending 90 -> -90 inclusive."""
        lat = np.linspace(90.0, -90.0, n_lat)
        lon = np.arange(n_lon) * (360.0 / n_lon)
        return cls(n_lat, n_lon, tuple(lat.tolist()), tuple(lon.tolist()))

    @classmethod
    def from_latitudes(cls, lats: Iterable[float], n_lon: int) -> "GridSpec":
        """Small test grid with explicit latitude rows and uniform longitudes."""
        lat = tuple(float(v) for v in lats)
        lon = tuple((360.0 / n_lon) * i for i in range(n_lon))
        return cls(len(lat), n_lon, lat, lon)

    def to_dict(self) -> dict:
        return {
            "n_lat": self.n_lat,
            "n_lon": self.n_lon,
            "lat_values": list(self.lat_values),
            "lon_values": list(self.lon_values),
            "periodic_lon": self.periodic_lon,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GridSpec":
        return cls(
            n_lat=int(d["n_lat"]),
            n_lon=int(d["n_lon"]),
            lat_values=tuple(float(v) for v in d["lat_values"]),
            lon_values=tuple(float(v) for v in d["lon_values"]),
            periodic_lon=bool(d.get("periodic_lon", True)),
        )


def latitude_weights(grid: GridSpec) -> np.ndarray:
    """Per-row area weights: cos(lat), poles clamped to zero, mean exactly 1.

    Normalized so that sum_j w_j * n_lon == n_lat * n_lon, i.e. the mean
    weight over rows is 1. Rows at exactly +-90 degrees get weight 0 (the
    float cosine of a converted 90 degrees is ~1e-16, not 0, so the pole rows
    are zeroed explicitly before clamping).
    """
    lat = np.asarray(grid.lat_values, dtype=np.float64)
    if np.any(np.abs(lat) > 90.0):
        raise InvalidGridError("latitudes must lie in [-90, 90] degrees")
    w = np.cos(np.deg2rad(lat))
    w[np.abs(lat) == 90.0] = 0.0
    w = np.maximum(w, 0.0)
    total = w.sum()
    if total <= 0.0:
        raise InvalidGridError("all rows have zero area weight")
    return w * (grid.n_lat / total)


@dataclass(frozen=True)
class FieldState:
    """One atmospheric snapshot: channels x lat x lon plus its timestamp.

    ``values`` is validated, cast to float64 and frozen (read-only flag), so
    a state can be shared across concurrent readers.
    """

    schema: ChannelSchema
    grid: GridSpec
    values: np.ndarray = field(repr=False)
    timestamp: int = 0

    def __post_init__(self) -> None:
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        expected = (self.schema.total, self.grid.n_lat, self.grid.n_lon)
        if vals.shape != expected:
            raise SchemaError(f"values shape {vals.shape} != expected {expected}")
        if not np.all(np.isfinite(vals)):
            raise NonFiniteValuesError("field values must all be finite")
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    def with_values(self, values: np.ndarray, timestamp: int | None = None) -> "FieldState":
        ts = self.timestamp if timestamp is None else timestamp
        return FieldState(self.schema, self.grid, values, ts)


@dataclass(frozen=True)
class NormStats:
    """Per-channel mean and standard deviation in physical units."""

    schema: ChannelSchema
    mean: np.ndarray = field(repr=False)
    std: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        mean = np.ascontiguousarray(self.mean, dtype=np.float64)
        std = np.ascontiguousarray(self.std, dtype=np.float64)
        if mean.shape != (self.schema.total,) or std.shape != (self.schema.total,):
            raise SchemaError("mean/std must be one value per channel")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise NonFiniteValuesError("normalization statistics must be finite")
        if np.any(std <= 0.0):
            bad = [self.schema.names[i] for i in np.nonzero(std <= 0.0)[0]]
            raise SchemaError(f"standard deviation must be positive; bad: {bad}")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)


def _require_same_schema(a: ChannelSchema, b: ChannelSchema) -> None:
    if a != b:
        raise SchemaError("channel schemas do not match")


def normalize(state: FieldState, stats: NormStats) -> FieldState:
    """Per-channel (x - mean) / std."""
    _require_same_schema(state.schema, stats.schema)
    out = (state.values - stats.mean[:, None, None]) / stats.std[:, None, None]
    return state.with_values(out)


def denormalize(state: FieldState, stats: NormStats) -> FieldState:
    """Inverse of :func:`normalize`; round-trip is identity to ~1e-12 relative."""
    _require_same_schema(state.schema, stats.schema)
    out = state.values * stats.std[:, None, None] + stats.mean[:, None, None]
    return state.with_values(out)


def coslat_static_field(grid: GridSpec) -> tuple[ChannelDef, np.ndarray]:
    """Cosine-of-latitude auxiliary input channel (never predicted)."""
    col = np.cos(np.deg2rad(np.asarray(grid.lat_values, dtype=np.float64)))
    vals = np.repeat(col[:, None], grid.n_lon, axis=1)
    return ChannelDef("cos_lat", "1", SURFACE_KIND, static=True), vals
