import numpy as np
import pytest
from hypothesis import settings

from wxscale.grid import ChannelDef, ChannelSchema, FieldState, GridSpec

settings.register_profile("ci", derandomize=True, max_examples=50, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def mini_schema() -> ChannelSchema:
    """Three channels across two units (exercises unit grouping)."""
    return ChannelSchema(
        (
            ChannelDef("t2m", "K", "surface"),
            ChannelDef("u10m", "m/s", "surface"),
            ChannelDef("v10m", "m/s", "surface"),
        )
    )


@pytest.fixture
def small_grid() -> GridSpec:
    return GridSpec.equiangular(6, 8)


def random_state(schema, grid, seed=0, timestamp=0) -> FieldState:
    rng = np.random.default_rng(seed)
    return FieldState(
        schema, grid, rng.standard_normal((schema.total, grid.n_lat, grid.n_lon)),
        timestamp,
    )
