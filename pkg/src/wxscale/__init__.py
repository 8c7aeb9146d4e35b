"""wxscale: rollout-error and compute-scaling analysis for weather emulators.

Library layout:

* :mod:`wxscale.grid` - grids, channel schema, field states, normalization
* :mod:`wxscale.fieldio` - field snapshot file format
* :mod:`wxscale.metrics` - area-weighted / pooled RMSE, error growth
* :mod:`wxscale.forecaster` - shifted-window attention model and surrogates
* :mod:`wxscale.decomp` - DP-SP-TP decomposition simulator with comm traces
* :mod:`wxscale.rollout` - autoregressive rollout evaluation
* :mod:`wxscale.synth` - seeded loss surfaces, run families, truth trajectories
* :mod:`wxscale.scaling` - IsoFLOP optima, power-law fits, sweeps
* :mod:`wxscale.report` - paired CSV/SVG report bundles
* :mod:`wxscale.cli` - the ``wxscale`` command
"""

__version__ = "0.1.0"

from .grid import (  # noqa: F401
    POOLED_CHANNEL,
    STEP_HOURS,
    ChannelDef,
    ChannelSchema,
    FieldState,
    GridSpec,
    NormStats,
    canonical_schema,
    denormalize,
    latitude_weights,
    normalize,
)
from .metrics import (  # noqa: F401
    MetricRecord,
    area_weighted_rmse,
    error_growth,
    mse_loss,
    pooled_rmse,
)
from .forecaster import (  # noqa: F401
    OneStepModel,
    SwinConfig,
    SwinForecaster,
    activation_footprint,
    cyclic_shift,
    linear_surrogate,
)
from .rollout import RolloutConfig, TruthSource, reduce_over_ics, run_rollout  # noqa: F401
from .scaling import (  # noqa: F401
    AllocationFit,
    IsoflopOptimum,
    PowerLawFit,
    RunPoint,
    fit_allocation,
    fit_isoflop_optimum,
    fit_power_law,
    sweep,
)
from .synth import SurfaceSpec, make_isoflop_family, surface_loss, synth_truth  # noqa: F401
from .decomp import (  # noqa: F401
    CommTrace,
    DecompLayout,
    DecomposedSwinForecaster,
    comm_volume,
    distributed_roll,
    halo_exchange,
    partition,
    sharded_attention,
)
