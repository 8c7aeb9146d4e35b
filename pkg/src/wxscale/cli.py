"""The ``wxscale`` command: synth, rollout, derive, fit, report.

Every flag has a config-file equivalent (TOML, versioned schema); flags win.
All outputs are written atomically and are byte-deterministic given the same
config and seed. Exit codes are per error family (see EXIT_CODES).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - version-dependent import
    import tomli as tomllib

from . import __version__
from .errors import (
    ChecksumError,
    ConfigError,
    DivergedRolloutError,
    FitError,
    InvalidGridError,
    JoinError,
    MissingTruthError,
    NonFiniteValuesError,
    OutputDirError,
    SchemaError,
    WxscaleError,
)
from .decomp import DecompLayout, DecomposedSwinForecaster
from .forecaster import OneStepModel, SwinConfig, SwinForecaster, linear_surrogate
from .grid import (
    POOLED_CHANNEL,
    STEP_HOURS,
    ChannelSchema,
    GridSpec,
    canonical_schema,
    coslat_static_field,
)
from .metrics import error_growth, read_metrics_csv, write_metrics_csv
from .report import bundle
from .rollout import RolloutConfig, TruthSource, reduce_over_ics, run_rollout
from .scaling import (
    COVARIATES,
    fit_allocation,
    read_runs_csv,
    sweep,
    write_runs_csv,
)
from .synth import (
    ChannelTerms,
    RollEastModel,
    SurfaceSpec,
    SyntheticTruth,
    make_isoflop_family,
    synth_truth,
)
from .fieldio import read_field, write_field
from .util import atomic_write_text, sha256_file, stable_json_dumps

log = logging.getLogger("wxscale")

EXIT_CODES = {
    "ok": 0,
    "unexpected": 1,
    "config": 2,
    "missing-truth": 3,
    "diverged-rollout": 4,
    "join-failure": 5,
    "fit-failure": 6,
    "output-dir": 7,
    "bad-data": 8,
    "verify-failure": 9,
}

VERIFY_TOLERANCE = 1e-10

CONFIG_SCHEMA_VERSION = 1

_DEFAULT_LEADS = list(range(STEP_HOURS, 241, STEP_HOURS))

_KNOWN_KEYS = {
    "synth": {
        "seed", "budgets", "n_per_budget", "kappa", "e_floor", "amp_n", "exp_n",
        "amp_d", "exp_d", "noise_sigma", "flatten", "leads", "channels",
        "run_prefix", "overrides",
    },
    "truth": {
        "kind", "seed", "window", "decay_factor", "n_lat", "n_lon", "channels",
        "materialize",
    },
    "model": {
        "kind", "rho", "drift", "patch_size", "embed_dim", "depth", "heads",
        "window", "mlp_ratio", "seed", "static_coslat",
    },
    "rollout": {"ic_stride_hours", "max_lead_hours", "run_id", "strict"},
    "fit": {
        "covariates", "kappa", "leads", "channels", "allocation_lead",
        "allocation_channel", "tolerance",
    },
    "derive": {"smooth", "run_id"},
}


# ---------------------------------------------------------------------------
# config handling


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")
    version = cfg.get("config_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported config_version {version}")
    for section, content in cfg.items():
        if section == "config_version":
            continue
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"{path}: [{section}] must be a table")
        for key in content:
            if key not in _KNOWN_KEYS[section]:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
    return cfg


def _get(section: dict, name: str, key: str, kind, default=None, required=False):
    if key not in section:
        if required:
            raise ConfigError(f"missing required key {name}.{key}")
        return default
    value = section[key]
    try:
        if kind is float:
            return float(value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if kind is bool:
            if not isinstance(value, bool):
                raise ValueError
            return value
        if kind is str:
            if not isinstance(value, str):
                raise ValueError
            return value
        if kind is list:
            if not isinstance(value, list):
                raise ValueError
            return value
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"key {name}.{key}: expected {kind.__name__}, got {value!r}")


def _resolve_schema(channels) -> ChannelSchema:
    if channels is None or channels == "canonical":
        return canonical_schema()
    if isinstance(channels, list):
        return canonical_schema().subset([str(c) for c in channels])
    raise ConfigError("channels must be 'canonical' or a list of channel names")


def prepare_out_dir(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not out.is_dir():
            raise OutputDirError(f"{out} exists and is not a directory")
        if any(out.iterdir()) and not force:
            raise OutputDirError(f"{out} is not empty; pass --force to write anyway")
    out.mkdir(parents=True, exist_ok=True)
    return out


def parse_layout(args) -> DecompLayout:
    values = {"dp": 1, "sp1": 1, "sp2": 1, "tp": 1}
    if getattr(args, "layout", None):
        parts = args.layout.split(",")
        if len(parts) != 4:
            raise ConfigError("--layout must be 'dp,sp1,sp2,tp'")
        try:
            values = dict(zip(values, (int(p) for p in parts)))
        except ValueError:
            raise ConfigError(f"--layout parts must be integers, got {args.layout!r}")
    for name in values:
        override = getattr(args, name, None)
        if override is not None:
            values[name] = override
    return DecompLayout(**values)


# ---------------------------------------------------------------------------
# synth


def _surface_from_config(synth_cfg: dict) -> tuple[SurfaceSpec, float]:
    if "kappa" in synth_cfg:
        kappa = _get(synth_cfg, "synth", "kappa", float)
    else:
        kappa = 6.0
        log.info("synth.kappa not set; using the default cost model kappa = 6")
    overrides = {}
    for channel, terms in synth_cfg.get("overrides", {}).items():
        if not isinstance(terms, dict):
            raise ConfigError(f"synth.overrides.{channel} must be a table")
        try:
            overrides[channel] = ChannelTerms(
                amp_n=float(terms["amp_n"]),
                exp_n=float(terms["exp_n"]),
                amp_d=float(terms["amp_d"]),
                exp_d=float(terms["exp_d"]),
            )
        except KeyError as e:
            raise ConfigError(f"synth.overrides.{channel}: missing {e.args[0]}")
    spec = SurfaceSpec(
        e_floor=_get(synth_cfg, "synth", "e_floor", float, 0.0),
        amp_n=_get(synth_cfg, "synth", "amp_n", float, required=True),
        exp_n=_get(synth_cfg, "synth", "exp_n", float, required=True),
        amp_d=_get(synth_cfg, "synth", "amp_d", float, required=True),
        exp_d=_get(synth_cfg, "synth", "exp_d", float, required=True),
        kappa=kappa,
        noise_sigma=_get(synth_cfg, "synth", "noise_sigma", float, 0.0),
        per_channel=overrides,
    )
    return spec, kappa


def do_synth(cfg: dict, out: Path, seed_override: int | None, config_path) -> list[str]:
    if "synth" not in cfg:
        raise ConfigError("config has no [synth] section")
    synth_cfg = cfg["synth"]
    spec, _ = _surface_from_config(synth_cfg)
    seed = seed_override if seed_override is not None else _get(
        synth_cfg, "synth", "seed", int, 0
    )
    budgets = [float(b) for b in _get(synth_cfg, "synth", "budgets", list, required=True)]
    leads = [int(h) for h in _get(synth_cfg, "synth", "leads", list, _DEFAULT_LEADS)]
    schema = _resolve_schema(synth_cfg.get("channels"))
    family = make_isoflop_family(
        spec,
        budgets,
        _get(synth_cfg, "synth", "n_per_budget", int, required=True),
        schema=schema,
        leads=leads,
        seed=seed,
        flatten=_get(synth_cfg, "synth", "flatten", float, 0.5),
        run_prefix=_get(synth_cfg, "synth", "run_prefix", str, "run"),
    )
    write_runs_csv(family.runs, out / "runs.csv")
    write_metrics_csv(family.records, out / "metrics.csv")
    atomic_write_text(out / "generator_manifest.json", stable_json_dumps(family.manifest))
    outputs = ["runs.csv", "metrics.csv", "generator_manifest.json"]

    if "truth" in cfg:
        outputs += do_truth(cfg["truth"], out / "truth", seed_override)
    inputs = {"config": config_path} if config_path else {}
    manifest = bundle.build_manifest("synth", inputs, {"seed": seed}, outputs)
    bundle.write_manifest(out / "manifest.json", manifest)
    return outputs + ["manifest.json"]


def do_truth(truth_cfg: dict, out: Path, seed_override: int | None) -> list[str]:
    out.mkdir(parents=True, exist_ok=True)
    seed = seed_override if seed_override is not None else _get(
        truth_cfg, "truth", "seed", int, 0
    )
    grid = GridSpec.equiangular(
        _get(truth_cfg, "truth", "n_lat", int, 16),
        _get(truth_cfg, "truth", "n_lon", int, 32),
    )
    schema = _resolve_schema(truth_cfg.get("channels"))
    window = tuple(int(t) for t in _get(truth_cfg, "truth", "window", list, [0, 480]))
    truth = synth_truth(
        grid,
        schema,
        _get(truth_cfg, "truth", "kind", str, "constant"),
        seed=seed,
        window=window,
        decay_factor=_get(truth_cfg, "truth", "decay_factor", float, 0.9),
    )
    atomic_write_text(out / "truth_manifest.json", stable_json_dumps(truth.manifest()))
    written = ["truth/truth_manifest.json"]
    if _get(truth_cfg, "truth", "materialize", bool, False):
        index = {}
        for t in range(window[0], window[1] + 1, STEP_HOURS):
            base = out / f"t{t:06d}"
            write_field(truth.state_at(t), base)
            index[str(t)] = base.name
        atomic_write_text(
            out / "index.json", stable_json_dumps({"timestamps": index})
        )
        written.append("truth/index.json")
    return written


# ---------------------------------------------------------------------------
# truth/model loading


class FileTruthSource(TruthSource):
    """Truth trajectory stored as field files listed by ``index.json``."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        with open(self.directory / "index.json", "r", encoding="utf-8") as fh:
            index = json.load(fh)
        self._by_ts = {int(k): v for k, v in index["timestamps"].items()}
        if not self._by_ts:
            raise WxscaleError(f"{directory}: truth index lists no timestamps")
        self._cache: dict[int, object] = {}

    def time_range(self) -> tuple[int, int]:
        return min(self._by_ts), max(self._by_ts)

    def state_at(self, timestamp: int):
        if timestamp not in self._by_ts:
            raise MissingTruthError(timestamp, f"not in {self.directory}/index.json")
        if timestamp not in self._cache:
            self._cache[timestamp] = read_field(
                self.directory / f"{self._by_ts[timestamp]}.json"
            )
        return self._cache[timestamp]


def load_truth(directory: str | Path) -> tuple[TruthSource, Path]:
    directory = Path(directory)
    manifest = directory / "truth_manifest.json"
    index = directory / "index.json"
    if index.exists():
        return FileTruthSource(directory), index
    if manifest.exists():
        with open(manifest, "r", encoding="utf-8") as fh:
            m = json.load(fh)
        truth = SyntheticTruth(
            GridSpec.from_dict(m["grid"]),
            ChannelSchema.from_dict(m["schema"]),
            m["kind"],
            seed=int(m["seed"]),
            window=tuple(m["window_hours"]),
            decay_factor=float(m["decay_factor"]),
        )
        return truth, manifest
    raise ConfigError(
        f"{directory}: neither index.json nor truth_manifest.json found"
    )


def build_model(model_cfg: dict, grid: GridSpec, schema: ChannelSchema) -> OneStepModel:
    kind = model_cfg.get("kind")
    if kind == "linear":
        return linear_surrogate(
            float(model_cfg.get("rho", 1.0)), float(model_cfg.get("drift", 0.0)), schema
        )
    if kind == "roll-east":
        return RollEastModel(schema)
    if kind == "swin":
        cfg = SwinConfig(
            patch_size=tuple(model_cfg.get("patch_size", [2, 2])),
            embed_dim=int(model_cfg.get("embed_dim", 16)),
            depth=int(model_cfg.get("depth", 2)),
            heads=int(model_cfg.get("heads", 2)),
            window=tuple(model_cfg.get("window", [2, 2])),
            mlp_ratio=float(model_cfg.get("mlp_ratio", 2.0)),
            seed=int(model_cfg.get("seed", 0)),
        )
        static = None
        if model_cfg.get("static_coslat", False):
            _, coslat = coslat_static_field(grid)
            static = coslat[None]
        return SwinForecaster(cfg, grid, schema, static_fields=static)
    raise ConfigError(f"model.kind must be swin, linear or roll-east, got {kind!r}")


class _VerifyingModel(OneStepModel):
    """Steps the decomposed model while checking it against the sequential one."""

    def __init__(self, sequential: SwinForecaster, decomposed: DecomposedSwinForecaster):
        self.sequential = sequential
        self.decomposed = decomposed
        self.max_rel_dev = 0.0

    @property
    def param_count(self) -> int:
        return self.sequential.param_count

    def step(self, state):
        out_d = self.decomposed.step(state)
        out_s = self.sequential.step(state)
        scale = max(float(np.max(np.abs(out_s.values))), 1e-30)
        dev = float(np.max(np.abs(out_d.values - out_s.values))) / scale
        self.max_rel_dev = max(self.max_rel_dev, dev)
        return out_d


# ---------------------------------------------------------------------------
# rollout


def do_rollout(args, cfg: dict, out: Path) -> int:
    model_cfg = dict(cfg.get("model", {}))
    if args.model_config:
        with open(args.model_config, "r", encoding="utf-8") as fh:
            model_cfg = json.load(fh)
    if not model_cfg:
        raise ConfigError("no model given: pass --model-config or a [model] section")
    if getattr(args, "seed", None) is not None and model_cfg.get("kind") == "swin":
        model_cfg["seed"] = args.seed
    if not args.truth:
        raise ConfigError("--truth DIR is required")
    truth, truth_file = load_truth(args.truth)
    probe = truth.state_at(truth.time_range()[0])
    model = build_model(model_cfg, probe.grid, probe.schema)

    rollout_cfg_section = cfg.get("rollout", {})
    rcfg = RolloutConfig(
        ic_stride_hours=args.ic_stride
        or _get(rollout_cfg_section, "rollout", "ic_stride_hours", int, 12),
        max_lead_hours=args.max_lead
        or _get(rollout_cfg_section, "rollout", "max_lead_hours", int, 240),
    )
    run_id = args.run_id or _get(rollout_cfg_section, "rollout", "run_id", str, "run-0")
    strict = _get(rollout_cfg_section, "rollout", "strict", bool, False)

    layout = parse_layout(args)
    operative: OneStepModel = model
    max_dev = None
    nontrivial = (layout.sp1, layout.sp2, layout.tp) != (1, 1, 1) or layout.dp > 1
    if nontrivial:
        if not isinstance(model, SwinForecaster):
            raise ConfigError("--layout requires a swin model")
        decomposed = DecomposedSwinForecaster(model, layout, args.strategy)
        if args.trace_out:
            _, trace = decomposed.step_with_trace(probe)
            trace.write_jsonl(args.trace_out)
        operative = _VerifyingModel(model, decomposed) if args.verify else decomposed
    elif args.verify:
        log.info("--verify with a trivial layout: nothing to compare")

    result = run_rollout(operative, truth, rcfg, run_id=run_id, strict=strict)
    if isinstance(operative, _VerifyingModel):
        max_dev = operative.max_rel_dev
        log.info("decomposed vs sequential max relative deviation: %.3e", max_dev)
    write_metrics_csv(result.records, out / "metrics.csv")

    model_seed = model_cfg.get("seed")
    if model_cfg.get("kind") == "swin":
        model_seed = int(model_cfg.get("seed", 0))
    run_manifest = {
        "run_id": run_id,
        "model": model_cfg,
        "model_seed": model_seed,
        "model_params": operative.param_count,
        "truth_checksum": sha256_file(truth_file),
        "rollout": {
            "ic_stride_hours": rcfg.ic_stride_hours,
            "max_lead_hours": rcfg.max_lead_hours,
            "step_hours": rcfg.step_hours,
        },
        "layout": {
            "dp": layout.dp, "sp1": layout.sp1, "sp2": layout.sp2, "tp": layout.tp,
        },
        "schema": probe.schema.to_dict(),
        "diverged_ics": {str(k): v for k, v in result.diverged.items()},
        "dropped_ics": list(result.dropped_ics),
        "verify_max_rel_deviation": max_dev,
    }
    atomic_write_text(out / "run_manifest.json", stable_json_dumps(run_manifest))
    manifest = bundle.build_manifest(
        "rollout",
        {"truth": truth_file},
        {"run_id": run_id},
        ["metrics.csv", "run_manifest.json"],
    )
    bundle.write_manifest(out / "manifest.json", manifest)
    if max_dev is not None and max_dev > VERIFY_TOLERANCE:
        log.error(
            "verification failed: max deviation %.3e > %.1e", max_dev, VERIFY_TOLERANCE
        )
        return EXIT_CODES["verify-failure"]
    return 0


# ---------------------------------------------------------------------------
# derive


def do_derive(args, cfg: dict, out: Path) -> int:
    derive_cfg = cfg.get("derive", {})
    smooth = args.smooth or _get(derive_cfg, "derive", "smooth", int, None)
    records = read_metrics_csv(args.metrics)
    if not records:
        raise WxscaleError(f"{args.metrics}: no metric rows")
    run_filter = args.run_id or _get(derive_cfg, "derive", "run_id", str, None)
    if run_filter is not None:
        records = [r for r in records if r.run_id == run_filter]
        if not records:
            raise WxscaleError(f"run_id {run_filter!r} not present in {args.metrics}")
    run_ids = sorted({r.run_id for r in records})
    if len(run_ids) > 1:
        raise ConfigError(
            f"metrics file contains {len(run_ids)} runs; select one with --run-id"
        )

    schema = None
    manifest_path = Path(args.metrics).parent / "run_manifest.json"
    if manifest_path.exists():
        with open(manifest_path, "r", encoding="utf-8") as fh:
            schema = ChannelSchema.from_dict(json.load(fh)["schema"])

    reduced = reduce_over_ics(records)
    by_channel: dict[str, list[tuple[int, float]]] = {}
    order: list[str] = []
    for m in reduced:
        if m.channel not in by_channel:
            by_channel[m.channel] = []
            order.append(m.channel)
        by_channel[m.channel].append((m.lead_hours, m.mean_rmse))
    curves = []
    for ch in order:
        pts = sorted(by_channel[ch])
        leads = [h for h, _ in pts]
        if len(leads) < 2:
            raise WxscaleError(
                f"channel {ch}: a single lead cannot support a time derivative"
            )
        growth = error_growth(leads, [v for _, v in pts], ch, smooth_window=smooth)
        curves.append((ch, list(growth.lead_hours), list(growth.d_rmse_dt)))

    bundle.write_derivative_csv(out / "derivative.csv", curves)
    atomic_write_text(
        out / "derivative.svg",
        bundle.render_from_csv(out / "derivative.csv", schema).decode("utf-8"),
    )

    first_lead = min(r.lead_hours for r in records)
    dist_entries = [
        (r.channel, r.ic_timestamp, r.rmse)
        for r in records
        if r.lead_hours == first_lead and r.channel != POOLED_CHANNEL
    ]
    dist_csv = out / f"rmse_dist_{first_lead}h.csv"
    bundle.write_rmse_dist_csv(dist_csv, dist_entries)
    atomic_write_text(
        dist_csv.with_suffix(".svg"),
        bundle.render_from_csv(dist_csv, schema).decode("utf-8"),
    )

    manifest = bundle.build_manifest(
        "derive",
        {"metrics": args.metrics},
        {
            "averaging": "mean over ICs per (lead, channel), then differentiate",
            "smooth_window": smooth,
            "pooled_rmse_weighting": "none (training-loss mirror)",
        },
        [
            "derivative.csv", "derivative.svg",
            dist_csv.name, dist_csv.with_suffix(".svg").name,
        ],
    )
    bundle.write_manifest(out / "manifest.json", manifest)
    return 0


# ---------------------------------------------------------------------------
# fit


def do_fit(args, cfg: dict, out: Path) -> int:
    fit_cfg = cfg.get("fit", {})
    covariates = args.covariate.split(",") if args.covariate else [
        str(c) for c in _get(fit_cfg, "fit", "covariates", list, list(COVARIATES))
    ]
    if "kappa" in fit_cfg or args.kappa is not None:
        kappa = args.kappa if args.kappa is not None else _get(fit_cfg, "fit", "kappa", float)
    else:
        kappa = 6.0
        log.info("fit.kappa not set; using the default cost model kappa = 6")
    leads = None
    if args.leads:
        leads = [int(h) for h in args.leads.split(",")]
    elif "leads" in fit_cfg:
        leads = [int(h) for h in _get(fit_cfg, "fit", "leads", list)]
    channels = None
    if args.channels:
        channels = args.channels.split(",")
    elif "channels" in fit_cfg:
        channels = [str(c) for c in _get(fit_cfg, "fit", "channels", list)]

    runs = read_runs_csv(args.runs)
    records = read_metrics_csv(args.metrics)
    result = sweep(runs, records, covariates=covariates, leads=leads,
                   channels=channels, kappa=kappa)

    outputs: list[str] = []
    atomic_write_text(out / "fit_report.json", stable_json_dumps(result.to_report_dict()))
    outputs.append("fit_report.json")

    for cov in result.covariates:
        for quantity in ("r2", "slope"):
            name = f"heatmap_{quantity}_{cov}"
            matrix = result.matrix(cov, quantity)
            bundle.write_heatmap_csv(
                out / f"{name}.csv", list(result.leads), list(result.channels), matrix
            )
            svg = bundle.render_from_csv(out / f"{name}.csv")
            atomic_write_text(out / f"{name}.svg", svg.decode("utf-8"))
            outputs += [f"{name}.csv", f"{name}.svg"]

    if POOLED_CHANNEL in result.channels:
        curves = {}
        for cov in result.covariates:
            r2 = np.full(len(result.leads), np.nan)
            slope = np.full(len(result.leads), np.nan)
            for j, lead in enumerate(result.leads):
                cell = result.cell(cov, lead, POOLED_CHANNEL)
                if cell.fit is not None:
                    slope[j] = cell.fit.slope
                    if cell.fit.r2 is not None:
                        r2[j] = cell.fit.r2
            curves[cov] = (r2, slope)
        bundle.write_pooled_curves_csv(out / "pooled_curves.csv", list(result.leads), curves)
        atomic_write_text(
            out / "pooled_curves.svg",
            bundle.render_from_csv(out / "pooled_curves.csv").decode("utf-8"),
        )
        outputs += ["pooled_curves.csv", "pooled_curves.svg"]

        alloc_lead = args.allocation_lead or _get(
            fit_cfg, "fit", "allocation_lead", int, result.leads[0]
        )
        alloc_channel = _get(fit_cfg, "fit", "allocation_channel", str, POOLED_CHANNEL)
        optima = result.optima.get((alloc_lead, alloc_channel), ())
        lines = ["budget_id,c_flops,n_star,d_star,eps_star,curvature,extrapolated"]
        for o in optima:
            lines.append(
                f"{o.budget_id},{o.c_flops!r},{o.n_star!r},{o.d_star!r},"
                f"{o.eps_star!r},{o.curvature!r},{o.extrapolated}"
            )
        atomic_write_text(out / "optima.csv", "\n".join(lines) + "\n")
        outputs.append("optima.csv")
        if len(optima) >= 3:
            tolerance = _get(fit_cfg, "fit", "tolerance", float, 0.05)
            alloc = fit_allocation(list(optima), tolerance=tolerance)
            atomic_write_text(
                out / "allocation.json",
                stable_json_dumps(
                    {
                        "lead_hours": alloc_lead,
                        "channel": alloc_channel,
                        "alpha": alloc.alpha,
                        "beta": alloc.beta,
                        "alpha_plus_beta": alloc.alpha_plus_beta,
                        "n_budgets": alloc.n_budgets,
                        "tolerance": alloc.tolerance,
                        "consistent_with_unit_sum": alloc.consistent,
                    }
                ),
            )
            outputs.append("allocation.json")
        else:
            log.warning(
                "allocation skipped: only %d budget optima at lead %d h", len(optima),
                alloc_lead,
            )
    else:
        log.warning("no %s channel in metrics; pooled curves skipped", POOLED_CHANNEL)

    manifest = bundle.build_manifest(
        "fit",
        {"runs": args.runs, "metrics": args.metrics},
        {"covariates": list(covariates), "kappa": kappa, "log_base": "e"},
        outputs,
    )
    bundle.write_manifest(out / "manifest.json", manifest)
    return 0


# ---------------------------------------------------------------------------
# report (end-to-end)


def do_report(args, cfg: dict, out: Path) -> int:
    if "synth" not in cfg:
        raise ConfigError("report needs a [synth] section")
    data_dir = out / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    do_synth(cfg, data_dir, args.seed, args.config)

    fit_dir = out / "fit"
    fit_dir.mkdir(exist_ok=True)
    fit_args = argparse.Namespace(
        runs=str(data_dir / "runs.csv"),
        metrics=str(data_dir / "metrics.csv"),
        covariate=None, kappa=None, leads=None, channels=None, allocation_lead=None,
    )
    do_fit(fit_args, cfg, fit_dir)

    sections = ["data", "fit"]
    if "model" in cfg and "truth" in cfg:
        roll_dir = out / "rollout"
        roll_dir.mkdir(exist_ok=True)
        roll_args = argparse.Namespace(
            model_config=None, truth=str(data_dir / "truth"),
            ic_stride=None, max_lead=None, run_id=None,
            layout=None, dp=None, sp1=None, sp2=None, tp=None,
            strategy="roll", verify=False, trace_out=None,
        )
        code = do_rollout(roll_args, cfg, roll_dir)
        if code != 0:
            return code
        derive_dir = out / "derive"
        derive_dir.mkdir(exist_ok=True)
        derive_args = argparse.Namespace(
            metrics=str(roll_dir / "metrics.csv"), smooth=None, run_id=None
        )
        do_derive(derive_args, cfg, derive_dir)
        sections += ["rollout", "derive"]

    manifest = bundle.build_manifest(
        "report",
        {"config": args.config} if args.config else {},
        {"sections": sections},
        [f"{s}/manifest.json" for s in sections if s != "data"] + ["data/manifest.json"],
    )
    bundle.write_manifest(out / "manifest.json", manifest)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML config file; flags override its values")
    p.add_argument("--seed", type=int, default=None, help="override all config seeds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.add_argument("--verify", action="store_true",
                   help="check decomposed outputs against the sequential model")
    p.add_argument("--layout", help="decomposition layout as 'dp,sp1,sp2,tp'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wxscale",
        description="Rollout-error and compute-scaling analysis toolkit",
    )
    parser.add_argument("--version", action="version", version=f"wxscale {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic run family / truth")
    _add_common(p_synth)

    p_roll = sub.add_parser("rollout", help="evaluate a model autoregressively")
    _add_common(p_roll)
    p_roll.add_argument("--model-config", help="model config JSON (overrides [model])")
    p_roll.add_argument("--truth", help="truth dataset directory")
    p_roll.add_argument("--ic-stride", type=int, default=None, help="IC stride, hours")
    p_roll.add_argument("--max-lead", type=int, default=None, help="max lead, hours")
    p_roll.add_argument("--run-id", default=None)
    p_roll.add_argument("--dp", type=int, default=None)
    p_roll.add_argument("--sp1", type=int, default=None)
    p_roll.add_argument("--sp2", type=int, default=None)
    p_roll.add_argument("--tp", type=int, default=None)
    p_roll.add_argument("--strategy", choices=("roll", "halo"), default="roll",
                        help="shifted-window communication strategy")
    p_roll.add_argument("--trace-out", default=None,
                        help="write one step's comm trace as JSON lines")

    p_derive = sub.add_parser("derive", help="error-growth derivative curves")
    _add_common(p_derive)
    p_derive.add_argument("--metrics", required=True, help="metrics.csv path")
    p_derive.add_argument("--smooth", type=int, default=None,
                          help="odd moving-average window before differencing")
    p_derive.add_argument("--run-id", default=None, help="select one run")

    p_fit = sub.add_parser("fit", help="two-stage scaling fits and heatmaps")
    _add_common(p_fit)
    p_fit.add_argument("--runs", required=True, help="runs.csv path")
    p_fit.add_argument("--metrics", required=True, help="metrics.csv path")
    p_fit.add_argument("--covariate", default=None,
                       help="comma list from params,data,compute")
    p_fit.add_argument("--kappa", type=float, default=None, help="cost model C = kappa*N*D")
    p_fit.add_argument("--leads", default=None, help="comma list of leads to fit")
    p_fit.add_argument("--channels", default=None, help="comma list of channels to fit")
    p_fit.add_argument("--allocation-lead", type=int, default=None)

    p_report = sub.add_parser("report", help="synth + fit (+ rollout + derive) bundle")
    _add_common(p_report)

    return parser


def _dispatch(args) -> int:
    cfg = load_config(args.config)
    out = prepare_out_dir(args.out, args.force)
    if args.command == "synth":
        do_synth(cfg, out, args.seed, args.config)
        return 0
    if args.command == "rollout":
        return do_rollout(args, cfg, out)
    if args.command == "derive":
        return do_derive(args, cfg, out)
    if args.command == "fit":
        return do_fit(args, cfg, out)
    if args.command == "report":
        return do_report(args, cfg, out)
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as e:
        log.error("%s", e)
        return EXIT_CODES["config"]
    except MissingTruthError as e:
        log.error("%s", e)
        return EXIT_CODES["missing-truth"]
    except DivergedRolloutError as e:
        log.error("%s", e)
        return EXIT_CODES["diverged-rollout"]
    except JoinError as e:
        log.error("%s", e)
        return EXIT_CODES["join-failure"]
    except FitError as e:
        log.error("%s", e)
        return EXIT_CODES["fit-failure"]
    except OutputDirError as e:
        log.error("%s", e)
        return EXIT_CODES["output-dir"]
    except (InvalidGridError, SchemaError, NonFiniteValuesError, ChecksumError) as e:
        log.error("%s", e)
        return EXIT_CODES["bad-data"]
    except WxscaleError as e:
        log.error("%s", e)
        return EXIT_CODES["unexpected"]


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
