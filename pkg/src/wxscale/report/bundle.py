"""CSV writers/parsers paired with the SVG renderers, plus run manifests.

Every figure's SVG is rendered from the parsed content of its CSV, so the
pair always agrees and the CSV alone reproduces the figure byte-for-byte.
Floats are written in shortest round-trip form; empty cells mean "no value"
(NaN on parse).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .. import __version__ as tool_version
from ..errors import WxscaleError
from ..grid import ChannelSchema
from ..util import atomic_write_text, fmt_float, sha256_file, stable_json_dumps


def _fmt_cell(x: float | None) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return fmt_float(float(x))


def _parse_cell(s: str) -> float:
    return float(s) if s != "" else float("nan")


def _read_rows(path: str | Path) -> list[list[str]]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return [row for row in csv.reader(fh) if row]


# -- heatmaps ---------------------------------------------------------------


def write_heatmap_csv(
    path: str | Path, leads: list[int], channels: list[str], matrix: np.ndarray
) -> None:
    lines = ["channel," + ",".join(str(h) for h in leads)]
    for i, ch in enumerate(channels):
        lines.append(ch + "," + ",".join(_fmt_cell(v) for v in matrix[i]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_heatmap_csv(path: str | Path) -> tuple[list[int], list[str], np.ndarray]:
    rows = _read_rows(path)
    if not rows or rows[0][0] != "channel":
        raise WxscaleError(f"{path}: not a heatmap CSV")
    leads = [int(h) for h in rows[0][1:]]
    channels = [r[0] for r in rows[1:]]
    matrix = np.array([[_parse_cell(v) for v in r[1:]] for r in rows[1:]], dtype=float)
    return leads, channels, matrix


# -- pooled curves ----------------------------------------------------------

POOLED_CURVES_HEADER = ("covariate", "lead_hours", "r2", "slope")


def write_pooled_curves_csv(
    path: str | Path,
    leads: list[int],
    curves: dict[str, tuple[np.ndarray, np.ndarray]],
) -> None:
    lines = [",".join(POOLED_CURVES_HEADER)]
    for cov in sorted(curves):
        r2, slope = curves[cov]
        for h, r, b in zip(leads, r2, slope):
            lines.append(f"{cov},{h},{_fmt_cell(r)},{_fmt_cell(b)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_pooled_curves_csv(
    path: str | Path,
) -> tuple[list[int], dict[str, tuple[np.ndarray, np.ndarray]]]:
    rows = _read_rows(path)
    if not rows or tuple(rows[0]) != POOLED_CURVES_HEADER:
        raise WxscaleError(f"{path}: not a pooled-curves CSV")
    by_cov: dict[str, list[tuple[int, float, float]]] = {}
    for r in rows[1:]:
        by_cov.setdefault(r[0], []).append((int(r[1]), _parse_cell(r[2]), _parse_cell(r[3])))
    leads = sorted({h for pts in by_cov.values() for h, _, _ in pts})
    curves = {}
    for cov, pts in by_cov.items():
        r2_map = {h: r for h, r, _ in pts}
        b_map = {h: b for h, _, b in pts}
        curves[cov] = (
            np.array([r2_map.get(h, np.nan) for h in leads]),
            np.array([b_map.get(h, np.nan) for h in leads]),
        )
    return leads, curves


# -- derivative curves ------------------------------------------------------

DERIVATIVE_HEADER = ("channel", "lead_hours", "d_rmse_dt")


def write_derivative_csv(
    path: str | Path, curves: list[tuple[str, list[int], list[float]]]
) -> None:
    lines = [",".join(DERIVATIVE_HEADER)]
    for channel, leads, values in curves:
        for h, v in zip(leads, values):
            lines.append(f"{channel},{h},{_fmt_cell(v)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_derivative_csv(path: str | Path) -> list[tuple[str, list[int], list[float]]]:
    rows = _read_rows(path)
    if not rows or tuple(rows[0]) != DERIVATIVE_HEADER:
        raise WxscaleError(f"{path}: not a derivative CSV")
    order: list[str] = []
    per: dict[str, list[tuple[int, float]]] = {}
    for r in rows[1:]:
        if r[0] not in per:
            per[r[0]] = []
            order.append(r[0])
        per[r[0]].append((int(r[1]), _parse_cell(r[2])))
    return [
        (ch, [h for h, _ in per[ch]], [v for _, v in per[ch]]) for ch in order
    ]


# -- per-IC RMSE distribution ----------------------------------------------

RMSE_DIST_HEADER = ("channel", "ic_timestamp", "rmse")


def write_rmse_dist_csv(
    path: str | Path, entries: list[tuple[str, int, float]]
) -> None:
    lines = [",".join(RMSE_DIST_HEADER)]
    for channel, ic, rmse in entries:
        lines.append(f"{channel},{ic},{_fmt_cell(rmse)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def parse_rmse_dist_csv(path: str | Path) -> list[tuple[str, list[float]]]:
    rows = _read_rows(path)
    if not rows or tuple(rows[0]) != RMSE_DIST_HEADER:
        raise WxscaleError(f"{path}: not an RMSE-distribution CSV")
    order: list[str] = []
    per: dict[str, list[float]] = {}
    for r in rows[1:]:
        if r[0] not in per:
            per[r[0]] = []
            order.append(r[0])
        per[r[0]].append(_parse_cell(r[2]))
    return [(ch, per[ch]) for ch in order]


# -- unit grouping ----------------------------------------------------------


def unit_groups_for(
    channel_names: list[str], schema: ChannelSchema | None
) -> list[tuple[str, list[tuple[str, int | None]]]]:
    """Group channels by unit with their pressure level.

    The pooled pseudo-channel gets its own panel; names missing from the
    schema (or all names, when no schema is given) pool under "unknown unit".
    """
    by_name = {e.name: e for e in schema.entries} if schema is not None else {}
    groups: dict[str, list[tuple[str, int | None]]] = {}
    order: list[str] = []
    for n in channel_names:
        if n == "__pooled__":
            unit = "pooled"
            level = None
        else:
            e = by_name.get(n)
            unit = e.unit if e is not None else "unknown unit"
            level = e.level_hpa if e is not None else None
        if unit not in groups:
            groups[unit] = []
            order.append(unit)
        groups[unit].append((n, level))
    return [(u, groups[u]) for u in order]


# -- CSV -> SVG dispatch ------------------------------------------------------


def render_from_csv(csv_path: str | Path, schema: ChannelSchema | None = None) -> bytes:
    """Re-render the SVG paired with ``csv_path`` from the CSV content alone.

    The CLI renders every figure through this dispatcher, so a stored SVG is
    always byte-identical to ``render_from_csv`` of its CSV. Filenames carry
    the only non-numeric context (heatmap quantity/covariate, distribution
    lead).
    """
    from . import figures

    path = Path(csv_path)
    name = path.stem
    if name.startswith("heatmap_"):
        _, quantity, covariate = name.split("_", 2)
        leads, channels, matrix = parse_heatmap_csv(path)
        return figures.render_heatmap(
            leads, channels, matrix,
            title=f"{quantity} of log-log fit vs {covariate}",
            value_label=quantity,
        )
    if name == "pooled_curves":
        leads, curves = parse_pooled_curves_csv(path)
        return figures.render_pooled_curves(leads, curves)
    if name == "derivative":
        parsed = parse_derivative_csv(path)
        groups = unit_groups_for([c[0] for c in parsed], schema)
        by_name = {c[0]: c for c in parsed}
        panels = [
            (unit, [(n, lev, by_name[n][1], by_name[n][2]) for n, lev in members])
            for unit, members in groups
        ]
        return figures.render_derivative_panels(panels)
    if name.startswith("rmse_dist_"):
        lead = name[len("rmse_dist_"):].removesuffix("h")
        parsed = parse_rmse_dist_csv(path)
        groups = unit_groups_for([c for c, _ in parsed], schema)
        by_name = dict(parsed)
        panels = [
            (unit, [(n, by_name[n]) for n, _ in members]) for unit, members in groups
        ]
        return figures.render_box_panels(
            panels, f"per-channel RMSE at {lead} h (one point per IC)"
        )
    raise WxscaleError(f"no renderer paired with {path.name}")


# -- manifests ----------------------------------------------------------------


def build_manifest(
    command: str,
    inputs: dict[str, str | Path],
    settings: dict,
    outputs: list[str],
) -> dict:
    return {
        "tool": "wxscale",
        "tool_version": tool_version,
        "command": command,
        "inputs": {name: sha256_file(p) for name, p in sorted(inputs.items())},
        "settings": settings,
        "outputs": sorted(outputs),
    }


def write_manifest(path: str | Path, manifest: dict) -> None:
    atomic_write_text(path, stable_json_dumps(manifest))
