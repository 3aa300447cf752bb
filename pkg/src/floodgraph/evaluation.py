"""Evaluation: L1 rollout-error curves on the surrogate mesh and binary
inundation-map CSI on a common regular grid against the fine-mesh reference.

Both comparison sides are interpolated barycentrically onto the same grid
(reference from the fine mesh, prediction from the surrogate mesh); the grid
is masked to points inside the fine triangulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as fgio
from .features import MeshStatics, SurrogateGraph
from .kdtree import KDTree
from .mesh import TriMesh, locate_points
from .model import RolloutForcing, load_checkpoint, rollout
from .multimesh import MultimeshGraph
from .solver import StateSequence

DEFAULT_SPACING = 25.0
DEFAULT_THRESHOLDS = (0.05, 0.30)


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Regular grid and mesh-to-grid interpolation
# ---------------------------------------------------------------------------

@dataclass
class RegularGrid:
    x0: float
    y0: float
    spacing: float
    nx: int
    ny: int
    mask: np.ndarray          # (ny*nx,) bool, True = inside the fine triangulation

    @property
    def total_points(self) -> int:
        return self.nx * self.ny

    @property
    def in_domain_count(self) -> int:
        return int(self.mask.sum())

    def points(self) -> np.ndarray:
        xs = self.x0 + self.spacing * np.arange(self.nx)
        ys = self.y0 + self.spacing * np.arange(self.ny)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])

    def signature(self) -> tuple:
        return (self.x0, self.y0, self.spacing, self.nx, self.ny)


def build_grid(fine: TriMesh, spacing: float = DEFAULT_SPACING) -> RegularGrid:
    """Grid covering the mesh bounding box, both edges included; points are
    in-domain when they fall inside a triangle of the fine mesh."""
    if spacing <= 0:
        raise EvaluationError(f"spacing must be positive, got {spacing}")
    x0, x1 = float(fine.node_x.min()), float(fine.node_x.max())
    y0, y1 = float(fine.node_y.min()), float(fine.node_y.max())
    nx = int(np.floor((x1 - x0) / spacing + 1e-9)) + 1
    ny = int(np.floor((y1 - y0) / spacing + 1e-9)) + 1
    grid = RegularGrid(x0=x0, y0=y0, spacing=spacing, nx=nx, ny=ny,
                       mask=np.zeros(nx * ny, dtype=bool))
    tri, _ = locate_points(fine, grid.points())
    grid.mask = tri >= 0
    return grid


@dataclass
class GridSampler:
    """Barycentric interpolation from one mesh onto a grid's in-domain points.

    In-domain points outside the sampled mesh (possible when sampling a
    coarser mesh whose boundary cuts slightly inside) fall back to the
    nearest mesh node.
    """

    mesh_hash: str
    node_count: int
    grid_signature: tuple
    vertex_index: np.ndarray    # (P, 3)
    weights: np.ndarray         # (P, 3)
    nearest_index: np.ndarray   # (P,) used where fallback is True
    fallback: np.ndarray        # (P,) bool


def build_sampler(mesh: TriMesh, grid: RegularGrid) -> GridSampler:
    pts = grid.points()[grid.mask]
    tri, bary = locate_points(mesh, pts)
    inside = tri >= 0
    vertex_index = np.zeros((pts.shape[0], 3), dtype=np.int64)
    weights = np.zeros((pts.shape[0], 3))
    vertex_index[inside] = mesh.triangles[tri[inside]]
    weights[inside] = bary[inside]
    nearest = np.zeros(pts.shape[0], dtype=np.int64)
    if np.any(~inside):
        tree = KDTree(mesh.points())
        nearest[~inside] = tree.query_many(pts[~inside])
    return GridSampler(mesh_hash=mesh.content_hash(), node_count=mesh.node_count,
                       grid_signature=grid.signature(), vertex_index=vertex_index,
                       weights=weights, nearest_index=nearest, fallback=~inside)


def grid_depth(field: np.ndarray, sampler: GridSampler) -> np.ndarray:
    """Depths at in-domain grid points, clamped at zero."""
    field = np.asarray(field, dtype=float)
    if field.shape != (sampler.node_count,):
        raise EvaluationError(
            f"field has {field.shape[0]} values, sampler mesh has "
            f"{sampler.node_count} nodes")
    out = np.einsum("pk,pk->p", sampler.weights, field[sampler.vertex_index])
    if np.any(sampler.fallback):
        out[sampler.fallback] = field[sampler.nearest_index[sampler.fallback]]
    return np.maximum(out, 0.0)


def grid_value(field: np.ndarray, sampler: GridSampler) -> np.ndarray:
    """Like grid_depth but without the non-negativity clamp."""
    field = np.asarray(field, dtype=float)
    if field.shape != (sampler.node_count,):
        raise EvaluationError(
            f"field has {field.shape[0]} values, sampler mesh has "
            f"{sampler.node_count} nodes")
    out = np.einsum("pk,pk->p", sampler.weights, field[sampler.vertex_index])
    if np.any(sampler.fallback):
        out[sampler.fallback] = field[sampler.nearest_index[sampler.fallback]]
    return out


# ---------------------------------------------------------------------------
# Inundation maps and CSI
# ---------------------------------------------------------------------------

@dataclass
class InundationMap:
    flags: np.ndarray          # bool over in-domain grid points
    threshold: float
    lead_time: float           # seconds
    grid_signature: tuple


def inundation_map(depths: np.ndarray, threshold: float, lead_time: float,
                   grid: RegularGrid) -> InundationMap:
    return InundationMap(flags=np.asarray(depths) > threshold,
                         threshold=float(threshold), lead_time=float(lead_time),
                         grid_signature=grid.signature())


def csi(pred: InundationMap, ref: InundationMap) -> float:
    """Critical success index TP/(TP+FP+FN); both maps dry counts as 1."""
    if pred.grid_signature != ref.grid_signature:
        raise EvaluationError("inundation maps come from different grids")
    if pred.threshold != ref.threshold:
        raise EvaluationError("inundation maps use different thresholds")
    tp = int(np.sum(pred.flags & ref.flags))
    fp = int(np.sum(pred.flags & ~ref.flags))
    fn = int(np.sum(~pred.flags & ref.flags))
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    lead_times: np.ndarray                 # (T,) seconds, 0 included
    l1_mean: dict[str, np.ndarray]         # var -> (T,)
    l1_std: dict[str, np.ndarray]          # population std across events
    csi_mean: dict[float, np.ndarray]      # threshold -> (T,)
    csi_std: dict[float, np.ndarray]
    n_events: int

    @property
    def lead_minutes(self) -> np.ndarray:
        return self.lead_times / 60.0


def l1_rollout_curves(pred_seqs: list[np.ndarray], target_seqs: list[StateSequence],
                      weights: np.ndarray | None = None) -> MetricsReport:
    """Per-lead-time L1 error curves for (h, u, v).

    `pred_seqs` holds one (T, N, 3) array per event; each is compared against
    the matching recorded sequence.  Node-mean by default; pass dual-cell
    areas as `weights` for an area-weighted mean.  Event spread uses the
    population standard deviation.
    """
    if len(pred_seqs) != len(target_seqs):
        raise EvaluationError("prediction and target event counts differ")
    if not pred_seqs:
        raise EvaluationError("no events to evaluate")
    t_len = target_seqs[0].snapshot_count
    lead_times = target_seqs[0].times.copy()
    per_event = {var: [] for var in ("h", "u", "v")}
    for pred, seq in zip(pred_seqs, target_seqs):
        if pred.shape[0] != seq.snapshot_count:
            raise EvaluationError(
                f"prediction has {pred.shape[0]} snapshots, target has "
                f"{seq.snapshot_count}")
        if pred.shape[0] != t_len:
            raise EvaluationError("events have inconsistent horizons")
        for ci, var in enumerate(("h", "u", "v")):
            err = np.abs(pred[:, :, ci] - getattr(seq, var))
            per_event[var].append(np.average(err, axis=1, weights=weights))
    l1_mean, l1_std = {}, {}
    for var in ("h", "u", "v"):
        stack = np.stack(per_event[var])      # (events, T)
        l1_mean[var] = stack.mean(axis=0)
        l1_std[var] = stack.std(axis=0)
    return MetricsReport(lead_times=lead_times, l1_mean=l1_mean, l1_std=l1_std,
                         csi_mean={}, csi_std={}, n_events=len(pred_seqs))


# ---------------------------------------------------------------------------
# Full-experiment evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalContext:
    """Shared read-only geometry for evaluating one training factor."""

    grid: RegularGrid
    fine_sampler: GridSampler
    coarse_sampler: GridSampler
    statics: MeshStatics
    graph: MultimeshGraph


def rollout_event(params, norms, schema, ctx: EvalContext,
                  coarse_seq: StateSequence, steps: int | None = None) -> np.ndarray:
    """Autoregressive rollout from the event's initial state; returns (T, N, 3)."""
    if steps is None:
        steps = coarse_seq.snapshot_count - 1
    node_count = ctx.statics.z.shape[0]
    sgraph = SurrogateGraph.build(ctx.graph, schema, norms, node_count)
    forcing = RolloutForcing.from_sequence(coarse_seq)
    hh, uu, vv = rollout(coarse_seq.h[0].copy(), coarse_seq.u[0].copy(),
                         coarse_seq.v[0].copy(), forcing, steps, params,
                         ctx.statics, sgraph, schema, norms)
    return np.stack([hh, uu, vv], axis=2)


def evaluate_experiment(checkpoint_path, coarse_seqs: list[StateSequence],
                        fine_seqs: list[StateSequence], ctx: EvalContext,
                        thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS,
                        map_dir=None, experiment: str = "") -> MetricsReport:
    """Roll out every held-out event and score it.

    L1 curves compare the rollout against the projected (coarse-mesh) targets;
    CSI curves compare grid-interpolated prediction maps against maps from the
    matching fine-mesh reference run.  With `map_dir` set, final-lead-time
    maps are exported as plain-text pixmaps with JSON sidecars.
    """
    if len(coarse_seqs) != len(fine_seqs):
        raise EvaluationError("coarse and fine event lists differ in length")
    params, norms, schema, _ = load_checkpoint(checkpoint_path)
    preds = [rollout_event(params, norms, schema, ctx, seq) for seq in coarse_seqs]
    report = l1_rollout_curves(preds, coarse_seqs)

    t_len = coarse_seqs[0].snapshot_count
    csi_per = {thr: np.empty((len(preds), t_len)) for thr in thresholds}
    for ei, (pred, fine_seq) in enumerate(zip(preds, fine_seqs)):
        for k in range(t_len):
            pd = grid_depth(pred[k, :, 0], ctx.coarse_sampler)
            rd = grid_depth(fine_seq.h[k], ctx.fine_sampler)
            lead = float(coarse_seqs[ei].times[k])
            for thr in thresholds:
                pm = inundation_map(pd, thr, lead, ctx.grid)
                rm = inundation_map(rd, thr, lead, ctx.grid)
                csi_per[thr][ei, k] = csi(pm, rm)
                if map_dir is not None and k == t_len - 1:
                    export_map_pair(pm, rm, ctx.grid, Path(map_dir), experiment,
                                    ei, thr, csi_per[thr][ei, k])
    for thr in thresholds:
        report.csi_mean[thr] = csi_per[thr].mean(axis=0)
        report.csi_std[thr] = csi_per[thr].std(axis=0)
    return report


# ---------------------------------------------------------------------------
# Raster export
# ---------------------------------------------------------------------------

_COLOR_DRY = (255, 255, 255)
_COLOR_WET = (30, 90, 200)
_COLOR_MASK = (128, 128, 128)


def render_map(grid: RegularGrid, data: np.ndarray, path) -> None:
    """Plain-text pixmap of in-domain grid data, row-major top-down.

    Boolean data produces a P3 color map (white dry, blue flooded, gray
    masked); float data produces a P2 grayscale of depth (0 -> 0, >= 2 m ->
    255, masked points mid-gray)."""
    data = np.asarray(data)
    if data.shape != (grid.in_domain_count,):
        raise EvaluationError(
            f"data has {data.shape[0]} values, grid has "
            f"{grid.in_domain_count} in-domain points")
    full_mask = grid.mask.reshape(grid.ny, grid.nx)
    lines = []
    if data.dtype == bool:
        full = np.zeros((grid.ny, grid.nx), dtype=bool)
        full[full_mask] = data
        lines.append("P3")
        lines.append(f"{grid.nx} {grid.ny}")
        lines.append("255")
        for row in range(grid.ny - 1, -1, -1):
            vals = []
            for col in range(grid.nx):
                if not full_mask[row, col]:
                    rgb = _COLOR_MASK
                else:
                    rgb = _COLOR_WET if full[row, col] else _COLOR_DRY
                vals.append(f"{rgb[0]} {rgb[1]} {rgb[2]}")
            lines.append(" ".join(vals))
    else:
        full = np.zeros((grid.ny, grid.nx))
        full[full_mask] = data
        gray = np.clip(full / 2.0, 0.0, 1.0)
        pix = np.rint(gray * 255).astype(int)
        pix[~full_mask] = 128
        lines.append("P2")
        lines.append(f"{grid.nx} {grid.ny}")
        lines.append("255")
        for row in range(grid.ny - 1, -1, -1):
            lines.append(" ".join(str(v) for v in pix[row]))
    Path(path).write_text("\n".join(lines) + "\n")


def export_map_pair(pred: InundationMap, ref: InundationMap, grid: RegularGrid,
                    map_dir: Path, experiment: str, event_index: int,
                    threshold: float, csi_value: float) -> None:
    map_dir.mkdir(parents=True, exist_ok=True)
    tag = f"{experiment}_ev{event_index}_thr{threshold:g}"
    render_map(grid, pred.flags, map_dir / f"{tag}_pred.ppm")
    render_map(grid, ref.flags, map_dir / f"{tag}_ref.ppm")
    sidecar = {"threshold": threshold, "lead_time": pred.lead_time,
               "grid": {"x0": grid.x0, "y0": grid.y0, "spacing": grid.spacing,
                        "nx": grid.nx, "ny": grid.ny},
               "csi": csi_value}
    (map_dir / f"{tag}.json").write_text(fgio.dumps_json(sidecar) + "\n")


# ---------------------------------------------------------------------------
# CSV report
# ---------------------------------------------------------------------------

def write_report_csv(report: MetricsReport, experiment: str, path) -> None:
    """Rows: (experiment, variable-or-threshold, lead_time_minutes, mean, std,
    n_events)."""
    lines = ["experiment,series,lead_time_minutes,mean,std,n_events"]
    minutes = report.lead_minutes
    for var in ("h", "u", "v"):
        for k, t in enumerate(minutes):
            lines.append(f"{experiment},{var},{t:g},"
                         f"{report.l1_mean[var][k]:.10g},"
                         f"{report.l1_std[var][k]:.10g},{report.n_events}")
    for thr in sorted(report.csi_mean):
        for k, t in enumerate(minutes):
            lines.append(f"{experiment},csi@{thr:g},{t:g},"
                         f"{report.csi_mean[thr][k]:.10g},"
                         f"{report.csi_std[thr][k]:.10g},{report.n_events}")
    Path(path).write_text("\n".join(lines) + "\n")
