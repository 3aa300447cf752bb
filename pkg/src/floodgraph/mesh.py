"""Unstructured triangular meshes: synthetic valley generation, directed-edge
graphs with geometric features, hop-radius statistics, and point location.

The synthetic valley is a tilted rectangular floodplain with an incised channel
band along the long axis.  Node density is prescribed per zone (channel band,
urban band, floodplain) and relaxed globally by a factor in {1,2,4,8,16,32};
the generator perturbs a structured per-band lattice and triangulates it, so a
given (spec, domain, seed) always produces the same mesh.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.spatial import Delaunay

from .io import dumps_json, loads_json, sha256_bytes

# Boundary label codes; the order also fixes the one-hot feature layout.
INTERIOR, INFLOW, STAGE, WALL = 0, 1, 2, 3
LABEL_NAMES = ("INTERIOR", "INFLOW", "STAGE", "WALL")

ALLOWED_FACTORS = (1, 2, 4, 8, 16, 32)


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class DensitySpec:
    """Piecewise-constant target edge-length field over the valley.

    Targets are in metres; the effective target is ``target * factor``.  The
    channel band spans ``|y - ly/2| <= channel_halfwidth``, the urban band the
    annulus up to ``urban_halfwidth``, and the floodplain the rest.
    """

    channel_target: float = 12.0
    urban_target: float = 20.0
    floodplain_target: float = 40.0
    channel_halfwidth: float = 120.0
    urban_halfwidth: float = 280.0
    factor: int = 1

    def __post_init__(self):
        if min(self.channel_target, self.urban_target, self.floodplain_target) <= 0:
            raise MeshError("density targets must be positive")
        if self.factor not in ALLOWED_FACTORS:
            raise MeshError(f"relaxation factor {self.factor} not in {ALLOWED_FACTORS}")
        if not (0 < self.channel_halfwidth < self.urban_halfwidth):
            raise MeshError("need 0 < channel_halfwidth < urban_halfwidth")

    @classmethod
    def uniform(cls, target: float, factor: int = 1) -> "DensitySpec":
        return cls(channel_target=target, urban_target=target, floodplain_target=target,
                   channel_halfwidth=1.0, urban_halfwidth=2.0, factor=factor)

    @property
    def is_uniform(self) -> bool:
        return self.channel_target == self.urban_target == self.floodplain_target

    def with_factor(self, factor: int) -> "DensitySpec":
        return replace(self, factor=factor)

    def target_at(self, y: float, ly: float) -> float:
        d = abs(y - 0.5 * ly)
        if self.is_uniform or d <= self.channel_halfwidth:
            base = self.channel_target
        elif d <= self.urban_halfwidth:
            base = self.urban_target
        else:
            base = self.floodplain_target
        return base * self.factor

    def to_dict(self) -> dict:
        return {
            "channel_target": self.channel_target,
            "urban_target": self.urban_target,
            "floodplain_target": self.floodplain_target,
            "channel_halfwidth": self.channel_halfwidth,
            "urban_halfwidth": self.urban_halfwidth,
            "factor": self.factor,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DensitySpec":
        return cls(**d)


@dataclass(frozen=True)
class ValleyShape:
    """Analytic bed/friction model of the synthetic valley."""

    channel_slope: float = 1.0e-3       # bed drop per metre downstream
    bank_height: float = 2.0            # channel-to-floodplain step, metres
    plain_rise: float = 4.0e-3          # lateral floodplain slope beyond the banks
    channel_strickler: float = 35.0
    plain_strickler: float = 20.0

    def bed_elevation(self, x, y, lx: float, ly: float, spec: DensitySpec):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        d = np.abs(y - 0.5 * ly)
        lateral = np.clip(d - spec.channel_halfwidth, 0.0, None)
        ramp_width = max(spec.urban_halfwidth - spec.channel_halfwidth, 1.0)
        bank = self.bank_height * np.clip(lateral / ramp_width, 0.0, 1.0)
        plain = self.plain_rise * np.clip(d - spec.urban_halfwidth, 0.0, None)
        return self.channel_slope * (lx - x) + bank + plain

    def strickler(self, y, ly: float, spec: DensitySpec):
        d = np.abs(np.asarray(y, dtype=float) - 0.5 * ly)
        return np.where(d <= spec.channel_halfwidth, self.channel_strickler,
                        self.plain_strickler)

    def to_dict(self) -> dict:
        return {
            "channel_slope": self.channel_slope,
            "bank_height": self.bank_height,
            "plain_rise": self.plain_rise,
            "channel_strickler": self.channel_strickler,
            "plain_strickler": self.plain_strickler,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ValleyShape":
        return cls(**d)


@dataclass
class TriMesh:
    node_x: np.ndarray
    node_y: np.ndarray
    node_z: np.ndarray
    node_strickler: np.ndarray
    triangles: np.ndarray           # (T, 3) int, counterclockwise
    node_boundary_label: np.ndarray  # (N,) int codes
    meta: dict = field(default_factory=dict)

    @property
    def node_count(self) -> int:
        return self.node_x.shape[0]

    @property
    def triangle_count(self) -> int:
        return self.triangles.shape[0]

    def points(self) -> np.ndarray:
        return np.column_stack([self.node_x, self.node_y])

    def signed_areas(self) -> np.ndarray:
        t = self.triangles
        x, y = self.node_x, self.node_y
        return 0.5 * ((x[t[:, 1]] - x[t[:, 0]]) * (y[t[:, 2]] - y[t[:, 0]])
                      - (x[t[:, 2]] - x[t[:, 0]]) * (y[t[:, 1]] - y[t[:, 0]]))

    def content_hash(self) -> str:
        """Hash of the geometric content (coordinates, fields, topology, labels)."""
        h_parts = [np.ascontiguousarray(a).tobytes() for a in
                   (self.node_x, self.node_y, self.node_z, self.node_strickler,
                    self.triangles.astype(np.int64), self.node_boundary_label.astype(np.int64))]
        return sha256_bytes(b"".join(h_parts))


def undirected_edges(triangles: np.ndarray) -> np.ndarray:
    """Unique undirected edges (i < j), sorted lexicographically."""
    t = np.asarray(triangles)
    pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    return np.unique(pairs, axis=0)


def boundary_edges(triangles: np.ndarray) -> np.ndarray:
    """Edges adjacent to exactly one triangle (i < j pairs)."""
    t = np.asarray(triangles)
    pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    uniq, counts = np.unique(pairs, axis=0, return_counts=True)
    return uniq[counts == 1]


def validate_mesh(mesh: TriMesh) -> None:
    """Check the TriMesh invariants; raise MeshError on the first violation."""
    n = mesh.node_count
    t = mesh.triangles
    if t.size and (t.min() < 0 or t.max() >= n):
        raise MeshError("triangle index out of range")
    areas = mesh.signed_areas()
    if np.any(areas <= 0):
        bad = int(np.argmin(areas))
        raise MeshError(f"triangle {bad} has non-positive signed area {areas[bad]:g}")
    pairs = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=0)
    pairs = np.sort(pairs, axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    if np.any(counts > 2):
        raise MeshError("non-conforming triangulation: edge shared by >2 triangles")
    if np.any(mesh.node_strickler <= 0):
        raise MeshError("non-positive Strickler coefficient")
    labels = mesh.node_boundary_label
    if np.any((labels < 0) | (labels > 3)):
        raise MeshError("unknown boundary label code")
    b_nodes = np.zeros(n, dtype=bool)
    be = boundary_edges(t)
    b_nodes[be.ravel()] = True
    misplaced = np.where((labels != INTERIOR) & ~b_nodes)[0]
    if misplaced.size:
        raise MeshError(f"node {misplaced[0]} labeled {LABEL_NAMES[labels[misplaced[0]]]} "
                        "but does not lie on a boundary edge")


def _orient_ccw(points: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    t = triangles.copy()
    x, y = points[:, 0], points[:, 1]
    area2 = ((x[t[:, 1]] - x[t[:, 0]]) * (y[t[:, 2]] - y[t[:, 0]])
             - (x[t[:, 2]] - x[t[:, 0]]) * (y[t[:, 1]] - y[t[:, 0]]))
    flip = area2 < 0
    t[flip] = t[flip][:, [0, 2, 1]]
    return t


def lattice_rows(spec: DensitySpec, lx: float, ly: float) -> list[tuple[float, float]]:
    """Seed-lattice rows as (y, local_target) pairs, before perturbation.

    Uniform specs collapse to a single global lattice so the node count is
    exactly (round(lx/t)+1) * (round(ly/t)+1).
    """
    if spec.is_uniform:
        t = spec.channel_target * spec.factor
        ny = max(1, round(ly / t))
        return [(y, t) for y in np.linspace(0.0, ly, ny + 1)]
    yc = 0.5 * ly
    cuts = [0.0, max(0.0, yc - spec.urban_halfwidth), max(0.0, yc - spec.channel_halfwidth),
            min(ly, yc + spec.channel_halfwidth), min(ly, yc + spec.urban_halfwidth), ly]
    band_targets = [spec.floodplain_target, spec.urban_target, spec.channel_target,
                    spec.urban_target, spec.floodplain_target]
    rows: list[tuple[float, float]] = []
    for lo, hi, base in zip(cuts[:-1], cuts[1:], band_targets):
        if hi - lo <= 1e-9:
            continue
        t = base * spec.factor
        nseg = max(1, round((hi - lo) / t))
        for y in np.linspace(lo, hi, nseg + 1):
            rows.append((float(y), t))
    # deduplicate shared band boundaries, keeping the finer target
    rows.sort(key=lambda r: (r[0], r[1]))
    dedup: list[tuple[float, float]] = []
    for y, t in rows:
        if dedup and abs(y - dedup[-1][0]) < 1e-9:
            continue
        dedup.append((y, t))
    return dedup


def lattice_points(spec: DensitySpec, lx: float, ly: float) -> tuple[np.ndarray, np.ndarray]:
    """Structured seed lattice (points, local_targets) the generator perturbs."""
    xs, ys, ts = [], [], []
    for y, t in lattice_rows(spec, lx, ly):
        nx = max(1, round(lx / t))
        row_x = np.linspace(0.0, lx, nx + 1)
        xs.append(row_x)
        ys.append(np.full(row_x.shape, y))
        ts.append(np.full(row_x.shape, t))
    return (np.column_stack([np.concatenate(xs), np.concatenate(ys)]),
            np.concatenate(ts))


def build_synthetic_valley_mesh(spec: DensitySpec, domain: tuple[float, float],
                                seed: int, shape: ValleyShape | None = None,
                                jitter: float = 0.22) -> TriMesh:
    """Generate the synthetic valley mesh for one density spec.

    ``domain`` is (lx, ly) in metres; flow runs in +x, the channel band is
    centred on y = ly/2.  Interior lattice points are jittered by a fraction of
    the local target length with a seeded generator; boundary points stay put
    so the rectangle outline is exact.
    """
    lx, ly = float(domain[0]), float(domain[1])
    if lx <= 0 or ly <= 0:
        raise MeshError(f"degenerate domain {domain}")
    shape = shape or ValleyShape()
    max_target = max(spec.channel_target, spec.urban_target, spec.floodplain_target) * spec.factor
    if max_target > min(lx, ly):
        raise MeshError(f"density target {max_target:g} m exceeds domain extent "
                        f"{min(lx, ly):g} m")

    pts, targets = lattice_points(spec, lx, ly)
    rng = np.random.default_rng(seed)
    offsets = rng.uniform(-jitter, jitter, size=pts.shape) * targets[:, None]
    on_bx = (pts[:, 0] <= 1e-9) | (pts[:, 0] >= lx - 1e-9)
    on_by = (pts[:, 1] <= 1e-9) | (pts[:, 1] >= ly - 1e-9)
    offsets[on_bx | on_by] = 0.0
    pts = pts + offsets

    tri = Delaunay(pts)
    triangles = _orient_ccw(pts, tri.simplices.astype(np.int64))
    # drop slivers that qhull may keep along collinear boundary chains
    x, y = pts[:, 0], pts[:, 1]
    t = triangles
    area2 = ((x[t[:, 1]] - x[t[:, 0]]) * (y[t[:, 2]] - y[t[:, 0]])
             - (x[t[:, 2]] - x[t[:, 0]]) * (y[t[:, 1]] - y[t[:, 0]]))
    triangles = t[area2 > 1e-9 * max_target ** 2]
    order = np.lexsort((triangles[:, 2], triangles[:, 1], triangles[:, 0]))
    triangles = triangles[order]

    labels = np.zeros(len(pts), dtype=np.int64)
    be = boundary_edges(triangles)
    b_nodes = np.unique(be.ravel())
    bx, by = pts[b_nodes, 0], pts[b_nodes, 1]
    yc = 0.5 * ly
    cw = ly if spec.is_uniform else spec.channel_halfwidth
    upstream = (bx <= 1e-9) & (np.abs(by - yc) <= cw + 1e-9)
    downstream = bx >= lx - 1e-9
    labels[b_nodes] = WALL
    labels[b_nodes[downstream]] = STAGE
    labels[b_nodes[upstream]] = INFLOW

    mesh = TriMesh(
        node_x=pts[:, 0].copy(), node_y=pts[:, 1].copy(),
        node_z=shape.bed_elevation(pts[:, 0], pts[:, 1], lx, ly, spec),
        node_strickler=shape.strickler(pts[:, 1], ly, spec).astype(float),
        triangles=triangles,
        node_boundary_label=labels,
        meta={"seed": seed, "domain": [lx, ly], "spec": spec.to_dict(),
              "shape": shape.to_dict(), "generator": "valley-lattice-delaunay"},
    )
    validate_mesh(mesh)
    return mesh


def build_strip_mesh(length: float, width: float, dx: float,
                     z: float = 0.0, strickler: float = 1.0e6) -> TriMesh:
    """Regular flat strip with wall boundaries everywhere (solver test bed)."""
    nx = max(1, round(length / dx))
    ny = max(1, round(width / dx))
    gx, gy = np.meshgrid(np.linspace(0, length, nx + 1), np.linspace(0, width, ny + 1),
                         indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    tri = Delaunay(pts)
    triangles = _orient_ccw(pts, tri.simplices.astype(np.int64))
    labels = np.zeros(len(pts), dtype=np.int64)
    be = boundary_edges(triangles)
    labels[np.unique(be.ravel())] = WALL
    mesh = TriMesh(pts[:, 0].copy(), pts[:, 1].copy(),
                   np.full(len(pts), float(z)), np.full(len(pts), float(strickler)),
                   triangles, labels, meta={"generator": "strip"})
    validate_mesh(mesh)
    return mesh


# ---------------------------------------------------------------------------
# Directed edges and hop-radius statistics
# ---------------------------------------------------------------------------

@dataclass
class DirectedEdgeSet:
    src: np.ndarray
    dst: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dist: np.ndarray

    @property
    def count(self) -> int:
        return self.src.shape[0]

    def feature_matrix(self) -> np.ndarray:
        return np.column_stack([self.dx, self.dy, self.dist])


def directed_from_pairs(pairs: np.ndarray, node_x: np.ndarray,
                        node_y: np.ndarray) -> DirectedEdgeSet:
    """Expand undirected (i<j) pairs into both directions with geometry."""
    i, j = pairs[:, 0], pairs[:, 1]
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    dx = node_x[dst] - node_x[src]
    dy = node_y[dst] - node_y[src]
    return DirectedEdgeSet(src, dst, dx, dy, np.hypot(dx, dy))


def extract_directed_edges(mesh: TriMesh) -> DirectedEdgeSet:
    pairs = undirected_edges(mesh.triangles)
    return directed_from_pairs(pairs, mesh.node_x, mesh.node_y)


@dataclass
class HopRadiusStats:
    r10: np.ndarray
    node_count: int
    directed_edge_count: int
    mean_edge_length: float
    r10_median: float
    r10_mean: float
    r10_max: float


def hop_radius_stats(edges: DirectedEdgeSet, node_count: int) -> HopRadiusStats:
    """Per-node 10-hop indicative radius: 10x the mean outgoing edge length.

    The median uses the lower-midpoint convention on even counts.
    """
    counts = np.bincount(edges.src, minlength=node_count)
    if np.any(counts == 0):
        bad = int(np.argmin(counts))
        raise MeshError(f"node {bad} has no outgoing edge")
    sums = np.bincount(edges.src, weights=edges.dist, minlength=node_count)
    r10 = 10.0 * sums / counts
    s = np.sort(r10)
    median = float(s[(node_count - 1) // 2])
    return HopRadiusStats(
        r10=r10, node_count=node_count, directed_edge_count=edges.count,
        mean_edge_length=float(edges.dist.mean()),
        r10_median=median, r10_mean=float(r10.mean()), r10_max=float(r10.max()),
    )


# ---------------------------------------------------------------------------
# Point location
# ---------------------------------------------------------------------------

OUTSIDE = -1
_INSIDE_TOL = -1.0e-10


class TriangleLocator:
    """Bucket-grid accelerated point-in-triangle queries with barycentric output.

    Ties on shared edges go to the lowest triangle index (candidates are
    scanned in ascending order).
    """

    def __init__(self, mesh: TriMesh):
        self.mesh = mesh
        pts = mesh.points()
        t = mesh.triangles
        self._p0 = pts[t[:, 0]]
        e1 = pts[t[:, 1]] - self._p0
        e2 = pts[t[:, 2]] - self._p0
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self._inv = np.column_stack([e2[:, 1], -e2[:, 0], -e1[:, 1], e1[:, 0]]) / det[:, None]
        xmin = pts[t].min(axis=1)
        xmax = pts[t].max(axis=1)
        self._lo = pts.min(axis=0)
        hi = pts.max(axis=0)
        n_cells = max(1, int(np.sqrt(max(1, len(t)))))
        self._cell = np.maximum((hi - self._lo) / n_cells, 1e-9)
        self._nc = np.maximum(((hi - self._lo) / self._cell).astype(int) + 1, 1)
        self._buckets: dict[tuple[int, int], list[int]] = {}
        ij_lo = np.floor((xmin - self._lo) / self._cell).astype(int)
        ij_hi = np.floor((xmax - self._lo) / self._cell).astype(int)
        for k in range(len(t)):
            for ci in range(ij_lo[k, 0], ij_hi[k, 0] + 1):
                for cj in range(ij_lo[k, 1], ij_hi[k, 1] + 1):
                    self._buckets.setdefault((ci, cj), []).append(k)
        for v in self._buckets.values():
            v.sort()

    def locate_one(self, x: float, y: float) -> tuple[int, np.ndarray]:
        ci = int(np.floor((x - self._lo[0]) / self._cell[0]))
        cj = int(np.floor((y - self._lo[1]) / self._cell[1]))
        for k in self._buckets.get((ci, cj), ()):
            rx, ry = x - self._p0[k, 0], y - self._p0[k, 1]
            a = self._inv[k]
            w1 = a[0] * rx + a[1] * ry
            w2 = a[2] * rx + a[3] * ry
            w0 = 1.0 - w1 - w2
            if w0 >= _INSIDE_TOL and w1 >= _INSIDE_TOL and w2 >= _INSIDE_TOL:
                return k, np.array([w0, w1, w2])
        return OUTSIDE, np.zeros(3)

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        points = np.asarray(points, dtype=float)
        tri = np.full(len(points), OUTSIDE, dtype=np.int64)
        w = np.zeros((len(points), 3))
        for i, (x, y) in enumerate(points):
            tri[i], w[i] = self.locate_one(float(x), float(y))
        return tri, w


def locate_points(mesh: TriMesh, points: Sequence[tuple[float, float]]
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Locate points in the mesh: (triangle index or OUTSIDE, barycentric weights)."""
    return TriangleLocator(mesh).locate(np.asarray(points, dtype=float))


# ---------------------------------------------------------------------------
# FGM file format
# ---------------------------------------------------------------------------

FGM_FORMAT = "FGM"
FGM_VERSION = 1


def save_mesh(mesh: TriMesh, path) -> None:
    doc = {
        "format": FGM_FORMAT,
        "version": FGM_VERSION,
        "nodes": {
            "x": mesh.node_x, "y": mesh.node_y, "z": mesh.node_z,
            "strickler": mesh.node_strickler,
        },
        "triangles": mesh.triangles,
        "boundary_labels": [LABEL_NAMES[c] for c in mesh.node_boundary_label],
        "meta": mesh.meta,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(doc))


def load_mesh(path) -> TriMesh:
    with open(path, "r", encoding="utf-8") as fh:
        doc = loads_json(fh.read())
    if doc.get("format") != FGM_FORMAT or doc.get("version") != FGM_VERSION:
        raise MeshError(f"not an FGM v{FGM_VERSION} file: {path}")
    nodes = doc["nodes"]
    code = {name: i for i, name in enumerate(LABEL_NAMES)}
    mesh = TriMesh(
        node_x=np.asarray(nodes["x"], dtype=float),
        node_y=np.asarray(nodes["y"], dtype=float),
        node_z=np.asarray(nodes["z"], dtype=float),
        node_strickler=np.asarray(nodes["strickler"], dtype=float),
        triangles=np.asarray(doc["triangles"], dtype=np.int64),
        node_boundary_label=np.asarray([code[s] for s in doc["boundary_labels"]],
                                       dtype=np.int64),
        meta=doc.get("meta", {}),
    )
    validate_mesh(mesh)
    return mesh
