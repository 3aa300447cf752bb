"""Coarse learning meshes and fine-to-coarse state projection.

Coarse meshes reuse the valley generator with relaxed density; fine-mesh
states are interpolated onto them with barycentric weights so coarse training
targets keep the fidelity of the fine simulation.  Coarse nodes that fall
outside the fine triangulation (possible only on non-convex supports) copy
their nearest fine node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import (DensitySpec, MeshError, TriMesh, TriangleLocator, ValleyShape,
                   build_synthetic_valley_mesh)
from .solver import StateSequence

COARSE_FACTORS = (2, 4, 8, 16, 32)


class ProjectionError(ValueError):
    pass


@dataclass
class ProjectionMap:
    """Fine-mesh interpolation stencil for each coarse node.

    ``tri_index >= 0`` rows interpolate with barycentric weights over the fine
    triangle's vertices; ``tri_index == -1`` rows copy ``nearest_index``.
    """

    fine_hash: str
    coarse_hash: str
    tri_index: np.ndarray        # (Nc,)
    weights: np.ndarray          # (Nc, 3)
    nearest_index: np.ndarray    # (Nc,), valid where tri_index == -1
    vertex_index: np.ndarray     # (Nc, 3) fine node indices of the stencil

    @property
    def outside_count(self) -> int:
        return int(np.sum(self.tri_index < 0))

    def apply(self, field: np.ndarray) -> np.ndarray:
        """Interpolate a per-fine-node field onto the coarse nodes."""
        field = np.asarray(field)
        out = np.einsum("ij,ij->i", self.weights, field[self.vertex_index])
        fallback = self.tri_index < 0
        if np.any(fallback):
            out[fallback] = field[self.nearest_index[fallback]]
        return out


def build_projection_map(fine: TriMesh, coarse: TriMesh) -> ProjectionMap:
    locator = TriangleLocator(fine)
    tri, w = locator.locate(coarse.points())
    nearest = np.zeros(coarse.node_count, dtype=np.int64)
    outside = np.where(tri < 0)[0]
    if outside.size:
        fp = fine.points()
        for i in outside:
            d2 = (fp[:, 0] - coarse.node_x[i]) ** 2 + (fp[:, 1] - coarse.node_y[i]) ** 2
            nearest[i] = int(np.argmin(d2))
    vert = np.zeros((coarse.node_count, 3), dtype=np.int64)
    inside = tri >= 0
    vert[inside] = fine.triangles[tri[inside]]
    w = w.copy()
    w[~inside] = 0.0
    return ProjectionMap(fine_hash=fine.content_hash(), coarse_hash=coarse.content_hash(),
                         tri_index=tri, weights=w, nearest_index=nearest,
                         vertex_index=vert)


@dataclass
class MeshFamily:
    fine: TriMesh
    coarse: dict[int, TriMesh]           # factor -> mesh
    maps: dict[int, ProjectionMap]       # factor -> fine->coarse map

    def mesh_at(self, factor: int) -> TriMesh:
        return self.fine if factor == 1 else self.coarse[factor]


def build_mesh_family(spec: DensitySpec, domain: tuple[float, float], seed: int,
                      shape: ValleyShape | None = None,
                      factors: tuple[int, ...] = COARSE_FACTORS) -> MeshFamily:
    """Generate the fine mesh plus density-relaxed coarse meshes and their maps."""
    if spec.factor != 1:
        raise MeshError("family spec must start at factor 1")
    fine = build_synthetic_valley_mesh(spec, domain, seed, shape=shape)
    coarse = {}
    maps = {}
    prev_count = fine.node_count
    for f in sorted(factors):
        m = build_synthetic_valley_mesh(spec.with_factor(f), domain, seed, shape=shape)
        if m.node_count >= prev_count:
            raise MeshError(f"coarse mesh at factor {f} did not shrink "
                            f"({m.node_count} >= {prev_count})")
        prev_count = m.node_count
        coarse[f] = m
        maps[f] = build_projection_map(fine, m)
    return MeshFamily(fine=fine, coarse=coarse, maps=maps)


def project_field(map_: ProjectionMap, field: np.ndarray) -> np.ndarray:
    return map_.apply(field)


def project_states(seq: StateSequence, map_: ProjectionMap,
                   factor: int | None = None) -> StateSequence:
    """Project a fine-mesh state sequence onto the coarse mesh.

    Depths are clamped at zero after interpolation; the forcing record is
    copied unchanged.
    """
    if seq.mesh_hash != map_.fine_hash:
        raise ProjectionError("sequence mesh does not match the projection map's fine mesh")
    s = seq.snapshot_count
    nc = map_.tri_index.shape[0]
    h = np.empty((s, nc))
    u = np.empty((s, nc))
    v = np.empty((s, nc))
    for k in range(s):
        h[k] = np.maximum(map_.apply(seq.h[k]), 0.0)
        u[k] = map_.apply(seq.u[k])
        v[k] = map_.apply(seq.v[k])
    meta = dict(seq.meta)
    meta.update({"projected_from": map_.fine_hash, "factor": factor})
    return StateSequence(mesh_hash=map_.coarse_hash, stride=seq.stride,
                         times=seq.times.copy(), h=h, u=u, v=v,
                         q=seq.q.copy(), zs=seq.zs.copy(), meta=meta)
