"""Feature assembly and normalization for the graph surrogate.

Node channels: dynamic [h, u, v] (+ optional broadcast discharge), static
[z, strickler], and a 4-way one-hot of the boundary label.  Edge channels:
[dx, dy, dist] (+ optional shortcut-origin flag).  Channel order is fixed and
versioned; one-hot and flag channels bypass normalization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import INFLOW, STAGE, TriMesh
from .multimesh import MultimeshGraph
from .solver import StateSequence

SCHEMA_VERSION = 1
STD_FLOOR = 1.0e-8


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSchema:
    use_discharge: bool = False
    use_origin_flag: bool = False
    version: int = SCHEMA_VERSION

    @property
    def node_channels(self) -> tuple[str, ...]:
        dyn = ("h", "u", "v") + (("q",) if self.use_discharge else ())
        return dyn + ("z", "strickler", "is_interior", "is_inflow", "is_stage", "is_wall")

    @property
    def edge_channels(self) -> tuple[str, ...]:
        return ("dx", "dy", "dist") + (("origin",) if self.use_origin_flag else ())

    @property
    def n_node_channels(self) -> int:
        return len(self.node_channels)

    @property
    def n_edge_channels(self) -> int:
        return len(self.edge_channels)


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray
    passthrough: np.ndarray   # bool per channel; one-hot/flag channels skip scaling

    @classmethod
    def fit(cls, rows: np.ndarray, passthrough: np.ndarray | None = None) -> "Normalizer":
        rows = np.asarray(rows, dtype=float)
        mean = rows.mean(axis=0)
        std = np.maximum(rows.std(axis=0), STD_FLOOR)
        pt = np.zeros(rows.shape[1], dtype=bool) if passthrough is None else passthrough
        mean = np.where(pt, 0.0, mean)
        std = np.where(pt, 1.0, std)
        return cls(mean=mean, std=std, passthrough=pt)

    @classmethod
    def from_moments(cls, mean, std, passthrough=None) -> "Normalizer":
        mean = np.asarray(mean, dtype=float)
        std = np.maximum(np.asarray(std, dtype=float), STD_FLOOR)
        pt = np.zeros(mean.shape, dtype=bool) if passthrough is None \
            else np.asarray(passthrough, dtype=bool)
        return cls(mean=np.where(pt, 0.0, mean), std=np.where(pt, 1.0, std),
                   passthrough=pt)

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std + self.mean


@dataclass
class NormalizerSet:
    node: Normalizer
    edge: Normalizer
    # increments are scaled by std only (zero centre) so a zero network output
    # denormalizes to an exactly unchanged state
    increment: Normalizer


@dataclass
class MeshStatics:
    z: np.ndarray
    strickler: np.ndarray
    labels: np.ndarray
    onehot: np.ndarray

    @classmethod
    def from_mesh(cls, mesh: TriMesh, z: np.ndarray | None = None,
                  strickler: np.ndarray | None = None) -> "MeshStatics":
        """Statics from a mesh, optionally overridden by projected fields."""
        labels = mesh.node_boundary_label
        onehot = np.zeros((mesh.node_count, 4))
        onehot[np.arange(mesh.node_count), labels] = 1.0
        return cls(z=mesh.node_z if z is None else np.asarray(z, dtype=float),
                   strickler=mesh.node_strickler if strickler is None
                   else np.asarray(strickler, dtype=float),
                   labels=labels, onehot=onehot)

    @property
    def driver_mask(self) -> np.ndarray:
        return (self.labels == INFLOW) | (self.labels == STAGE)

    @property
    def inflow_mask(self) -> np.ndarray:
        return self.labels == INFLOW

    @property
    def stage_mask(self) -> np.ndarray:
        return self.labels == STAGE


@dataclass
class SurrogateGraph:
    """Edge structure with pre-normalized edge features for one mesh/graph."""

    src: np.ndarray
    dst: np.ndarray
    edge_feats: np.ndarray     # normalized, (E, Ce)
    node_count: int

    @classmethod
    def build(cls, graph: MultimeshGraph, schema: FeatureSchema,
              norms: NormalizerSet, node_count: int) -> "SurrogateGraph":
        raw = raw_edge_features(graph, schema)
        return cls(src=graph.merged.src.astype(np.int64),
                   dst=graph.merged.dst.astype(np.int64),
                   edge_feats=norms.edge.normalize(raw), node_count=node_count)


def raw_edge_features(graph: MultimeshGraph, schema: FeatureSchema) -> np.ndarray:
    cols = [graph.merged.dx, graph.merged.dy, graph.merged.dist]
    if schema.use_origin_flag:
        cols.append(graph.origin.astype(float))
    return np.column_stack(cols)


@dataclass
class DriverValues:
    """Imposed next-step values on driver nodes (full-length arrays; only
    driver rows are consumed)."""

    h: np.ndarray
    u: np.ndarray
    v: np.ndarray
    q: float = 0.0


@dataclass
class GraphBatch:
    node_feats: np.ndarray
    edge_feats: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    driver_mask: np.ndarray
    inflow_mask: np.ndarray
    stage_mask: np.ndarray
    next_driver: DriverValues | None = None
    q_now: float = 0.0


def raw_node_features(h, u, v, statics: MeshStatics, q_now: float,
                      schema: FeatureSchema) -> np.ndarray:
    n = statics.z.shape[0]
    cols = [h, u, v]
    if schema.use_discharge:
        cols.append(np.full(n, float(q_now)))
    cols.extend([statics.z, statics.strickler])
    return np.column_stack(cols + [statics.onehot])


def assemble_features(h, u, v, statics: MeshStatics, q_now: float,
                      schema: FeatureSchema, norms: NormalizerSet,
                      graph: SurrogateGraph,
                      next_driver: DriverValues | None = None) -> GraphBatch:
    """Build one normalized GraphBatch for a single time step."""
    for name, arr in (("h", h), ("u", u), ("v", v)):
        bad = ~np.isfinite(arr)
        if np.any(bad):
            raise FeatureError(f"non-finite {name} at node {int(np.argmax(bad))}")
    raw = raw_node_features(h, u, v, statics, q_now, schema)
    feats = norms.node.normalize(raw)
    return GraphBatch(node_feats=feats, edge_feats=graph.edge_feats,
                      src=graph.src, dst=graph.dst,
                      driver_mask=statics.driver_mask,
                      inflow_mask=statics.inflow_mask,
                      stage_mask=statics.stage_mask,
                      next_driver=next_driver, q_now=float(q_now))


def fit_normalizers(train_seqs: list[StateSequence], statics: MeshStatics,
                    graph: MultimeshGraph, schema: FeatureSchema) -> NormalizerSet:
    """Training-split statistics for node, edge, and increment channels."""
    if not train_seqs:
        raise FeatureError("no training sequences")
    rows = []
    for seq in train_seqs:
        for k in range(seq.snapshot_count):
            rows.append(raw_node_features(seq.h[k], seq.u[k], seq.v[k], statics,
                                          seq.q[k], schema))
    node_rows = np.concatenate(rows, axis=0)
    node_pt = np.zeros(schema.n_node_channels, dtype=bool)
    node_pt[-4:] = True   # one-hot block
    node_norm = Normalizer.fit(node_rows, node_pt)

    edge_raw = raw_edge_features(graph, schema)
    edge_pt = np.zeros(schema.n_edge_channels, dtype=bool)
    if schema.use_origin_flag:
        edge_pt[-1] = True
    edge_norm = Normalizer.fit(edge_raw, edge_pt)

    incs = []
    for seq in train_seqs:
        incs.append(np.stack([np.diff(seq.h, axis=0).ravel(),
                              np.diff(seq.u, axis=0).ravel(),
                              np.diff(seq.v, axis=0).ravel()], axis=1))
    inc_rows = np.concatenate(incs, axis=0)
    inc_std = np.maximum(np.sqrt((inc_rows ** 2).mean(axis=0)), STD_FLOOR)
    inc_norm = Normalizer.from_moments(np.zeros(3), inc_std)
    return NormalizerSet(node=node_norm, edge=edge_norm, increment=inc_norm)


def inject_boundaries(h, u, v, statics: MeshStatics,
                      imposed: DriverValues) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Overwrite driver nodes: inflow gets imposed (h, u, v), stage gets
    imposed h with predicted velocities retained."""
    h = h.copy()
    u = u.copy()
    v = v.copy()
    inf = statics.inflow_mask
    stg = statics.stage_mask
    h[inf] = imposed.h[inf]
    u[inf] = imposed.u[inf]
    v[inf] = imposed.v[inf]
    h[stg] = imposed.h[stg]
    return h, u, v
