"""Multimesh graph construction: long-range shortcut edges transferred from
coarser auxiliary meshes onto the training mesh via nearest-node matching.

Each undirected edge of a coarse mesh becomes a shortcut between the matched
nearest nodes of the base mesh; self-loops and duplicates (of base edges or of
shortcuts from other levels) are dropped, and both directions are stored with
geometric features recomputed from the base-mesh coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io as fgio
from .kdtree import KDTree
from .mesh import (DirectedEdgeSet, HopRadiusStats, TriMesh, directed_from_pairs,
                   extract_directed_edges, hop_radius_stats, undirected_edges)

ORIGIN_BASE = 0
ORIGIN_SHORTCUT = 1


@dataclass
class MultimeshGraph:
    node_hash: str
    base: DirectedEdgeSet
    shortcut: DirectedEdgeSet
    merged: DirectedEdgeSet
    origin: np.ndarray       # per merged edge, ORIGIN_BASE or ORIGIN_SHORTCUT


def match_nodes(coarse: TriMesh, fine: TriMesh) -> np.ndarray:
    """Map each coarse node to its Euclidean-nearest fine node (ties: lowest index)."""
    tree = KDTree(fine.points())
    return tree.query_many(coarse.points())


def build_multimesh(base: TriMesh, coarser: list[TriMesh]) -> MultimeshGraph:
    base_edges = extract_directed_edges(base)
    base_pairs = undirected_edges(base.triangles)
    seen = {(int(a), int(b)) for a, b in base_pairs}

    shortcut_pairs = []
    for cm in coarser:
        matched = match_nodes(cm, base)
        for a, b in undirected_edges(cm.triangles):
            fa, fb = int(matched[a]), int(matched[b])
            if fa == fb:
                continue
            pair = (fa, fb) if fa < fb else (fb, fa)
            if pair in seen:
                continue
            seen.add(pair)
            shortcut_pairs.append(pair)
    shortcut_pairs.sort()
    pairs_arr = (np.asarray(shortcut_pairs, dtype=np.int64).reshape(-1, 2))
    shortcut = directed_from_pairs(pairs_arr, base.node_x, base.node_y)

    merged = DirectedEdgeSet(
        src=np.concatenate([base_edges.src, shortcut.src]),
        dst=np.concatenate([base_edges.dst, shortcut.dst]),
        dx=np.concatenate([base_edges.dx, shortcut.dx]),
        dy=np.concatenate([base_edges.dy, shortcut.dy]),
        dist=np.concatenate([base_edges.dist, shortcut.dist]),
    )
    origin = np.concatenate([np.zeros(base_edges.count, dtype=np.int64),
                             np.ones(shortcut.count, dtype=np.int64)])
    return MultimeshGraph(node_hash=base.content_hash(), base=base_edges,
                          shortcut=shortcut, merged=merged, origin=origin)


@dataclass
class MultimeshReport:
    base_stats: HopRadiusStats
    merged_stats: HopRadiusStats
    shortcut_count: int
    shortcut_length_histogram: tuple[np.ndarray, np.ndarray]  # (counts, bin edges)


def multimesh_report(g: MultimeshGraph, node_count: int,
                     n_bins: int = 20) -> MultimeshReport:
    base_stats = hop_radius_stats(g.base, node_count)
    merged_stats = hop_radius_stats(g.merged, node_count)
    if g.shortcut.count:
        hi = float(g.shortcut.dist.max())
        counts, edges = np.histogram(g.shortcut.dist, bins=n_bins, range=(0.0, hi))
    else:
        counts, edges = np.histogram([], bins=n_bins, range=(0.0, 1.0))
    return MultimeshReport(base_stats=base_stats, merged_stats=merged_stats,
                           shortcut_count=g.shortcut.count // 2,
                           shortcut_length_histogram=(counts, edges))


# ---------------------------------------------------------------------------
# FGG container
# ---------------------------------------------------------------------------

def save_graph(g: MultimeshGraph, path) -> None:
    meta = {
        "kind": "multimesh_graph",
        "node_hash": g.node_hash,
        "n_base": g.base.count,
        "n_shortcut": g.shortcut.count,
    }
    with open(path, "wb") as fh:
        fgio.write_header(fh, fgio.FGG_MAGIC, meta)
        for es in (g.base, g.shortcut):
            fgio.write_array(fh, es.src.astype("<i8"))
            fgio.write_array(fh, es.dst.astype("<i8"))
            fgio.write_array(fh, es.dx.astype("<f8"))
            fgio.write_array(fh, es.dy.astype("<f8"))
            fgio.write_array(fh, es.dist.astype("<f8"))


def load_graph(path) -> MultimeshGraph:
    with open(path, "rb") as fh:
        meta = fgio.read_header(fh, fgio.FGG_MAGIC)
        if meta.get("kind") != "multimesh_graph":
            raise fgio.FormatError(f"not a multimesh graph: {path}")
        sets = []
        for n in (meta["n_base"], meta["n_shortcut"]):
            src = fgio.read_array(fh, "i8", (n,))
            dst = fgio.read_array(fh, "i8", (n,))
            dx = fgio.read_array(fh, "f8", (n,))
            dy = fgio.read_array(fh, "f8", (n,))
            dist = fgio.read_array(fh, "f8", (n,))
            sets.append(DirectedEdgeSet(src, dst, dx, dy, dist))
    base, shortcut = sets
    merged = DirectedEdgeSet(
        src=np.concatenate([base.src, shortcut.src]),
        dst=np.concatenate([base.dst, shortcut.dst]),
        dx=np.concatenate([base.dx, shortcut.dx]),
        dy=np.concatenate([base.dy, shortcut.dy]),
        dist=np.concatenate([base.dist, shortcut.dist]),
    )
    origin = np.concatenate([np.zeros(base.count, dtype=np.int64),
                             np.ones(shortcut.count, dtype=np.int64)])
    return MultimeshGraph(node_hash=meta["node_hash"], base=base,
                          shortcut=shortcut, merged=merged, origin=origin)
