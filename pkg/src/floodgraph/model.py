"""Encoder-processor-decoder graph network with hand-rolled reverse-mode
gradients.

Node and edge encoders lift features to a shared latent width; L processor
blocks alternate residual edge updates and residual node updates, where each
node sums the updated latents of its incoming edges; the decoder emits
normalized increments for (h, u, v).  Everything is float64 numpy, neighbor
sums use index-ordered accumulation, and the backward pass is exact (verified
against central finite differences in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kn
from . import io as fgio
from .features import (DriverValues, FeatureSchema, GraphBatch, MeshStatics,
                       Normalizer, NormalizerSet, SurrogateGraph,
                       assemble_features, inject_boundaries)


class ModelError(RuntimeError):
    pass


@dataclass
class MLP:
    """Fully-connected net with smooth-rectifier hidden layers and linear output."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def create(cls, rng: np.random.Generator, sizes: list[int],
               zero_last: bool = False) -> "MLP":
        ws, bs = [], []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            if zero_last and k == len(sizes) - 2:
                ws.append(np.zeros((a, b)))
            else:
                ws.append(rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b)))
            bs.append(np.zeros(b))
        return cls(ws, bs)

    def forward(self, x: np.ndarray):
        """Returns (output, cache) where cache holds one (input, preactivation,
        sigmoid-or-None) triple per layer."""
        if kn.HAVE_NUMBA and len(self.weights) == 3:
            w, b = self.weights, self.biases
            out, p0, s0, a0, p1, s1, a1 = kn._mlp3_forward_nb(
                x, w[0], b[0], w[1], b[1], w[2], b[2])
            return out, [(x, p0, s0), (a0, p1, s1), (a1, out, None)]
        cache = []
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            pre = x @ w + b
            if k == last:
                cache.append((x, pre, None))
                x = pre
            else:
                s, act = kn.silu_forward(pre)
                cache.append((x, pre, s))
                x = act
        return x, cache

    def backward(self, dy: np.ndarray, cache):
        """Returns (dx, [(dW, db), ...]) in layer order."""
        if kn.HAVE_NUMBA and len(self.weights) == 3:
            x, p0, s0 = cache[0]
            a0, p1, s1 = cache[1]
            a1 = cache[2][0]
            w = self.weights
            dx, dw0, db0, dw1, db1, dw2, db2 = kn._mlp3_backward_nb(
                dy, x, p0, s0, a0, p1, s1, a1, w[0], w[1], w[2])
            return dx, [(dw0, db0), (dw1, db1), (dw2, db2)]
        grads = [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            x, pre, s = cache[k]
            dpre = dy if s is None else kn.silu_backward(dy, pre, s)
            grads[k] = (x.T @ dpre, dpre.sum(axis=0))
            dy = dpre @ self.weights[k].T
        return dy, grads

    def named_arrays(self, prefix: str):
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}.w{k}", w
            yield f"{prefix}.b{k}", b


@dataclass(frozen=True)
class HyperParams:
    latent: int = 64
    blocks: int = 10
    hidden_layers: int = 2
    n_node_in: int = 9
    n_edge_in: int = 3
    n_out: int = 3

    def to_dict(self) -> dict:
        return {"latent": self.latent, "blocks": self.blocks,
                "hidden_layers": self.hidden_layers, "n_node_in": self.n_node_in,
                "n_edge_in": self.n_edge_in, "n_out": self.n_out}

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(**d)


@dataclass
class ModelParams:
    hyper: HyperParams
    node_enc: MLP
    edge_enc: MLP
    blocks: list[tuple[MLP, MLP]]       # (edge update, node update) per block
    decoder: MLP

    @classmethod
    def create(cls, hyper: HyperParams, rng: np.random.Generator,
               zero_output: bool = False) -> "ModelParams":
        c = hyper.latent
        hid = [c] * hyper.hidden_layers
        node_enc = MLP.create(rng, [hyper.n_node_in, *hid, c])
        edge_enc = MLP.create(rng, [hyper.n_edge_in, *hid, c])
        blocks = []
        for _ in range(hyper.blocks):
            edge_mlp = MLP.create(rng, [3 * c, *hid, c], zero_last=zero_output)
            node_mlp = MLP.create(rng, [2 * c, *hid, c], zero_last=zero_output)
            blocks.append((edge_mlp, node_mlp))
        decoder = MLP.create(rng, [c, *hid, hyper.n_out], zero_last=zero_output)
        return cls(hyper, node_enc, edge_enc, blocks, decoder)

    def named_arrays(self):
        yield from self.node_enc.named_arrays("node_enc")
        yield from self.edge_enc.named_arrays("edge_enc")
        for i, (em, nm) in enumerate(self.blocks):
            yield from em.named_arrays(f"block{i}.edge")
            yield from nm.named_arrays(f"block{i}.node")
        yield from self.decoder.named_arrays("decoder")

    def parameter_count(self) -> int:
        return sum(a.size for _, a in self.named_arrays())


def _scatter_sum(values: np.ndarray, index: np.ndarray, n: int) -> np.ndarray:
    return kn.scatter_sum(np.ascontiguousarray(values), index, n)


def forward_normalized(batch: GraphBatch, params: ModelParams):
    """Decoder output in normalized increment space, plus the backward cache."""
    n = batch.node_feats.shape[0]
    c = params.hyper.latent
    v, cache_v = params.node_enc.forward(batch.node_feats)
    e, cache_e = params.edge_enc.forward(batch.edge_feats)
    block_caches = []
    for bi, (edge_mlp, node_mlp) in enumerate(params.blocks):
        ein = np.concatenate([e, v[batch.src], v[batch.dst]], axis=1)
        de, ce = edge_mlp.forward(ein)
        e = e + de
        agg = _scatter_sum(e, batch.dst, n)
        nin = np.concatenate([v, agg], axis=1)
        dv, cn = node_mlp.forward(nin)
        v = v + dv
        if not np.all(np.isfinite(v)):
            raise ModelError(f"non-finite latents after block {bi}")
        block_caches.append((ce, cn))
    out, cache_d = params.decoder.forward(v)
    return out, (cache_v, cache_e, block_caches, cache_d)


def backward_normalized(dout: np.ndarray, batch: GraphBatch, params: ModelParams,
                        cache) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar through forward_normalized.

    Returns a flat name -> gradient mapping with one entry per parameter
    array, using the same names as ModelParams.named_arrays().
    """
    cache_v, cache_e, block_caches, cache_d = cache
    n = batch.node_feats.shape[0]
    c = params.hyper.latent
    grads: dict[str, np.ndarray] = {}

    def store(prefix: str, layer_grads):
        for k, (dw, db) in enumerate(layer_grads):
            grads[f"{prefix}.w{k}"] = dw
            grads[f"{prefix}.b{k}"] = db

    dv, g = params.decoder.backward(dout, cache_d)
    store("decoder", g)
    de = np.zeros((batch.src.shape[0], c))
    for bi in range(len(params.blocks) - 1, -1, -1):
        edge_mlp, node_mlp = params.blocks[bi]
        ce, cn = block_caches[bi]
        dnin, g = node_mlp.backward(dv, cn)
        store(f"block{bi}.node", g)
        dv = dv + dnin[:, :c]
        dagg = dnin[:, c:]
        de = de + dagg[batch.dst]
        dein, g = edge_mlp.backward(de, ce)
        store(f"block{bi}.edge", g)
        de = de + dein[:, :c]
        dv = dv + _scatter_sum(dein[:, c:2 * c], batch.src, n)
        dv = dv + _scatter_sum(dein[:, 2 * c:], batch.dst, n)
    _, g = params.edge_enc.backward(de, cache_e)
    store("edge_enc", g)
    _, g = params.node_enc.backward(dv, cache_v)
    store("node_enc", g)
    return grads


def forward_one_step(batch: GraphBatch, params: ModelParams,
                     norms: NormalizerSet) -> np.ndarray:
    """Predicted denormalized increments (dh, du, dv) per node."""
    out, _ = forward_normalized(batch, params)
    return norms.increment.denormalize(out)


def loss_and_gradients(batch: GraphBatch, target_increments_norm: np.ndarray,
                       params: ModelParams) -> tuple[float, dict[str, np.ndarray]]:
    """MSE over normalized increment channels on non-driver nodes, with exact
    reverse-mode gradients for every parameter."""
    out, cache = forward_normalized(batch, params)
    mask = ~batch.driver_mask
    diff = (out - target_increments_norm) * mask[:, None]
    denom = max(int(mask.sum()), 1) * out.shape[1]
    loss = float((diff ** 2).sum() / denom)
    dout = 2.0 * diff / denom
    grads = backward_normalized(dout, batch, params, cache)
    return loss, grads


@dataclass
class RolloutForcing:
    """Known boundary inputs for an autoregressive rollout: the broadcast
    discharge and imposed driver-node values per snapshot."""

    q: np.ndarray          # (S,)
    h: np.ndarray          # (S, N) imposed values, consumed on driver rows only
    u: np.ndarray
    v: np.ndarray

    @classmethod
    def from_sequence(cls, seq) -> "RolloutForcing":
        return cls(q=seq.q.copy(), h=seq.h.copy(), u=seq.u.copy(), v=seq.v.copy())

    def driver_at(self, k: int) -> DriverValues:
        return DriverValues(h=self.h[k], u=self.u[k], v=self.v[k], q=float(self.q[k]))


def rollout(initial_h, initial_u, initial_v, forcing: RolloutForcing, steps: int,
            params: ModelParams, statics: MeshStatics, graph: SurrogateGraph,
            schema: FeatureSchema, norms: NormalizerSet
            ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Autoregressive rollout; returns (steps+1, N) arrays including the
    initial state.  Predicted depths are clamped at zero before reinjection."""
    n = initial_h.shape[0]
    hh = np.empty((steps + 1, n))
    uu = np.empty_like(hh)
    vv = np.empty_like(hh)
    hh[0], uu[0], vv[0] = initial_h, initial_u, initial_v
    for k in range(steps):
        batch = assemble_features(hh[k], uu[k], vv[k], statics, float(forcing.q[k]),
                                  schema, norms, graph)
        inc = forward_one_step(batch, params, norms)
        if not np.all(np.isfinite(inc)):
            raise ModelError(f"non-finite prediction at rollout step {k + 1}")
        h = np.maximum(hh[k] + inc[:, 0], 0.0)
        u = uu[k] + inc[:, 1]
        v = vv[k] + inc[:, 2]
        hh[k + 1], uu[k + 1], vv[k + 1] = inject_boundaries(
            h, u, v, statics, forcing.driver_at(k + 1))
    return hh, uu, vv


# ---------------------------------------------------------------------------
# FGP checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, norms: NormalizerSet,
                    schema: FeatureSchema, path, config_hash: str = "") -> None:
    names = [name for name, _ in params.named_arrays()]
    shapes = {name: list(arr.shape) for name, arr in params.named_arrays()}
    meta = {
        "kind": "model_checkpoint",
        "hyper": params.hyper.to_dict(),
        "schema": {"use_discharge": schema.use_discharge,
                   "use_origin_flag": schema.use_origin_flag,
                   "version": schema.version},
        "normalizers": {
            key: {"mean": norm.mean, "std": norm.std,
                  "passthrough": norm.passthrough.astype(int)}
            for key, norm in (("node", norms.node), ("edge", norms.edge),
                              ("increment", norms.increment))
        },
        "arrays": names,
        "shapes": shapes,
        "config_hash": config_hash,
    }
    arr_by_name = dict(params.named_arrays())
    with open(path, "wb") as fh:
        fgio.write_header(fh, fgio.FGP_MAGIC, meta)
        for name in names:
            fgio.write_array(fh, arr_by_name[name].astype("<f8"))


def load_checkpoint(path) -> tuple[ModelParams, NormalizerSet, FeatureSchema, str]:
    with open(path, "rb") as fh:
        meta = fgio.read_header(fh, fgio.FGP_MAGIC)
        if meta.get("kind") != "model_checkpoint":
            raise fgio.FormatError(f"not a model checkpoint: {path}")
        hyper = HyperParams.from_dict(meta["hyper"])
        params = ModelParams.create(hyper, np.random.default_rng(0))
        arr_by_name = dict(params.named_arrays())
        for name in meta["arrays"]:
            shape = tuple(meta["shapes"][name])
            arr_by_name[name][...] = fgio.read_array(fh, "f8", shape)
    sd = meta["schema"]
    schema = FeatureSchema(use_discharge=sd["use_discharge"],
                           use_origin_flag=sd["use_origin_flag"],
                           version=sd["version"])
    nd = meta["normalizers"]

    def mk(key):
        d = nd[key]
        return Normalizer.from_moments(d["mean"], d["std"],
                                       np.asarray(d["passthrough"], dtype=bool))

    norms = NormalizerSet(node=mk("node"), edge=mk("edge"), increment=mk("increment"))
    return params, norms, schema, meta.get("config_hash", "")
