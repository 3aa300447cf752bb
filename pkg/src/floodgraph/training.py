"""Training orchestration: event-level splits, the Adam optimizer, the
pushforward schedule, and the six-configuration ablation matrix.

Each optimizer step trains on one transition between consecutive snapshots.
During the pushforward phase the input state is, with probability 1 - p_tf,
the model's own prediction from the previous snapshot (boundary-injected,
depth-clamped, and detached so no gradient flows through it).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels as kn
from . import io as fgio
from .features import (DriverValues, FeatureSchema, MeshStatics, NormalizerSet,
                       SurrogateGraph, assemble_features, fit_normalizers,
                       inject_boundaries)
from .hydrograph import HydrographCatalogue
from .model import (HyperParams, ModelParams, forward_one_step,
                    loss_and_gradients, save_checkpoint)
from .multimesh import MultimeshGraph
from .solver import StateSequence


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Event splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EventSplit:
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


def split_events(catalogue: HydrographCatalogue, train_fraction: float,
                 seed: int) -> EventSplit:
    """Deterministic event-level partition, stratified so every hydrograph
    family lands in both splits.  Per-family train counts round to nearest
    with ties rounding up."""
    if not 0.0 < train_fraction < 1.0:
        raise TrainingError(f"train_fraction must be in (0, 1), got {train_fraction}")
    by_family: dict[int, list[int]] = {}
    for i, ev in enumerate(catalogue.events):
        by_family.setdefault(int(ev.family_id), []).append(i)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for fam in sorted(by_family):
        ids = np.asarray(by_family[fam])
        rng.shuffle(ids)
        n = ids.size
        n_train = int(np.floor(train_fraction * n + 0.5))
        n_train = min(max(n_train, 1), n - 1) if n > 1 else n_train
        train.extend(int(i) for i in ids[:n_train])
        test.extend(int(i) for i in ids[n_train:])
    return EventSplit(train_ids=tuple(sorted(train)), test_ids=tuple(sorted(test)))


# ---------------------------------------------------------------------------
# Schedules and experiment matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSchedule:
    total_epochs: int = 900
    pf_epochs: int = 300
    pf_warmup: int = 150
    lr0: float = 5.0e-4
    decay: float = 0.999995    # exponential, applied per optimizer step
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.pf_epochs <= self.total_epochs:
            raise TrainingError("pf_epochs must lie in [0, total_epochs]")
        if not 0 < self.pf_warmup <= max(self.pf_epochs, 1):
            raise TrainingError("pf_warmup must lie in (0, pf_epochs]")
        if self.lr0 <= 0 or not 0 < self.decay <= 1:
            raise TrainingError("need lr0 > 0 and decay in (0, 1]")

    def lr_at(self, step: int) -> float:
        return self.lr0 * self.decay ** step


def pushforward_probability(epoch: int, schedule: TrainSchedule) -> float:
    """Teacher-forcing probability: 1 before the pushforward phase, linear to
    0 across the warmup, 0 afterwards."""
    if not 0 <= epoch < schedule.total_epochs:
        raise TrainingError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    pf_start = schedule.total_epochs - schedule.pf_epochs
    if epoch < pf_start:
        return 1.0
    frac = (epoch - pf_start) / schedule.pf_warmup
    return max(0.0, 1.0 - frac)


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    connectivity: str          # "standard" or "multimesh"
    use_q: bool
    use_pushforward: bool

    def __post_init__(self):
        if self.connectivity not in ("standard", "multimesh"):
            raise TrainingError(f"unknown connectivity {self.connectivity!r}")

    def schema(self) -> FeatureSchema:
        return FeatureSchema(use_discharge=self.use_q,
                             use_origin_flag=self.connectivity == "multimesh")

    def to_dict(self) -> dict:
        return {"name": self.name, "connectivity": self.connectivity,
                "use_q": self.use_q, "use_pushforward": self.use_pushforward}


EXPERIMENTS: dict[str, ExperimentConfig] = {
    "E1": ExperimentConfig("E1", "standard", False, False),
    "E2": ExperimentConfig("E2", "standard", True, False),
    "E3": ExperimentConfig("E3", "standard", True, True),
    "E4": ExperimentConfig("E4", "multimesh", False, False),
    "E5": ExperimentConfig("E5", "multimesh", True, False),
    "E6": ExperimentConfig("E6", "multimesh", True, True),
}


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0              # completed steps


def adam_update(params: ModelParams, grads: dict[str, np.ndarray],
                opt: AdamState, schedule: TrainSchedule,
                beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1.0e-8) -> None:
    """In-place bias-corrected Adam step with per-step exponential lr decay."""
    lr = schedule.lr_at(opt.step)
    t = opt.step + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, arr in params.named_arrays():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name}")
        if name not in opt.m:
            opt.m[name] = np.zeros_like(arr)
            opt.v[name] = np.zeros_like(arr)
        kn.adam_apply(arr, g, opt.m[name], opt.v[name],
                      lr, beta1, beta2, c1, c2, eps)
    opt.step = t


# ---------------------------------------------------------------------------
# Pushforward step
# ---------------------------------------------------------------------------

@dataclass
class StepContext:
    """Everything fixed across optimizer steps of one experiment."""

    statics: MeshStatics
    graph: SurrogateGraph
    schema: FeatureSchema
    norms: NormalizerSet


def _driver_at(seq: StateSequence, k: int) -> DriverValues:
    return DriverValues(h=seq.h[k], u=seq.u[k], v=seq.v[k], q=float(seq.q[k]))


def pushforward_step(seq: StateSequence, k: int, p_tf: float,
                     rng: np.random.Generator, params: ModelParams,
                     ctx: StepContext) -> tuple[float, dict[str, np.ndarray]]:
    """One-transition loss and gradients for the step k -> k+1 of `seq`.

    Draws one uniform: below p_tf (or when k = 0) the input is the recorded
    state at k; otherwise it is the model's own prediction from k-1, with
    driver values injected, depth clamped, and no gradient attached.
    """
    use_truth = rng.random() < p_tf or k == 0
    if use_truth:
        h_in, u_in, v_in = seq.h[k], seq.u[k], seq.v[k]
    else:
        prev = assemble_features(seq.h[k - 1], seq.u[k - 1], seq.v[k - 1],
                                 ctx.statics, float(seq.q[k - 1]), ctx.schema,
                                 ctx.norms, ctx.graph)
        inc = forward_one_step(prev, params, ctx.norms)
        h_in = np.maximum(seq.h[k - 1] + inc[:, 0], 0.0)
        u_in = seq.u[k - 1] + inc[:, 1]
        v_in = seq.v[k - 1] + inc[:, 2]
        h_in, u_in, v_in = inject_boundaries(h_in, u_in, v_in, ctx.statics,
                                             _driver_at(seq, k))
    batch = assemble_features(h_in, u_in, v_in, ctx.statics, float(seq.q[k]),
                              ctx.schema, ctx.norms, ctx.graph)
    raw_target = np.stack([seq.h[k + 1] - h_in, seq.u[k + 1] - u_in,
                           seq.v[k + 1] - v_in], axis=1)
    target = ctx.norms.increment.normalize(raw_target)
    return loss_and_gradients(batch, target, params)


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

@dataclass
class TrainingData:
    """Label sequences on the training mesh, with its statics and graph."""

    sequences: list[StateSequence]
    split: EventSplit
    statics: MeshStatics
    graph: MultimeshGraph


def run_experiment(config: ExperimentConfig, schedule: TrainSchedule,
                   data: TrainingData, out_dir,
                   hyper: HyperParams | None = None,
                   config_hash: str = "") -> Path:
    """Train one configuration to completion; returns the checkpoint path.

    Writes <name>.fgp (final parameters + normalizers), <name>.log.csv
    (per-epoch rows: epoch, step, lr, p_tf, loss) and <name>.config.json.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    schema = config.schema()
    train_seqs = [data.sequences[i] for i in data.split.train_ids]
    if not train_seqs:
        raise TrainingError("empty training split")
    norms = fit_normalizers(train_seqs, data.statics, data.graph, schema)
    node_count = data.statics.z.shape[0]
    sgraph = SurrogateGraph.build(data.graph, schema, norms, node_count)
    ctx = StepContext(statics=data.statics, graph=sgraph, schema=schema,
                      norms=norms)

    if hyper is None:
        hyper = HyperParams()
    hyper = HyperParams(**{**hyper.to_dict(),
                           "n_node_in": schema.n_node_channels,
                           "n_edge_in": schema.n_edge_channels})
    rng = np.random.default_rng(schedule.seed)
    params = ModelParams.create(hyper, rng)
    opt = AdamState()

    pairs = [(si, k) for si, seq in enumerate(train_seqs)
             for k in range(seq.snapshot_count - 1)]
    if not pairs:
        raise TrainingError("training sequences have no transitions")

    log_path = out_dir / f"{config.name}.log.csv"
    ckpt_path = out_dir / f"{config.name}.fgp"
    with open(log_path, "w", newline="") as fh:
        fh.write("# lr decay 0.999995 applied per optimizer step "
                 "(not per epoch)\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "lr", "p_tf", "loss"])
        for epoch in range(schedule.total_epochs):
            p_tf = pushforward_probability(epoch, schedule) \
                if config.use_pushforward else 1.0
            order = rng.permutation(len(pairs))
            losses = []
            for idx in order:
                si, k = pairs[idx]
                loss, grads = pushforward_step(train_seqs[si], k, p_tf, rng,
                                               params, ctx)
                adam_update(params, grads, opt, schedule)
                losses.append(loss)
            writer.writerow([epoch, opt.step, f"{schedule.lr_at(opt.step):.10g}",
                             f"{p_tf:.10g}", f"{float(np.mean(losses)):.10g}"])

    save_checkpoint(params, norms, schema, ckpt_path, config_hash=config_hash)
    sidecar = {"experiment": config.to_dict(),
               "schedule": {"total_epochs": schedule.total_epochs,
                            "pf_epochs": schedule.pf_epochs,
                            "pf_warmup": schedule.pf_warmup,
                            "lr0": schedule.lr0, "decay": schedule.decay,
                            "seed": schedule.seed},
               "hyper": hyper.to_dict(),
               "train_ids": list(data.split.train_ids),
               "test_ids": list(data.split.test_ids)}
    (out_dir / f"{config.name}.config.json").write_text(
        fgio.dumps_json(sidecar) + "\n")
    return ckpt_path
