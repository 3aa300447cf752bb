"""Command-line entry point orchestrating the full pipeline.

Commands: synth, simulate, project, multimesh, train, rollout, evaluate,
stats, render.  Every command is idempotent for a fixed config and seed:
existing artifacts are reused unless --force is given, and re-running
produces byte-identical files.

Exit codes: 0 success, 1 invalid config or arguments, 2 runtime numerical
failure.
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import hydrograph as hg
from . import mesh as ms
from . import multimesh as mm
from . import projection as pj
from . import solver as sv
from . import training as tr
from .config import (ConfigError, PipelineConfig, apply_overrides, load_config,
                     save_config)
from .features import FeatureError, MeshStatics
from .io import FormatError
from .model import ModelError, load_checkpoint

_USER_ERRORS = (ConfigError, FormatError, ms.MeshError, hg.HydrographError,
                ev.EvaluationError, pj.ProjectionError, FeatureError,
                FileNotFoundError)
_RUNTIME_ERRORS = (sv.SolverError, ModelError, tr.TrainingError,
                   FloatingPointError)

ALL_FACTORS = (1, 2, 4, 8, 16, 32)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


# ---------------------------------------------------------------------------
# Artifact layout
# ---------------------------------------------------------------------------

class Paths:
    def __init__(self, config: PipelineConfig):
        self.root = Path(config.out_dir)

    def mesh(self, factor: int) -> Path:
        return self.root / "meshes" / f"factor{factor}.fgm"

    @property
    def catalogue(self) -> Path:
        return self.root / "catalogue.fgh"

    def sequence(self, factor: int, event: int) -> Path:
        sub = "fine" if factor == 1 else f"f{factor}"
        return self.root / "sequences" / sub / f"ev{event:03d}.fgb"

    def graph(self, factor: int) -> Path:
        return self.root / "graphs" / f"f{factor}.fgg"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def rollout(self, experiment: str, event: int) -> Path:
        return self.root / "rollouts" / f"{experiment}_ev{event:03d}.fgb"


def _load_mesh(paths: Paths, factor: int) -> ms.TriMesh:
    path = paths.mesh(factor)
    if not path.exists():
        raise ConfigError(f"missing mesh {path}; run `synth` first")
    return ms.load_mesh(path)


def _load_catalogue(paths: Paths) -> hg.HydrographCatalogue:
    if not paths.catalogue.exists():
        raise ConfigError(f"missing catalogue {paths.catalogue}; run `synth` first")
    return hg.load_catalogue(paths.catalogue)


def select_events(catalogue: hg.HydrographCatalogue, selector: str) -> list[int]:
    """'all', a comma list of indices, or comma-joined filters
    ``family=<id>`` / ``peak=<value>``."""
    if selector == "all":
        return list(range(len(catalogue.events)))
    parts = [p.strip() for p in selector.split(",") if p.strip()]
    if all(p.lstrip("-").isdigit() for p in parts):
        ids = [int(p) for p in parts]
        for i in ids:
            if not 0 <= i < len(catalogue.events):
                raise ConfigError(f"event index {i} out of range "
                                  f"(0..{len(catalogue.events) - 1})")
        return ids
    family = peak = None
    for p in parts:
        if p.startswith("family="):
            family = int(p.split("=", 1)[1])
        elif p.startswith("peak="):
            peak = float(p.split("=", 1)[1])
        else:
            raise ConfigError(f"bad event selector term {p!r}")
    out = []
    for i, e in enumerate(catalogue.events):
        if family is not None and e.family_id != family:
            continue
        if peak is not None and abs(e.peak_target - peak) > 1e-9:
            continue
        out.append(i)
    if not out:
        raise ConfigError(f"selector {selector!r} matches no events")
    return out


def _base_graph(mesh: ms.TriMesh) -> mm.MultimeshGraph:
    return mm.build_multimesh(mesh, [])


def _graph_for(config: PipelineConfig, paths: Paths, mesh: ms.TriMesh,
               connectivity: str) -> mm.MultimeshGraph:
    if connectivity == "standard":
        return _base_graph(mesh)
    path = paths.graph(config.training_factor)
    if not path.exists():
        raise ConfigError(f"missing graph {path}; run `multimesh` first")
    graph = mm.load_graph(path)
    if graph.node_hash != mesh.content_hash():
        raise ConfigError(f"graph {path} was built for a different mesh")
    return graph


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    paths.mesh(1).parent.mkdir(parents=True, exist_ok=True)
    family = pj.build_mesh_family(config.density, config.domain, config.seed,
                                  shape=config.valley)
    for factor in ALL_FACTORS:
        target = paths.mesh(factor)
        if target.exists() and not args.force:
            continue
        ms.save_mesh(family.mesh_at(factor), target)
    if not paths.catalogue.exists() or args.force:
        cat_spec = config.catalogue
        historical = hg.synthetic_historical_hydrographs(
            n=cat_spec.n_historical, seed=config.seed, dt=cat_spec.dt,
            duration_hours=cat_spec.duration_hours)
        fam_ids = hg.cluster_families(historical, k=cat_spec.families)
        reps = []
        for fam in range(cat_spec.families):
            group = [h for h, f in zip(historical, fam_ids) if f == fam]
            rep = hg.representative_hydrograph(group)
            rep.family_id = fam
            reps.append(rep)
        catalogue = hg.build_catalogue(reps, peak_min=cat_spec.peak_min,
                                       peak_max=cat_spec.peak_max,
                                       intervals=cat_spec.intervals,
                                       base=cat_spec.base_discharge)
        if cat_spec.event_hours is not None:
            catalogue = hg.HydrographCatalogue(
                families=catalogue.families, peaks=catalogue.peaks,
                events=[hg.crop_to_horizon(e, cat_spec.event_hours)
                        for e in catalogue.events])
        hg.save_catalogue(catalogue, paths.catalogue)
    save_config(config, paths.root / "config.json")
    print(f"synth: {len(ALL_FACTORS)} meshes + catalogue in {paths.root}")
    return 0


def _simulate_chunk(config_doc: dict, event_ids: list[int]) -> None:
    config = PipelineConfig.from_dict(config_doc)
    paths = Paths(config)
    mesh = _load_mesh(paths, 1)
    catalogue = _load_catalogue(paths)
    geom = sv.prepare_geometry(mesh)
    init = sv.initialize_domain(geom, config.solver)
    for i in event_ids:
        seq = sv.run_event(geom, init, catalogue.events[i], config.solver)
        seq.meta["event_index"] = i
        sv.save_sequence(seq, paths.sequence(1, i))


def cmd_simulate(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    catalogue = _load_catalogue(paths)
    ids = select_events(catalogue, args.events)
    todo = [i for i in ids
            if args.force or not paths.sequence(1, i).exists()]
    paths.sequence(1, 0).parent.mkdir(parents=True, exist_ok=True)
    if todo:
        jobs = max(1, args.jobs)
        if jobs == 1:
            _simulate_chunk(config.to_dict(), todo)
        else:
            chunks = [todo[k::jobs] for k in range(jobs) if todo[k::jobs]]
            with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
                futures = [pool.submit(_simulate_chunk, config.to_dict(), c)
                           for c in chunks]
                for f in futures:
                    f.result()
    print(f"simulate: {len(todo)} new, {len(ids) - len(todo)} existing")
    return 0


def cmd_project(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    factor = config.training_factor
    fine = _load_mesh(paths, 1)
    coarse = _load_mesh(paths, factor)
    pmap = pj.build_projection_map(fine, coarse)
    catalogue = _load_catalogue(paths)
    ids = select_events(catalogue, args.events)
    paths.sequence(factor, 0).parent.mkdir(parents=True, exist_ok=True)
    done = 0
    for i in ids:
        src = paths.sequence(1, i)
        dst = paths.sequence(factor, i)
        if not src.exists():
            raise ConfigError(f"missing fine sequence {src}; run `simulate` first")
        if dst.exists() and not args.force:
            continue
        seq = sv.load_sequence(src)
        sv.save_sequence(pj.project_states(seq, pmap, factor=factor), dst)
        done += 1
    print(f"project: {done} sequences at factor {factor}")
    return 0


def cmd_multimesh(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    factor = config.training_factor
    base = _load_mesh(paths, factor)
    coarser = [_load_mesh(paths, f) for f in ALL_FACTORS if f > factor]
    graph = mm.build_multimesh(base, coarser)
    out = paths.graph(factor)
    out.parent.mkdir(parents=True, exist_ok=True)
    if not out.exists() or args.force:
        mm.save_graph(graph, out)
    report = mm.multimesh_report(graph, base.node_count)
    print(f"multimesh: {graph.merged.count} directed edges "
          f"({report.shortcut_count} shortcut pairs), "
          f"mean edge {report.base_stats.mean_edge_length:.1f} -> "
          f"{report.merged_stats.mean_edge_length:.1f} m, "
          f"max r10 {report.base_stats.r10_max:.0f} -> "
          f"{report.merged_stats.r10_max:.0f} m")
    return 0


def _training_data(config: PipelineConfig, paths: Paths,
                   connectivity: str) -> tr.TrainingData:
    factor = config.training_factor
    mesh = _load_mesh(paths, factor)
    catalogue = _load_catalogue(paths)
    split = tr.split_events(catalogue, config.train_fraction, config.seed)
    sequences = []
    for i in range(len(catalogue.events)):
        path = paths.sequence(factor, i)
        if not path.exists():
            raise ConfigError(f"missing projected sequence {path}; "
                              "run `project` first")
        sequences.append(sv.load_sequence(path))
    return tr.TrainingData(sequences=sequences, split=split,
                           statics=MeshStatics.from_mesh(mesh),
                           graph=_graph_for(config, paths, mesh, connectivity))


def cmd_train(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    names = [args.experiment] if args.experiment else list(config.experiments)
    data_by_conn: dict[str, tr.TrainingData] = {}
    for name in names:
        exp = tr.EXPERIMENTS[name]
        ckpt = paths.models / f"{name}.fgp"
        if ckpt.exists() and not args.force:
            print(f"train: {name} exists, skipped")
            continue
        if exp.connectivity not in data_by_conn:
            data_by_conn[exp.connectivity] = _training_data(config, paths,
                                                            exp.connectivity)
        tr.run_experiment(exp, config.schedule, data_by_conn[exp.connectivity],
                          paths.models, hyper=config.hyper,
                          config_hash=config.content_hash())
        print(f"train: {name} done")
    return 0


def _eval_context(config: PipelineConfig, paths: Paths,
                  connectivity: str) -> ev.EvalContext:
    fine = _load_mesh(paths, 1)
    coarse = _load_mesh(paths, config.training_factor)
    grid = ev.build_grid(fine, config.grid_spacing)
    return ev.EvalContext(grid=grid,
                          fine_sampler=ev.build_sampler(fine, grid),
                          coarse_sampler=ev.build_sampler(coarse, grid),
                          statics=MeshStatics.from_mesh(coarse),
                          graph=_graph_for(config, paths, coarse, connectivity))


def cmd_rollout(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    name = args.experiment
    ckpt = paths.models / f"{name}.fgp"
    if not ckpt.exists():
        raise ConfigError(f"missing checkpoint {ckpt}; run `train` first")
    params, norms, schema, _ = load_checkpoint(ckpt)
    exp = tr.EXPERIMENTS[name]
    ctx = _eval_context(config, paths, exp.connectivity)
    catalogue = _load_catalogue(paths)
    ids = select_events(catalogue, args.events)
    paths.rollout(name, 0).parent.mkdir(parents=True, exist_ok=True)
    for i in ids:
        seq = sv.load_sequence(paths.sequence(config.training_factor, i))
        pred = ev.rollout_event(params, norms, schema, ctx, seq)
        out = sv.StateSequence(mesh_hash=seq.mesh_hash, stride=seq.stride,
                               times=seq.times.copy(), h=pred[:, :, 0],
                               u=pred[:, :, 1], v=pred[:, :, 2],
                               q=seq.q.copy(), zs=seq.zs.copy(),
                               meta={**seq.meta, "surrogate": name})
        sv.save_sequence(out, paths.rollout(name, i))
    print(f"rollout: {name} on {len(ids)} events")
    return 0


def cmd_evaluate(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    names = [args.experiment] if args.experiment else list(config.experiments)
    thresholds = tuple(float(t) for t in args.thresholds.split(",")) \
        if args.thresholds else config.thresholds
    catalogue = _load_catalogue(paths)
    split = tr.split_events(catalogue, config.train_fraction, config.seed)
    paths.reports.mkdir(parents=True, exist_ok=True)
    ctx_by_conn: dict[str, ev.EvalContext] = {}
    for name in names:
        ckpt = paths.models / f"{name}.fgp"
        if not ckpt.exists():
            raise ConfigError(f"missing checkpoint {ckpt}; run `train` first")
        exp = tr.EXPERIMENTS[name]
        if exp.connectivity not in ctx_by_conn:
            ctx_by_conn[exp.connectivity] = _eval_context(config, paths,
                                                          exp.connectivity)
        coarse_seqs = [sv.load_sequence(paths.sequence(config.training_factor, i))
                       for i in split.test_ids]
        fine_seqs = [sv.load_sequence(paths.sequence(1, i))
                     for i in split.test_ids]
        map_dir = paths.reports / "maps" if args.maps else None
        report = ev.evaluate_experiment(ckpt, coarse_seqs, fine_seqs,
                                        ctx_by_conn[exp.connectivity],
                                        thresholds=thresholds, map_dir=map_dir,
                                        experiment=name)
        ev.write_report_csv(report, name, paths.reports / f"{name}.csv")
        final = {var: report.l1_mean[var][-1] for var in ("h", "u", "v")}
        print(f"evaluate: {name} final L1 h={final['h']:.4g} "
              f"u={final['u']:.4g} v={final['v']:.4g} over "
              f"{report.n_events} events")
    return 0


def cmd_stats(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    if not args.graph:
        raise ConfigError("stats: pass --graph for graph statistics")
    factor = config.training_factor
    mesh = _load_mesh(paths, factor)
    base = _base_graph(mesh)
    rows = [("graph", "nodes", "directed_edges", "mean_edge_m",
             "r10_median_m", "r10_mean_m", "r10_max_m")]

    def add(tag, graph):
        rep = mm.multimesh_report(graph, mesh.node_count)
        st = rep.merged_stats
        rows.append((tag, mesh.node_count, graph.merged.count,
                     round(st.mean_edge_length, 1), round(st.r10_median, 1),
                     round(st.r10_mean, 1), round(st.r10_max, 1)))

    add("base", base)
    graph_path = paths.graph(factor)
    if graph_path.exists():
        add("multimesh", mm.load_graph(graph_path))
    paths.reports.mkdir(parents=True, exist_ok=True)
    out = paths.reports / "graph_stats.csv"
    out.write_text("\n".join(",".join(str(v) for v in r) for r in rows) + "\n")
    for r in rows:
        print("  ".join(f"{v}" for v in r))
    return 0


def cmd_render(args, config: PipelineConfig) -> int:
    paths = Paths(config)
    seq = sv.load_sequence(Path(args.input))
    factor = None
    for f in ALL_FACTORS:
        path = paths.mesh(f)
        if path.exists() and ms.load_mesh(path).content_hash() == seq.mesh_hash:
            factor = f
            break
    if factor is None:
        raise ConfigError(f"no mesh in {paths.root} matches sequence "
                          f"{args.input}")
    mesh = _load_mesh(paths, factor)
    fine = _load_mesh(paths, 1)
    grid = ev.build_grid(fine, config.grid_spacing)
    sampler = ev.build_sampler(mesh, grid)
    k = args.snapshot if args.snapshot >= 0 else seq.snapshot_count + args.snapshot
    if not 0 <= k < seq.snapshot_count:
        raise ConfigError(f"snapshot {args.snapshot} out of range "
                          f"(sequence has {seq.snapshot_count})")
    depths = ev.grid_depth(seq.h[k], sampler)
    if args.threshold is not None:
        ev.render_map(grid, depths > args.threshold, args.output)
    else:
        ev.render_map(grid, depths, args.output)
    print(f"render: snapshot {k} -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="floodgraph",
                     description="Graph-surrogate flood forecasting pipeline")
    parser.add_argument("--config", help="pipeline config JSON")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument("--out", help="override config output directory")
    parser.add_argument("--jobs", type=int, default=1,
                        help="event-level parallelism where supported")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                        help="override a config entry (dotted keys)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--force", action="store_true",
                       help="rebuild artifacts that already exist")
        return p

    add("synth", cmd_synth, "generate the mesh family and event catalogue")
    p = add("simulate", cmd_simulate, "run reference simulations")
    p.add_argument("--events", default="all")
    p = add("project", cmd_project, "project fine sequences onto the training mesh")
    p.add_argument("--events", default="all")
    add("multimesh", cmd_multimesh, "build the shortcut-augmented graph")
    p = add("train", cmd_train, "train surrogate configurations")
    p.add_argument("--experiment", choices=sorted(tr.EXPERIMENTS))
    p = add("rollout", cmd_rollout, "save surrogate rollouts as sequences")
    p.add_argument("--experiment", required=True, choices=sorted(tr.EXPERIMENTS))
    p.add_argument("--events", default="all")
    p = add("evaluate", cmd_evaluate, "score held-out events (L1 + CSI)")
    p.add_argument("--experiment", choices=sorted(tr.EXPERIMENTS))
    p.add_argument("--thresholds", help="comma list of depth thresholds (m)")
    p.add_argument("--maps", action="store_true", help="export inundation maps")
    p = add("stats", cmd_stats, "report dataset/graph statistics")
    p.add_argument("--graph", action="store_true")
    p = add("render", cmd_render, "render a sequence snapshot as a pixmap")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--snapshot", type=int, default=-1)
    p.add_argument("--threshold", type=float,
                   help="binarize at this depth instead of a grayscale ramp")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        config = load_config(args.config) if args.config else PipelineConfig()
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out is not None:
            overrides.append(f'out_dir="{args.out}"')
        config = apply_overrides(config, overrides)
        return args.func(args, config)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
