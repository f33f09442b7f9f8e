"""Command-line surface: world/video generation, dataset building, training,
evaluation, the ablation ladder, and report rendering."""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import agent as ag
from . import datagen as dg
from . import distnet, evaluation, targetnet
from . import simworld as sw
from . import topomap as tm
from .config import FullConfig, apply_overrides, load_config, render_config

# fixed rng stream ids so every stage derives from the one master seed
_STREAM_WORLDS = 1000
_STREAM_VIDEOS = 2000
_STREAM_DATASET = 3000
_STREAM_EVAL = 7000


def _echo(cfg: FullConfig, out=None):
    out = out if out is not None else sys.stdout
    out.write(f"# master seed = {cfg.master.seed}\n")
    out.write(render_config(cfg))
    out.flush()


def _load_cfg(args) -> FullConfig:
    cfg = load_config(args.config) if args.config else FullConfig()
    return apply_overrides(cfg, args.set or [])


def _require(path: Path, kind: str):
    if not path.exists():
        raise FileNotFoundError(f"missing {kind}: {path}")
    return path


def world_paths(worlds_dir: Path, cfg: FullConfig):
    total = cfg.pipeline.train_worlds + cfg.pipeline.eval_worlds
    return [worlds_dir / f"world_{i:03d}.bin" for i in range(total)]


def load_worlds(worlds_dir: Path, cfg: FullConfig):
    paths = world_paths(worlds_dir, cfg)
    worlds = []
    for p in paths:
        _require(p, "world file")
        worlds.append(sw.load_world(p))
    train = worlds[:cfg.pipeline.train_worlds]
    held_out = worlds[cfg.pipeline.train_worlds:]
    return train, held_out


def cmd_gen_worlds(cfg: FullConfig, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    total = cfg.pipeline.train_worlds + cfg.pipeline.eval_worlds
    for i in range(total):
        world = sw.generate_world(int(np.random.default_rng((cfg.master.seed, _STREAM_WORLDS, i)).integers(1 << 31)), cfg.world)
        sw.save_world(world, out_dir / f"world_{i:03d}.bin")
    return total


def cmd_gen_videos(cfg: FullConfig, worlds_dir: Path, out_dir: Path):
    train, _ = load_worlds(worlds_dir, cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = 0
    for w_idx, world in enumerate(train):
        for v in range(cfg.pipeline.videos_per_world):
            rng = np.random.default_rng((cfg.master.seed, _STREAM_VIDEOS, w_idx, v))
            video = dg.generate_video(world, cfg.noise, rng, cfg.datagen,
                                      world_id=w_idx, seed=cfg.master.seed, sensor=cfg.sensor)
            graph = dg.video_to_topograph(video, cfg.datagen)
            tm.save_graph(graph, cfg.descriptor_dim(), out_dir / f"graph_{w_idx:03d}_{v:03d}.bin")
            count += 1
    return count


def cmd_build_dataset(cfg: FullConfig, worlds_dir: Path, out_file: Path):
    train, _ = load_worlds(worlds_dir, cfg)
    ds = dg.build_dataset(
        train, cfg.pipeline.videos_per_world, cfg.noise,
        master_seed=cfg.master.seed,
        distance_per_world=cfg.pipeline.distance_per_world,
        pairs_per_world=cfg.pipeline.pairs_per_world,
        cfg=cfg.datagen, sensor=cfg.sensor,
    )
    out_file.parent.mkdir(parents=True, exist_ok=True)
    dg.save_dataset(ds, out_file)
    return ds


def _write_curve(path: Path, values):
    with open(path, "w") as fh:
        for epoch, loss in enumerate(values):
            fh.write(f"{epoch}\t{loss:.8f}\n")


def _split_holdout(items, fraction=0.1):
    n_val = max(1, int(len(items) * fraction)) if len(items) > 1 else 0
    return (items[:-n_val], items[-n_val:]) if n_val else (items, [])


def cmd_train_distance(cfg: FullConfig, dataset_file: Path, out_model: Path, curve_file: Path | None):
    ds = dg.load_dataset(_require(dataset_file, "dataset"))
    if not ds.distance_instances:
        raise ValueError(f"dataset {dataset_file} has no distance instances")
    model_cfg = distnet.DistanceModelConfig(
        descriptor_dim=ds.descriptor_dim,
        hidden_dim=cfg.distance_model.hidden_dim,
        edge_dim=cfg.distance_model.edge_dim,
        attention_dropout=cfg.distance_model.attention_dropout,
        d_max=cfg.distance_model.d_max,
    )
    model = distnet.DistanceModel(model_cfg, np.random.default_rng((cfg.master.seed, 41)))
    train, val = _split_holdout(ds.distance_instances)
    train_cfg = distnet.TrainConfig(epochs=cfg.distance_train.epochs,
                                    lr=cfg.distance_train.lr, seed=cfg.master.seed)
    result = distnet.train_distance(model, train, val, train_cfg)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_model)
    if curve_file is not None:
        _write_curve(curve_file, result.train_losses)
        if result.val_losses:
            _write_curve(curve_file.with_suffix(curve_file.suffix + ".val"), result.val_losses)
    return model, result, val


def cmd_train_target(cfg: FullConfig, dataset_file: Path, out_model: Path, curve_file: Path | None):
    ds = dg.load_dataset(_require(dataset_file, "dataset"))
    if not ds.target_pairs:
        raise ValueError(f"dataset {dataset_file} has no target pairs")
    model_cfg = targetnet.TargetModelConfig(descriptor_dim=ds.descriptor_dim,
                                            trunk_dropout=cfg.target_model.trunk_dropout)
    model = targetnet.TargetModel(model_cfg, np.random.default_rng((cfg.master.seed, 42)))
    train, val = _split_holdout(ds.target_pairs)
    train_cfg = targetnet.TargetTrainConfig(epochs=cfg.target_train.epochs, lr=cfg.target_train.lr,
                                            batch_size=cfg.target_train.batch_size,
                                            seed=cfg.master.seed)
    result = targetnet.train_target(model, train, val, train_cfg)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    model.save(out_model)
    if curve_file is not None:
        _write_curve(curve_file, result.train_losses)
        if result.val_losses:
            _write_curve(curve_file.with_suffix(curve_file.suffix + ".val"), result.val_losses)
    return model, result, val


def generate_eval_episodes(cfg: FullConfig, held_out_worlds):
    """Per-cell stratified episode specs over every held-out world."""
    specs = []
    warned = False
    for w_idx, world in enumerate(held_out_worlds):
        rng = np.random.default_rng((cfg.master.seed, _STREAM_EVAL, w_idx))
        got, warn = evaluation.generate_episodes(world, cfg.pipeline.episodes_per_cell,
                                                 rng, world_id=w_idx)
        specs.extend(got)
        warned |= warn
    return specs, warned


def _load_models(cfg: FullConfig, agent_cfg, distance_model: Path | None, target_model: Path | None):
    dist = target = None
    if agent_cfg.gd_mode == ag.LEARNED:
        dist = distnet.DistanceModel.load(_require(distance_model, "distance model checkpoint"))
    if agent_cfg.gt_mode == ag.LEARNED:
        target = targetnet.TargetModel.load(_require(target_model, "target model checkpoint"))
    return dist, target


def cmd_eval(cfg: FullConfig, worlds_dir: Path, distance_model=None, target_model=None,
             results_file: Path | None = None, report_file: Path | None = None, label="eval"):
    _, held_out = load_worlds(worlds_dir, cfg)
    specs, warned = generate_eval_episodes(cfg, held_out)
    agent_cfg = cfg.agent_with_noise()
    models = _load_models(cfg, agent_cfg, distance_model, target_model)
    worlds = {i: w for i, w in enumerate(held_out)}
    items = ag.run_batch(worlds, [(s.world_id, s.start, s.goal) for s in specs],
                         models, agent_cfg, master_seed=cfg.master.seed,
                         workers=cfg.master.workers)
    report = evaluation.build_report(label, specs, items, seed=cfg.master.seed)
    if results_file is not None:
        results_file.parent.mkdir(parents=True, exist_ok=True)
        results_file.write_text(evaluation.render_results_csv(specs, items))
    if report_file is not None:
        report_file.parent.mkdir(parents=True, exist_ok=True)
        report_file.write_text(evaluation.render_report_csv([report]))
        report_file.with_suffix(report_file.suffix + ".txt").write_text(
            evaluation.render_report_text([report]))
    return specs, items, report, warned


ABLATION_ROWS = (
    ("gt-ea.gt-t.gt-d", dict(ea_mode=ag.GROUND_TRUTH, gt_mode=ag.GROUND_TRUTH, gd_mode=ag.GROUND_TRUTH)),
    ("ea.gt-t.gt-d", dict(ea_mode=ag.HEURISTIC, gt_mode=ag.GROUND_TRUTH, gd_mode=ag.GROUND_TRUTH)),
    ("ea.t.gt-d", dict(ea_mode=ag.HEURISTIC, gt_mode=ag.LEARNED, gd_mode=ag.GROUND_TRUTH)),
    ("ea.t.d", dict(ea_mode=ag.HEURISTIC, gt_mode=ag.LEARNED, gd_mode=ag.LEARNED)),
)


def cmd_ablate(cfg: FullConfig, worlds_dir: Path, distance_model: Path, target_model: Path,
               report_file: Path | None = None):
    """The four-row ladder from all-ground-truth to fully learned, on one episode set."""
    from dataclasses import replace
    _, held_out = load_worlds(worlds_dir, cfg)
    specs, _ = generate_eval_episodes(cfg, held_out)
    worlds = {i: w for i, w in enumerate(held_out)}
    episodes = [(s.world_id, s.start, s.goal) for s in specs]
    reports = []
    for label, modes in ABLATION_ROWS:
        agent_cfg = replace(cfg.agent_with_noise(), **modes)
        models = _load_models(cfg, agent_cfg, distance_model, target_model)
        items = ag.run_batch(worlds, episodes, models, agent_cfg,
                             master_seed=cfg.master.seed, workers=cfg.master.workers)
        reports.append(evaluation.build_report(label, specs, items, seed=cfg.master.seed))
    if report_file is not None:
        report_file.parent.mkdir(parents=True, exist_ok=True)
        report_file.write_text(evaluation.render_report_csv(reports))
        report_file.with_suffix(report_file.suffix + ".txt").write_text(
            evaluation.render_report_text(reports))
    return specs, reports


def cmd_report(results_file: Path, out_file: Path | None = None):
    text = _require(results_file, "results file").read_text()
    report = evaluation.report_from_results_csv(text, label=results_file.stem)
    rendered_csv = evaluation.render_report_csv([report])
    rendered_txt = evaluation.render_report_text([report])
    if out_file is not None:
        out_file.parent.mkdir(parents=True, exist_ok=True)
        out_file.write_text(rendered_csv)
        out_file.with_suffix(out_file.suffix + ".txt").write_text(rendered_txt)
    return report, rendered_txt


def build_parser():
    parser = argparse.ArgumentParser(prog="toponav", description=__doc__)
    parser.add_argument("--config", help="INI config file (defaults apply when omitted)")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-worlds", help="generate train + eval worlds")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("gen-videos", help="dump per-video topological graphs")
    p.add_argument("--worlds", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("build-dataset", help="videos -> graphs -> training instances")
    p.add_argument("--worlds", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train-distance", help="train the frontier distance network")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--curve", type=Path)

    p = sub.add_parser("train-target", help="train the stopping network")
    p.add_argument("--dataset", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--curve", type=Path)

    p = sub.add_parser("eval", help="run a batch over held-out worlds and report")
    p.add_argument("--worlds", required=True, type=Path)
    p.add_argument("--distance-model", type=Path)
    p.add_argument("--target-model", type=Path)
    p.add_argument("--results", type=Path)
    p.add_argument("--report", type=Path)

    p = sub.add_parser("ablate", help="run the 4-row ground-truth ladder")
    p.add_argument("--worlds", required=True, type=Path)
    p.add_argument("--distance-model", required=True, type=Path)
    p.add_argument("--target-model", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)

    p = sub.add_parser("report", help="aggregate a per-episode results file")
    p.add_argument("--results", required=True, type=Path)
    p.add_argument("--out", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "report":
            report, rendered = cmd_report(args.results, args.out)
            print(rendered)
            return 0
        cfg = _load_cfg(args)
        _echo(cfg)
        if args.command == "gen-worlds":
            n = cmd_gen_worlds(cfg, args.out)
            print(f"wrote {n} worlds to {args.out}")
        elif args.command == "gen-videos":
            n = cmd_gen_videos(cfg, args.worlds, args.out)
            print(f"wrote {n} video graphs to {args.out}")
        elif args.command == "build-dataset":
            ds = cmd_build_dataset(cfg, args.worlds, args.out)
            print(f"dataset: {len(ds.graphs)} graphs, {len(ds.distance_instances)} distance instances, "
                  f"{len(ds.target_pairs)} target pairs -> {args.out}")
        elif args.command == "train-distance":
            _, result, _ = cmd_train_distance(cfg, args.dataset, args.out, args.curve)
            print(f"distance model saved to {args.out}; final train loss {result.train_losses[-1]:.6f}"
                  + (f", val loss {result.val_losses[-1]:.6f}" if result.val_losses else ""))
        elif args.command == "train-target":
            _, result, _ = cmd_train_target(cfg, args.dataset, args.out, args.curve)
            print(f"target model saved to {args.out}; switch accuracy {result.switch_accuracy:.3f} "
                  f"(majority {result.majority_baseline:.3f})")
        elif args.command == "eval":
            specs, items, report, warned = cmd_eval(cfg, args.worlds, args.distance_model,
                                                    args.target_model, args.results, args.report)
            if warned:
                print("warning: some episode cells under-filled", file=sys.stderr)
            print(evaluation.render_report_text([report]))
        elif args.command == "ablate":
            _, reports = cmd_ablate(cfg, args.worlds, args.distance_model, args.target_model,
                                    args.report)
            print(evaluation.render_report_text(reports))
        return 0
    except BrokenPipeError:  # pragma: no cover
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
