"""Operator commands: train-supernet, search, train-discovered, report.

One config file drives a run directory; each command writes only its own
stage subdirectory plus a provenance copy of the effective config, so
commands never clobber each other's outputs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import search as searchmod
from .config import ExperimentConfig, load_config
from .cost import LatencyTable, MacModel, co2_estimate, synthetic_latency_table, total_resource
from .data import Dataset, load_raster, synth_classification, three_way_split
from .errors import ConfigError, NetshrinkError, StateError
from .search import SearchConfig, run_search, train_subnetwork, trajectory_replay_finetune
from .supernet import SubNetChoice, SuperNetwork, load_architecture, save_architecture
from . import tensor as T

STAGE_FORMAT = "netshrink-stage-v1"
METRICS_FORMAT = "netshrink-metrics-v1"
CURVE_FORMAT = "netshrink-training-curve-v1"


@contextmanager
def _run_lock(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(
            f"run directory is locked ({lock} exists); another command may be "
            "writing here, or remove the stale lock"
        ) from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _write_provenance(stage_dir: Path, cfg: ExperimentConfig, stage: str, seconds: float) -> None:
    stage_dir.mkdir(parents=True, exist_ok=True)
    (stage_dir / "config.json").write_text(
        json.dumps(
            {"format": cfgmod.CONFIG_FORMAT, "effective_seed": cfg.seed, "source": cfg.raw},
            indent=1,
        )
    )
    (stage_dir / "stage.json").write_text(
        json.dumps(
            {"format": STAGE_FORMAT, "stage": stage, "seconds": seconds, "seed": cfg.seed},
            indent=1,
        )
    )


def _load_dataset(cfg: ExperimentConfig) -> Dataset:
    d = cfg.dataset
    if d.kind == "synthetic":
        return synth_classification(
            d.classes, d.per_class, d.height, d.width,
            seed=cfg.seed + cfgmod.SEED_DATA, channels=d.channels, noise=d.noise,
        )
    return load_raster(d.path)


def _splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    return three_way_split(
        _load_dataset(cfg), cfg.dataset.holdout_fraction, cfg.dataset.test_fraction,
        seed=cfg.seed + cfgmod.SEED_DATA,
    )


def _build_supernet(cfg: ExperimentConfig) -> SuperNetwork:
    return SuperNetwork(
        cfg.layers, cfg.input_hw, cfg.classes,
        rng=np.random.default_rng(cfg.seed + cfgmod.SEED_INIT),
    )


def _build_cost_model(cfg: ExperimentConfig):
    if cfg.search.metric == "macs":
        return MacModel(cfg.layers, cfg.input_hw)
    if cfg.cost.kind == "file":
        table = LatencyTable.load(cfg.cost.path)
        if cfg.cost.interpolate:
            table.interpolate = True
    else:
        table = synthetic_latency_table(
            cfg.layers, cfg.input_hw, seed=cfg.seed + cfgmod.SEED_COST,
            interpolate=cfg.cost.interpolate,
        )
    table.validate_against(cfg.layers)
    return table


def _search_config(cfg: ExperimentConfig, model, net: SuperNetwork) -> SearchConfig:
    s = cfg.search
    if s.target_resource is not None:
        target = s.target_resource
    else:
        target = s.target_fraction * total_resource(net.full_choice(), model)
    return SearchConfig(
        samples_per_iteration=s.samples_per_iteration,
        layers_per_sample=s.layers_per_sample,
        init_reduction=s.init_reduction,
        decay=s.decay,
        target_resource=target,
        metric=s.metric,
        seed=cfg.seed + cfgmod.SEED_SEARCH,
    )


def _curve_csv(history: list[dict]) -> str:
    lines = [f"# {CURVE_FORMAT}", "epoch,loss,holdout_accuracy"]
    for row in history:
        acc = row.get("holdout_accuracy")
        lines.append(
            f"{row['epoch']},{float(row['loss'])!r},{'' if acc is None else repr(float(acc))}"
        )
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train_supernet(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    out = Path(args.out)
    with _run_lock(out):
        started = time.perf_counter()
        train, holdout, _ = _splits(cfg)
        net = _build_supernet(cfg)
        history = searchmod.train_supernetwork(
            net, train,
            epochs=cfg.training.epochs,
            rng=np.random.default_rng(cfg.seed + cfgmod.SEED_TRAIN),
            batch_size=cfg.training.batch_size,
            lr=cfg.training.learning_rate,
            weight_decay=cfg.training.weight_decay,
            lr_decay=cfg.training.lr_decay,
            holdout=holdout,
        )
        stage_dir = out / "supernet"
        stage_dir.mkdir(parents=True, exist_ok=True)
        net.save(stage_dir / "checkpoint.json")
        (stage_dir / "training_curve.csv").write_text(_curve_csv(history))
        _write_provenance(stage_dir, cfg, "train-supernet", time.perf_counter() - started)
    final = history[-1]
    print(
        f"trained super-network for {cfg.training.epochs} epochs: "
        f"loss {final['loss']:.4f}, full-width holdout accuracy "
        f"{final.get('holdout_accuracy', float('nan')):.4f}"
    )
    print(f"checkpoint: {out / 'supernet' / 'checkpoint.json'}")
    return 0


def cmd_search(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    out = Path(args.out)
    checkpoint = args.checkpoint or str(out / "supernet" / "checkpoint.json")
    if not Path(checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    with _run_lock(out):
        started = time.perf_counter()
        _, holdout, _ = _splits(cfg)
        net = _build_supernet(cfg)
        net.load(checkpoint)
        model = _build_cost_model(cfg)
        scfg = _search_config(cfg, model, net)
        result = run_search(
            net, model, scfg, holdout,
            optimizer=cfg.search.optimizer, jobs=args.jobs, progress=print,
        )
        stage_dir = out / "search"
        stage_dir.mkdir(parents=True, exist_ok=True)
        searchmod.write_trajectory(stage_dir / "trajectory.json", net, result.trajectory)
        searchmod.write_search_log(stage_dir / "search_log.csv", result.log_rows)
        save_architecture(
            stage_dir / "discovered_architecture.json",
            net.architecture_json(result.trajectory[-1].choice),
        )
        _write_provenance(stage_dir, cfg, "search", time.perf_counter() - started)
    final = result.trajectory[-1]
    print(
        f"search met target {scfg.target_resource:.6g} ({cfg.search.metric}): "
        f"final resource {final.resource:.6g}, holdout accuracy "
        f"{final.holdout_accuracy:.4f}, {len(result.trajectory) - 1} iterations"
    )
    print(f"trajectory: {out / 'search' / 'trajectory.json'}")
    return 0


def cmd_train_discovered(args) -> int:
    cfg = load_config(args.config, seed_override=args.seed)
    out = Path(args.out)
    trajectory_path = args.trajectory or str(out / "search" / "trajectory.json")
    architecture_path = args.architecture
    if architecture_path is None and not Path(trajectory_path).exists():
        raise ConfigError(
            f"no architecture input: neither --architecture given nor {trajectory_path} present"
        )
    with _run_lock(out):
        started = time.perf_counter()
        train, holdout, test = _splits(cfg)
        net = _build_supernet(cfg)
        model = _build_cost_model(cfg)
        mac_model = MacModel(cfg.layers, cfg.input_hw)
        rng = np.random.default_rng(cfg.seed + cfgmod.SEED_DISCOVERED)
        mode = cfg.discovered.mode

        if architecture_path is not None:
            rows = load_architecture(architecture_path)
            conv_rows = [r for r in rows if r["kind"] == "conv"]
            if len(conv_rows) != len(cfg.layers):
                raise ConfigError(
                    f"architecture has {len(conv_rows)} conv layers, config network "
                    f"has {len(cfg.layers)}"
                )
            pairs = tuple(
                (int(r["M"]), int(r["k"]) if int(r["M"]) > 0 else spec.kernel_grid[0])
                for spec, r in zip(cfg.layers, conv_rows)
            )
            choices = [SubNetChoice(pairs)]
            mode = "scratch"  # a bare architecture has no trajectory to replay
        else:
            choices = searchmod.load_trajectory_choices(trajectory_path, net)
        final_choice = choices[-1]

        if mode == "replay":
            checkpoint = args.checkpoint or str(out / "supernet" / "checkpoint.json")
            if not Path(checkpoint).exists():
                raise ConfigError(f"replay mode needs the super-network checkpoint: {checkpoint}")
            net.load(checkpoint)
            discovered = trajectory_replay_finetune(
                net, choices, train, rng,
                epochs_per_step=cfg.discovered.replay_epochs_per_step,
                final_epochs=cfg.discovered.epochs,
                batch_size=cfg.training.batch_size,
                lr=cfg.training.learning_rate,
                weight_decay=cfg.training.weight_decay,
            )
        else:
            discovered = net.extract(final_choice)  # fresh random weights, shaped by the choice
            train_subnetwork(
                discovered, train, cfg.discovered.epochs, rng,
                batch_size=cfg.training.batch_size,
                lr=cfg.training.learning_rate,
                weight_decay=cfg.training.weight_decay,
            )

        metrics = {
            "format": METRICS_FORMAT,
            "mode": mode,
            "test_accuracy": discovered.evaluate(test.images, test.labels),
            "holdout_accuracy": discovered.evaluate(holdout.images, holdout.labels),
            "resource": total_resource(final_choice, model),
            "resource_metric": cfg.search.metric,
            "macs": total_resource(final_choice, mac_model),
            "epochs": cfg.discovered.epochs,
        }
        stage_dir = out / "discovered"
        stage_dir.mkdir(parents=True, exist_ok=True)
        T.save_checkpoint(
            stage_dir / "checkpoint.json",
            discovered.state_dict(),
            meta={"choice": [list(p) for p in final_choice.pairs]},
        )
        save_architecture(
            stage_dir / "architecture.json", net.architecture_json(final_choice)
        )
        (stage_dir / "metrics.json").write_text(json.dumps(metrics, indent=1))
        _write_provenance(stage_dir, cfg, "train-discovered", time.perf_counter() - started)
    print(
        f"trained discovered network ({mode}): test accuracy "
        f"{metrics['test_accuracy']:.4f}, {cfg.search.metric} {metrics['resource']:.6g}, "
        f"MACs {metrics['macs']:.0f}"
    )
    print(f"metrics: {out / 'discovered' / 'metrics.json'}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.out)
    stages = {}
    for stage in ("supernet", "search", "discovered"):
        stage_file = run_dir / stage / "stage.json"
        if not stage_file.exists():
            raise ConfigError(f"missing run artifact: {stage_file}")
        stages[stage] = json.loads(stage_file.read_text())
    metrics_file = run_dir / "discovered" / "metrics.json"
    if not metrics_file.exists():
        raise ConfigError(f"missing run artifact: {metrics_file}")
    metrics = json.loads(metrics_file.read_text())

    t_super = stages["supernet"]["seconds"]
    t_search = stages["search"]["seconds"]
    t_disc = stages["discovered"]["seconds"]
    total = t_super + t_search + t_disc
    gpu_hours = args.gpu_hours if args.gpu_hours is not None else total / 3600.0

    print(f"run report: {run_dir}")
    print(f"  test accuracy          {metrics['test_accuracy']:.4f}")
    print(f"  {metrics['resource_metric']:<22} {metrics['resource']:.6g}")
    print(f"  MACs                   {metrics['macs']:.0f}")
    print(
        "  wall-clock (train super-network, train+eval samples, train discovered): "
        f"({t_super:.1f} s, {t_search:.1f} s, {t_disc:.1f} s)"
    )
    print(f"  total                  {total:.1f} s")
    print(f"  CO2 estimate           {co2_estimate(gpu_hours)} lbs ({gpu_hours:.4f} GPU-hours)")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="netshrink",
        description="Train a weight-sharing super-network, search it under a "
        "resource target, and train the discovered network.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, trajectory=False):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel sample evaluations")
        if checkpoint:
            p.add_argument("--checkpoint", default=None, help="super-network checkpoint")
        if trajectory:
            p.add_argument("--trajectory", default=None, help="search trajectory JSON")
            p.add_argument("--architecture", default=None, help="architecture JSON (scratch mode)")

    common(sub.add_parser("train-supernet", help="train the shared-weight super-network"))
    common(sub.add_parser("search", help="run coordinate-descent search"), checkpoint=True)
    common(
        sub.add_parser("train-discovered", help="train the discovered network"),
        checkpoint=True,
        trajectory=True,
    )
    report = sub.add_parser("report", help="summarize a finished run")
    report.add_argument("--out", required=True, help="run directory to summarize")
    report.add_argument("--gpu-hours", type=float, default=None, help="GPU-hours for the CO2 line")
    return parser


_COMMANDS = {
    "train-supernet": cmd_train_supernet,
    "search": cmd_search,
    "train-discovered": cmd_train_discovered,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NetshrinkError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
