"""Coordinate-descent architecture search over a trained super-network.

Each iteration must cut the best sample's resource by a scheduled amount
(geometric decay).  The multi-layer optimizer (MCD) draws J candidates by
randomly shrinking L layers at once; the single-layer baseline (SCD) proposes
one candidate per layer.  Candidates are ranked by holdout accuracy using the
shared weights directly, no per-sample training.
"""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .cost import total_resource
from .data import Dataset
from .errors import FeasibilityError, GridError, InfeasibleTargetError
from .supernet import LayerSpec, SubNetChoice, SubNetwork, SuperNetwork, sample_width_assignments

SEARCH_LOG_FORMAT = "netshrink-search-log-v1"
TRAJECTORY_FORMAT = "netshrink-trajectory-v1"

_MAX_ITERATIONS = 100_000


def _tol(x: float) -> float:
    return 1e-9 * max(1.0, abs(x))


@dataclass(frozen=True)
class SearchConfig:
    """Hyper-parameters of one search run."""

    samples_per_iteration: int  # J
    layers_per_sample: int  # L
    init_reduction: float  # fraction of the initial resource
    decay: float  # per-iteration multiplier on the reduction
    target_resource: float
    metric: str = "latency"
    seed: int = 0
    max_attempts: int = 200

    def __post_init__(self):
        if self.samples_per_iteration < 1:
            raise GridError(f"samples_per_iteration must be >= 1, got {self.samples_per_iteration}")
        if self.layers_per_sample < 1:
            raise GridError(f"layers_per_sample must be >= 1, got {self.layers_per_sample}")
        if not 0 < self.init_reduction < 1:
            raise GridError(f"init_reduction must lie in (0, 1), got {self.init_reduction}")
        if not 0 < self.decay <= 1:
            raise GridError(f"decay must lie in (0, 1], got {self.decay}")
        if self.target_resource <= 0:
            raise GridError(f"target_resource must be > 0, got {self.target_resource}")
        if self.metric not in ("latency", "macs"):
            raise GridError(f"metric must be latency or macs, got {self.metric!r}")


@dataclass(frozen=True)
class SampleRecord:
    choice: SubNetChoice
    resource: float
    holdout_accuracy: float
    iteration: int  # -1 marks the initial network


@dataclass(frozen=True)
class LogRow:
    iteration: int
    sample_id: int
    resource: float
    accuracy: float
    chosen: int
    duplicate_of: int | None = None


@dataclass
class SearchResult:
    trajectory: list[SampleRecord]
    log_rows: list[LogRow]
    initial_resource: float


def reduction_schedule(initial_resource: float, config: SearchConfig, iteration: int) -> float:
    """Resource cut required at `iteration`: r0 * init_reduction * decay^iteration."""
    if iteration < 0:
        raise ValueError(f"iteration must be >= 0, got {iteration}")
    return initial_resource * config.init_reduction * config.decay**iteration


def iteration_budget(
    prev_resource: float, initial_resource: float, config: SearchConfig, iteration: int,
    min_resource: float,
) -> float:
    """Resource bound samples of `iteration` must meet.

    The scheduled cut applies relative to the previous best; near the floor
    the budget is clamped to the global minimum so a reachable target stays
    reachable.
    """
    return max(prev_resource - reduction_schedule(initial_resource, config, iteration), min_resource)


# ---------------------------------------------------------------------------
# shrink moves
# ---------------------------------------------------------------------------

def shrink_options(spec: LayerSpec, m: int, k: int) -> list[tuple[int, int]]:
    """All strict single-layer shrinks of (m, k): smaller M, smaller k, or both."""
    if m == 0:
        return []
    options: list[tuple[int, int]] = []
    for m2 in spec.width_grid:
        if m2 > m:
            continue
        if m2 == 0:
            options.append((0, spec.kernel_grid[0]))
            continue
        for k2 in spec.kernel_grid:
            if k2 <= k and (m2, k2) != (m, k):
                options.append((m2, k2))
    return options


def min_resource_choice(specs: Sequence[LayerSpec]) -> SubNetChoice:
    return SubNetChoice(tuple((s.width_grid[0], s.kernel_grid[0]) for s in specs))


def layer_max_reduction(specs: Sequence[LayerSpec], model, choice: SubNetChoice, index: int) -> float:
    """Largest resource cut achievable by shrinking layer `index` alone."""
    spec = specs[index]
    m, k = choice.pairs[index]
    floor_cost = model.layer_cost(index, spec.width_grid[0], spec.kernel_grid[0])
    return model.layer_cost(index, m, k) - floor_cost


def scd_max_reduction(specs: Sequence[LayerSpec], model, choice: SubNetChoice) -> float:
    """Best per-iteration cut a single-layer step can achieve from `choice`."""
    return max(layer_max_reduction(specs, model, choice, i) for i in range(len(specs)))


def mcd_max_reduction(specs: Sequence[LayerSpec], model, choice: SubNetChoice, l_layers: int) -> float:
    """Best per-iteration cut an L-layer step can achieve (sum of the L largest)."""
    cuts = sorted(
        (layer_max_reduction(specs, model, choice, i) for i in range(len(specs))), reverse=True
    )
    return float(sum(cuts[: l_layers]))


def generate_mcd_sample(
    specs: Sequence[LayerSpec],
    model,
    best_prev: SubNetChoice,
    l_layers: int,
    required_reduction: float,
    rng: np.random.Generator,
    max_attempts: int = 200,
) -> SubNetChoice:
    """One candidate: L randomly chosen layers, each randomly shrunk, meeting the cut.

    Rejection-samples up to `max_attempts` proposals; afterwards escalates by
    forcing minimum grid values one layer at a time (largest cut first).
    """
    budget = total_resource(best_prev, model) - required_reduction
    shrinkable = [
        i for i, (spec, pair) in enumerate(zip(specs, best_prev.pairs))
        if shrink_options(spec, *pair)
    ]
    if not shrinkable:
        raise FeasibilityError("no layer can shrink any further", attempts=0)
    l_eff = min(l_layers, len(shrinkable))
    for _ in range(max_attempts):
        picked = rng.choice(len(shrinkable), size=l_eff, replace=False)
        candidate = best_prev
        for si in sorted(picked):
            i = shrinkable[si]
            options = shrink_options(specs[i], *best_prev.pairs[i])
            candidate = candidate.replace(i, *options[rng.integers(len(options))])
        if total_resource(candidate, model) <= budget + _tol(budget):
            return candidate
    by_cut = sorted(
        shrinkable, key=lambda i: (-layer_max_reduction(specs, model, best_prev, i), i)
    )
    candidate = best_prev
    forced = 0
    for i in by_cut[:l_eff]:
        candidate = candidate.replace(i, specs[i].width_grid[0], specs[i].kernel_grid[0])
        forced += 1
        if total_resource(candidate, model) <= budget + _tol(budget):
            return candidate
    raise FeasibilityError(
        f"no {l_eff}-layer shrink reaches the required reduction "
        f"{required_reduction:.6g}",
        attempts=max_attempts + forced,
    )


def generate_scd_samples(
    specs: Sequence[LayerSpec],
    model,
    best_prev: SubNetChoice,
    required_reduction: float,
) -> list[SubNetChoice]:
    """One candidate per layer, shrinking only that layer just enough to meet the cut.

    Layers whose full removal still misses the cut yield no candidate.
    """
    budget = total_resource(best_prev, model) - required_reduction
    samples = []
    for i, spec in enumerate(specs):
        best_option = None
        for option in shrink_options(spec, *best_prev.pairs[i]):
            candidate = best_prev.replace(i, *option)
            r = total_resource(candidate, model)
            if r <= budget + _tol(budget):
                key = (r, option[0], option[1])  # least shrink, prefer keeping filters
                if best_option is None or key > best_option[0]:
                    best_option = (key, candidate)
        if best_option is not None:
            samples.append(best_option[1])
    return samples


# ---------------------------------------------------------------------------
# evaluation and selection
# ---------------------------------------------------------------------------

def evaluate_sample(supernet: SuperNetwork, choice: SubNetChoice, holdout: Dataset) -> float:
    """Holdout top-1 accuracy of the sliced sub-network; shared weights, read-only."""
    return supernet.evaluate(holdout.images, holdout.labels, choice)


def select_best(records: Sequence[SampleRecord]) -> SampleRecord:
    """Highest accuracy; ties broken by lower resource, then earlier sample."""
    if not records:
        raise ValueError("select_best needs at least one record")
    best = records[0]
    for rec in records[1:]:
        if rec.holdout_accuracy > best.holdout_accuracy or (
            rec.holdout_accuracy == best.holdout_accuracy and rec.resource < best.resource
        ):
            best = rec
    return best


# ---------------------------------------------------------------------------
# the search loop
# ---------------------------------------------------------------------------

def run_search(
    supernet: SuperNetwork,
    model,
    config: SearchConfig,
    holdout: Dataset,
    optimizer: str = "mcd",
    jobs: int = 1,
    progress: Callable[[str], None] | None = None,
) -> SearchResult:
    """Shrink from the full network until the target resource is met.

    Returns the trajectory of per-iteration best samples (the first entry is
    the initial network, marked iteration -1) plus one log row per generated
    sample.  Deterministic for a fixed config seed.
    """
    if optimizer not in ("mcd", "scd"):
        raise GridError(f"optimizer must be mcd or scd, got {optimizer!r}")
    specs = supernet.specs
    rng = np.random.default_rng(config.seed)
    full = supernet.full_choice()
    initial_resource = total_resource(full, model)
    min_resource = total_resource(min_resource_choice(specs), model)
    if min_resource > config.target_resource + _tol(config.target_resource):
        raise InfeasibleTargetError(
            f"target {config.target_resource:.6g} is below the minimum achievable "
            f"resource {min_resource:.6g}"
        )
    if config.decay < 1.0:
        total_schedulable = initial_resource * config.init_reduction / (1.0 - config.decay)
        needed = initial_resource - config.target_resource
        if total_schedulable < needed:
            raise InfeasibleTargetError(
                f"the geometric schedule tops out at {total_schedulable:.6g} total "
                f"reduction, but reaching the target needs {needed:.6g}"
            )

    best = SampleRecord(
        choice=full,
        resource=initial_resource,
        holdout_accuracy=evaluate_sample(supernet, full, holdout),
        iteration=-1,
    )
    trajectory = [best]
    log_rows: list[LogRow] = []
    iteration = 0
    while best.resource > config.target_resource + _tol(config.target_resource):
        if iteration >= _MAX_ITERATIONS:
            raise FeasibilityError(f"no convergence after {iteration} iterations")
        budget = iteration_budget(
            best.resource, initial_resource, config, iteration, min_resource
        )
        required = best.resource - budget
        if optimizer == "mcd":
            choices = [
                generate_mcd_sample(
                    specs, model, best.choice, config.layers_per_sample, required, rng,
                    config.max_attempts,
                )
                for _ in range(config.samples_per_iteration)
            ]
        else:
            choices = generate_scd_samples(specs, model, best.choice, required)
            if not choices:
                raise FeasibilityError(
                    f"iteration {iteration}: no single layer can cut {required:.6g} alone"
                )

        first_seen: dict[tuple, int] = {}
        duplicate_of: list[int | None] = []
        unique_ids: list[int] = []
        for j, choice in enumerate(choices):
            key = choice.key()
            if key in first_seen:
                duplicate_of.append(first_seen[key])
            else:
                first_seen[key] = j
                duplicate_of.append(None)
                unique_ids.append(j)

        def accuracy_of(j: int) -> float:
            return evaluate_sample(supernet, choices[j], holdout)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                unique_acc = dict(zip(unique_ids, pool.map(accuracy_of, unique_ids)))
        else:
            unique_acc = {j: accuracy_of(j) for j in unique_ids}

        records = [
            SampleRecord(
                choice=choices[j],
                resource=total_resource(choices[j], model),
                holdout_accuracy=unique_acc[j if duplicate_of[j] is None else duplicate_of[j]],
                iteration=iteration,
            )
            for j in range(len(choices))
        ]
        best = select_best([records[j] for j in unique_ids])
        chosen_id = next(
            j for j in unique_ids
            if records[j].choice.key() == best.choice.key()
        )
        log_rows.extend(
            LogRow(
                iteration=iteration,
                sample_id=j,
                resource=records[j].resource,
                accuracy=records[j].holdout_accuracy,
                chosen=int(j == chosen_id),
                duplicate_of=duplicate_of[j],
            )
            for j in range(len(choices))
        )
        trajectory.append(best)
        if progress is not None:
            progress(
                f"iteration {iteration}: {len(unique_ids)}/{len(choices)} unique samples, "
                f"best resource {best.resource:.4g}, accuracy {best.holdout_accuracy:.4f}"
            )
        iteration += 1
    return SearchResult(trajectory=trajectory, log_rows=log_rows, initial_resource=initial_resource)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def search_log_csv(rows: Sequence[LogRow]) -> str:
    buf = io.StringIO()
    buf.write(f"# {SEARCH_LOG_FORMAT}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "sample_id", "resource", "accuracy", "chosen", "duplicate_of"])
    for r in rows:
        writer.writerow(
            [
                r.iteration,
                r.sample_id,
                repr(float(r.resource)),
                repr(float(r.accuracy)),
                r.chosen,
                "" if r.duplicate_of is None else r.duplicate_of,
            ]
        )
    return buf.getvalue()


def write_search_log(path: str | Path, rows: Sequence[LogRow]) -> None:
    Path(path).write_text(search_log_csv(rows))


def write_trajectory(path: str | Path, supernet: SuperNetwork, trajectory: Sequence[SampleRecord]) -> None:
    """JSON list of architecture JSONs, initial network first."""
    rows = [supernet.architecture_json(rec.choice) for rec in trajectory]
    Path(path).write_text(json.dumps(rows, indent=1))


def load_trajectory_choices(path: str | Path, supernet: SuperNetwork) -> list[SubNetChoice]:
    """Parse a trajectory file back into validated per-layer choices."""
    raw = json.loads(Path(path).read_text())
    choices = []
    for arch in raw:
        conv_rows = [row for row in arch if row["kind"] == "conv"]
        if len(conv_rows) != len(supernet.specs):
            raise GridError(
                f"trajectory entry has {len(conv_rows)} conv layers, network has "
                f"{len(supernet.specs)}"
            )
        pairs = []
        for spec, row in zip(supernet.specs, conv_rows):
            m = int(row["M"])
            k = int(row["k"]) if m > 0 else spec.kernel_grid[0]
            pairs.append((m, k))
        choice = SubNetChoice(tuple(pairs))
        supernet.validate_choice(choice)
        choices.append(choice)
    return choices


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo : lo + batch_size]


def train_supernetwork(
    supernet: SuperNetwork,
    train: Dataset,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 64,
    lr: float = 0.05,
    weight_decay: float = 1e-4,
    lr_decay: float = 1.0,
    holdout: Dataset | None = None,
    debug_checks: bool = False,
) -> list[dict]:
    """Joint training of all sub-networks: one forward-backward pass per batch.

    Every batch assigns each image one width per layer (near-uniform over the
    grid, independent across layers) and each layer one kernel size drawn
    uniformly from its grid.  Returns one history row per epoch.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    specs = supernet.specs
    history = []
    lr_now = lr
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(train), batch_size, rng):
            x, labels = train.images[idx], train.labels[idx]
            widths = np.column_stack(
                [sample_width_assignments(len(idx), s.width_grid, rng) for s in specs]
            )
            kernels = [int(rng.choice(s.kernel_grid)) for s in specs]
            supernet.zero_grad()
            logits = supernet.forward_train(x, widths, kernels)
            loss, dlogits = T.softmax_cross_entropy(logits, labels)
            supernet.backward(dlogits)
            if debug_checks:
                _assert_gradient_isolation(supernet, widths)
            T.sgd_step(supernet.parameters(), lr_now, weight_decay)
            losses.append(loss)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        if holdout is not None:
            row["holdout_accuracy"] = supernet.evaluate(
                holdout.images, holdout.labels, supernet.full_choice()
            )
        history.append(row)
        lr_now *= lr_decay
    return history


def _assert_gradient_isolation(supernet: SuperNetwork, widths: np.ndarray) -> None:
    for li in range(len(supernet.specs)):
        cap = int(widths[:, li].max())
        if np.any(supernet.weights[li].grad[cap:] != 0.0):
            raise AssertionError(f"layer {li}: gradient leaked past batch-max width {cap}")
        if np.any(supernet.biases[li].grad[cap:] != 0.0):
            raise AssertionError(f"layer {li}: bias gradient leaked past width {cap}")


def train_subnetwork(
    net: SubNetwork,
    train: Dataset,
    epochs: int,
    rng: np.random.Generator,
    batch_size: int = 64,
    lr: float = 0.05,
    weight_decay: float = 1e-4,
) -> list[dict]:
    """Plain SGD training of a standalone (extracted or rebuilt) network."""
    history = []
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(train), batch_size, rng):
            x, labels = train.images[idx], train.labels[idx]
            net.zero_grad()
            logits = net.forward(x, record=True)
            loss, dlogits = T.softmax_cross_entropy(logits, labels)
            net.backward(dlogits)
            T.sgd_step(net.parameters(), lr, weight_decay)
            losses.append(loss)
        history.append({"epoch": epoch, "loss": float(np.mean(losses))})
    return history


def trajectory_replay_finetune(
    supernet: SuperNetwork,
    choices: Sequence[SubNetChoice],
    train: Dataset,
    rng: np.random.Generator,
    epochs_per_step: int = 2,
    final_epochs: int = 20,
    batch_size: int = 64,
    lr: float = 0.05,
    weight_decay: float = 1e-4,
) -> SubNetwork:
    """Walk the per-iteration best architectures, reusing overlapping weights.

    Starts from the initial architecture with the super-network's (pretrained)
    weights; at every shrink step the surviving slices carry over and the new
    network trains for `epochs_per_step`; the final architecture then trains
    for `final_epochs`.
    """
    if not choices:
        raise ValueError("trajectory must contain at least the initial network")
    net = supernet.extract(choices[0])
    for choice in choices[1:]:
        net = net.shrink_to(choice)
        train_subnetwork(net, train, epochs_per_step, rng, batch_size, lr, weight_decay)
    train_subnetwork(net, train, final_epochs, rng, batch_size, lr, weight_decay)
    return net
