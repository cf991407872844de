"""Ablation runs and prototype inspection dumps (CSV only)."""

import logging
import math
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import msgspec
import torch

from .evaluation import compare_runs, evaluate, mean_ranks
from .exceptions import ValidationError
from .model import PrototypeMTLNet
from .models import DatasetManifest, MetricEntry, MetricReport, TrainConfig
from .synthdata import PartialLabelBatch, load_split
from .training import train
from .utils import write_csv

logger = logging.getLogger("protomtl.experiments")

STUDIES = ("losses", "dimension")
DEFAULT_DIMS = (16, 32, 64, 128)


def loss_variants(base: TrainConfig) -> Dict[str, TrainConfig]:
    """The four loss-ablation rows: baseline, +tae, +tke, +tc (full model).

    The baseline bypasses codebook and retrieval with both weights at zero.
    """
    replace = msgspec.structs.replace
    return {
        "baseline": replace(
            base, use_vq=False, use_retrieval=False, lambda_tae=0.0, lambda_akg=0.0
        ),
        "+tae": replace(base, use_vq=True, use_retrieval=False, lambda_akg=0.0),
        "+tke": replace(base, use_vq=True, use_retrieval=True, use_tke=True, use_tc=False),
        "+tc": replace(base, use_vq=True, use_retrieval=True, use_tke=True, use_tc=True),
    }


def dimension_variants(
    base: TrainConfig, dims: Sequence[int] = DEFAULT_DIMS
) -> Dict[str, TrainConfig]:
    """A no-prototype row followed by one full model per slot dimension."""
    variants = {"no-prototype": msgspec.structs.replace(base, use_retrieval=False)}
    for dim in dims:
        if dim % base.n_heads:
            raise ValidationError(f"Dimension {dim} is not divisible by {base.n_heads} heads")
        variants[f"d={dim}"] = msgspec.structs.replace(base, prototype_dim=dim)
    return variants


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-task mean of several reports over the same tasks."""
    if not reports:
        raise ValidationError("No reports to average")
    first = reports[0]
    entries = [
        MetricEntry(
            task=entry.task,
            metric=entry.metric,
            value=math.fsum(r.entries[i].value for r in reports) / len(reports),
        )
        for i, entry in enumerate(first.entries)
    ]
    return MetricReport(protocol=first.protocol, entries=entries, notes=first.notes)


class AblationResult(NamedTuple):
    runs: Dict[str, List[MetricReport]]
    averaged: Dict[str, MetricReport]
    mean_ranks: Dict[str, float]
    full_wins: int


def run_ablation(
    base: TrainConfig,
    manifest: DatasetManifest,
    seeds: Sequence[int] = (0, 1, 2),
    study: str = "losses",
    out_dir: Optional[Union[str, Path]] = None,
    dims: Sequence[int] = DEFAULT_DIMS,
) -> AblationResult:
    """Train and evaluate every variant of a study for every seed.

    Writes ``ablation.csv`` (seed-averaged rows with mean rank),
    ``ablation_runs.csv`` (one row per variant and seed) and
    ``comparison.csv`` (deltas of each variant against the first row).

    Parameters
    ----------
    base : TrainConfig
        Configuration every variant is derived from
    manifest : DatasetManifest
        Dataset with train labels and a test split
    seeds : sequence of int = (0, 1, 2)
        Seeds to repeat each variant with
    study : str = "losses"
        "losses" (four loss rows) or "dimension" (slot dimension sweep)
    out_dir : str or Path = None
        Directory for the CSV files
    dims : sequence of int = (16, 32, 64, 128)
        Slot dimensions of the dimension study

    Returns
    -------
    AblationResult
        Per-seed reports, averaged reports, mean ranks of the averaged rows
        and the number of seeds in which the last variant outranks the first
    """
    if study not in STUDIES:
        raise ValidationError(f"Unknown study '{study}' (known: {', '.join(STUDIES)})")
    if not seeds:
        raise ValidationError("At least one seed is required")
    if not manifest.test_count:
        raise ValidationError("Ablation needs a test split")
    variants = loss_variants(base) if study == "losses" else dimension_variants(base, dims)

    test_data = load_split(manifest, "test")
    protocol = str(manifest.protocol)
    runs: Dict[str, List[MetricReport]] = {name: [] for name in variants}
    for name, config in variants.items():
        for seed in seeds:
            logger.info(f"Ablation {study}: training {name} with seed {seed}")
            seeded = msgspec.structs.replace(config, seed=seed, protocol=protocol)
            result = train(seeded, manifest, evaluate_each_epoch=False)
            runs[name].append(evaluate(result.model, test_data, manifest.tasks, protocol))

    names = list(variants)
    averaged = {name: average_reports(runs[name]) for name in names}
    ranks = dict(zip(names, mean_ranks([averaged[n] for n in names])))
    full_wins = 0
    for i in range(len(seeds)):
        first, last = mean_ranks([runs[names[0]][i], runs[names[-1]][i]])
        full_wins += last < first
    logger.info(
        f"{names[-1]} outranks {names[0]} in {full_wins} of {len(seeds)} seeds"
    )

    if out_dir is not None:
        _write_ablation(Path(out_dir), names, seeds, runs, averaged, ranks)
    return AblationResult(
        runs=runs, averaged=averaged, mean_ranks=ranks, full_wins=full_wins
    )


def _columns(report: MetricReport) -> List[str]:
    return [f"{e.task}.{e.metric}" for e in report.entries]


def _write_ablation(out: Path, names, seeds, runs, averaged, ranks) -> None:
    columns = _columns(averaged[names[0]])
    write_csv(
        out / "ablation.csv",
        ["variant", *columns, "mean_rank"],
        (
            [name, *(e.value for e in averaged[name].entries), ranks[name]]
            for name in names
        ),
    )
    write_csv(
        out / "ablation_runs.csv",
        ["variant", "seed", *columns],
        (
            [name, seed, *(e.value for e in report.entries)]
            for name in names
            for seed, report in zip(seeds, runs[name])
        ),
    )
    reference = averaged[names[0]]
    rows = []
    for name in names[1:]:
        comparison = compare_runs(reference, averaged[name])
        rows.append(
            [
                names[0],
                name,
                *(comparison.deltas[e.task] for e in reference.entries),
                comparison.mean_rank_a,
                comparison.mean_rank_b,
            ]
        )
    header = ["variant_a", "variant_b", *(f"delta.{e.task}" for e in reference.entries)]
    write_csv(out / "comparison.csv", [*header, "mean_rank_a", "mean_rank_b"], rows)
    logger.info(f"Wrote ablation tables to {out}")


class Inspection(NamedTuple):
    mean_affinity: torch.Tensor
    slots: torch.Tensor
    slot_similarity: torch.Tensor
    attention: Optional[List[List[torch.Tensor]]]


def inspect_prototype(
    model: PrototypeMTLNet,
    data: PartialLabelBatch,
    out_dir: Optional[Union[str, Path]] = None,
    attention: bool = False,
    batch_size: int = 32,
) -> Inspection:
    """Mean task affinity per task, the prototype slots and attention maps.

    ``mean_affinity[t]`` is the affinity of task-t tokens averaged over all
    samples and positions; ideally its argmax is t. With ``attention`` the
    head-averaged cross-attention weights of every block are recorded for the
    first sample, per task.

    Files written to ``out_dir``: ``affinity.csv``, ``prototype.csv``,
    ``prototype_similarity.csv`` and, with ``attention``, ``attention.csv``.
    """
    if model.prototype is None:
        raise ValidationError("Model has no task prototype (use_retrieval is off)")
    if len(data) == 0:
        raise ValidationError("No samples to inspect")
    n_tasks = len(model.tasks)
    totals = torch.zeros(n_tasks, n_tasks, dtype=torch.float64)
    count = 0
    with model.inference():
        for start in range(0, len(data), batch_size):
            images = data.images[start : start + batch_size]
            output = model(images)
            for task_id, affinity in enumerate(output.affinities):
                totals[task_id] += affinity.double().sum(dim=(0, 1))
            count += images.shape[0] * output.affinities[0].shape[1]

        maps = None
        if attention:
            model.transformer.record_attention(True)
            try:
                model(data.images[:1])
                # One log entry per task in task order, per block.
                blocks = model.transformer.blocks
                maps = [
                    [block.attention_log[t][0].mean(dim=0) for block in blocks]
                    for t in range(n_tasks)
                ]
            finally:
                model.transformer.record_attention(False)

    mean_affinity = totals / count
    slots = model.prototype.slots.detach().clone()
    normed = torch.nn.functional.normalize(slots, dim=-1, eps=1e-8)
    similarity = normed @ normed.T
    for task_id, task in enumerate(model.tasks):
        logger.info(
            f"{task.name}: mean affinity argmax -> slot "
            f"{int(mean_affinity[task_id].argmax())}"
        )

    if out_dir is not None:
        out = Path(out_dir)
        write_csv(
            out / "affinity.csv",
            ["task", *(f"slot_{k}" for k in range(n_tasks)), "argmax"],
            (
                [task.name, *mean_affinity[i].tolist(), int(mean_affinity[i].argmax())]
                for i, task in enumerate(model.tasks)
            ),
        )
        write_csv(
            out / "prototype.csv",
            ["slot", *(f"v_{j}" for j in range(slots.shape[1]))],
            ([task.name, *slots[i].double().tolist()] for i, task in enumerate(model.tasks)),
        )
        write_csv(
            out / "prototype_similarity.csv",
            ["slot", *(task.name for task in model.tasks)],
            (
                [task.name, *similarity[i].double().tolist()]
                for i, task in enumerate(model.tasks)
            ),
        )
        if maps is not None:
            write_csv(
                out / "attention.csv",
                ["task", "block", "query", "key", "weight"],
                (
                    [task.name, b, q, k, float(weights[q, k])]
                    for t, task in enumerate(model.tasks)
                    for b, weights in enumerate(maps[t])
                    for q in range(weights.shape[0])
                    for k in range(weights.shape[1])
                ),
            )
        logger.info(f"Wrote prototype inspection to {out}")
    return Inspection(
        mean_affinity=mean_affinity,
        slots=slots,
        slot_similarity=similarity,
        attention=maps,
    )
