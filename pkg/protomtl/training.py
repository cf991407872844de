"""Masked multi-task loss, the total objective and the training loop."""

import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import msgspec
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .evaluation import evaluate
from .exceptions import (
    ConfigError,
    DivergenceSnapshot,
    TrainingDivergedError,
    ValidationError,
)
from .model import ModelOutput, PrototypeMTLNet
from .models import PRESETS, DatasetManifest, TaskSpec, TrainConfig
from .prototype import akg_loss, batch_tke_loss, tc_loss
from .synthdata import PartialLabelBatch, load_split
from .utils import read_kv, write_csv, write_kv
from .vq import dead_slot_count, slot_usage, tae_loss

logger = logging.getLogger("protomtl.training")

LOSS_COMPONENTS = ("mtl", "tae", "vq_aux", "tke", "tc", "akg", "total")
CHECKPOINT_FILE = "checkpoint.pmtl"
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.txt"


def load_config(
    path: Optional[Union[str, Path]] = None,
    preset: Optional[str] = None,
    overrides: Optional[Mapping[str, object]] = None,
) -> TrainConfig:
    """Build a :class:`TrainConfig` from a preset, a file and overrides.

    Later sources win: preset values, then file values, then ``overrides``.
    A ``preset`` argument takes precedence over a ``preset`` key in the file.

    Raises
    ------
    ConfigError
        If the file is malformed, names an unknown key or preset, or holds an
        invalid value
    """
    values: Dict[str, object] = dict(read_kv(path)) if path is not None else {}
    source = str(path) if path is not None else "<config>"
    file_preset = values.pop("preset", None)
    name = preset or file_preset or "desk"
    if name not in PRESETS:
        raise ConfigError(source, f"unknown preset '{name}' (known: {', '.join(PRESETS)})")

    merged = {**PRESETS[name], **values, **(overrides or {})}
    try:
        return msgspec.convert(merged, TrainConfig, strict=False)
    except (msgspec.ValidationError, ValidationError) as e:
        raise ConfigError(source, str(e)) from e


def save_config(config: TrainConfig, path: Union[str, Path]) -> None:
    write_kv(path, msgspec.structs.asdict(config))


def supervised_terms(
    predictions: Mapping[int, torch.Tensor],
    labels: Mapping[int, torch.Tensor],
    label_mask: torch.Tensor,
    tasks: Sequence[TaskSpec],
) -> Dict[int, torch.Tensor]:
    """Per-task supervised loss over the labeled rows of each task.

    Categorical tasks use mean pixel cross-entropy on logits, regression tasks
    the mean absolute error. Tasks without a labeled row are omitted.
    """
    terms = {}
    for task in tasks:
        rows = label_mask[:, task.id]
        if not rows.any():
            continue
        pred = predictions[task.id][rows]
        target = labels[task.id][rows]
        if task.kind == "categorical":
            terms[task.id] = F.cross_entropy(pred, target)
        else:
            terms[task.id] = (pred - target).abs().mean()
    return terms


def supervised_loss(
    predictions: Mapping[int, torch.Tensor],
    labels: Mapping[int, torch.Tensor],
    label_mask: torch.Tensor,
    tasks: Sequence[TaskSpec],
) -> torch.Tensor:
    """Masked multi-task loss: the unit-weight sum of :func:`supervised_terms`.

    Raises
    ------
    ValidationError
        If no (sample, task) pair of the batch is labeled
    """
    label_mask = label_mask.bool()
    if not label_mask.any():
        raise ValidationError("Batch has no labeled task")
    terms = supervised_terms(predictions, labels, label_mask, tasks)
    return torch.stack(list(terms.values())).sum()


def total_loss(
    mtl: torch.Tensor,
    tae: torch.Tensor,
    akg: torch.Tensor,
    lambda_tae: float = 1.0,
    lambda_akg: float = 1.0,
) -> torch.Tensor:
    """``mtl + lambda_tae * tae + lambda_akg * akg``."""
    return mtl + lambda_tae * tae + lambda_akg * akg


def compute_losses(
    output: ModelOutput,
    batch: PartialLabelBatch,
    config: TrainConfig,
    tasks: Sequence[TaskSpec],
) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    """Every loss component of one forward pass and their weighted total.

    The quantization auxiliary loss is weighted by ``lambda_tae`` together
    with the reconstruction loss.

    Returns
    -------
    total : torch.Tensor
        Scalar objective
    components : dict[str, torch.Tensor]
        Keys of :data:`LOSS_COMPONENTS`; disabled components are zero
    """
    mtl = supervised_loss(output.predictions, batch.labels, batch.label_mask, tasks)
    zero = mtl.new_zeros(())

    tae = aux = zero
    if output.reconstruction is not None:
        tae = tae_loss(output.reconstruction, batch.images)
        aux = output.vq_aux_loss

    tke = tc = zero
    if output.affinities:
        if config.use_tke:
            term = batch_tke_loss(output.affinities, batch.label_mask)
            if term.skipped:
                logger.debug("Skipped TKE: no labeled (sample, task) pair")
            tke = term.value
        if config.use_tc:
            tc = tc_loss(output.tokens, config.margin, config.tc_literal_sign)
    akg = akg_loss(tke, tc)

    total = total_loss(mtl, tae + aux, akg, config.lambda_tae, config.lambda_akg)
    components = {
        "mtl": mtl,
        "tae": tae,
        "vq_aux": aux,
        "tke": tke,
        "tc": tc,
        "akg": akg,
        "total": total,
    }
    return total, components


def max_abs_grad(model: torch.nn.Module) -> float:
    largest = 0.0
    for param in model.parameters():
        if param.grad is not None and param.grad.numel():
            value = float(param.grad.detach().abs().max())
            if math.isnan(value):
                return value
            largest = max(largest, value)
    return largest


class TrainResult(NamedTuple):
    model: PrototypeMTLNet
    checkpoint: ckpt.Checkpoint
    history: List[Dict[str, float]]


def _check_resume(resume: ckpt.Checkpoint, config: TrainConfig, manifest: DatasetManifest):
    if msgspec.structs.replace(resume.config, epochs=config.epochs) != config:
        raise ValidationError("Cannot resume: configuration differs from the checkpoint")
    if resume.tasks != manifest.tasks or resume.image_size != [
        manifest.height,
        manifest.width,
    ]:
        raise ValidationError("Cannot resume: dataset differs from the checkpoint")
    if resume.epoch > config.epochs:
        raise ValidationError(
            f"Checkpoint is at epoch {resume.epoch}, beyond the requested {config.epochs}"
        )


def write_history(history: Sequence[Mapping[str, float]], path: Union[str, Path]) -> Path:
    """Write the per-epoch metrics log as CSV."""
    header: List[str] = []
    for row in history:
        header += [key for key in row if key not in header]
    return write_csv(path, header, ([row.get(k, "") for k in header] for row in history))


def train(
    config: TrainConfig,
    manifest: DatasetManifest,
    out_dir: Optional[Union[str, Path]] = None,
    resume: Optional[ckpt.Checkpoint] = None,
    evaluate_each_epoch: bool = True,
) -> TrainResult:
    """Train a :class:`PrototypeMTLNet` with Adam on shuffled mini-batches.

    Parameters
    ----------
    config : TrainConfig
        Hyperparameters; ``config.seed`` fixes initialization and shuffling
    manifest : DatasetManifest
        Dataset with label masks for the training split
    out_dir : str or Path = None
        If given, the checkpoint, metrics log and config are written here
    resume : Checkpoint = None
        Continue from this checkpoint up to ``config.epochs``
    evaluate_each_epoch : bool = True
        Evaluate on the test split after every epoch and log the metrics

    Returns
    -------
    TrainResult
        Trained model, final checkpoint and per-epoch history

    Raises
    ------
    TrainingDivergedError
        If a loss becomes NaN or infinite
    """
    torch.manual_seed(config.seed)
    tasks = manifest.tasks
    image_size = [manifest.height, manifest.width]
    model = PrototypeMTLNet(config, tasks, tuple(image_size))
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    generator = torch.Generator().manual_seed(config.seed)

    epoch, step, history = 0, 0, []
    if resume is not None:
        _check_resume(resume, config, manifest)
        ckpt.restore(resume, model, optimizer, generator)
        epoch, step, history = resume.epoch, resume.step, list(resume.history)
        logger.info(f"Resuming from epoch {epoch} (step {step})")

    train_data = load_split(manifest, "train")
    test_data = None
    if evaluate_each_epoch and manifest.test_count:
        test_data = load_split(manifest, "test")

    n_samples = len(train_data)
    while epoch < config.epochs:
        model.train()
        order = torch.randperm(n_samples, generator=generator)
        sums: Dict[str, float] = defaultdict(float)
        usage = torch.zeros(config.codebook_size, dtype=torch.long)
        n_batches = 0
        for start in range(0, n_samples, config.batch_size):
            batch = train_data.select(order[start : start + config.batch_size])
            output = model(batch.images)
            total, components = compute_losses(output, batch, config, tasks)

            optimizer.zero_grad(set_to_none=True)
            values = {name: float(value) for name, value in components.items()}
            if not all(math.isfinite(v) for v in values.values()):
                total.backward()
                raise TrainingDivergedError(
                    DivergenceSnapshot(
                        step=step, components=values, max_abs_grad=max_abs_grad(model)
                    )
                )
            total.backward()
            optimizer.step()
            step += 1
            n_batches += 1

            for name, value in values.items():
                sums[name] += value
            if output.code_indices is not None:
                usage += slot_usage(output.code_indices, config.codebook_size)
            logger.debug(f"step {step}: total={values['total']:.6f}")

        epoch += 1
        row: Dict[str, float] = {"epoch": float(epoch)}
        row.update({name: sums[name] / max(n_batches, 1) for name in LOSS_COMPONENTS})
        if config.use_vq:
            row["dead_slots"] = float(dead_slot_count(usage))
        if test_data is not None:
            report = evaluate(model, test_data, tasks, config.protocol)
            row.update({f"{e.task}.{e.metric}": e.value for e in report.entries})
        history.append(row)
        logger.info(
            f"epoch {epoch}/{config.epochs}: "
            + ", ".join(f"{k}={v:.4f}" for k, v in row.items() if k != "epoch")
        )

    checkpoint = ckpt.capture(
        model,
        config,
        tasks,
        image_size,
        epoch=epoch,
        step=step,
        optimizer=optimizer,
        generator=generator,
        history=history,
    )
    if out_dir is not None:
        out = Path(out_dir)
        ckpt.save_checkpoint(checkpoint, out / CHECKPOINT_FILE)
        write_history(history, out / METRICS_FILE)
        save_config(config, out / CONFIG_FILE)
    return TrainResult(model=model, checkpoint=checkpoint, history=history)
