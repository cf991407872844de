"""Synthetic multi-task scenes, partial label assignment and sample loading.

Scenes are stacks of flat primitives (rectangles, ellipses, triangles) floating
at random depths in front of a fronto-parallel background plane. Every label is
rendered from the same primitives, so segmentation boundaries, depth
discontinuities and normal changes line up by construction.

On disk a dataset looks like::

    <root>/manifest.txt
    <root>/<split>/<sample_id>/header.txt
    <root>/<split>/<sample_id>/image.bin
    <root>/<split>/<sample_id>/task<k>.bin

Tensor files are raw little-endian float32 or int32 data; ``header.txt`` lists
``dtype dim0 dim1 ...`` for each file.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import msgspec
import numpy as np
import torch

from .exceptions import ConfigError, DataIOError, ValidationError
from .models import DatasetManifest, GenConfig, LabelProtocol, TaskSpec, default_tasks
from .utils import read_kv, write_kv

logger = logging.getLogger("protomtl.synthdata")

MANIFEST_FILE = "manifest.txt"
HEADER_FILE = "header.txt"
SPLITS = ("train", "test")

_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}

# Base albedo per segmentation class (class 0 is the background).
_PALETTE = np.array(
    [
        [0.20, 0.20, 0.22],
        [0.90, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.25, 0.35, 0.95],
        [0.90, 0.80, 0.20],
        [0.75, 0.30, 0.85],
        [0.20, 0.80, 0.85],
    ]
)
_LIGHT = np.array([0.3, -0.4, 1.0]) / np.linalg.norm([0.3, -0.4, 1.0])


class Sample(msgspec.Struct, kw_only=True, frozen=True):
    """One rendered scene with its full label set.

    Attributes
    ----------
    image : np.ndarray
        float32 [3, H, W] with values in [0, 1]
    labels : dict[int, np.ndarray]
        Task id to label array (int32 [H, W] or float32 [C, H, W])
    label_mask : list[bool]
        Which labels are available to training
    """

    image: np.ndarray
    labels: Dict[int, np.ndarray]
    label_mask: List[bool]


class PartialLabelBatch(msgspec.Struct, kw_only=True, frozen=True):
    """A stacked batch of samples with partial labels.

    Label rows of unlabeled (sample, task) pairs are zero-filled and must be
    ignored through ``label_mask``.

    Attributes
    ----------
    images : torch.Tensor
        float32 [B, 3, H, W]
    labels : dict[int, torch.Tensor]
        Task id to int64 [B, H, W] class maps or float32 [B, C, H, W] targets
    label_mask : torch.Tensor
        bool [B, T]
    indices : list[int]
        Sample indices the rows were loaded from
    """

    images: torch.Tensor
    labels: Dict[int, torch.Tensor]
    label_mask: torch.Tensor
    indices: List[int]

    def __len__(self) -> int:
        return self.images.shape[0]

    def select(self, rows: Union[torch.Tensor, Sequence[int]]) -> "PartialLabelBatch":
        """Return the sub-batch made of the given row positions."""
        rows = torch.as_tensor(rows, dtype=torch.long)
        return PartialLabelBatch(
            images=self.images[rows],
            labels={t: y[rows] for t, y in self.labels.items()},
            label_mask=self.label_mask[rows],
            indices=[self.indices[i] for i in rows.tolist()],
        )

    @classmethod
    def concat(cls, batches: Sequence["PartialLabelBatch"]) -> "PartialLabelBatch":
        """Concatenate batches along the sample axis."""
        if not batches:
            raise ValidationError("Cannot concatenate an empty list of batches")
        return cls(
            images=torch.cat([b.images for b in batches]),
            labels={
                t: torch.cat([b.labels[t] for b in batches]) for t in batches[0].labels
            },
            label_mask=torch.cat([b.label_mask for b in batches]),
            indices=[i for b in batches for i in b.indices],
        )


def _primitive_mask(
    cls: int, u: np.ndarray, v: np.ndarray, center: np.ndarray, half: np.ndarray
) -> np.ndarray:
    du, dv = u - center[0], v - center[1]
    kind = cls % 3
    if kind == 1:
        return (np.abs(du) <= half[0]) & (np.abs(dv) <= half[1])
    if kind == 2:
        return (du / half[0]) ** 2 + (dv / half[1]) ** 2 <= 1.0
    # Upright triangle, apex on top.
    rel = (dv + half[1]) / (2.0 * half[1])
    return (np.abs(dv) <= half[1]) & (np.abs(du) <= half[0] * rel)


def _boundary_map(seg: np.ndarray) -> np.ndarray:
    edge = np.zeros(seg.shape, dtype=bool)
    horizontal = seg[:, 1:] != seg[:, :-1]
    vertical = seg[1:, :] != seg[:-1, :]
    edge[:, 1:] |= horizontal
    edge[:, :-1] |= horizontal
    edge[1:, :] |= vertical
    edge[:-1, :] |= vertical
    return edge


def render_sample(
    config: GenConfig, tasks: Sequence[TaskSpec], split: str, index: int
) -> Sample:
    """Render one scene; a pure function of (config, split, index).

    Parameters
    ----------
    config : GenConfig
        Generation settings
    tasks : sequence of TaskSpec
        Tasks to produce labels for
    split : str
        "train" or "test"
    index : int
        Sample index within the split

    Returns
    -------
    Sample
        Image and every task label, fully masked in
    """
    rng = np.random.default_rng([config.seed, SPLITS.index(split), index])
    height, width = config.height, config.width
    v, u = np.meshgrid(
        (np.arange(height) + 0.5) / height,
        (np.arange(width) + 0.5) / width,
        indexing="ij",
    )

    seg = np.zeros((height, width), dtype=np.int32)
    depth = np.full((height, width), rng.uniform(7.0, 8.0))
    normal = np.zeros((3, height, width))
    normal[2] = 1.0
    albedo = np.broadcast_to(_PALETTE[0][:, None, None], (3, height, width)).copy()

    # One shape per foreground class, so each class region is a single depth plane.
    max_shapes = min(config.n_shapes, config.seg_classes - 1)
    count = int(rng.integers(1, max_shapes + 1)) if max_shapes > 0 else 0
    classes = rng.permutation(np.arange(1, config.seg_classes))[:count]
    shapes = []
    for cls in classes.tolist():
        shapes.append(
            {
                "cls": int(cls),
                "center": rng.uniform(0.2, 0.8, size=2),
                "half": rng.uniform(0.12, 0.3, size=2),
                "base": float(rng.uniform(2.0, 5.0)),
                "slope": rng.uniform(-1.0, 1.0, size=2),
                "jitter": rng.uniform(-0.08, 0.08, size=3),
            }
        )

    # Painter's order: far to near, so nearer primitives occlude.
    for shape in sorted(shapes, key=lambda s: -s["base"]):
        mask = _primitive_mask(shape["cls"], u, v, shape["center"], shape["half"])
        gu, gv = shape["slope"]
        plane = (
            shape["base"] + gu * (u - shape["center"][0]) + gv * (v - shape["center"][1])
        )
        facing = np.array([-gu, -gv, 1.0])
        facing /= np.linalg.norm(facing)
        color = _PALETTE[1 + (shape["cls"] - 1) % (len(_PALETTE) - 1)] + shape["jitter"]

        seg[mask] = shape["cls"]
        depth[mask] = plane[mask]
        normal[:, mask] = facing[:, None]
        albedo[:, mask] = color[:, None]

    shade = np.clip(np.einsum("c,chw->hw", _LIGHT, normal), 0.0, 1.0)
    image = albedo * (0.35 + 0.65 * shade) * (1.0 - 0.04 * depth)
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)

    by_name = {
        "semseg": seg,
        "depth": depth[None].astype(np.float32),
        "normal": normal.astype(np.float32),
        "saliency": (seg > 0).astype(np.int32),
        "boundary": _boundary_map(seg).astype(np.int32),
    }
    labels = {task.id: by_name[task.name] for task in tasks}
    return Sample(image=image, labels=labels, label_mask=[True] * len(tasks))


def _tensor_spec(array: np.ndarray) -> str:
    dtype = "int32" if array.dtype.kind == "i" else "float32"
    return " ".join([dtype] + [str(d) for d in array.shape])


def _write_sample(sample_dir: Path, sample: Sample, sample_id: str) -> None:
    sample_dir.mkdir(parents=True, exist_ok=True)
    header = {"sample_id": sample_id, "image": _tensor_spec(sample.image)}
    (sample_dir / "image.bin").write_bytes(sample.image.astype("<f4").tobytes())
    for task_id, label in sample.labels.items():
        header[f"task.{task_id}"] = _tensor_spec(label)
        dtype = "<i4" if label.dtype.kind == "i" else "<f4"
        (sample_dir / f"task{task_id}.bin").write_bytes(label.astype(dtype).tobytes())
    write_kv(sample_dir / HEADER_FILE, header)


def sample_dir(root: Union[str, Path], split: str, index: int) -> Path:
    return Path(root) / split / f"{index:06d}"


def generate_dataset(config: GenConfig, out_dir: Union[str, Path]) -> DatasetManifest:
    """Render and write a train and a test split plus a fully labeled manifest.

    Parameters
    ----------
    config : GenConfig
        Generation settings
    out_dir : str or Path
        Dataset root; created if missing

    Returns
    -------
    DatasetManifest
        Manifest with protocol "full"; apply :func:`assign_labels` for partial
        labels

    Raises
    ------
    DataIOError
        If the output directory cannot be written
    """
    root = Path(out_dir)
    tasks = default_tasks(config.n_tasks, config.seg_classes)
    counts = {"train": config.n_samples, "test": config.n_test}
    try:
        root.mkdir(parents=True, exist_ok=True)
        for split in SPLITS:
            for index in range(counts[split]):
                sample = render_sample(config, tasks, split, index)
                _write_sample(sample_dir(root, split, index), sample, f"{index:06d}")
            logger.info(f"Wrote {counts[split]} {split} samples to {root / split}")
        manifest = DatasetManifest(
            root=str(root),
            height=config.height,
            width=config.width,
            seed=config.seed,
            sample_count=config.n_samples,
            test_count=config.n_test,
            tasks=tasks,
            protocol=LabelProtocol(name="full"),
            label_masks=[[True] * len(tasks) for _ in range(config.n_samples)],
        )
        save_manifest(manifest)
    except OSError as e:
        raise DataIOError(str(root), f"cannot write dataset: {e}") from e
    return manifest


def assign_labels(
    manifest: DatasetManifest, protocol: LabelProtocol, seed: int
) -> DatasetManifest:
    """Draw per-sample label masks for the training split.

    one-label picks one task uniformly. random-label first draws a cardinality
    uniformly from 1..max_labels, then a uniform task subset of that size.

    Parameters
    ----------
    manifest : DatasetManifest
        Dataset to relabel
    protocol : LabelProtocol
        Protocol to apply
    seed : int
        Seed for the mask draws

    Returns
    -------
    DatasetManifest
        A copy of the manifest with new protocol and masks
    """
    n_tasks = manifest.n_tasks
    if n_tasks < 2:
        raise ValidationError(f"Partial labeling needs at least 2 tasks, got {n_tasks}")
    if protocol.name == "random-label" and not (
        protocol.max_labels is not None and 1 <= protocol.max_labels <= n_tasks
    ):
        raise ValidationError(
            f"max_labels must be in 1..{n_tasks}, got {protocol.max_labels}"
        )

    rng = np.random.default_rng(seed)
    masks: List[List[bool]] = []
    for _ in range(manifest.sample_count):
        row = [False] * n_tasks
        if protocol.name == "full":
            row = [True] * n_tasks
        elif protocol.name == "one-label":
            row[int(rng.integers(n_tasks))] = True
        else:
            size = int(rng.integers(1, protocol.max_labels + 1))
            for task_id in rng.choice(n_tasks, size=size, replace=False):
                row[int(task_id)] = True
        masks.append(row)

    counts = np.sum(np.asarray(masks, dtype=np.int64), axis=0).tolist()
    logger.info(f"Applied {protocol} labels; per-task label counts {counts}")
    return msgspec.structs.replace(manifest, protocol=protocol, label_masks=masks)


def save_manifest(manifest: DatasetManifest) -> Path:
    """Write ``manifest.txt`` into the manifest's root directory."""
    values: Dict[str, object] = {
        "format_version": manifest.format_version,
        "height": manifest.height,
        "width": manifest.width,
        "seed": manifest.seed,
        "sample_count": manifest.sample_count,
        "test_count": manifest.test_count,
        "protocol": str(manifest.protocol),
    }
    for task in manifest.tasks:
        values[f"task.{task.id}"] = (
            f"{task.name} {task.kind} {task.channels} {task.class_count} {task.metric}"
        )
    for index, mask in enumerate(manifest.label_masks):
        values[f"mask.{index:06d}"] = "".join("1" if m else "0" for m in mask)
    path = Path(manifest.root) / MANIFEST_FILE
    write_kv(path, values)
    return path


def _protocol_violation(protocol: LabelProtocol, mask: List[bool]) -> Optional[str]:
    count = sum(mask)
    if protocol.name == "full" and count != len(mask):
        return "must label every task under full"
    if protocol.name == "one-label" and count != 1:
        return f"must label exactly one task under one-label, labels {count}"
    if protocol.name == "random-label" and count > protocol.max_labels:
        return f"labels {count} tasks, above the cap of {protocol.max_labels}"
    return None


def load_manifest(root: Union[str, Path]) -> DatasetManifest:
    """Read ``manifest.txt`` from a dataset directory.

    Raises
    ------
    ConfigError
        If the manifest is missing, malformed or violates its invariants
    """
    path = Path(root) / MANIFEST_FILE
    raw = read_kv(path)
    tasks = []
    masks = []
    fields: Dict[str, object] = {"root": str(root)}
    try:
        for key, value in raw.items():
            if key.startswith("task."):
                name, kind, channels, class_count, metric = value.split()
                tasks.append(
                    {
                        "id": key[len("task.") :],
                        "name": name,
                        "kind": kind,
                        "channels": channels,
                        "class_count": class_count,
                        "metric": metric,
                    }
                )
            elif key.startswith("mask."):
                masks.append([c == "1" for c in value])
            elif key == "protocol":
                fields["protocol"] = msgspec.to_builtins(LabelProtocol.parse(value))
            else:
                fields[key] = value
        fields["tasks"] = tasks
        fields["label_masks"] = masks
        manifest = msgspec.convert(fields, DatasetManifest, strict=False)
    except (ValueError, ValidationError, msgspec.ValidationError) as e:
        raise ConfigError(str(path), str(e)) from e

    if [t.id for t in manifest.tasks] != list(range(manifest.n_tasks)):
        raise ConfigError(str(path), "task ids must be unique and contiguous from 0")
    if masks and (
        len(masks) != manifest.sample_count
        or any(len(m) != manifest.n_tasks or not any(m) for m in masks)
    ):
        raise ConfigError(str(path), "label masks do not match samples and tasks")
    for index, mask in enumerate(masks):
        problem = _protocol_violation(manifest.protocol, mask)
        if problem is not None:
            raise ConfigError(str(path), f"mask.{index:06d} {problem}")
    return manifest


def _read_tensor(path: Path, spec: str, index: int) -> np.ndarray:
    dtype_name, *dims = spec.split()
    if dtype_name not in _DTYPES:
        raise DataIOError(str(path), f"unknown dtype '{dtype_name}'", index)
    dtype = _DTYPES[dtype_name]
    shape = tuple(int(d) for d in dims)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataIOError(str(path), f"cannot read tensor: {e}", index) from e
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(data) != expected:
        raise DataIOError(
            str(path), f"corrupt tensor: expected {expected} bytes, found {len(data)}", index
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape).astype(np.dtype(dtype_name))


def read_sample(manifest: DatasetManifest, split: str, index: int) -> Sample:
    """Load one sample, reading only the labels its mask enables."""
    directory = sample_dir(manifest.root, split, index)
    try:
        header = read_kv(directory / HEADER_FILE)
    except ConfigError as e:
        raise DataIOError(str(directory), e.message, index) from e

    mask = manifest.mask_for(split, index)
    try:
        image = _read_tensor(directory / "image.bin", header["image"], index)
        labels = {
            task.id: _read_tensor(
                directory / f"task{task.id}.bin", header[f"task.{task.id}"], index
            )
            for task in manifest.tasks
            if mask[task.id]
        }
    except KeyError as e:
        raise DataIOError(str(directory), f"header lacks entry {e}", index) from e
    return Sample(image=image, labels=labels, label_mask=list(mask))


def _empty_label(task: TaskSpec, height: int, width: int) -> np.ndarray:
    if task.kind == "categorical":
        return np.zeros((height, width), dtype=np.int32)
    return np.zeros((task.channels, height, width), dtype=np.float32)


def load_batch(
    manifest: DatasetManifest, indices: Sequence[int], split: str = "train"
) -> PartialLabelBatch:
    """Load and stack samples in the given order.

    Parameters
    ----------
    manifest : DatasetManifest
        Dataset to read from
    indices : sequence of int
        Sample indices; repeats are allowed
    split : str = "train"
        Split to read

    Returns
    -------
    PartialLabelBatch
        Stacked tensors; unlabeled rows are zero-filled

    Raises
    ------
    ValidationError
        If an index is out of range
    DataIOError
        If a sample file is missing or corrupt
    """
    count = manifest.split_count(split)
    indices = [int(i) for i in indices]
    for index in indices:
        if not 0 <= index < count:
            raise ValidationError(f"Index {index} out of range for {split} split of {count}")

    images: List[np.ndarray] = []
    labels: Dict[int, List[np.ndarray]] = {task.id: [] for task in manifest.tasks}
    masks: List[List[bool]] = []
    for index in indices:
        sample = read_sample(manifest, split, index)
        images.append(sample.image)
        masks.append(sample.label_mask)
        for task in manifest.tasks:
            label = sample.labels.get(task.id)
            if label is None:
                label = _empty_label(task, manifest.height, manifest.width)
            labels[task.id].append(label)

    def _stack(task: TaskSpec) -> torch.Tensor:
        if not indices:
            shape: Tuple[int, ...] = (0, manifest.height, manifest.width)
            if task.kind == "regression":
                shape = (0, task.channels, manifest.height, manifest.width)
            return torch.zeros(shape)
        stacked = torch.from_numpy(np.stack(labels[task.id]))
        return stacked.long() if task.kind == "categorical" else stacked

    return PartialLabelBatch(
        images=(
            torch.from_numpy(np.stack(images))
            if images
            else torch.zeros(0, 3, manifest.height, manifest.width)
        ),
        labels={task.id: _stack(task) for task in manifest.tasks},
        label_mask=torch.tensor(masks, dtype=torch.bool).reshape(
            len(indices), manifest.n_tasks
        ),
        indices=indices,
    )


def load_split(manifest: DatasetManifest, split: str = "train") -> PartialLabelBatch:
    """Load a whole split into memory."""
    return load_batch(manifest, range(manifest.split_count(split)), split)
