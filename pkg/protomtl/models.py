from typing import Dict, List, Literal, Optional

import msgspec

from .exceptions import ValidationError

TaskKind = Literal["categorical", "regression"]
MetricName = Literal["miou", "abs_err", "mean_angular_error", "max_f", "ods_f"]
ProtocolName = Literal["one-label", "random-label", "full"]

# Metrics where a lower value is better.
LOWER_IS_BETTER = frozenset({"abs_err", "mean_angular_error"})


class TaskSpec(msgspec.Struct, kw_only=True, frozen=True):
    """A dense-prediction task descriptor.

    Attributes
    ----------
    id : int
        Task index, contiguous from 0
    name : str
        Short name (semseg, depth, normal, saliency, boundary)
    kind : str
        "categorical" or "regression"
    channels : int
        Label channels (1 for class maps and depth, 3 for normals)
    class_count : int = 0
        Number of classes for categorical tasks
    metric : str
        Evaluation metric reported for the task
    """

    id: int
    name: str
    kind: TaskKind
    channels: int
    metric: MetricName
    class_count: int = 0

    @property
    def output_channels(self) -> int:
        """Channels emitted by the prediction head."""
        return self.class_count if self.kind == "categorical" else self.channels


def default_tasks(n_tasks: int = 3, seg_classes: int = 4) -> List[TaskSpec]:
    """Return the first ``n_tasks`` of semseg, depth, normal, saliency, boundary."""
    library = [
        TaskSpec(
            id=0,
            name="semseg",
            kind="categorical",
            channels=1,
            class_count=seg_classes,
            metric="miou",
        ),
        TaskSpec(id=1, name="depth", kind="regression", channels=1, metric="abs_err"),
        TaskSpec(
            id=2,
            name="normal",
            kind="regression",
            channels=3,
            metric="mean_angular_error",
        ),
        TaskSpec(
            id=3,
            name="saliency",
            kind="categorical",
            channels=1,
            class_count=2,
            metric="max_f",
        ),
        TaskSpec(
            id=4,
            name="boundary",
            kind="categorical",
            channels=1,
            class_count=2,
            metric="ods_f",
        ),
    ]
    if not 1 <= n_tasks <= len(library):
        raise ValidationError(f"n_tasks must be in 1..{len(library)}, got {n_tasks}")
    if seg_classes < 2:
        raise ValidationError(f"seg_classes must be >= 2, got {seg_classes}")
    return library[:n_tasks]


class LabelProtocol(msgspec.Struct, kw_only=True, frozen=True):
    """Partial-annotation protocol for the training split.

    Attributes
    ----------
    name : str
        "one-label", "random-label" or "full"
    max_labels : int = None
        Cap on labeled tasks per sample (random-label only)
    """

    name: ProtocolName
    max_labels: Optional[int] = None

    @classmethod
    def parse(cls, text: str) -> "LabelProtocol":
        """Parse ``one-label``, ``full`` or ``random-label:<max_labels>``."""
        name, _, cap = text.strip().partition(":")
        if name not in ("one-label", "random-label", "full"):
            raise ValidationError(f"Unknown label protocol '{text}'")
        if name == "random-label":
            if not cap:
                raise ValidationError("random-label needs a cap, e.g. random-label:2")
            try:
                return cls(name=name, max_labels=int(cap))
            except ValueError as e:
                raise ValidationError(f"Invalid max_labels in '{text}'") from e
        return cls(name=name)

    def __str__(self) -> str:
        if self.name == "random-label":
            return f"random-label:{self.max_labels}"
        return self.name


class GenConfig(msgspec.Struct, kw_only=True, frozen=True):
    """Settings for synthetic dataset generation.

    Attributes
    ----------
    n_samples : int = 600
        Training samples
    n_test : int = 200
        Test samples (always fully labeled)
    height : int = 32
        Image height in pixels, at least 16
    width : int = 32
        Image width in pixels, at least 16
    n_shapes : int = 3
        Maximum primitives per scene; each scene draws 1..n_shapes of them,
        at most one per foreground class (seg_classes - 1)
    n_tasks : int = 3
        Number of tasks (3 = semseg/depth/normal, 5 adds saliency/boundary)
    seg_classes : int = 4
        Segmentation classes including background 0
    seed : int = 0
        Seed for every random draw
    """

    n_samples: int = 600
    n_test: int = 200
    height: int = 32
    width: int = 32
    n_shapes: int = 3
    n_tasks: int = 3
    seg_classes: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValidationError(
                f"Image size must be at least 16x16, got {self.height}x{self.width}"
            )
        if self.n_samples < 1:
            raise ValidationError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.n_test < 0 or self.n_shapes < 0:
            raise ValidationError("n_test and n_shapes must be non-negative")


class DatasetManifest(msgspec.Struct, kw_only=True):
    """Description of a generated dataset.

    Attributes
    ----------
    root : str = ""
        Dataset directory (not persisted; set when loading)
    format_version : int = 1
        Manifest format version
    height : int
        Image height
    width : int
        Image width
    seed : int
        Generation seed
    sample_count : int
        Number of training samples
    test_count : int = 0
        Number of test samples
    tasks : list[TaskSpec]
        Ordered task descriptors with ids 0..T-1
    protocol : LabelProtocol
        Label protocol applied to the training split
    label_masks : list[list[bool]] = []
        Per training sample, which tasks are labeled
    """

    height: int
    width: int
    seed: int
    sample_count: int
    tasks: List[TaskSpec]
    protocol: LabelProtocol
    test_count: int = 0
    label_masks: List[List[bool]] = []
    root: str = ""
    format_version: int = 1

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def split_count(self, split: str) -> int:
        if split == "train":
            return self.sample_count
        if split == "test":
            return self.test_count
        raise ValidationError(f"Unknown split '{split}'")

    def mask_for(self, split: str, index: int) -> List[bool]:
        """Label mask of one sample; test samples are fully labeled."""
        if split == "train" and self.label_masks:
            return self.label_masks[index]
        return [True] * self.n_tasks


class TrainConfig(msgspec.Struct, kw_only=True, frozen=True, forbid_unknown_fields=True):
    """Hyperparameters for one training run.

    Defaults are desk scale. Values of the ``paper-scale`` preset are noted per
    field.

    Attributes
    ----------
    lambda_tae : float = 1.0
        Weight of the reconstruction (plus quantization auxiliary) loss
    lambda_akg : float = 1.0
        Weight of the prototype loss (TKE + TC)
    learning_rate : float = 1e-3
        Adam learning rate (paper-scale preset 2e-5)
    epochs : int = 40
        Passes over the training split (paper-scale preset 100)
    batch_size : int = 8
        Mini-batch size (paper-scale preset 6)
    seed : int = 0
        Seed for initialization and shuffling
    margin : float = 0.2
        TC hinge margin alpha
    temperature : float = 1.0
        Softmax temperature of the task affinity
    codebook_size : int = 64
        Codebook slots K (paper-scale preset 4096)
    feature_channels : int = 32
        Shared feature channels c
    prototype_dim : int = 64
        Prototype slot and token dimension d (paper-scale preset 1024)
    depth : int = 2
        Knowledge-retrieval blocks L
    n_heads : int = 8
        Attention heads
    downsample : int = 4
        Encoder stride s, a power of two
    commitment : float = 0.25
        Commitment weight beta of the quantization auxiliary loss
    protocol : str = "one-label"
        Label protocol tag recorded in reports
    use_vq : bool = True
        Quantize and reconstruct the shared feature
    use_retrieval : bool = True
        Route task features through the prototype and retrieval transformer
    use_tke : bool = True
        Include the task knowledge embedding loss
    use_tc : bool = True
        Include the task consistency loss
    tc_literal_sign : bool = False
        Use the inverted hinge sign (positive minus negative similarity)
    freeze_prototype_at_eval : bool = True
        Disable gradients of the prototype during evaluation
    """

    lambda_tae: float = 1.0
    lambda_akg: float = 1.0
    learning_rate: float = 1e-3
    epochs: int = 40
    batch_size: int = 8
    seed: int = 0
    margin: float = 0.2
    temperature: float = 1.0
    codebook_size: int = 64
    feature_channels: int = 32
    prototype_dim: int = 64
    depth: int = 2
    n_heads: int = 8
    downsample: int = 4
    commitment: float = 0.25
    protocol: str = "one-label"
    use_vq: bool = True
    use_retrieval: bool = True
    use_tke: bool = True
    use_tc: bool = True
    tc_literal_sign: bool = False
    freeze_prototype_at_eval: bool = True

    def __post_init__(self):
        if self.lambda_tae < 0 or self.lambda_akg < 0:
            raise ValidationError("lambda_tae and lambda_akg must be >= 0")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.learning_rate <= 0 or self.temperature <= 0:
            raise ValidationError("learning_rate and temperature must be > 0")
        if self.margin < 0 or self.commitment < 0:
            raise ValidationError("margin and commitment must be >= 0")
        dims = (
            self.codebook_size,
            self.feature_channels,
            self.prototype_dim,
            self.depth,
            self.n_heads,
            self.downsample,
        )
        if min(dims) < 1:
            raise ValidationError("all dimensions must be positive")
        if self.prototype_dim % self.n_heads:
            raise ValidationError(
                f"prototype_dim {self.prototype_dim} is not divisible by "
                f"n_heads {self.n_heads}"
            )
        if self.downsample & (self.downsample - 1):
            raise ValidationError(f"downsample must be a power of two, got {self.downsample}")


PRESETS: Dict[str, Dict[str, object]] = {
    "desk": {},
    "paper-scale": {
        "learning_rate": 2e-5,
        "epochs": 100,
        "batch_size": 6,
        "codebook_size": 4096,
        "prototype_dim": 1024,
    },
}
PRESETS["large"] = PRESETS["paper-scale"]


class MetricEntry(msgspec.Struct, kw_only=True, frozen=True):
    """One metric value of one task.

    Attributes
    ----------
    task : str
        Task name
    metric : str
        Metric name
    value : float
        Metric value
    """

    task: str
    metric: str
    value: float

    @property
    def higher_is_better(self) -> bool:
        return self.metric not in LOWER_IS_BETTER


class MetricReport(msgspec.Struct, kw_only=True):
    """Evaluation result of one model on one split.

    Attributes
    ----------
    protocol : str
        Label protocol the model was trained under
    entries : list[MetricEntry]
        One entry per task, in task order
    notes : str = ""
        Free-text caveats (e.g. the odsF simplification)
    """

    protocol: str
    entries: List[MetricEntry]
    notes: str = ""

    @property
    def tasks(self) -> List[str]:
        return [e.task for e in self.entries]

    def entry(self, task: str) -> MetricEntry:
        for e in self.entries:
            if e.task == task:
                return e
        raise ValidationError(f"Report has no task '{task}'")


class RunComparison(msgspec.Struct, kw_only=True):
    """Signed per-task improvements of run b over run a.

    Attributes
    ----------
    deltas : dict[str, float]
        Positive means b is better, whatever the metric direction
    mean_rank_a : float
        Mean rank of run a across tasks (1 = best)
    mean_rank_b : float
        Mean rank of run b across tasks
    """

    deltas: Dict[str, float]
    mean_rank_a: float
    mean_rank_b: float
