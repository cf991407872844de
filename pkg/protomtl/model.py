"""The full network: encoder, codebook enhancement, task decoders, prototype
retrieval and heads, composed into one forward pass."""

import contextlib
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import torch
from torch import nn

from .exceptions import ValidationError
from .models import TaskSpec, TrainConfig
from .network import Encoder, TaskDecoder, TaskHead
from .prototype import TaskPrototype, TokenProjector
from .retrieval import KnowledgeRetrievalTransformer, retrieve
from .vq import Reconstructor, VectorQuantizer


class ModelOutput(NamedTuple):
    predictions: Dict[int, torch.Tensor]
    reconstruction: Optional[torch.Tensor]
    vq_aux_loss: Optional[torch.Tensor]
    code_indices: Optional[torch.Tensor]
    tokens: List[torch.Tensor]
    similarities: List[torch.Tensor]
    affinities: List[torch.Tensor]


class PrototypeMTLNet(nn.Module):
    """Multi-task network with prototype-based knowledge retrieval.

    The stages present depend on ``config.use_vq`` and
    ``config.use_retrieval``. With both off the network is the plain
    shared-encoder multi-task baseline.

    Parameters
    ----------
    config : TrainConfig
        Architecture settings
    tasks : sequence of TaskSpec
        Tasks in id order
    image_size : tuple[int, int]
        Input and label resolution (H, W)
    """

    def __init__(
        self,
        config: TrainConfig,
        tasks: Sequence[TaskSpec],
        image_size: Tuple[int, int],
    ):
        super().__init__()
        if [t.id for t in tasks] != list(range(len(tasks))):
            raise ValidationError("Task ids must be contiguous from 0")
        self.config = config
        self.tasks = list(tasks)
        channels = config.feature_channels

        self.encoder = Encoder(channels, config.downsample)
        self.quantizer = None
        self.reconstructor = None
        if config.use_vq:
            self.quantizer = VectorQuantizer(
                config.codebook_size, channels, config.commitment
            )
            self.reconstructor = Reconstructor(channels, config.downsample)

        self.decoders = nn.ModuleList(TaskDecoder(channels) for _ in self.tasks)

        self.projector = None
        self.prototype = None
        self.transformer = None
        head_channels = channels
        if config.use_retrieval:
            self.projector = TokenProjector(channels, config.prototype_dim)
            self.prototype = TaskPrototype(len(self.tasks), config.prototype_dim)
            self.transformer = KnowledgeRetrievalTransformer(
                config.prototype_dim, config.n_heads, config.depth
            )
            head_channels = config.prototype_dim

        self.heads = nn.ModuleList(
            TaskHead(head_channels, task, image_size) for task in self.tasks
        )

    def _check_task(self, task_id: int) -> None:
        if not 0 <= task_id < len(self.tasks):
            raise ValidationError(f"Unknown task id {task_id}")

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images)

    def decode_task(self, integrated: torch.Tensor, task_id: int) -> torch.Tensor:
        self._check_task(task_id)
        return self.decoders[task_id](integrated)

    def predict_head(self, refined: torch.Tensor, task_id: int) -> torch.Tensor:
        self._check_task(task_id)
        return self.heads[task_id](refined)

    def forward(self, images: torch.Tensor) -> ModelOutput:
        encoded = self.encode(images)

        reconstruction = aux_loss = indices = None
        integrated = encoded
        if self.quantizer is not None:
            quantized = self.quantizer(encoded)
            integrated = quantized.integrated
            aux_loss = quantized.aux_loss
            indices = quantized.indices
            reconstruction = self.reconstructor(integrated)

        predictions = {}
        tokens, similarities, affinities = [], [], []
        for task in self.tasks:
            features = self.decode_task(integrated, task.id)
            if self.transformer is not None:
                retrieved = retrieve(
                    features,
                    self.projector,
                    self.prototype,
                    self.transformer,
                    self.config.temperature,
                )
                features = retrieved.refined
                tokens.append(retrieved.tokens)
                similarities.append(retrieved.similarity)
                affinities.append(retrieved.affinity)
            predictions[task.id] = self.predict_head(features, task.id)

        return ModelOutput(
            predictions=predictions,
            reconstruction=reconstruction,
            vq_aux_loss=aux_loss,
            code_indices=indices,
            tokens=tokens,
            similarities=similarities,
            affinities=affinities,
        )

    @contextlib.contextmanager
    def inference(self) -> Iterator["PrototypeMTLNet"]:
        """Evaluation mode with gradients off and, if configured, a frozen
        prototype; the previous state is restored on exit."""
        was_training = self.training
        freeze = (
            self.prototype is not None
            and self.config.freeze_prototype_at_eval
            and not self.prototype.frozen
        )
        self.eval()
        if freeze:
            self.prototype.freeze()
        try:
            with torch.no_grad():
                yield self
        finally:
            if freeze:
                self.prototype.unfreeze()
            self.train(was_training)
