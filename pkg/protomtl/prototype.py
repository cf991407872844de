"""Task prototype bank, task similarity/affinity and the prototype losses.

The prototype holds one learnable slot per task. Tokens projected from a
task-specific feature are compared to every slot by cosine similarity; a
softmax over tasks turns the similarities into a per-position task affinity.

- TKE pulls the affinity of labeled task-t tokens toward slot t.
- TC keeps per-task token statistics consistent within a task and separated
  across tasks with a margin hinge.
- AKG is their sum.
"""

from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ValidationError
from .network import to_channels_first

NORM_EPS = 1e-8


class TaskPrototype(nn.Module):
    """T learnable slots of dimension d, one per task.

    Slots are initialized i.i.d. Gaussian with std ``init_std``. A frozen
    prototype has ``requires_grad`` off, so optimizer steps leave it untouched.
    """

    def __init__(self, n_tasks: int, dim: int, init_std: float = 0.02):
        super().__init__()
        self.slots = nn.Parameter(torch.randn(n_tasks, dim) * init_std)

    @property
    def n_tasks(self) -> int:
        return self.slots.shape[0]

    @property
    def frozen(self) -> bool:
        return not self.slots.requires_grad

    def freeze(self) -> None:
        self.slots.requires_grad_(False)

    def unfreeze(self) -> None:
        self.slots.requires_grad_(True)


class TokenProjector(nn.Module):
    """1x1 convolution c -> d followed by row-major flattening of (h, w)."""

    def __init__(self, in_channels: int, dim: int):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, dim, 1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        """Project ``[B, h, w, c]`` features to ``[B, h*w, d]`` tokens."""
        return self.proj(to_channels_first(features)).flatten(2).transpose(1, 2)


def task_similarity(tokens: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """Cosine similarity of every token to every slot, ``[B, hw, T]``.

    Norms are floored at 1e-8.
    """
    if tokens.shape[-1] != slots.shape[-1]:
        raise ValidationError(
            f"Token dimension {tokens.shape[-1]} != slot dimension {slots.shape[-1]}"
        )
    return F.normalize(tokens, dim=-1, eps=NORM_EPS) @ F.normalize(
        slots, dim=-1, eps=NORM_EPS
    ).transpose(0, 1)


def task_affinity(similarity: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Softmax of the similarities over the task axis."""
    if temperature <= 0:
        raise ValidationError(f"temperature must be > 0, got {temperature}")
    return torch.softmax(similarity / temperature, dim=-1)


class LossTerm(NamedTuple):
    value: torch.Tensor
    skipped: bool


def _neg_log(probabilities: torch.Tensor) -> torch.Tensor:
    return -torch.log(probabilities.clamp_min(torch.finfo(probabilities.dtype).tiny))


def tke_loss(
    affinity: torch.Tensor, target_task: int, label_mask: torch.Tensor
) -> LossTerm:
    """Cross-entropy of the affinity of task-t tokens against slot t.

    Parameters
    ----------
    affinity : torch.Tensor
        Affinity ``[B, hw, T]`` of tokens projected from task ``target_task``
    target_task : int
        Task t whose slot the tokens should select
    label_mask : torch.Tensor
        bool ``[B]`` (or ``[B, T]``, column t is used): samples labeled for t

    Returns
    -------
    LossTerm
        Mean of ``-log A[b, p, t]`` over labeled samples and all positions;
        zero with ``skipped=True`` when no sample is labeled
    """
    n_tasks = affinity.shape[-1]
    if not 0 <= target_task < n_tasks:
        raise ValidationError(f"target_task {target_task} out of range for T={n_tasks}")
    rows = label_mask[:, target_task] if label_mask.ndim == 2 else label_mask
    rows = rows.bool()
    if not rows.any():
        return LossTerm(affinity.new_zeros(()), True)
    return LossTerm(_neg_log(affinity[rows][..., target_task]).mean(), False)


def batch_tke_loss(
    affinities: Sequence[torch.Tensor], label_mask: torch.Tensor
) -> LossTerm:
    """TKE over every labeled (sample, task) pair of a batch.

    ``affinities[t]`` is the affinity of tokens projected from task t. The mean
    runs over contributing pairs times positions, not per task.
    """
    terms = []
    for task_id, affinity in enumerate(affinities):
        rows = label_mask[:, task_id].bool()
        if rows.any():
            terms.append(_neg_log(affinity[rows][..., task_id]).reshape(-1))
    if not terms:
        return LossTerm(affinities[0].new_zeros(()), True)
    return LossTerm(torch.cat(terms).mean(), False)


def margin_hinge(
    positive: torch.Tensor,
    negative: torch.Tensor,
    margin: float,
    literal_sign: bool = False,
) -> torch.Tensor:
    """Triplet hinge ``max(neg - pos + margin, 0)``.

    With ``literal_sign`` the printed form ``max(pos - neg + margin, 0)`` is
    used instead.
    """
    if literal_sign:
        return F.relu(positive - negative + margin)
    return F.relu(negative - positive + margin)


def tc_loss(
    tokens: Sequence[torch.Tensor], margin: float = 0.2, literal_sign: bool = False
) -> torch.Tensor:
    """Task consistency loss over the tokens of every task.

    For task t the anchor is the batch mean of its tokens, flattened to one
    vector. Each sample i contributes, for every other task tau, a hinge
    between cos(anchor_t, x_i^t) and cos(anchor_t, x_i^tau).

    Parameters
    ----------
    tokens : sequence of torch.Tensor
        T tensors ``[B, hw, d]``, labels are not required
    margin : float = 0.2
        Hinge margin alpha
    literal_sign : bool = False
        Use the printed hinge sign, see :func:`margin_hinge`

    Returns
    -------
    torch.Tensor
        Mean over the T * B * (T - 1) triples
    """
    if not tokens:
        raise ValidationError("tc_loss needs tokens for at least one task")
    stacked = torch.stack([x.reshape(x.shape[0], -1) for x in tokens])
    n_tasks, batch = stacked.shape[:2]
    if batch == 0:
        raise ValidationError("tc_loss needs at least one sample")
    if n_tasks < 2:
        return stacked.new_zeros(())

    anchors = F.normalize(stacked.mean(dim=1), dim=-1, eps=NORM_EPS)
    samples = F.normalize(stacked, dim=-1, eps=NORM_EPS)
    # cosine[t, tau, i] = S(anchor_t, x_i^tau)
    cosine = torch.einsum("td,sbd->tsb", anchors, samples)
    diagonal = torch.arange(n_tasks, device=stacked.device)
    positive = cosine[diagonal, diagonal]
    hinge = margin_hinge(positive[:, None, :], cosine, margin, literal_sign)
    off_diagonal = ~torch.eye(n_tasks, dtype=torch.bool, device=stacked.device)
    return hinge[off_diagonal].mean()


def akg_loss(tke: torch.Tensor, tc: torch.Tensor) -> torch.Tensor:
    return tke + tc
