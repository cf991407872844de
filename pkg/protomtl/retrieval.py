"""Task-affinity feature and the knowledge-retrieval transformer.

The affinity-weighted mixture of prototype slots (the task-affinity feature)
serves as key and value of a cross-attention whose queries are the task tokens
after self-attention. Blocks are pre-norm residual; there are no positional
encodings, so every block is equivariant to token permutations.
"""

from typing import List, NamedTuple, Optional, Tuple

import torch
from torch import nn

from .exceptions import ValidationError
from .prototype import TaskPrototype, TokenProjector, task_affinity, task_similarity


def affinity_feature(affinity: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """Mix prototype slots by affinity: ``[B, hw, T] @ [T, d] -> [B, hw, d]``."""
    if affinity.shape[-1] != slots.shape[0]:
        raise ValidationError(
            f"Affinity has {affinity.shape[-1]} tasks, prototype has {slots.shape[0]}"
        )
    return affinity @ slots


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with separate query/key/value/output maps.

    Parameters
    ----------
    dim : int
        Model width d
    n_heads : int
        Number of heads; must divide ``dim``
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads:
            raise ValidationError(f"dim {dim} is not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.reshape(batch, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(
        self, query: torch.Tensor, context: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Attend from ``query`` tokens to ``context`` tokens.

        Returns
        -------
        output : torch.Tensor
            ``[B, Lq, d]``
        weights : torch.Tensor
            ``[B, heads, Lq, Lk]``, each query row sums to 1
        """
        q = self._split(self.query(query))
        k = self._split(self.key(context))
        v = self._split(self.value(context))
        scores = q @ k.transpose(-2, -1) * self.head_dim**-0.5
        weights = torch.softmax(scores, dim=-1)
        merged = (weights @ v).transpose(1, 2).reshape(query.shape)
        return self.out(merged), weights


class RetrievalBlock(nn.Module):
    """Self-attention, cross-attention to the affinity feature, feed-forward.

    Each sublayer is ``x + sublayer(norm(x))``. The cross-attention context
    (the affinity feature) is used unnormalized.
    """

    def __init__(self, dim: int, n_heads: int, ffn_multiplier: int = 4):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, n_heads)
        self.norm_cross = nn.LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, n_heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_multiplier * dim),
            nn.GELU(),
            nn.Linear(ffn_multiplier * dim, dim),
        )
        # Cross-attention weights of every call while recording, else None.
        self.attention_log: Optional[List[torch.Tensor]] = None

    def self_attend(self, tokens: torch.Tensor) -> torch.Tensor:
        normed = self.norm_self(tokens)
        return tokens + self.self_attn(normed, normed)[0]

    def cross_attend(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        attended, weights = self.cross_attn(self.norm_cross(tokens), context)
        if self.attention_log is not None:
            self.attention_log.append(weights.detach())
        return tokens + attended

    def feed_forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return tokens + self.ffn(self.norm_ffn(tokens))

    def forward(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        if tokens.shape != context.shape:
            raise ValidationError(
                f"Tokens {tuple(tokens.shape)} and affinity feature "
                f"{tuple(context.shape)} must match"
            )
        return self.feed_forward(self.cross_attend(self.self_attend(tokens), context))


class KnowledgeRetrievalTransformer(nn.Module):
    """L retrieval blocks sharing one affinity feature per forward pass."""

    def __init__(self, dim: int, n_heads: int, depth: int = 2):
        super().__init__()
        if depth < 1:
            raise ValidationError(f"depth must be >= 1, got {depth}")
        self.blocks = nn.ModuleList(RetrievalBlock(dim, n_heads) for _ in range(depth))

    def forward(self, tokens: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            tokens = block(tokens, context)
        return tokens

    def record_attention(self, enabled: bool = True) -> None:
        """Start (with a fresh log) or stop recording cross-attention weights."""
        for block in self.blocks:
            block.attention_log = [] if enabled else None


class RetrievalOutput(NamedTuple):
    refined: torch.Tensor
    tokens: torch.Tensor
    similarity: torch.Tensor
    affinity: torch.Tensor


def retrieve(
    features: torch.Tensor,
    projector: TokenProjector,
    prototype: TaskPrototype,
    transformer: KnowledgeRetrievalTransformer,
    temperature: float = 1.0,
) -> RetrievalOutput:
    """Refine a task-specific feature through the prototype.

    Parameters
    ----------
    features : torch.Tensor
        Task-specific feature ``[B, h, w, c]``
    projector : TokenProjector
        Shared token projection c -> d
    prototype : TaskPrototype
        Task prototype bank
    transformer : KnowledgeRetrievalTransformer
        Retrieval blocks
    temperature : float = 1.0
        Affinity softmax temperature

    Returns
    -------
    RetrievalOutput
        Refined feature ``[B, h, w, d]`` and the tokens, similarity and
        affinity it was computed from
    """
    batch, height, width, _ = features.shape
    tokens = projector(features)
    similarity = task_similarity(tokens, prototype.slots)
    affinity = task_affinity(similarity, temperature)
    context = affinity_feature(affinity, prototype.slots)
    refined = transformer(tokens, context)
    return RetrievalOutput(
        refined=refined.reshape(batch, height, width, -1),
        tokens=tokens,
        similarity=similarity,
        affinity=affinity,
    )
