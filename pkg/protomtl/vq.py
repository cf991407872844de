"""Codebook quantization of the shared feature and the reconstruction loss.

Every spatial element of the encoded feature is replaced by its nearest
codebook slot, added back onto the encoded feature, and decoded into an image
whose smooth-L1 error against the input trains the shared representation.

The argmin is not differentiable. The backward pass treats quantization as the
identity (straight-through), and the slots learn from the auxiliary loss
``||sg[f_e] - f_q||^2 + beta * ||f_e - sg[f_q]||^2``.
"""

import math
from typing import NamedTuple, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .exceptions import ValidationError
from .network import to_channels_first


class Codebook(nn.Module):
    """K learnable slots of dimension c.

    Parameters
    ----------
    num_slots : int
        Number of slots K (desk default 64, paper-scale preset 4096)
    dim : int
        Slot dimension c
    """

    def __init__(self, num_slots: int, dim: int):
        super().__init__()
        if num_slots < 1:
            raise ValidationError(f"Codebook needs at least one slot, got {num_slots}")
        self.slots = nn.Parameter(
            torch.empty(num_slots, dim).uniform_(-1.0 / num_slots, 1.0 / num_slots)
        )

    @property
    def num_slots(self) -> int:
        return self.slots.shape[0]


# Upper bound on the elements of one [rows, K, c] difference block.
QUANTIZE_BLOCK_ELEMENTS = 1 << 24


def quantize(
    features: torch.Tensor,
    slots: torch.Tensor,
    block_elements: int = QUANTIZE_BLOCK_ELEMENTS,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Replace every element of ``[..., c]`` features by its nearest slot.

    Distances are Euclidean; ties resolve to the lowest slot index. Rows are
    scanned in blocks of at most ``block_elements`` distance terms; the result
    does not depend on the block size.

    Parameters
    ----------
    features : torch.Tensor
        Encoded feature, channel-last
    slots : torch.Tensor
        Codebook ``[K, c]``
    block_elements : int = 2**24
        Maximum size of one distance block, in elements

    Returns
    -------
    quantized : torch.Tensor
        Same shape as ``features``; differentiable w.r.t. ``slots`` only
    indices : torch.Tensor
        int64 slot index per element, shape ``features.shape[:-1]``
    """
    if slots.ndim != 2 or slots.shape[0] == 0:
        raise ValidationError("Codebook is empty")
    if features.shape[-1] != slots.shape[-1]:
        raise ValidationError(
            f"Feature channels {features.shape[-1]} != slot dimension {slots.shape[-1]}"
        )
    if block_elements < 1:
        raise ValidationError(f"block_elements must be >= 1, got {block_elements}")
    flat = features.detach().reshape(-1, slots.shape[-1])
    codebook = slots.detach()
    rows = max(1, block_elements // max(1, codebook.numel()))
    blocks = []
    for start in range(0, flat.shape[0], rows):
        chunk = flat[start : start + rows]
        distances = ((chunk[:, None, :] - codebook[None, :, :]) ** 2).sum(-1)
        # argmin returns the first minimal index.
        blocks.append(distances.argmin(dim=1))
    indices = torch.cat(blocks) if blocks else flat.new_zeros(0, dtype=torch.long)
    quantized = slots[indices].reshape(features.shape)
    return quantized, indices.reshape(features.shape[:-1])


def integrate(encoded: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Sum the encoded and quantized features.

    The quantized path is a straight-through copy, so the gradient w.r.t.
    ``encoded`` is twice the upstream gradient and none flows into the slots.
    """
    if encoded.shape != quantized.shape:
        raise ValidationError(
            f"Shape mismatch: {tuple(encoded.shape)} vs {tuple(quantized.shape)}"
        )
    straight_through = encoded + (quantized - encoded).detach()
    return encoded + straight_through


def quantization_aux_loss(
    encoded: torch.Tensor, quantized: torch.Tensor, commitment: float = 0.25
) -> torch.Tensor:
    """Codebook plus commitment loss that gives the slots a learning signal."""
    codebook_term = F.mse_loss(quantized, encoded.detach())
    commitment_term = F.mse_loss(encoded, quantized.detach())
    return codebook_term + commitment * commitment_term


class QuantizerOutput(NamedTuple):
    quantized: torch.Tensor
    indices: torch.Tensor
    integrated: torch.Tensor
    aux_loss: torch.Tensor


class VectorQuantizer(nn.Module):
    """Quantize, integrate and compute the auxiliary loss in one call."""

    def __init__(self, num_slots: int, dim: int, commitment: float = 0.25):
        super().__init__()
        self.codebook = Codebook(num_slots, dim)
        self.commitment = commitment

    def forward(self, encoded: torch.Tensor) -> QuantizerOutput:
        quantized, indices = quantize(encoded, self.codebook.slots)
        return QuantizerOutput(
            quantized=quantized,
            indices=indices,
            integrated=integrate(encoded, quantized),
            aux_loss=quantization_aux_loss(encoded, quantized, self.commitment),
        )


class Reconstructor(nn.Module):
    """Convolutional decoder from the integrated feature back to the image.

    Output values are not clamped.
    """

    def __init__(self, channels: int, downsample: int, out_channels: int = 3):
        super().__init__()
        layers = []
        for _ in range(int(math.log2(downsample))):
            layers += [
                nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1),
                nn.ReLU(inplace=True),
            ]
        layers.append(nn.Conv2d(channels, out_channels, 3, padding=1))
        self.layers = nn.Sequential(*layers)

    def forward(self, integrated: torch.Tensor) -> torch.Tensor:
        return self.layers(to_channels_first(integrated))


def tae_loss(reconstruction: torch.Tensor, image: torch.Tensor) -> torch.Tensor:
    """Smooth-L1 reconstruction loss, mean over batch, channels and pixels.

    Elementwise ``0.5 r^2`` for ``|r| < 1`` and ``|r| - 0.5`` otherwise.
    """
    if reconstruction.shape != image.shape:
        raise ValidationError(
            f"Reconstruction {tuple(reconstruction.shape)} does not match "
            f"image {tuple(image.shape)}"
        )
    return F.smooth_l1_loss(reconstruction, image, beta=1.0)


def slot_usage(indices: torch.Tensor, num_slots: int) -> torch.Tensor:
    """Count how often each slot was selected."""
    return torch.bincount(indices.reshape(-1), minlength=num_slots)


def dead_slot_count(usage: torch.Tensor) -> int:
    """Number of slots never selected in the given usage counts."""
    return int((usage == 0).sum())
